//! Versioned parameter checkpoints.
//!
//! Layout (little-endian): `SPKC | version u32 | kind u8 | bucket u16 |
//! ndims u32 | dims u64* | count u64 | payload f64* | sha256`, the digest
//! covering every preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{Adam, ClassifierParams};
use crate::encoder::EncoderParams;
use crate::error::{ConsentError, Result};
use crate::types::BucketId;

const MAGIC: &[u8; 4] = b"SPKC";
pub const CHECKPOINT_VERSION: u32 = 1;
const NO_BUCKET: u16 = u16::MAX;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Encoder,
    Classifier,
    Optimizer,
}

impl CheckpointKind {
    fn tag(self) -> u8 {
        match self {
            Self::Encoder => 0,
            Self::Classifier => 1,
            Self::Optimizer => 2,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Self::Encoder),
            1 => Ok(Self::Classifier),
            2 => Ok(Self::Optimizer),
            other => Err(ConsentError::Malformed(format!("checkpoint kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub bucket: Option<BucketId>,
    pub shape: Vec<u64>,
    pub payload: Vec<f64>,
}

impl Checkpoint {
    /// Shape `[F, E]`.
    pub fn from_encoder(bucket: BucketId, params: &EncoderParams) -> Self {
        Self {
            kind: CheckpointKind::Encoder,
            bucket: Some(bucket),
            shape: vec![
                params.proj.nrows() as u64,
                params.proj.ncols() as u64,
                params.version as u64,
            ],
            payload: params.to_flat(),
        }
    }

    /// Shape `[E, C]`.
    pub fn from_classifier(params: &ClassifierParams) -> Self {
        Self {
            kind: CheckpointKind::Classifier,
            bucket: None,
            shape: vec![params.embed_dim() as u64, params.num_classes() as u64],
            payload: params.to_flat(),
        }
    }

    /// Shape `[num_params, step]`; payload is the hyper-parameters followed
    /// by both moment vectors.
    pub fn from_optimizer(adam: &Adam) -> Self {
        let mut payload = vec![adam.lr, adam.beta1, adam.beta2, adam.eps];
        payload.extend(&adam.m);
        payload.extend(&adam.v);
        Self {
            kind: CheckpointKind::Optimizer,
            bucket: None,
            shape: vec![adam.m.len() as u64, adam.step],
            payload,
        }
    }

    fn expect(&self, kind: CheckpointKind, dims: usize) -> Result<()> {
        if self.kind != kind {
            return Err(ConsentError::Malformed(format!(
                "expected {kind:?} checkpoint, found {:?}",
                self.kind
            )));
        }
        if self.shape.len() != dims {
            return Err(ConsentError::ShapeMismatch(format!(
                "{kind:?} checkpoint shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn to_encoder(&self) -> Result<EncoderParams> {
        self.expect(CheckpointKind::Encoder, 3)?;
        let mut p = EncoderParams::from_flat(
            self.shape[0] as usize,
            self.shape[1] as usize,
            &self.payload,
        )?;
        p.version = self.shape[2] as u32;
        Ok(p)
    }

    pub fn to_classifier(&self) -> Result<ClassifierParams> {
        self.expect(CheckpointKind::Classifier, 2)?;
        ClassifierParams::from_flat(
            self.shape[0] as usize,
            self.shape[1] as usize,
            &self.payload,
        )
    }

    /// Loads the classifier with a head of `classes` rows. Returns the
    /// parameters and the number of head rows dropped.
    pub fn to_classifier_resized(
        &self,
        classes: usize,
        seed: u64,
    ) -> Result<(ClassifierParams, usize)> {
        let mut p = self.to_classifier()?;
        let dropped = p.resize_head(classes, seed);
        Ok((p, dropped))
    }

    pub fn to_optimizer(&self) -> Result<Adam> {
        self.expect(CheckpointKind::Optimizer, 2)?;
        let n = self.shape[0] as usize;
        if self.payload.len() != 4 + 2 * n {
            return Err(ConsentError::ShapeMismatch(format!(
                "optimizer payload has {} values, expected {}",
                self.payload.len(),
                4 + 2 * n
            )));
        }
        Ok(Adam {
            lr: self.payload[0],
            beta1: self.payload[1],
            beta2: self.payload[2],
            eps: self.payload[3],
            step: self.shape[1],
            m: self.payload[4..4 + n].to_vec(),
            v: self.payload[4 + n..].to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 8 * (self.shape.len() + self.payload.len()));
        out.extend(MAGIC);
        out.extend(CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.kind.tag());
        out.extend(self.bucket.unwrap_or(NO_BUCKET).to_le_bytes());
        out.extend((self.shape.len() as u32).to_le_bytes());
        for d in &self.shape {
            out.extend(d.to_le_bytes());
        }
        out.extend((self.payload.len() as u64).to_le_bytes());
        for v in &self.payload {
            out.extend(v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend(digest.as_slice());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..4] != MAGIC {
            return Err(ConsentError::Malformed("not a checkpoint".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        let mut r = Reader {
            bytes: body,
            pos: 4,
        };
        let version = u32::from_le_bytes(r.take()?);
        if version != CHECKPOINT_VERSION {
            return Err(ConsentError::VersionUnsupported(version));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(ConsentError::HashMismatch);
        }
        let kind = CheckpointKind::from_tag(r.take::<1>()?[0])?;
        let bucket = match u16::from_le_bytes(r.take()?) {
            NO_BUCKET => None,
            b => Some(b),
        };
        let ndims = u32::from_le_bytes(r.take()?) as usize;
        let shape = (0..ndims)
            .map(|_| r.take().map(u64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        let count = u64::from_le_bytes(r.take()?) as usize;
        if body.len() - r.pos != count * 8 {
            return Err(ConsentError::Malformed(
                "payload length disagrees with header".into(),
            ));
        }
        let payload = (0..count)
            .map(|_| r.take().map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            kind,
            bucket,
            shape,
            payload,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let chunk = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| ConsentError::Malformed("checkpoint is truncated".into()))?;
        self.pos = end;
        Ok(chunk.try_into().expect("slice of length N"))
    }
}

/// Writes through a temporary file so a crash never leaves a partial checkpoint.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, ckpt.to_bytes())?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    match std::fs::read(path) {
        Ok(bytes) => Checkpoint::from_bytes(&bytes),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(ConsentError::MissingCheckpoint(path.display().to_string()))
        }
        Err(e) => Err(e.into()),
    }
}
