//! Little-endian feature container:
//! header `SPKF | version u32 | num_utts u32 | T u32 | F u32`, then per
//! utterance `speaker u32 | bucket u16 | T*F f32` in row-major order.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::Dataset;
use crate::error::{ConsentError, Result};
use crate::types::{BucketId, LabeledEmbeddings, UtteranceFeatures};

const MAGIC: &[u8; 4] = b"SPKF";
pub const FEATURE_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> ConsentError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        ConsentError::Malformed("feature file is truncated".into())
    } else {
        e.into()
    }
}

fn write_records<'a, W: Write>(
    out: &mut W,
    t: usize,
    f: usize,
    records: impl ExactSizeIterator<Item = (u32, BucketId, ndarray::ArrayView2<'a, f64>)>,
) -> Result<()> {
    out.write_all(MAGIC)?;
    for v in [FEATURE_VERSION, records.len() as u32, t as u32, f as u32] {
        out.write_all(&v.to_le_bytes())?;
    }
    for (speaker, bucket, frames) in records {
        out.write_all(&speaker.to_le_bytes())?;
        out.write_all(&bucket.to_le_bytes())?;
        for &x in frames.iter() {
            out.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn write_features(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    let records = data
        .utterances()
        .iter()
        .map(|u| (u.speaker, u.bucket, u.frames.view()));
    write_records(&mut out, data.segment_len(), data.feature_dim(), records)?;
    out.flush()?;
    Ok(())
}

/// Embeddings as single-frame utterances (`T = 1`, `F = E`), tagged with
/// the bucket whose encoder produced them.
pub fn write_embeddings(path: &Path, groups: &[(BucketId, &LabeledEmbeddings)]) -> Result<()> {
    let dim = groups
        .iter()
        .map(|(_, e)| e.dim())
        .find(|&d| d > 0)
        .unwrap_or(0);
    let rows: Vec<_> = groups
        .iter()
        .flat_map(|&(b, e)| {
            (0..e.len()).map(move |i| {
                (
                    e.labels[i],
                    b,
                    e.embeddings.slice(ndarray::s![i..i + 1, ..]),
                )
            })
        })
        .collect();
    if let Some((_, _, r)) = rows.iter().find(|(_, _, r)| r.ncols() != dim) {
        return Err(ConsentError::DimMismatch {
            left: dim,
            right: r.ncols(),
        });
    }
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    write_records(&mut out, 1, dim, rows.into_iter())?;
    out.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Dataset> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(ConsentError::Malformed("not a feature container".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FEATURE_VERSION {
        return Err(ConsentError::VersionUnsupported(version));
    }
    let n = read_u32(&mut r)? as usize;
    let t = read_u32(&mut r)? as usize;
    let f = read_u32(&mut r)? as usize;
    let mut utterances = Vec::with_capacity(n);
    let mut buf = vec![0u8; t * f * 4];
    for _ in 0..n {
        let speaker = read_u32(&mut r)?;
        let mut b = [0u8; 2];
        r.read_exact(&mut b).map_err(truncated)?;
        r.read_exact(&mut buf).map_err(truncated)?;
        let values = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let frames = Array2::from_shape_vec((t, f), values)
            .map_err(|e| ConsentError::Malformed(e.to_string()))?;
        utterances.push(UtteranceFeatures {
            speaker,
            bucket: u16::from_le_bytes(b),
            frames,
        });
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(ConsentError::Malformed(
            "trailing bytes after last utterance".into(),
        ));
    }
    Dataset::new(t, f, utterances)
}
