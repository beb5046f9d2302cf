//! Shared domain types: agent/bucket topology, features, embeddings and buffers.

use std::ops::Range;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{ConsentError, Result};

/// Global speaker identifier.
pub type SpeakerId = u32;
/// Bucket identifier. Agent `i` owns buckets `i..i+B`.
pub type BucketId = u16;

/// Norm tolerance for every embedding produced by the engine.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AgentConfig {
    pub agent_index: usize,
    pub num_buckets: usize,
    pub num_speakers: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            agent_index: 0,
            num_buckets: 8,
            num_speakers: 40,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_buckets == 0 {
            return Err(ConsentError::InvalidConfig(
                "num_buckets must be >= 1".into(),
            ));
        }
        if self.num_speakers == 0 || !self.num_speakers.is_multiple_of(self.num_buckets) {
            return Err(ConsentError::InvalidConfig(format!(
                "num_speakers ({}) must be a positive multiple of num_buckets ({})",
                self.num_speakers, self.num_buckets
            )));
        }
        Ok(())
    }

    /// `[i, i+1, ..., B+i-1]`
    pub fn bucket_list(&self) -> Vec<BucketId> {
        (0..self.num_buckets)
            .map(|k| (self.agent_index + k) as BucketId)
            .collect()
    }

    pub fn speakers_per_bucket(&self) -> usize {
        self.num_speakers / self.num_buckets
    }

    /// Speakers `[i*N, (i+1)*N)` handled by this agent.
    pub fn speaker_window(&self) -> Range<SpeakerId> {
        let start = (self.agent_index * self.num_speakers) as SpeakerId;
        start..start + self.num_speakers as SpeakerId
    }

    /// Consecutive speakers of the window, split equally over the bucket list.
    pub fn initial_assignment(&self) -> Vec<(BucketId, Vec<SpeakerId>)> {
        let per = self.speakers_per_bucket() as SpeakerId;
        let start = self.speaker_window().start;
        self.bucket_list()
            .into_iter()
            .enumerate()
            .map(|(k, b)| {
                let lo = start + k as SpeakerId * per;
                (b, (lo..lo + per).collect())
            })
            .collect()
    }

    pub fn initial_topology(&self) -> BucketTopology {
        BucketTopology {
            n_bkt: vec![self.speakers_per_bucket(); self.num_buckets],
            n_reg_bkt: vec![0; self.num_buckets],
        }
    }
}

/// Speakers per bucket and new registrations per bucket (each 0 or 1).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BucketTopology {
    pub n_bkt: Vec<usize>,
    pub n_reg_bkt: Vec<usize>,
}

impl BucketTopology {
    pub fn total_speakers(&self) -> usize {
        self.n_bkt
            .iter()
            .zip(&self.n_reg_bkt)
            .map(|(n, r)| n + r)
            .sum()
    }
}

pub fn validate_topology(cfg: &AgentConfig, topo: &BucketTopology) -> Result<()> {
    for (what, len) in [
        ("n_bkt", topo.n_bkt.len()),
        ("n_reg_bkt", topo.n_reg_bkt.len()),
    ] {
        if len != cfg.num_buckets {
            return Err(ConsentError::MismatchedLengths {
                what,
                expected: cfg.num_buckets,
                actual: len,
            });
        }
    }
    if let Some((index, &value)) = topo.n_reg_bkt.iter().enumerate().find(|(_, &v)| v > 1) {
        return Err(ConsentError::InvalidRegFlag { index, value });
    }
    Ok(())
}

/// One utterance: a `T x F` frame matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceFeatures {
    pub speaker: SpeakerId,
    pub bucket: BucketId,
    pub frames: Array2<f64>,
}

impl UtteranceFeatures {
    pub fn validate(&self, segment_len: usize, feature_dim: usize) -> Result<()> {
        let (t, f) = self.frames.dim();
        if t != segment_len || f != feature_dim {
            return Err(ConsentError::ShapeMismatch(format!(
                "utterance of speaker {} is {t}x{f}, expected {segment_len}x{feature_dim}",
                self.speaker
            )));
        }
        if self.frames.iter().any(|v| !v.is_finite()) {
            return Err(ConsentError::ShapeMismatch(format!(
                "utterance of speaker {} has non-finite entries",
                self.speaker
            )));
        }
        Ok(())
    }
}

/// A unit-norm utterance embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < 1e-12 || !norm.is_finite() {
            return Err(ConsentError::ZeroNorm);
        }
        Ok(Self(values.into_iter().map(|v| v / norm).collect()))
    }

    /// Wraps values that are already unit norm.
    pub(crate) fn from_unit(values: Vec<f64>) -> Self {
        debug_assert!((values.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-6);
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// Embedding rows with one speaker label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledEmbeddings {
    pub embeddings: Array2<f64>,
    pub labels: Vec<SpeakerId>,
}

impl LabeledEmbeddings {
    pub fn new(embeddings: Array2<f64>, labels: Vec<SpeakerId>) -> Result<Self> {
        if embeddings.nrows() != labels.len() {
            return Err(ConsentError::MismatchedLengths {
                what: "embedding rows vs labels",
                expected: embeddings.nrows(),
                actual: labels.len(),
            });
        }
        Ok(Self { embeddings, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            embeddings: Array2::zeros((0, dim)),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.embeddings.row(i)
    }
}

/// Progressive embedding/label store capped at `max_mem` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    rows: Array2<f64>,
    labels: Vec<SpeakerId>,
    max_mem: usize,
}

impl ReplayBuffer {
    pub fn new(dim: usize, max_mem: usize) -> Self {
        Self {
            rows: Array2::zeros((0, dim)),
            labels: Vec::new(),
            max_mem,
        }
    }

    pub fn from_parts(rows: Array2<f64>, labels: Vec<SpeakerId>, max_mem: usize) -> Result<Self> {
        if rows.nrows() != labels.len() {
            return Err(ConsentError::MismatchedLengths {
                what: "buffer rows vs labels",
                expected: rows.nrows(),
                actual: labels.len(),
            });
        }
        if rows.nrows() > max_mem {
            return Err(ConsentError::BufferOverflow {
                rows: rows.nrows(),
                max_mem,
            });
        }
        Ok(Self {
            rows,
            labels,
            max_mem,
        })
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn labels(&self) -> &[SpeakerId] {
        &self.labels
    }

    pub fn max_mem(&self) -> usize {
        self.max_mem
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// Appends rows, keeping the accumulation order.
    pub(crate) fn append(&mut self, rows: ArrayView2<'_, f64>, labels: &[SpeakerId]) -> Result<()> {
        let total = self.len() + labels.len();
        if total > self.max_mem {
            return Err(ConsentError::BufferOverflow {
                rows: total,
                max_mem: self.max_mem,
            });
        }
        self.rows
            .append(Axis(0), rows)
            .map_err(|e| ConsentError::ShapeMismatch(e.to_string()))?;
        self.labels.extend_from_slice(labels);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Supervised,
    Unsupervised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub epochs_cont: usize,
    /// `None` picks 2 for supervised and 1 for unsupervised mode.
    pub epochs_cls: Option<usize>,
    pub temperature: f64,
    pub contrastive_lr: f64,
    pub classifier_lr: f64,
    /// Mini-batch size for classifier epochs over the replay buffer.
    pub classifier_batch: usize,
    pub seed: u64,
    pub mode: TrainMode,
    /// Utterances loaded per speaker per shard.
    pub n_utt: usize,
    /// Fraction of each speaker's utterances reserved for hold-out evaluation.
    pub holdout_fraction: f64,
    /// Gaussian noise added to unsupervised views.
    pub view_sigma: f64,
    /// Contiguous crop length of unsupervised views, as a fraction of the segment.
    pub crop_fraction: f64,
    /// Gaussian noise on buffer embeddings for the unsupervised latent views.
    pub latent_view_sigma: f64,
    /// SGD rate for the latent layers in unsupervised mode.
    pub latent_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            epochs_cont: 5,
            epochs_cls: None,
            temperature: 0.1,
            contrastive_lr: 0.05,
            classifier_lr: 1e-3,
            classifier_batch: 16,
            seed: 0,
            mode: TrainMode::Supervised,
            n_utt: 10,
            holdout_fraction: 0.2,
            view_sigma: 0.5,
            crop_fraction: 0.8,
            latent_view_sigma: 0.02,
            latent_lr: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn epochs_cls(&self) -> usize {
        self.epochs_cls.unwrap_or(match self.mode {
            TrainMode::Supervised => 2,
            TrainMode::Unsupervised => 1,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(ConsentError::InvalidConfig(msg.to_string()));
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return bad("temperature must be > 0");
        }
        if !(self.contrastive_lr >= 0.0) || !(self.classifier_lr >= 0.0) || !(self.latent_lr >= 0.0)
        {
            return bad("learning rates must be >= 0");
        }
        if self.classifier_batch == 0 {
            return bad("classifier_batch must be >= 1");
        }
        if self.n_utt < 2 {
            return bad("n_utt must be >= 2 for contrastive batches");
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad("holdout_fraction must lie in (0, 1)");
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return bad("crop_fraction must lie in (0, 1]");
        }
        if !(self.view_sigma >= 0.0) || !(self.latent_view_sigma >= 0.0) {
            return bad("view_sigma must be >= 0");
        }
        Ok(())
    }
}
