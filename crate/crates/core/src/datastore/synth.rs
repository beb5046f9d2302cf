use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{ConsentError, Result};
use crate::rng::{self, Stream};
use crate::types::{BucketId, SpeakerId, UtteranceFeatures};

/// Bucket tag for speakers that have not been placed yet.
pub const UNASSIGNED_BUCKET: BucketId = BucketId::MAX;

/// Temporal correlation of frame noise.
const AR_COEF: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    /// Clean speakers, ids `0..num_speakers`.
    pub num_speakers: usize,
    /// Noisy speakers for later registration, ids following the clean ones.
    pub num_noisy_speakers: usize,
    pub utterances_per_speaker: usize,
    pub segment_len: usize,
    pub feature_dim: usize,
    /// Mean distance between centroids, in units of `noise_sigma`.
    pub cluster_separation: f64,
    pub noise_sigma: f64,
    /// Clean speakers per bucket, used to tag utterances.
    pub bucket_size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_speakers: 40,
            num_noisy_speakers: 20,
            utterances_per_speaker: 30,
            segment_len: 160,
            feature_dim: 40,
            cluster_separation: 6.0,
            noise_sigma: 1.0,
            bucket_size: 5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ConsentError::InvalidConfig(format!("synthetic: {m}")));
        if self.num_speakers + self.num_noisy_speakers == 0 {
            return bad("no speakers");
        }
        if self.utterances_per_speaker == 0
            || self.segment_len == 0
            || self.feature_dim == 0
            || self.bucket_size == 0
        {
            return bad("counts must be at least 1");
        }
        if !(self.cluster_separation >= 0.0 && self.cluster_separation.is_finite()) {
            return bad("cluster_separation must be finite and non-negative");
        }
        if !(self.noise_sigma > 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be positive");
        }
        Ok(())
    }
}

/// Generates a dataset of Gaussian speaker clusters with AR(1) frame noise.
///
/// Values are rounded to `f32` so the dataset survives a feature-file round
/// trip unchanged.
pub fn synth_speakers(cfg: &SyntheticConfig) -> Result<Dataset> {
    cfg.validate()?;
    let f = cfg.feature_dim;
    let centroid_std = cfg.cluster_separation * cfg.noise_sigma / (2.0 * f as f64).sqrt();
    let innovation = (1.0 - AR_COEF * AR_COEF).sqrt();
    let total = cfg.num_speakers + cfg.num_noisy_speakers;
    let mut utterances = Vec::with_capacity(total * cfg.utterances_per_speaker);
    for s in 0..total {
        let speaker = s as SpeakerId;
        let noisy = s >= cfg.num_speakers;
        let sigma = if noisy {
            2.0 * cfg.noise_sigma
        } else {
            cfg.noise_sigma
        };
        let bucket = if noisy {
            UNASSIGNED_BUCKET
        } else {
            (s / cfg.bucket_size) as BucketId
        };
        let mut rng = rng::stream(cfg.seed, Stream::Synth, &[s as u64]);
        let centroid: Array1<f64> = (0..f)
            .map(|_| centroid_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        for _ in 0..cfg.utterances_per_speaker {
            let mut frames = Array2::zeros((cfg.segment_len, f));
            let mut noise: Array1<f64> = (0..f)
                .map(|_| sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            for mut row in frames.rows_mut() {
                for ((x, c), n) in row.iter_mut().zip(&centroid).zip(&noise) {
                    *x = (c + n) as f32 as f64;
                }
                noise.mapv_inplace(|n| {
                    AR_COEF * n + innovation * sigma * rng.sample::<f64, _>(StandardNormal)
                });
            }
            utterances.push(UtteranceFeatures {
                speaker,
                bucket,
                frames,
            });
        }
    }
    Dataset::new(cfg.segment_len, f, utterances)
}
