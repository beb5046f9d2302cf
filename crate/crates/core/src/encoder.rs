//! Per-bucket contrastive encoder.
//!
//! The reference encoder is `Linear -> tanh -> attention pooling -> L2
//! normalization` over a `T x F` frame matrix. Gradients are derived by hand;
//! `tests/gradcheck.rs` checks them against central finite differences.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{ConsentError, Result};
use crate::rng::{self, Stream};
use crate::types::{
    EmbeddingVector, LabeledEmbeddings, SpeakerId, TrainConfig, TrainMode, UtteranceFeatures,
};

/// Anything that maps a frame matrix to a unit-norm embedding.
pub trait UtteranceEncoder {
    fn feature_dim(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn encode_frames(&self, frames: ArrayView2<'_, f64>) -> Result<EmbeddingVector>;
}

/// Trainable parameters of one bucket encoder. Also used as the gradient type.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    /// `F x E` per-frame projection.
    pub proj: Array2<f64>,
    pub proj_bias: Array1<f64>,
    /// Attention scorer weights over the `E` hidden units.
    pub attn: Array1<f64>,
    pub attn_bias: f64,
    /// Bumped on every update; written into checkpoints.
    pub version: u32,
}

struct Forward {
    hidden: Array2<f64>,
    alpha: Array1<f64>,
    norm: f64,
    z: Array1<f64>,
}

impl EncoderParams {
    pub fn init<R: Rng>(feature_dim: usize, embed_dim: usize, rng: &mut R) -> Self {
        let proj_std = (2.0 / (feature_dim + embed_dim) as f64).sqrt();
        let attn_std = (1.0 / embed_dim as f64).sqrt();
        let proj = Array2::from_shape_fn((feature_dim, embed_dim), |_| {
            proj_std * rng.sample::<f64, _>(StandardNormal)
        });
        let attn = Array1::from_shape_fn(embed_dim, |_| {
            attn_std * rng.sample::<f64, _>(StandardNormal)
        });
        Self {
            proj,
            proj_bias: Array1::zeros(embed_dim),
            attn,
            attn_bias: 0.0,
            version: 0,
        }
    }

    /// Deterministic initialization for bucket `bucket` of a session.
    pub fn seeded(feature_dim: usize, embed_dim: usize, seed: u64, bucket: u64) -> Self {
        let mut rng = rng::stream(seed, Stream::EncoderInit, &[bucket]);
        Self::init(feature_dim, embed_dim, &mut rng)
    }

    pub fn zeros(feature_dim: usize, embed_dim: usize) -> Self {
        Self {
            proj: Array2::zeros((feature_dim, embed_dim)),
            proj_bias: Array1::zeros(embed_dim),
            attn: Array1::zeros(embed_dim),
            attn_bias: 0.0,
            version: 0,
        }
    }

    pub fn num_params(&self) -> usize {
        self.proj.len() + self.proj_bias.len() + self.attn.len() + 1
    }

    /// Parameters in the fixed order `proj (row-major), proj_bias, attn, attn_bias`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend(self.proj.iter());
        out.extend(self.proj_bias.iter());
        out.extend(self.attn.iter());
        out.push(self.attn_bias);
        out
    }

    pub fn from_flat(feature_dim: usize, embed_dim: usize, flat: &[f64]) -> Result<Self> {
        let expected = feature_dim * embed_dim + 2 * embed_dim + 1;
        if flat.len() != expected {
            return Err(ConsentError::ShapeMismatch(format!(
                "encoder payload has {} values, expected {expected}",
                flat.len()
            )));
        }
        let (w, rest) = flat.split_at(feature_dim * embed_dim);
        let (b, rest) = rest.split_at(embed_dim);
        let (a, rest) = rest.split_at(embed_dim);
        Ok(Self {
            proj: Array2::from_shape_vec((feature_dim, embed_dim), w.to_vec())
                .map_err(|e| ConsentError::ShapeMismatch(e.to_string()))?,
            proj_bias: Array1::from(b.to_vec()),
            attn: Array1::from(a.to_vec()),
            attn_bias: rest[0],
            version: 0,
        })
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &EncoderParams) {
        self.proj.scaled_add(alpha, &other.proj);
        self.proj_bias.scaled_add(alpha, &other.proj_bias);
        self.attn.scaled_add(alpha, &other.attn);
        self.attn_bias += alpha * other.attn_bias;
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }

    fn check_frames(&self, frames: &ArrayView2<'_, f64>) -> Result<()> {
        let (t, f) = frames.dim();
        if f != self.proj.nrows() || t == 0 {
            return Err(ConsentError::ShapeMismatch(format!(
                "frames are {t}x{f}, encoder expects Tx{} with T >= 1",
                self.proj.nrows()
            )));
        }
        Ok(())
    }

    fn forward(&self, frames: ArrayView2<'_, f64>) -> Result<Forward> {
        self.check_frames(&frames)?;
        let mut hidden = frames.dot(&self.proj);
        hidden += &self.proj_bias;
        hidden.mapv_inplace(f64::tanh);
        let mut scores = hidden.dot(&self.attn);
        scores += self.attn_bias;
        let max = scores.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        scores.mapv_inplace(|v| (v - max).exp());
        let total = scores.sum();
        let alpha = scores / total;
        let pooled = alpha.dot(&hidden);
        let norm = pooled.dot(&pooled).sqrt();
        if !(norm >= 1e-12) {
            return Err(ConsentError::ZeroNorm);
        }
        let z = &pooled / norm;
        Ok(Forward {
            hidden,
            alpha,
            norm,
            z,
        })
    }

    /// Accumulates `d loss / d params` into `grad` given `dz = d loss / d z`.
    fn backward(
        &self,
        frames: ArrayView2<'_, f64>,
        fwd: &Forward,
        dz: ArrayView1<'_, f64>,
        grad: &mut EncoderParams,
    ) {
        let dpooled = (&dz - &(&fwd.z * fwd.z.dot(&dz))) / fwd.norm;
        let dalpha = fwd.hidden.dot(&dpooled);
        let mean = fwd.alpha.dot(&dalpha);
        let dscore = &fwd.alpha * &(dalpha - mean);

        grad.attn += &fwd.hidden.t().dot(&dscore);
        grad.attn_bias += dscore.sum();

        // dh_t = alpha_t * dpooled + dscore_t * attn, then through tanh.
        let mut dpre = Array2::zeros(fwd.hidden.raw_dim());
        Zip::from(dpre.rows_mut())
            .and(fwd.hidden.rows())
            .and(&fwd.alpha)
            .and(&dscore)
            .for_each(|mut out, h, &a, &ds| {
                Zip::from(&mut out)
                    .and(&h)
                    .and(&dpooled)
                    .and(&self.attn)
                    .for_each(|o, &hv, &dp, &w| *o = (a * dp + ds * w) * (1.0 - hv * hv));
            });
        grad.proj_bias += &dpre.sum_axis(Axis(0));
        general_mat_mul(1.0, &frames.t(), &dpre, 1.0, &mut grad.proj);
    }

    fn embed_rows<'a, I>(&self, frames: I, len: usize) -> Result<Array2<f64>>
    where
        I: IntoIterator<Item = ArrayView2<'a, f64>>,
    {
        let mut out = Array2::zeros((len, self.proj.ncols()));
        for (mut row, x) in out.rows_mut().into_iter().zip(frames) {
            row.assign(&self.forward(x)?.z);
        }
        Ok(out)
    }

    /// Embeds every utterance, labelled by speaker.
    pub fn embed_batch(&self, utts: &[&UtteranceFeatures]) -> Result<LabeledEmbeddings> {
        let rows = self.embed_rows(utts.iter().map(|u| u.frames.view()), utts.len())?;
        LabeledEmbeddings::new(rows, utts.iter().map(|u| u.speaker).collect())
    }
}

impl UtteranceEncoder for EncoderParams {
    fn feature_dim(&self) -> usize {
        self.proj.nrows()
    }

    fn embed_dim(&self) -> usize {
        self.proj.ncols()
    }

    fn encode_frames(&self, frames: ArrayView2<'_, f64>) -> Result<EmbeddingVector> {
        Ok(EmbeddingVector::from_unit(self.forward(frames)?.z.to_vec()))
    }
}

pub fn encode(params: &EncoderParams, utt: &UtteranceFeatures) -> Result<EmbeddingVector> {
    params.encode_frames(utt.frames.view())
}

/// Embeddings with labels; every label must occur at least twice so each
/// anchor has a positive.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch<'a> {
    z: ArrayView2<'a, f64>,
    labels: &'a [SpeakerId],
}

impl<'a> ContrastiveBatch<'a> {
    pub fn new(z: ArrayView2<'a, f64>, labels: &'a [SpeakerId]) -> Result<Self> {
        if z.nrows() != labels.len() {
            return Err(ConsentError::MismatchedLengths {
                what: "embedding rows vs labels",
                expected: z.nrows(),
                actual: labels.len(),
            });
        }
        for &l in labels {
            if labels.iter().filter(|&&m| m == l).count() < 2 {
                return Err(ConsentError::DegenerateBatch(format!(
                    "speaker {l} has a single utterance in the batch"
                )));
            }
        }
        Ok(Self { z, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Summed supervised contrastive loss and its gradient with respect to the
/// embedding rows.
fn sup_loss_and_dz(batch: &ContrastiveBatch<'_>, tau: f64) -> (f64, Array2<f64>) {
    let m = batch.len();
    let sims = batch.z.dot(&batch.z.t());
    let mut coeff = Array2::<f64>::zeros((m, m));
    let mut loss = 0.0;
    for u in 0..m {
        let row = sims.row(u);
        let max = (0..m)
            .filter(|&a| a != u)
            .fold(f64::NEG_INFINITY, |acc, a| acc.max(row[a] / tau));
        let denom: f64 = (0..m)
            .filter(|&a| a != u)
            .map(|a| (row[a] / tau - max).exp())
            .sum();
        let log_denom = max + denom.ln();
        let positives: Vec<usize> = (0..m)
            .filter(|&p| p != u && batch.labels[p] == batch.labels[u])
            .collect();
        let inv_p = 1.0 / positives.len() as f64;
        for &p in &positives {
            loss -= inv_p * (row[p] / tau - log_denom);
        }
        // d loss_u / d sim(u, a) = (softmax_a - [a in P] / |P|) / tau
        for a in (0..m).filter(|&a| a != u) {
            let q = (row[a] / tau - log_denom).exp();
            let target = if batch.labels[a] == batch.labels[u] {
                inv_p
            } else {
                0.0
            };
            coeff[[u, a]] = (q - target) / tau;
        }
    }
    // sim(u, a) = z_u . z_a feeds both rows.
    let sym = &coeff + &coeff.t();
    let dz = sym.dot(&batch.z);
    (loss, dz)
}

/// Supervised contrastive loss summed over all anchors of the batch.
pub fn sup_contrastive_loss(batch: &ContrastiveBatch<'_>, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(sup_loss_and_dz(batch, tau).0)
}

/// Gradient of the batch loss with respect to the embedding rows.
pub fn sup_contrastive_grad_z(
    batch: &ContrastiveBatch<'_>,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    check_tau(tau)?;
    Ok(sup_loss_and_dz(batch, tau))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(ConsentError::InvalidConfig(format!(
            "temperature must be > 0, got {tau}"
        )))
    }
}

/// Two-view contrastive loss: row `i` of `view_a` and row `i` of `view_b`
/// are siblings, every other view in the batch is a negative.
pub fn unsup_contrastive_loss(
    view_a: ArrayView2<'_, f64>,
    view_b: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<f64> {
    Ok(unsup_loss_and_dz(view_a, view_b, tau)?.0)
}

pub(crate) fn unsup_loss_and_dz(
    view_a: ArrayView2<'_, f64>,
    view_b: ArrayView2<'_, f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    if view_a.dim() != view_b.dim() {
        return Err(ConsentError::ShapeMismatch(
            "view batches differ in shape".into(),
        ));
    }
    if view_a.nrows() < 2 {
        return Err(ConsentError::DegenerateBatch(
            "need at least 2 utterances".into(),
        ));
    }
    let n = view_a.nrows() as SpeakerId;
    let stacked = ndarray::concatenate(Axis(0), &[view_a, view_b])
        .map_err(|e| ConsentError::ShapeMismatch(e.to_string()))?;
    let labels: Vec<SpeakerId> = (0..n).chain(0..n).collect();
    let batch = ContrastiveBatch::new(stacked.view(), &labels)?;
    sup_contrastive_grad_z(&batch, tau)
}

/// Loss and parameter gradient of the supervised contrastive loss through
/// the encoder.
pub fn grad_sup_contrastive(
    params: &EncoderParams,
    frames: &[ArrayView2<'_, f64>],
    labels: &[SpeakerId],
    tau: f64,
) -> Result<(f64, EncoderParams)> {
    let fwds = frames
        .iter()
        .map(|x| params.forward(x.view()))
        .collect::<Result<Vec<_>>>()?;
    let mut z = Array2::zeros((fwds.len(), params.embed_dim()));
    for (mut row, f) in z.rows_mut().into_iter().zip(&fwds) {
        row.assign(&f.z);
    }
    let batch = ContrastiveBatch::new(z.view(), labels)?;
    let (loss, dz) = sup_contrastive_grad_z(&batch, tau)?;
    let mut grad = EncoderParams::zeros(params.feature_dim(), params.embed_dim());
    for ((x, f), g) in frames.iter().zip(&fwds).zip(dz.rows()) {
        params.backward(x.view(), f, g, &mut grad);
    }
    Ok((loss, grad))
}

/// Loss and gradient of the two-view loss through the encoder.
pub fn grad_unsup_contrastive(
    params: &EncoderParams,
    views_a: &[Array2<f64>],
    views_b: &[Array2<f64>],
    tau: f64,
) -> Result<(f64, EncoderParams)> {
    let all: Vec<ArrayView2<'_, f64>> = views_a.iter().chain(views_b).map(|v| v.view()).collect();
    let fwds = all
        .iter()
        .map(|x| params.forward(x.view()))
        .collect::<Result<Vec<_>>>()?;
    let mut z = Array2::zeros((fwds.len(), params.embed_dim()));
    for (mut row, f) in z.rows_mut().into_iter().zip(&fwds) {
        row.assign(&f.z);
    }
    let half = views_a.len();
    let (loss, dz) = unsup_loss_and_dz(z.slice(s![..half, ..]), z.slice(s![half.., ..]), tau)?;
    let mut grad = EncoderParams::zeros(params.feature_dim(), params.embed_dim());
    for ((x, f), g) in all.iter().zip(&fwds).zip(dz.rows()) {
        params.backward(x.view(), f, g, &mut grad);
    }
    Ok((loss, grad))
}

/// Random contiguous crop of `crop_fraction * T` frames plus Gaussian noise.
pub fn make_view<R: Rng>(
    frames: ArrayView2<'_, f64>,
    sigma: f64,
    crop_fraction: f64,
    rng: &mut R,
) -> Array2<f64> {
    let t = frames.nrows();
    let len = ((t as f64 * crop_fraction).round() as usize).clamp(1, t);
    let start = rng.random_range(0..=t - len);
    let mut view = frames.slice(s![start..start + len, ..]).to_owned();
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("finite sigma");
        view.mapv_inplace(|v| v + noise.sample(rng));
    }
    view
}

/// Outcome of a contrastive training call.
#[derive(Debug, Clone)]
pub struct StepReport {
    /// Loss evaluated before each SGD step.
    pub losses: Vec<f64>,
}

/// Runs `epochs_cont` full-batch SGD steps on the shard.
///
/// `key` identifies the call (epoch, bucket, ...) for the view generator in
/// unsupervised mode.
pub fn train_contrastive_step(
    params: &EncoderParams,
    shard: &[&UtteranceFeatures],
    cfg: &TrainConfig,
    key: &[u64],
) -> Result<(EncoderParams, StepReport)> {
    let mut current = params.clone();
    let mut losses = Vec::with_capacity(cfg.epochs_cont);
    let frames: Vec<ArrayView2<'_, f64>> = shard.iter().map(|u| u.frames.view()).collect();
    let labels: Vec<SpeakerId> = shard.iter().map(|u| u.speaker).collect();
    for step in 0..cfg.epochs_cont {
        let (loss, grad) = match cfg.mode {
            TrainMode::Supervised => {
                grad_sup_contrastive(&current, &frames, &labels, cfg.temperature)?
            }
            TrainMode::Unsupervised => {
                let mut keys = key.to_vec();
                keys.push(step as u64);
                let mut rng = rng::stream(cfg.seed, Stream::Views, &keys);
                let (a, b): (Vec<_>, Vec<_>) = frames
                    .iter()
                    .map(|x| {
                        let a = make_view(x.view(), cfg.view_sigma, cfg.crop_fraction, &mut rng);
                        let b = make_view(x.view(), cfg.view_sigma, cfg.crop_fraction, &mut rng);
                        (a, b)
                    })
                    .unzip();
                grad_unsup_contrastive(&current, &a, &b, cfg.temperature)?
            }
        };
        losses.push(loss);
        if cfg.contrastive_lr > 0.0 {
            current.add_scaled(-cfg.contrastive_lr, &grad);
            current.version = current.version.wrapping_add(1);
        }
    }
    if !current.is_finite() {
        return Err(ConsentError::DegenerateBatch(
            "encoder parameters diverged".into(),
        ));
    }
    Ok((current, StepReport { losses }))
}

/// Contrastive loss of the shard under `params`, without updating.
pub fn shard_loss(params: &EncoderParams, shard: &[&UtteranceFeatures], tau: f64) -> Result<f64> {
    let emb = params.embed_batch(shard)?;
    let batch = ContrastiveBatch::new(emb.embeddings.view(), &emb.labels)?;
    sup_contrastive_loss(&batch, tau)
}
