//! Shared speaker classifier: `Linear(E,64) -> ReLU -> Linear(64,64) -> ReLU
//! -> Linear(64,C) -> Softmax`, trained with Adam on the replay buffer.

use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoder::{unsup_loss_and_dz, EncoderParams};
use crate::error::{ConsentError, Result};
use crate::rng::{self, Stream};
use crate::types::{
    BucketId, EmbeddingVector, ReplayBuffer, SpeakerId, TrainConfig, TrainMode, UtteranceFeatures,
};

pub const HIDDEN: usize = 64;
/// Standard deviation of freshly added head rows.
pub const HEAD_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    /// One row per class.
    pub head: Array2<f64>,
    pub head_bias: Array1<f64>,
}

struct Forward {
    r1: Array2<f64>,
    latent: Array2<f64>,
    r2: Array2<f64>,
    logits: Array2<f64>,
}

fn gaussian<R: Rng>(shape: (usize, usize), std: f64, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

fn relu(a: &Array2<f64>) -> Array2<f64> {
    a.mapv(|v| v.max(0.0))
}

fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row /= total;
    }
    out
}

fn log_softmax_at(logits: ArrayView1<'_, f64>, k: usize) -> f64 {
    let max = logits.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits[k] - lse
}

impl ClassifierParams {
    pub fn init<R: Rng>(embed_dim: usize, classes: usize, rng: &mut R) -> Self {
        Self {
            w1: gaussian((HIDDEN, embed_dim), (2.0 / embed_dim as f64).sqrt(), rng),
            b1: Array1::zeros(HIDDEN),
            w2: gaussian((HIDDEN, HIDDEN), (2.0 / HIDDEN as f64).sqrt(), rng),
            b2: Array1::zeros(HIDDEN),
            head: gaussian((classes, HIDDEN), (1.0 / HIDDEN as f64).sqrt(), rng),
            head_bias: Array1::zeros(classes),
        }
    }

    pub fn seeded(embed_dim: usize, classes: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, Stream::ClassifierInit, &[]);
        Self::init(embed_dim, classes, &mut rng)
    }

    pub fn zeros(embed_dim: usize, classes: usize) -> Self {
        Self {
            w1: Array2::zeros((HIDDEN, embed_dim)),
            b1: Array1::zeros(HIDDEN),
            w2: Array2::zeros((HIDDEN, HIDDEN)),
            b2: Array1::zeros(HIDDEN),
            head: Array2::zeros((classes, HIDDEN)),
            head_bias: Array1::zeros(classes),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.head.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.w1.len()
            + self.b1.len()
            + self.w2.len()
            + self.b2.len()
            + self.head.len()
            + self.head_bias.len()
    }

    /// Order: `w1, b1, w2, b2, head, head_bias`, matrices row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        out.extend(self.w1.iter());
        out.extend(self.b1.iter());
        out.extend(self.w2.iter());
        out.extend(self.b2.iter());
        out.extend(self.head.iter());
        out.extend(self.head_bias.iter());
        out
    }

    pub fn from_flat(embed_dim: usize, classes: usize, flat: &[f64]) -> Result<Self> {
        let mut p = Self::zeros(embed_dim, classes);
        if flat.len() != p.num_params() {
            return Err(ConsentError::ShapeMismatch(format!(
                "classifier payload has {} values, expected {}",
                flat.len(),
                p.num_params()
            )));
        }
        let mut it = flat.iter().copied();
        for v in
            p.w1.iter_mut()
                .chain(p.b1.iter_mut())
                .chain(p.w2.iter_mut())
                .chain(p.b2.iter_mut())
                .chain(p.head.iter_mut())
                .chain(p.head_bias.iter_mut())
        {
            *v = it.next().expect("length checked");
        }
        Ok(p)
    }

    fn add_scaled(&mut self, alpha: f64, other: &ClassifierParams) {
        self.w1.scaled_add(alpha, &other.w1);
        self.b1.scaled_add(alpha, &other.b1);
        self.w2.scaled_add(alpha, &other.w2);
        self.b2.scaled_add(alpha, &other.b2);
        self.head.scaled_add(alpha, &other.head);
        self.head_bias.scaled_add(alpha, &other.head_bias);
    }

    fn check_input(&self, z: &ArrayView2<'_, f64>) -> Result<()> {
        if z.ncols() != self.embed_dim() {
            return Err(ConsentError::ShapeMismatch(format!(
                "classifier expects {} inputs, got {}",
                self.embed_dim(),
                z.ncols()
            )));
        }
        Ok(())
    }

    fn forward(&self, z: ArrayView2<'_, f64>) -> Forward {
        let a1 = z.dot(&self.w1.t()) + &self.b1;
        let r1 = relu(&a1);
        let latent = r1.dot(&self.w2.t()) + &self.b2;
        let r2 = relu(&latent);
        let logits = r2.dot(&self.head.t()) + &self.head_bias;
        Forward {
            r1,
            latent,
            r2,
            logits,
        }
    }

    /// Class probabilities for each row of `z`.
    pub fn probabilities(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&z)?;
        Ok(softmax_rows(&self.forward(z).logits))
    }

    /// Output of the second linear layer, before its ReLU.
    pub fn latent(&self, z: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        self.check_input(&z)?;
        let r1 = relu(&(z.dot(&self.w1.t()) + &self.b1));
        Ok(r1.dot(&self.w2.t()) + &self.b2)
    }

    /// Grows (or shrinks) the head to `classes` rows. Existing rows are kept,
    /// new rows are drawn from `N(0, 0.01^2)`. Returns the number of dropped rows.
    pub fn resize_head(&mut self, classes: usize, seed: u64) -> usize {
        let old = self.num_classes();
        let keep = old.min(classes);
        let mut rng = rng::stream(seed, Stream::HeadResize, &[old as u64, classes as u64]);
        let mut head = gaussian((classes, HIDDEN), HEAD_INIT_STD, &mut rng);
        let mut bias = Array1::zeros(classes);
        head.slice_mut(s![..keep, ..])
            .assign(&self.head.slice(s![..keep, ..]));
        bias.slice_mut(s![..keep])
            .assign(&self.head_bias.slice(s![..keep]));
        self.head = head;
        self.head_bias = bias;
        old - keep
    }

    /// Mean cross-entropy and its gradient.
    fn ce_loss_grad(&self, z: ArrayView2<'_, f64>, targets: &[usize]) -> (f64, ClassifierParams) {
        let m = z.nrows() as f64;
        let fwd = self.forward(z);
        let mut dlogits = softmax_rows(&fwd.logits);
        let mut loss = 0.0;
        for (i, &k) in targets.iter().enumerate() {
            loss -= log_softmax_at(fwd.logits.row(i), k);
            dlogits[[i, k]] -= 1.0;
        }
        dlogits /= m;
        let grad = self.backward_from_logits(z, &fwd, &dlogits);
        (loss / m, grad)
    }

    fn backward_from_logits(
        &self,
        z: ArrayView2<'_, f64>,
        fwd: &Forward,
        dlogits: &Array2<f64>,
    ) -> ClassifierParams {
        let head = dlogits.t().dot(&fwd.r2);
        let head_bias = dlogits.sum_axis(Axis(0));
        let mut dlatent = dlogits.dot(&self.head);
        Zip::from(&mut dlatent).and(&fwd.latent).for_each(|d, &a| {
            if a <= 0.0 {
                *d = 0.0
            }
        });
        let mut grad = self.backward_from_latent(z, fwd, &dlatent);
        grad.head = head;
        grad.head_bias = head_bias;
        grad
    }

    fn backward_from_latent(
        &self,
        z: ArrayView2<'_, f64>,
        fwd: &Forward,
        dlatent: &Array2<f64>,
    ) -> ClassifierParams {
        let w2 = dlatent.t().dot(&fwd.r1);
        let b2 = dlatent.sum_axis(Axis(0));
        let mut da1 = dlatent.dot(&self.w2);
        Zip::from(&mut da1).and(&fwd.r1).for_each(|d, &r| {
            if r <= 0.0 {
                *d = 0.0
            }
        });
        ClassifierParams {
            w1: da1.t().dot(&z),
            b1: da1.sum_axis(Axis(0)),
            w2,
            b2,
            head: Array2::zeros(self.head.raw_dim()),
            head_bias: Array1::zeros(self.head_bias.len()),
        }
    }

    /// Two-view contrastive loss on the normalized latent features.
    fn latent_contrastive_grad(
        &self,
        a: ArrayView2<'_, f64>,
        b: ArrayView2<'_, f64>,
        tau: f64,
    ) -> Result<(f64, ClassifierParams)> {
        let n = a.nrows();
        let z = ndarray::concatenate(Axis(0), &[a, b])
            .map_err(|e| ConsentError::ShapeMismatch(e.to_string()))?;
        let fwd = self.forward(z.view());
        let norms: Array1<f64> = fwd
            .latent
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(1e-12))
            .collect();
        let unit = &fwd.latent / &norms.view().insert_axis(Axis(1));
        let (loss, du) = unsup_loss_and_dz(unit.slice(s![..n, ..]), unit.slice(s![n.., ..]), tau)?;
        let mut dlatent = du.clone();
        for ((mut d, u), &nrm) in dlatent.rows_mut().into_iter().zip(unit.rows()).zip(&norms) {
            let proj = u.dot(&d);
            Zip::from(&mut d)
                .and(&u)
                .for_each(|dv, &uv| *dv = (*dv - uv * proj) / nrm);
        }
        Ok((loss, self.backward_from_latent(z.view(), &fwd, &dlatent)))
    }
}

/// Softmax output for a single embedding.
pub fn cls_forward(params: &ClassifierParams, z: &EmbeddingVector) -> Result<Vec<f64>> {
    let row = ArrayView2::from_shape((1, z.dim()), z.as_slice())
        .map_err(|e| ConsentError::ShapeMismatch(e.to_string()))?;
    Ok(params.probabilities(row)?.row(0).to_vec())
}

/// Head row for each registered speaker.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassIndex {
    speakers: Vec<SpeakerId>,
    #[serde(skip)]
    lookup: BTreeMap<SpeakerId, usize>,
}

impl ClassIndex {
    pub fn new(speakers: Vec<SpeakerId>) -> Self {
        let lookup = speakers.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        Self { speakers, lookup }
    }

    /// Rebuilds the lookup after deserialization.
    pub fn reindex(self) -> Self {
        Self::new(self.speakers)
    }

    pub fn speakers(&self) -> &[SpeakerId] {
        &self.speakers
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    pub fn row_of(&self, speaker: SpeakerId) -> Option<usize> {
        self.lookup.get(&speaker).copied()
    }

    pub fn speaker_at(&self, row: usize) -> SpeakerId {
        self.speakers[row]
    }

    pub fn extend(&mut self, speakers: impl IntoIterator<Item = SpeakerId>) {
        for s in speakers {
            if !self.lookup.contains_key(&s) {
                self.lookup.insert(s, self.speakers.len());
                self.speakers.push(s);
            }
        }
    }

    fn targets(&self, labels: &[SpeakerId], classes: usize) -> Result<Vec<usize>> {
        labels
            .iter()
            .map(|&l| match self.row_of(l) {
                Some(k) if k < classes => Ok(k),
                Some(k) => Err(ConsentError::LabelOutOfRange { label: k, classes }),
                None => Err(ConsentError::LabelOutOfRange {
                    label: l as usize,
                    classes,
                }),
            })
            .collect()
    }
}

/// Adam moments over the flattened classifier parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, num_params: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    fn update(&mut self, params: &mut [f64], grad: &[f64]) {
        if self.m.len() != params.len() {
            self.m = vec![0.0; params.len()];
            self.v = vec![0.0; params.len()];
            self.step = 0;
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / bc1) / ((*v / bc2).sqrt() + self.eps);
        }
    }
}

/// Runs `epochs_cls` epochs over the buffer.
///
/// Supervised mode minimizes mean cross-entropy with Adam. Unsupervised mode
/// trains the two latent layers with SGD on the two-view contrastive loss of
/// noisy copies of the buffer rows; labels are ignored.
pub fn train_classifier(
    params: &ClassifierParams,
    adam: &mut Adam,
    buffer: &ReplayBuffer,
    classes: &ClassIndex,
    cfg: &TrainConfig,
    key: &[u64],
) -> Result<(ClassifierParams, f64)> {
    let mut current = params.clone();
    if buffer.is_empty() {
        return Ok((current, f64::NAN));
    }
    let rows = buffer.rows();
    let targets = classes.targets(buffer.labels(), current.num_classes())?;
    let mut rng = rng::stream(cfg.seed, Stream::ClassifierShuffle, key);
    let mut order: Vec<usize> = (0..buffer.len()).collect();
    let mut last = f64::NAN;
    adam.lr = cfg.classifier_lr;
    for _ in 0..cfg.epochs_cls() {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.classifier_batch) {
            let z = rows.select(Axis(0), chunk);
            match cfg.mode {
                TrainMode::Supervised => {
                    let t: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
                    let (loss, grad) = current.ce_loss_grad(z.view(), &t);
                    total += loss;
                    if cfg.classifier_lr > 0.0 {
                        let mut flat = current.to_flat();
                        adam.update(&mut flat, &grad.to_flat());
                        current = ClassifierParams::from_flat(
                            current.embed_dim(),
                            current.num_classes(),
                            &flat,
                        )?;
                    }
                }
                TrainMode::Unsupervised => {
                    if chunk.len() < 2 {
                        continue;
                    }
                    let noise =
                        Normal::new(0.0, cfg.latent_view_sigma.max(0.0)).expect("finite sigma");
                    let a = z.mapv(|v| v + noise.sample(&mut rng));
                    let b = z.mapv(|v| v + noise.sample(&mut rng));
                    let (loss, grad) =
                        current.latent_contrastive_grad(a.view(), b.view(), cfg.temperature)?;
                    total += loss;
                    current.add_scaled(-cfg.latent_lr, &grad);
                }
            }
            batches += 1;
        }
        last = total / batches.max(1) as f64;
    }
    Ok((current, last))
}

/// How hold-out embeddings are turned into speaker predictions.
pub enum Scorer<'a> {
    /// Argmax of the classifier softmax.
    Classifier {
        params: &'a ClassifierParams,
        classes: &'a ClassIndex,
    },
    /// Nearest prototype by cosine similarity of latent features.
    Prototypes {
        params: &'a ClassifierParams,
        prototypes: &'a LatentPrototypes,
        tau: f64,
    },
}

/// Mean normalized latent feature per speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentPrototypes {
    pub speakers: Vec<SpeakerId>,
    pub vectors: Array2<f64>,
}

fn normalize_rows(mut a: Array2<f64>) -> Array2<f64> {
    for mut r in a.rows_mut() {
        let n = r.dot(&r).sqrt().max(1e-12);
        r /= n;
    }
    a
}

impl LatentPrototypes {
    /// Prototypes from labelled buffer rows.
    pub fn from_buffer(params: &ClassifierParams, buffer: &ReplayBuffer) -> Result<Self> {
        let latent = normalize_rows(params.latent(buffer.rows())?);
        let mut groups: BTreeMap<SpeakerId, (Array1<f64>, usize)> = BTreeMap::new();
        for (row, &l) in latent.rows().into_iter().zip(buffer.labels()) {
            let entry = groups
                .entry(l)
                .or_insert_with(|| (Array1::zeros(latent.ncols()), 0));
            entry.0 += &row;
            entry.1 += 1;
        }
        let speakers: Vec<SpeakerId> = groups.keys().copied().collect();
        let mut vectors = Array2::zeros((speakers.len(), latent.ncols()));
        for (mut out, (sum, n)) in vectors.rows_mut().into_iter().zip(groups.values()) {
            out.assign(&(sum / *n as f64));
        }
        Ok(Self {
            speakers,
            vectors: normalize_rows(vectors),
        })
    }
}

/// Per-row `(correct, loss)` for labelled embeddings.
pub fn score_rows(
    scorer: &Scorer<'_>,
    z: ArrayView2<'_, f64>,
    labels: &[SpeakerId],
) -> Result<Vec<(bool, f64)>> {
    match scorer {
        Scorer::Classifier { params, classes } => {
            let targets = classes.targets(labels, params.num_classes())?;
            params.check_input(&z)?;
            let logits = params.forward(z).logits;
            Ok(logits
                .rows()
                .into_iter()
                .zip(targets)
                .map(|(row, k)| {
                    let pred = argmax(row);
                    (pred == k, -log_softmax_at(row, k))
                })
                .collect())
        }
        Scorer::Prototypes {
            params,
            prototypes,
            tau,
        } => {
            let latent = normalize_rows(params.latent(z)?);
            let sims = latent.dot(&prototypes.vectors.t()) / *tau;
            labels
                .iter()
                .zip(sims.rows())
                .map(|(&l, row)| {
                    let pred = prototypes.speakers[argmax(row)];
                    let loss = match prototypes.speakers.iter().position(|&s| s == l) {
                        Some(k) => -log_softmax_at(row, k),
                        None => f64::INFINITY,
                    };
                    Ok((pred == l, loss))
                })
                .collect()
        }
    }
}

fn argmax(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Accuracy/loss tallies for one bucket's hold-out utterances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BucketScore {
    pub bucket: BucketId,
    pub correct: usize,
    pub total: usize,
    pub loss_sum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefixMetric {
    /// Last bucket of the prefix.
    pub bucket: BucketId,
    pub accuracy: f64,
    pub loss: f64,
    pub utterances: usize,
}

/// Progressive accuracies over growing bucket prefixes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProgressiveReport {
    pub prefixes: Vec<PrefixMetric>,
    pub buckets: Vec<BucketScore>,
}

impl ProgressiveReport {
    /// Prefix metrics over `order`, a subsequence of the scored buckets.
    pub fn from_scores(scores: Vec<BucketScore>, order: &[BucketId]) -> Self {
        let mut prefixes = Vec::with_capacity(order.len());
        let (mut correct, mut total, mut loss) = (0usize, 0usize, 0.0);
        for &b in order {
            if let Some(s) = scores.iter().find(|s| s.bucket == b) {
                correct += s.correct;
                total += s.total;
                loss += s.loss_sum;
            }
            prefixes.push(PrefixMetric {
                bucket: b,
                accuracy: if total > 0 {
                    correct as f64 / total as f64
                } else {
                    0.0
                },
                loss: if total > 0 { loss / total as f64 } else { 0.0 },
                utterances: total,
            });
        }
        Self {
            prefixes,
            buckets: scores,
        }
    }

    /// The hardest task: the longest prefix.
    pub fn last(&self) -> Option<&PrefixMetric> {
        self.prefixes.last()
    }

    pub fn bucket_accuracy(&self, bucket: BucketId) -> Option<f64> {
        self.buckets
            .iter()
            .find(|s| s.bucket == bucket && s.total > 0)
            .map(|s| s.correct as f64 / s.total as f64)
    }
}

/// One bucket's encoder and the hold-out utterances scored through it.
pub struct HoldoutGroup<'a> {
    pub bucket: BucketId,
    pub utterances: Vec<&'a UtteranceFeatures>,
}

/// Scores every group and reports accuracy/loss over bucket prefixes in
/// group order.
pub fn eval_metric_b(
    scorer: &Scorer<'_>,
    encoders: &BTreeMap<BucketId, EncoderParams>,
    groups: &[HoldoutGroup<'_>],
) -> Result<ProgressiveReport> {
    if groups.iter().all(|g| g.utterances.is_empty()) {
        return Err(ConsentError::EmptyHoldout);
    }
    let mut scores = Vec::with_capacity(groups.len());
    for g in groups {
        let enc = encoders
            .get(&g.bucket)
            .ok_or(ConsentError::UnknownBucket(g.bucket))?;
        let mut score = BucketScore {
            bucket: g.bucket,
            correct: 0,
            total: 0,
            loss_sum: 0.0,
        };
        if !g.utterances.is_empty() {
            let emb = enc.embed_batch(&g.utterances)?;
            for (ok, loss) in score_rows(scorer, emb.embeddings.view(), &emb.labels)? {
                score.correct += ok as usize;
                score.total += 1;
                score.loss_sum += loss;
            }
        }
        scores.push(score);
    }
    let order: Vec<BucketId> = groups.iter().map(|g| g.bucket).collect();
    Ok(ProgressiveReport::from_scores(scores, &order))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EarlyStopConfig {
    pub patience: usize,
    pub min_delta: f64,
    pub target_acc: f64,
}

impl Default for EarlyStopConfig {
    fn default() -> Self {
        Self {
            patience: 5,
            min_delta: 0.005,
            target_acc: 0.95,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopRecord {
    pub counter: usize,
    pub best_score: f64,
    pub status: bool,
}

impl Default for EarlyStopRecord {
    fn default() -> Self {
        Self {
            counter: 0,
            best_score: f64::MIN,
            status: false,
        }
    }
}

/// Per-prefix counters. A status, once set, stays set until [`reset`](Self::reset).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopState {
    pub config: EarlyStopConfig,
    pub records: BTreeMap<BucketId, EarlyStopRecord>,
}

impl EarlyStopState {
    pub fn new(config: EarlyStopConfig) -> Self {
        Self {
            config,
            records: BTreeMap::new(),
        }
    }

    pub fn status(&self, bucket: BucketId) -> bool {
        self.records.get(&bucket).is_some_and(|r| r.status)
    }

    pub fn reset(&mut self) {
        self.records.clear();
    }

    /// Improvement-based update for the prefix ending at `bucket`.
    pub fn observe(&mut self, bucket: BucketId, accuracy: f64) {
        let cfg = self.config;
        let rec = self.records.entry(bucket).or_default();
        if rec.status {
            return;
        }
        if accuracy >= rec.best_score + cfg.min_delta {
            rec.best_score = accuracy;
            rec.counter = 0;
        } else {
            rec.counter = (rec.counter + 1).min(cfg.patience);
        }
        rec.status = rec.counter >= cfg.patience || accuracy >= cfg.target_acc;
    }

    /// Band update: the status is set once `accuracy` has stayed within
    /// `tolerance` of `target` for `patience` consecutive observations.
    pub fn observe_band(&mut self, bucket: BucketId, accuracy: f64, target: f64, tolerance: f64) {
        let patience = self.config.patience.max(1);
        let rec = self.records.entry(bucket).or_default();
        if rec.status {
            return;
        }
        rec.best_score = rec.best_score.max(accuracy);
        if (accuracy - target).abs() <= tolerance + 1e-12 {
            rec.counter = (rec.counter + 1).min(patience);
        } else {
            rec.counter = 0;
        }
        rec.status = rec.counter >= patience;
    }
}

/// Applies [`EarlyStopState::observe`] to every prefix of the report.
pub fn update_early_stop(mut state: EarlyStopState, report: &ProgressiveReport) -> EarlyStopState {
    for p in &report.prefixes {
        state.observe(p.bucket, p.accuracy);
    }
    state
}
