//! Speaker verification scoring: trials, EER, minDCF and minCllr.
//!
//! Scores follow the "higher means same speaker" convention and a trial is
//! accepted when its score is at or above the threshold.

use std::fmt::Write as _;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{ConsentError, Result};
use crate::rng::{self, Stream};
use crate::types::LabeledEmbeddings;

/// Trials beyond this count are subsampled.
pub const DEFAULT_MAX_TRIALS: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSet {
    scores: Vec<f64>,
    targets: Vec<bool>,
}

impl TrialSet {
    pub fn new(scores: Vec<f64>, targets: Vec<bool>) -> Result<Self> {
        if scores.len() != targets.len() {
            return Err(ConsentError::MismatchedLengths {
                what: "scores vs labels",
                expected: scores.len(),
                actual: targets.len(),
            });
        }
        if !targets.iter().any(|&t| t) || targets.iter().all(|&t| t) {
            return Err(ConsentError::DegenerateTrials);
        }
        if scores.iter().any(|s| s.is_nan()) {
            return Err(ConsentError::Malformed("NaN trial score".into()));
        }
        Ok(Self { scores, targets })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn targets(&self) -> &[bool] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn num_targets(&self) -> usize {
        self.targets.iter().filter(|&&t| t).count()
    }

    pub fn num_nontargets(&self) -> usize {
        self.len() - self.num_targets()
    }

    /// One `score label` line per trial.
    pub fn to_score_file(&self) -> String {
        let mut out = String::new();
        for (s, &t) in self.scores.iter().zip(&self.targets) {
            let _ = writeln!(out, "{s:e} {}", if t { "target" } else { "nontarget" });
        }
        out
    }

    pub fn from_score_file(text: &str) -> Result<Self> {
        let mut scores = Vec::new();
        let mut targets = Vec::new();
        for (n, line) in text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
        {
            let mut parts = line.split_whitespace();
            let (Some(score), Some(label), None) = (parts.next(), parts.next(), parts.next())
            else {
                return Err(ConsentError::Malformed(format!("score line {}", n + 1)));
            };
            scores.push(
                score
                    .parse::<f64>()
                    .map_err(|e| ConsentError::Malformed(format!("score line {}: {e}", n + 1)))?,
            );
            targets.push(match label {
                "target" => true,
                "nontarget" => false,
                other => {
                    return Err(ConsentError::Malformed(format!(
                        "score line {}: label {other}",
                        n + 1
                    )))
                }
            });
        }
        Self::new(scores, targets)
    }
}

fn cosine(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// Row pair `(i, j)`, `i < j`, for the `k`-th pair in row-major order.
fn pair_at(k: usize, n: usize) -> (usize, usize) {
    // Pairs starting at row i begin at offset start(i); find the last start <= k.
    let start = |i: usize| i * n - i * (i + 1) / 2;
    let (mut lo, mut hi) = (0, n - 1);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if start(mid) <= k {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo, lo + 1 + (k - start(lo)))
}

/// Every unordered pair of hold-out embeddings, or a seeded sample of
/// `max_trials` distinct pairs when there are more.
pub fn build_trials(
    embeddings: &LabeledEmbeddings,
    max_trials: usize,
    seed: u64,
) -> Result<TrialSet> {
    let labels = &embeddings.labels;
    if labels.iter().all(|&l| Some(&l) == labels.first()) {
        return Err(ConsentError::TooFewSpeakers);
    }
    let n = labels.len();
    let total = n * (n - 1) / 2;
    let pairs: Vec<(usize, usize)> = if total <= max_trials {
        (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect()
    } else {
        let mut rng = rng::stream(seed, Stream::Trials, &[n as u64]);
        let mut picked = index::sample(&mut rng, total, max_trials).into_vec();
        picked.sort_unstable();
        picked.into_iter().map(|k| pair_at(k, n)).collect()
    };
    let z = &embeddings.embeddings;
    let scores = pairs
        .iter()
        .map(|&(i, j)| cosine(z.row(i), z.row(j)))
        .collect();
    let targets = pairs.iter().map(|&(i, j)| labels[i] == labels[j]).collect();
    TrialSet::new(scores, targets)
}

/// `(P_miss, P_fa)` for every distinct score threshold, ascending, followed
/// by the reject-all point.
fn operating_points(trials: &TrialSet) -> Vec<(f64, f64)> {
    let mut order: Vec<usize> = (0..trials.len()).collect();
    order.sort_by(|&a, &b| trials.scores[a].total_cmp(&trials.scores[b]));
    let nt = trials.num_targets() as f64;
    let nn = trials.num_nontargets() as f64;
    let mut points = Vec::with_capacity(order.len() + 1);
    let (mut missed, mut rejected) = (0usize, 0usize);
    let mut k = 0;
    while k < order.len() {
        points.push((missed as f64 / nt, 1.0 - rejected as f64 / nn));
        let s = trials.scores[order[k]];
        while k < order.len() && trials.scores[order[k]] == s {
            if trials.targets[order[k]] {
                missed += 1;
            } else {
                rejected += 1;
            }
            k += 1;
        }
    }
    points.push((1.0, 0.0));
    points
}

/// Equal error rate, interpolated linearly between adjacent thresholds.
pub fn eer(trials: &TrialSet) -> f64 {
    let points = operating_points(trials);
    for w in points.windows(2) {
        let (m0, f0) = w[0];
        let (m1, f1) = w[1];
        if m0 == f0 {
            return m0;
        }
        if m0 < f0 && m1 >= f1 {
            let t = (f0 - m0) / ((m1 - m0) - (f1 - f0));
            return m0 + t * (m1 - m0);
        }
    }
    let (m, _) = points[points.len() - 1];
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfParams {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) || self.c_miss <= 0.0 || self.c_fa <= 0.0 {
            return Err(ConsentError::InvalidConfig(format!(
                "detection cost parameters {self:?}"
            )));
        }
        Ok(())
    }
}

/// Minimum normalized detection cost over all thresholds.
pub fn min_dcf(trials: &TrialSet, params: &DcfParams) -> f64 {
    let DcfParams {
        p_target,
        c_miss,
        c_fa,
    } = *params;
    let norm = (c_miss * p_target).min(c_fa * (1.0 - p_target));
    operating_points(trials)
        .into_iter()
        .map(|(miss, fa)| (c_miss * p_target * miss + c_fa * (1.0 - p_target) * fa) / norm)
        .fold(f64::INFINITY, f64::min)
}

/// Isotonic (non-decreasing) fit of target indicators against score, with
/// tied scores pooled. Returns the fitted posterior per trial.
pub fn pav_posteriors(trials: &TrialSet) -> Vec<f64> {
    let mut order: Vec<usize> = (0..trials.len()).collect();
    order.sort_by(|&a, &b| trials.scores[a].total_cmp(&trials.scores[b]));
    // Blocks of (sum, weight, first sorted position).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::new();
    let mut k = 0;
    while k < order.len() {
        let s = trials.scores[order[k]];
        let start = k;
        let mut sum = 0.0;
        while k < order.len() && trials.scores[order[k]] == s {
            sum += trials.targets[order[k]] as u8 as f64;
            k += 1;
        }
        blocks.push((sum, (k - start) as f64, start));
        while blocks.len() > 1 {
            let (s1, w1, _) = blocks[blocks.len() - 1];
            let (s0, w0, p0) = blocks[blocks.len() - 2];
            if s0 / w0 < s1 / w1 {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            blocks.push((s0 + s1, w0 + w1, p0));
        }
    }
    let mut fitted = vec![0.0; trials.len()];
    for (n, &(sum, weight, start)) in blocks.iter().enumerate() {
        let end = blocks.get(n + 1).map_or(order.len(), |b| b.2);
        for &i in &order[start..end] {
            fitted[i] = sum / weight;
        }
    }
    fitted
}

/// Log-likelihood-ratio cost after optimal monotone calibration.
pub fn min_cllr(trials: &TrialSet) -> f64 {
    let posteriors = pav_posteriors(trials);
    let nt = trials.num_targets() as f64;
    let nn = trials.num_nontargets() as f64;
    let (mut tar, mut non) = (0.0, 0.0);
    for (&p, &is_target) in posteriors.iter().zip(&trials.targets) {
        // The fitted posterior carries the empirical prior nt/(nt+nn); divide it out.
        if is_target {
            tar += (1.0 + (1.0 - p) / p * (nt / nn)).log2();
        } else {
            non += (1.0 + p / (1.0 - p) * (nn / nt)).log2();
        }
    }
    0.5 * (tar / nt + non / nn)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub eer: f64,
    pub min_dcf: f64,
    pub min_cllr: f64,
    pub targets: usize,
    pub nontargets: usize,
}

pub fn verification_report(trials: &TrialSet, dcf: &DcfParams) -> VerificationReport {
    VerificationReport {
        eer: eer(trials),
        min_dcf: min_dcf(trials, dcf),
        min_cllr: min_cllr(trials),
        targets: trials.num_targets(),
        nontargets: trials.num_nontargets(),
    }
}
