//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each export takes plain numbers or comma lists and returns a JSON string.

use std::collections::BTreeMap;

use consent_core::metrics::{eer, min_cllr, min_dcf, DcfParams, TrialSet};
use consent_core::registrar::{longest_unique_buckets, prop_reg, RegPattern};
use consent_core::rng::{self, Stream};
use consent_core::sampler::num_spk_utts;
use consent_core::{BucketId, SpeakerId};
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, String> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| format!("{what}: cannot parse {s:?}")))
        .collect()
}

fn to_json<T: Serialize>(value: &T) -> Result<String, String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

#[derive(Debug, Serialize)]
pub struct Budget {
    pub per_speaker: usize,
    pub rows_per_bucket: Vec<usize>,
    pub total_rows: usize,
    pub max_mem: usize,
}

pub fn budget(max_mem: usize, n_bkt: &str, n_reg_bkt: &str) -> Result<Budget, String> {
    let n: Vec<usize> = parse_list(n_bkt, "speakers per bucket")?;
    let mut reg: Vec<usize> = parse_list(n_reg_bkt, "registrations per bucket")?;
    if reg.is_empty() {
        reg = vec![0; n.len()];
    }
    let per_speaker = num_spk_utts(max_mem, &n, &reg).map_err(|e| e.to_string())?;
    let rows_per_bucket: Vec<usize> = n
        .iter()
        .zip(&reg)
        .map(|(a, b)| (a + b) * per_speaker)
        .collect();
    Ok(Budget {
        per_speaker,
        total_rows: rows_per_bucket.iter().sum(),
        rows_per_bucket,
        max_mem,
    })
}

#[derive(Debug, Serialize)]
pub struct PlannedRound {
    pub round: usize,
    pub buckets: Vec<BucketId>,
    pub speakers: Vec<SpeakerId>,
    pub patterns: BTreeMap<BucketId, RegPattern>,
    pub n_bkt: Vec<usize>,
    pub n_reg_bkt: Vec<usize>,
}

/// Rounds needed to register speakers `first_id..` whose preferred buckets
/// are given in order. Each round takes the first speaker per distinct bucket.
pub fn plan(
    preferred: &str,
    num_buckets: u16,
    per_bucket: usize,
    first_id: SpeakerId,
) -> Result<Vec<PlannedRound>, String> {
    let prefs: Vec<BucketId> = parse_list(preferred, "preferred buckets")?;
    if let Some(b) = prefs.iter().find(|&&b| b >= num_buckets) {
        return Err(format!("bucket {b} is outside 0..{num_buckets}"));
    }
    let buckets: Vec<BucketId> = (0..num_buckets).collect();
    let mut pending: Vec<(BucketId, SpeakerId)> = prefs
        .iter()
        .enumerate()
        .map(|(i, &b)| (b, first_id + i as SpeakerId))
        .collect();
    let (mut b_sofar, mut s_sofar) = (Vec::new(), Vec::new());
    let n_bkt = vec![per_bucket; buckets.len()];
    let mut rounds = Vec::new();
    while !pending.is_empty() {
        let (pb, ps): (Vec<_>, Vec<_>) = pending.iter().copied().unzip();
        let (ub, us) = longest_unique_buckets(&pb, &ps);
        let p = prop_reg(&buckets, &n_bkt, &ub, &b_sofar, &us, &s_sofar);
        rounds.push(PlannedRound {
            round: rounds.len(),
            buckets: ub.clone(),
            speakers: us.clone(),
            patterns: p.patterns,
            n_bkt: p.n_bkt,
            n_reg_bkt: p.n_reg_bkt,
        });
        pending.retain(|(_, s)| !us.contains(s));
        b_sofar.extend(&ub);
        s_sofar.extend(&us);
    }
    Ok(rounds)
}

#[derive(Debug, Serialize)]
pub struct ScoreSummary {
    pub eer: f64,
    pub min_dcf: f64,
    pub min_cllr: f64,
    pub edges: Vec<f64>,
    pub target_hist: Vec<usize>,
    pub nontarget_hist: Vec<usize>,
}

/// Gaussian target scores at `separation` standard deviations above the
/// non-target scores, scored with the verification metrics.
pub fn scores(
    n_target: usize,
    n_nontarget: usize,
    separation: f64,
    p_target: f64,
    seed: u64,
) -> Result<ScoreSummary, String> {
    let params = DcfParams {
        p_target,
        ..DcfParams::default()
    };
    params.validate().map_err(|e| e.to_string())?;
    let unit = Normal::new(0.0, 1.0).map_err(|e| e.to_string())?;
    let mut rng = rng::stream(seed, Stream::Trials, &[]);
    let mut values = Vec::with_capacity(n_target + n_nontarget);
    let mut labels = Vec::with_capacity(n_target + n_nontarget);
    for i in 0..n_target + n_nontarget {
        let target = i < n_target;
        values.push(unit.sample(&mut rng) + if target { separation } else { 0.0 });
        labels.push(target);
    }
    let trials = TrialSet::new(values.clone(), labels.clone()).map_err(|e| e.to_string())?;

    let bins = 40;
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = ((hi - lo) / bins as f64).max(1e-12);
    let mut target_hist = vec![0; bins];
    let mut nontarget_hist = vec![0; bins];
    for (v, t) in values.iter().zip(&labels) {
        let k = (((v - lo) / width) as usize).min(bins - 1);
        if *t {
            target_hist[k] += 1;
        } else {
            nontarget_hist[k] += 1;
        }
    }
    Ok(ScoreSummary {
        eer: eer(&trials),
        min_dcf: min_dcf(&trials, &params),
        min_cllr: min_cllr(&trials),
        edges: (0..=bins).map(|k| lo + k as f64 * width).collect(),
        target_hist,
        nontarget_hist,
    })
}

#[wasm_bindgen]
pub fn replay_budget(max_mem: usize, n_bkt: &str, n_reg_bkt: &str) -> Result<String, JsError> {
    budget(max_mem, n_bkt, n_reg_bkt)
        .and_then(|b| to_json(&b))
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn registration_rounds(
    preferred: &str,
    num_buckets: u16,
    per_bucket: usize,
    first_id: u32,
) -> Result<String, JsError> {
    plan(preferred, num_buckets, per_bucket, first_id)
        .and_then(|r| to_json(&r))
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn score_metrics(
    n_target: usize,
    n_nontarget: usize,
    separation: f64,
    p_target: f64,
    seed: u64,
) -> Result<String, JsError> {
    scores(n_target, n_nontarget, separation, p_target, seed)
        .and_then(|s| to_json(&s))
        .map_err(|e| JsError::new(&e))
}
