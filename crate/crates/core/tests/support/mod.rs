//! Brute-force oracles and instance generators shared by the test targets.
#![allow(dead_code)]

use consent_core::encoder::{grad_sup_contrastive, grad_unsup_contrastive, EncoderParams};
use std::collections::BTreeMap;

use consent_core::metrics::{DcfParams, TrialSet};
use consent_core::registrar::{prop_reg, strategy_selct_reg, RegPattern};
use consent_core::remover::{prop_unreg, strategy_selct_unreg, RemovalPattern};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Miss and false-alarm rates when accepting every score >= `threshold`,
/// counted from scratch.
pub fn rates_at(t: &TrialSet, threshold: f64) -> (f64, f64) {
    let (mut miss, mut fa) = (0.0, 0.0);
    for (&s, &target) in t.scores().iter().zip(t.targets()) {
        if target && s < threshold {
            miss += 1.0;
        }
        if !target && s >= threshold {
            fa += 1.0;
        }
    }
    (
        miss / t.num_targets() as f64,
        fa / t.num_nontargets() as f64,
    )
}

/// Operating points at every distinct score plus the reject-all point.
pub fn sweep(t: &TrialSet) -> Vec<(f64, f64)> {
    let mut thresholds: Vec<f64> = t.scores().to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut points: Vec<_> = thresholds.iter().map(|&th| rates_at(t, th)).collect();
    points.push((1.0, 0.0));
    points
}

pub fn eer_oracle(t: &TrialSet) -> f64 {
    let points = sweep(t);
    for w in points.windows(2) {
        let ((m0, f0), (m1, f1)) = (w[0], w[1]);
        let d0 = m0 - f0;
        let d1 = m1 - f1;
        if d0 == 0.0 {
            return m0;
        }
        if d0 < 0.0 && d1 >= 0.0 {
            let a = -d0 / (d1 - d0);
            return m0 + a * (m1 - m0);
        }
    }
    1.0
}

pub fn dcf_oracle(t: &TrialSet, p: &DcfParams) -> f64 {
    let norm = (p.c_miss * p.p_target).min(p.c_fa * (1.0 - p.p_target));
    sweep(t)
        .into_iter()
        .map(|(m, f)| (p.c_miss * p.p_target * m + p.c_fa * (1.0 - p.p_target) * f) / norm)
        .fold(f64::INFINITY, f64::min)
}

/// Isotonic fit by the min-max formula over tie groups, cubic time.
pub fn isotonic_oracle(t: &TrialSet) -> Vec<f64> {
    let mut groups: Vec<(f64, f64, f64)> = Vec::new();
    let mut order: Vec<usize> = (0..t.len()).collect();
    order.sort_by(|&a, &b| t.scores()[a].total_cmp(&t.scores()[b]));
    for &i in &order {
        let y = t.targets()[i] as u8 as f64;
        match groups.last_mut() {
            Some(g) if g.0 == t.scores()[i] => {
                g.1 += y;
                g.2 += 1.0;
            }
            _ => groups.push((t.scores()[i], y, 1.0)),
        }
    }
    let g = groups.len();
    let fitted: Vec<f64> = (0..g)
        .map(|i| {
            (0..=i)
                .map(|j| {
                    (i..g)
                        .map(|k| {
                            let (s, w) = groups[j..=k]
                                .iter()
                                .fold((0.0, 0.0), |acc, x| (acc.0 + x.1, acc.1 + x.2));
                            s / w
                        })
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    t.scores()
        .iter()
        .map(|s| fitted[groups.iter().position(|x| x.0 == *s).unwrap()])
        .collect()
}

pub fn cllr_oracle(t: &TrialSet) -> f64 {
    let post = isotonic_oracle(t);
    let nt = t.num_targets() as f64;
    let nn = t.num_nontargets() as f64;
    let prior_odds = nt / nn;
    let (mut tar, mut non) = (0.0, 0.0);
    for (&p, &target) in post.iter().zip(t.targets()) {
        let p = p.clamp(1e-300, 1.0 - 1e-16);
        let llr_odds = p / (1.0 - p) / prior_odds;
        if target {
            tar += (1.0 + 1.0 / llr_odds).log2();
        } else {
            non += (1.0 + llr_odds).log2();
        }
    }
    0.5 * (tar / nt + non / nn)
}

pub fn random_trials(rng: &mut ChaCha8Rng) -> TrialSet {
    let n = rng.random_range(4..60);
    let coarse = rng.random_bool(0.5);
    loop {
        let targets: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        if !targets.iter().any(|&x| x) || targets.iter().all(|&x| x) {
            continue;
        }
        let scores = targets
            .iter()
            .map(|&t| {
                let s: f64 = rng.random_range(-1.0..1.0) + if t { 0.5 } else { 0.0 };
                if coarse {
                    (s * 4.0).round() / 4.0
                } else {
                    s
                }
            })
            .collect();
        return TrialSet::new(scores, targets).unwrap();
    }
}

/// Keeps position `i` when no earlier position holds the same bucket.
pub fn first_occurrence_oracle(buckets: &[u16], speakers: &[u32]) -> (Vec<u16>, Vec<u32>) {
    let keep: Vec<usize> = (0..buckets.len())
        .filter(|&i| !buckets[..i].contains(&buckets[i]))
        .collect();
    (
        keep.iter().map(|&i| buckets[i]).collect(),
        keep.iter().map(|&i| speakers[i]).collect(),
    )
}

pub const F: usize = 4;
pub const E: usize = 6;
pub const T: usize = 3;
pub const H: f64 = 1e-5;

pub fn random_frames(rng: &mut ChaCha8Rng, n: usize) -> Vec<Array2<f64>> {
    (0..n)
        .map(|_| Array2::from_shape_fn((T, F), |_| rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// The attention bias shifts every frame score equally, so softmax pooling
/// ignores it and its gradient is exactly zero; finite differences only
/// see roundoff there. It is checked separately.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let last = analytic.len() - 1;
    assert!(
        analytic[last].abs() < 1e-12,
        "attention bias gradient {}",
        analytic[last]
    );
    analytic[..last]
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

pub fn numeric_grad(params: &EncoderParams, loss: impl Fn(&EncoderParams) -> f64) -> Vec<f64> {
    let flat = params.to_flat();
    (0..flat.len())
        .map(|i| {
            let mut up = flat.clone();
            let mut down = flat.clone();
            up[i] += H;
            down[i] -= H;
            let lu = loss(&EncoderParams::from_flat(F, E, &up).unwrap());
            let ld = loss(&EncoderParams::from_flat(F, E, &down).unwrap());
            (lu - ld) / (2.0 * H)
        })
        .collect()
}

/// Worst relative error of the supervised contrastive gradient over
/// `instances` random problems.
pub fn supervised_worst(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for instance in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(instance);
        let params = EncoderParams::init(F, E, &mut rng);
        let speakers = rng.random_range(1..4u32);
        let mut labels: Vec<u32> = (0..speakers).flat_map(|s| [s, s]).collect();
        for _ in 0..rng.random_range(0..3) {
            labels.push(rng.random_range(0..speakers));
        }
        let frames = random_frames(&mut rng, labels.len());
        let tau = rng.random_range(0.1..1.0);
        let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
        let (_, grad) = grad_sup_contrastive(&params, &views, &labels, tau).unwrap();
        let numeric = numeric_grad(&params, |p| {
            grad_sup_contrastive(p, &views, &labels, tau).unwrap().0
        });
        worst = worst.max(max_relative_error(&grad.to_flat(), &numeric));
    }
    worst
}

/// Worst relative error of the two-view contrastive gradient.
pub fn two_view_worst(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for instance in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + instance);
        let params = EncoderParams::init(F, E, &mut rng);
        let n = rng.random_range(2..5);
        let a = random_frames(&mut rng, n);
        let b = random_frames(&mut rng, n);
        let tau = rng.random_range(0.1..1.0);
        let (_, grad) = grad_unsup_contrastive(&params, &a, &b, tau).unwrap();
        let numeric = numeric_grad(&params, |p| {
            grad_unsup_contrastive(p, &a, &b, tau).unwrap().0
        });
        worst = worst.max(max_relative_error(&grad.to_flat(), &numeric));
    }
    worst
}

const BUCKETS: [u16; 4] = [0, 1, 2, 3];

fn subset(mask: u32) -> Vec<u16> {
    BUCKETS
        .iter()
        .copied()
        .filter(|b| mask & (1 << b) != 0)
        .collect()
}

/// Exhaustive check of the four registration patterns and the plans built
/// from them, over every pair of bucket subsets.
pub fn check_registration_tables() {
    for unique_mask in 0..16 {
        for sofar_mask in 0..16 {
            let unique = subset(unique_mask);
            let sofar = subset(sofar_mask);
            for b in BUCKETS {
                let expected = match (unique.contains(&b), sofar.contains(&b)) {
                    (true, false) => RegPattern::Pattern1,
                    (false, true) => RegPattern::Pattern2,
                    (true, true) => RegPattern::Pattern3,
                    (false, false) => RegPattern::Pattern4,
                };
                assert_eq!(strategy_selct_reg(b, &unique, &sofar), expected);
            }
            let new_speakers: Vec<u32> = unique.iter().map(|&b| 100 + b as u32).collect();
            let sofar_speakers: Vec<u32> = sofar.iter().map(|&b| 200 + b as u32).collect();
            let plan = prop_reg(
                &BUCKETS,
                &[5; 4],
                &unique,
                &sofar,
                &new_speakers,
                &sofar_speakers,
            );
            for (k, b) in BUCKETS.iter().enumerate() {
                let pattern = plan.patterns[b];
                assert_eq!(plan.n_reg_bkt[k] == 1, pattern.registers());
                let earlier = sofar.contains(b) as usize;
                let (speakers, n) = match pattern {
                    RegPattern::Pattern1 => (vec![100 + *b as u32], 5),
                    RegPattern::Pattern2 => (vec![200 + *b as u32], 5 + earlier),
                    RegPattern::Pattern3 => (vec![200 + *b as u32, 100 + *b as u32], 5 + earlier),
                    RegPattern::Pattern4 => (vec![], 5),
                };
                assert_eq!(plan.s_reg[b], speakers);
                assert_eq!(plan.n_bkt[k], n);
            }
        }
    }
}

/// Exhaustive check of the two removal patterns and their plans.
pub fn check_removal_tables() {
    for mask in 0..16 {
        let unreg = subset(mask);
        for b in BUCKETS {
            let expected = if unreg.contains(&b) {
                RemovalPattern::Pattern1
            } else {
                RemovalPattern::Pattern2
            };
            assert_eq!(strategy_selct_unreg(b, &unreg), expected);
        }
        let s_res: BTreeMap<u16, Vec<u32>> = unreg
            .iter()
            .map(|&b| (b, vec![10 * b as u32, 10 * b as u32 + 1]))
            .collect();
        let plan = prop_unreg(&BUCKETS, &[5; 4], &unreg, &s_res).unwrap();
        for (k, b) in BUCKETS.iter().enumerate() {
            if unreg.contains(b) {
                assert_eq!(plan.patterns[b], RemovalPattern::Pattern1);
                assert_eq!(plan.n_bkt[k], 2);
                assert_eq!(plan.s_res[b], s_res[b]);
            } else {
                assert_eq!(plan.patterns[b], RemovalPattern::Pattern2);
                assert_eq!(plan.n_bkt[k], 5);
            }
        }
        assert_eq!(plan, prop_unreg(&BUCKETS, &[5; 4], &unreg, &s_res).unwrap());
    }
}
