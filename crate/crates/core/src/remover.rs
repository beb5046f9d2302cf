//! Removal and re-registration of registered speakers.
//!
//! Encoders of the affected buckets are retrained on their residual speakers
//! while the classifier relearns from a buffer without the removed speakers.
//! A removal bucket is settled once its accuracy over the full original
//! hold-out sits at the residual fraction.

use std::collections::{BTreeMap, BTreeSet};

use log::info;
use serde::{Deserialize, Serialize};

use crate::datastore::Dataset;
use crate::error::{ConsentError, Result};
use crate::trainer::{
    BandPlan, BucketPlan, EpochObserver, PhaseOutcome, PhasePlan, TrainingSession,
};
use crate::types::{BucketId, SpeakerId};

/// Bias given to masked head rows so they never win the softmax.
const MASK_BIAS: f64 = -1.0e4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalPattern {
    /// Bucket loses speakers and retrains its encoder.
    Pattern1,
    /// Bucket untouched.
    Pattern2,
}

pub fn strategy_selct_unreg(bucket: BucketId, unreg_buckets: &[BucketId]) -> RemovalPattern {
    if unreg_buckets.contains(&bucket) {
        RemovalPattern::Pattern1
    } else {
        RemovalPattern::Pattern2
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovalPlan {
    pub n_bkt: Vec<usize>,
    pub s_res: BTreeMap<BucketId, Vec<SpeakerId>>,
    pub patterns: BTreeMap<BucketId, RemovalPattern>,
}

/// Residual counts and patterns. An empty residual set marks a whole-bucket
/// removal; a single residual speaker cannot be trained contrastively.
pub fn prop_unreg(
    buckets: &[BucketId],
    n_bkt: &[usize],
    unreg_buckets: &[BucketId],
    s_res: &BTreeMap<BucketId, Vec<SpeakerId>>,
) -> Result<RemovalPlan> {
    let mut plan = RemovalPlan {
        n_bkt: Vec::with_capacity(buckets.len()),
        s_res: BTreeMap::new(),
        patterns: BTreeMap::new(),
    };
    for &b in unreg_buckets {
        if !buckets.contains(&b) {
            return Err(ConsentError::UnknownBucket(b));
        }
    }
    for (&b, &n_b) in buckets.iter().zip(n_bkt) {
        let pattern = strategy_selct_unreg(b, unreg_buckets);
        if pattern == RemovalPattern::Pattern1 {
            let res = s_res.get(&b).cloned().unwrap_or_default();
            if res.len() == 1 {
                return Err(ConsentError::TooFewResiduals {
                    bucket: b,
                    residual: 1,
                });
            }
            plan.n_bkt.push(res.len());
            plan.s_res.insert(b, res);
        } else {
            plan.n_bkt.push(n_b);
        }
        plan.patterns.insert(b, pattern);
    }
    Ok(plan)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketOutcome {
    pub bucket: BucketId,
    pub speakers: Vec<SpeakerId>,
    /// Accuracy over the bucket's full hold-out at the last epoch.
    pub accuracy: Option<f64>,
    pub target: f64,
    pub excluded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalReport {
    pub buckets: Vec<BucketOutcome>,
    pub epochs: usize,
    pub converged: bool,
    pub prefix_accuracies: Vec<(BucketId, f64)>,
}

fn report(outcome: &PhaseOutcome, mut buckets: Vec<BucketOutcome>) -> RemovalReport {
    let last = outcome.last();
    for b in &mut buckets {
        b.accuracy = last
            .and_then(|r| r.bands.iter().find(|m| m.bucket == b.bucket))
            .map(|m| m.accuracy);
    }
    RemovalReport {
        buckets,
        epochs: outcome.epochs_run,
        converged: outcome.converged,
        prefix_accuracies: last
            .map(|r| {
                r.report
                    .prefixes
                    .iter()
                    .map(|p| (p.bucket, p.accuracy))
                    .collect()
            })
            .unwrap_or_default(),
    }
}

fn sorted_unique(speakers: &[SpeakerId]) -> Vec<SpeakerId> {
    let set: BTreeSet<SpeakerId> = speakers.iter().copied().collect();
    set.into_iter().collect()
}

/// Retrains with the speakers of `request` removed from their buckets.
pub fn remove_speakers(
    session: &mut TrainingSession,
    data: &Dataset,
    request: &BTreeMap<BucketId, Vec<SpeakerId>>,
    observer: &mut dyn EpochObserver,
) -> Result<RemovalReport> {
    let active = session.active_buckets();
    let mut s_res = BTreeMap::new();
    let mut removing = BTreeMap::new();
    for (&b, speakers) in request {
        if !active.contains(&b) {
            return Err(ConsentError::UnknownBucket(b));
        }
        let gone = sorted_unique(speakers);
        if gone.is_empty() {
            continue;
        }
        let members = session.members(b)?;
        if let Some(&s) = gone.iter().find(|s| !members.contains(s)) {
            return Err(ConsentError::UnknownSpeaker(s));
        }
        s_res.insert(
            b,
            members
                .iter()
                .copied()
                .filter(|s| !gone.contains(s))
                .collect::<Vec<_>>(),
        );
        removing.insert(b, gone);
    }
    let unreg: Vec<BucketId> = removing.keys().copied().collect();
    let n_bkt: Vec<usize> = active.iter().map(|b| session.membership[b].len()).collect();
    let plan = prop_unreg(&active, &n_bkt, &unreg, &s_res)?;

    let mut outcomes = Vec::new();
    let mut bands = Vec::new();
    for (&b, gone) in &removing {
        let residual = &plan.s_res[&b];
        let original = session.membership[&b].clone();
        session.membership.insert(b, residual.clone());
        session.removed.entry(b).or_default().extend(gone);
        let excluded = residual.is_empty();
        if excluded {
            session.excluded.insert(b);
            session.encoders.remove(&b);
        } else {
            if session.config.reset_removal_encoders {
                session.reset_encoder(b);
            }
            bands.push(BandPlan {
                bucket: b,
                speakers: original.clone(),
                target: residual.len() as f64 / original.len() as f64,
            });
        }
        outcomes.push(BucketOutcome {
            bucket: b,
            speakers: gone.clone(),
            accuracy: None,
            target: if excluded {
                0.0
            } else {
                residual.len() as f64 / original.len() as f64
            },
            excluded,
        });
    }
    if session.config.mask_removed {
        mask_rows(session, removing.values().flatten().copied());
    }

    let buckets: Vec<BucketPlan> = active
        .iter()
        .zip(&plan.n_bkt)
        .filter(|(b, _)| !session.excluded.contains(b))
        .map(|(&b, &n_b)| BucketPlan {
            bucket: b,
            speakers: session.membership[&b].clone(),
            n_b,
            n_reg: 0,
            train_encoder: plan.patterns[&b] == RemovalPattern::Pattern1,
        })
        .collect();
    let phase = PhasePlan {
        prefixes: buckets
            .iter()
            .filter(|p| !removing.contains_key(&p.bucket))
            .map(|p| (p.bucket, p.speakers.clone()))
            .collect(),
        buckets,
        bands,
        epochs: session.config.train.epochs,
    };
    info!("removing {:?}", removing);
    session.reset_optimizer();
    let outcome = session.run_phase(data, &phase, observer)?;
    Ok(report(&outcome, outcomes))
}

fn mask_rows(session: &mut TrainingSession, speakers: impl Iterator<Item = SpeakerId>) {
    for s in speakers {
        if let Some(k) = session.classes.row_of(s) {
            if k < session.classifier.num_classes() {
                session.classifier.head.row_mut(k).fill(0.0);
                session.classifier.head_bias[k] = MASK_BIAS;
            }
        }
    }
}

/// Brings previously removed speakers back into their buckets.
pub fn reregister_speakers(
    session: &mut TrainingSession,
    data: &Dataset,
    request: &BTreeMap<BucketId, Vec<SpeakerId>>,
    observer: &mut dyn EpochObserver,
) -> Result<RemovalReport> {
    let mut restoring = BTreeMap::new();
    for (&b, speakers) in request {
        let back = sorted_unique(speakers);
        if back.is_empty() {
            continue;
        }
        let removed = session
            .removed
            .get(&b)
            .map(Vec::as_slice)
            .unwrap_or_default();
        if let Some(&s) = back.iter().find(|s| !removed.contains(s)) {
            return Err(ConsentError::NotPreviouslyRemoved {
                speaker: s,
                bucket: b,
            });
        }
        restoring.insert(b, back);
    }
    if restoring.is_empty() {
        return Ok(RemovalReport {
            buckets: Vec::new(),
            epochs: 0,
            converged: true,
            prefix_accuracies: Vec::new(),
        });
    }

    let mut outcomes = Vec::new();
    let mut bands = Vec::new();
    for (&b, back) in &restoring {
        if let Some(list) = session.removed.get_mut(&b) {
            list.retain(|s| !back.contains(s));
            if list.is_empty() {
                session.removed.remove(&b);
            }
        }
        let members = session.membership.entry(b).or_default();
        members.extend(back);
        members.sort_unstable();
        let members = members.clone();
        if members.len() < 2 {
            return Err(ConsentError::TooFewResiduals {
                bucket: b,
                residual: members.len(),
            });
        }
        if session.excluded.remove(&b) {
            session.reset_encoder(b);
        }
        if session.config.mask_removed {
            for &s in back {
                if let Some(k) = session.classes.row_of(s) {
                    session.classifier.head_bias[k] = 0.0;
                }
            }
        }
        bands.push(BandPlan {
            bucket: b,
            speakers: members,
            target: 1.0,
        });
        outcomes.push(BucketOutcome {
            bucket: b,
            speakers: back.clone(),
            accuracy: None,
            target: 1.0,
            excluded: false,
        });
    }

    let buckets: Vec<BucketPlan> = session
        .active_buckets()
        .into_iter()
        .map(|b| BucketPlan {
            bucket: b,
            speakers: session.membership[&b].clone(),
            n_b: session.membership[&b].len(),
            n_reg: 0,
            train_encoder: restoring.contains_key(&b),
        })
        .collect();
    let phase = PhasePlan {
        prefixes: buckets
            .iter()
            .filter(|p| !restoring.contains_key(&p.bucket))
            .map(|p| (p.bucket, p.speakers.clone()))
            .collect(),
        buckets,
        bands,
        epochs: session.config.train.epochs,
    };
    info!("re-registering {:?}", restoring);
    session.reset_optimizer();
    let outcome = session.run_phase(data, &phase, observer)?;
    Ok(report(&outcome, outcomes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn five_each() -> (Vec<BucketId>, Vec<usize>) {
        ((0..8).collect(), vec![5; 8])
    }

    #[test]
    fn pattern_selection() {
        assert_eq!(strategy_selct_unreg(4, &[4]), RemovalPattern::Pattern1);
        assert_eq!(strategy_selct_unreg(2, &[4]), RemovalPattern::Pattern2);
        assert_eq!(strategy_selct_unreg(2, &[]), RemovalPattern::Pattern2);
    }

    #[test]
    fn single_removal_plan() {
        let (b, n) = five_each();
        let res = BTreeMap::from([(4, vec![21, 22, 23, 24])]);
        let plan = prop_unreg(&b, &n, &[4], &res).unwrap();
        assert_eq!(plan.n_bkt[4], 4);
        assert_eq!(plan.s_res[&4], vec![21, 22, 23, 24]);
        assert_eq!(plan.patterns[&4], RemovalPattern::Pattern1);
        assert!(b
            .iter()
            .filter(|&&x| x != 4)
            .all(|x| plan.patterns[x] == RemovalPattern::Pattern2));
        assert_eq!(plan, prop_unreg(&b, &n, &[4], &res).unwrap());
    }

    #[test]
    fn three_removed_and_four_removed() {
        let (b, n) = five_each();
        let plan = prop_unreg(&b, &n, &[4], &BTreeMap::from([(4, vec![23, 24])])).unwrap();
        assert_eq!(plan.n_bkt[4], 2);
        assert_eq!(
            prop_unreg(&b, &n, &[4], &BTreeMap::from([(4, vec![24])])),
            Err(ConsentError::TooFewResiduals {
                bucket: 4,
                residual: 1
            })
        );
    }

    #[test]
    fn whole_bucket_has_no_residuals() {
        let (b, n) = five_each();
        let plan = prop_unreg(&b, &n, &[4], &BTreeMap::from([(4, vec![])])).unwrap();
        assert_eq!(plan.n_bkt[4], 0);
    }
}
