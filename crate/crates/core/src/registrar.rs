//! Dynamic registration of new speakers.
//!
//! Each round places at most one pending speaker per bucket: every pending
//! speaker picks the bucket holding the nearest prototype to its mean
//! hold-out embedding, and only the first speaker to claim a bucket is
//! registered there this round.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use log::info;
use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::datastore::{Dataset, Retention};
use crate::error::{ConsentError, Result};
use crate::trainer::{BucketPlan, EpochObserver, PhaseOutcome, PhasePlan, TrainingSession};
use crate::types::{BucketId, SpeakerId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub speaker: SpeakerId,
    pub bucket: BucketId,
    pub vector: Vec<f64>,
}

/// Hold-out embeddings of one speaker through one bucket's encoder.
#[derive(Debug, Clone)]
pub struct EmbeddingGroup {
    pub speaker: SpeakerId,
    pub bucket: BucketId,
    pub embeddings: Array2<f64>,
}

/// Mean embedding per group.
pub fn compute_prototypes(groups: &[EmbeddingGroup]) -> Result<Vec<Prototype>> {
    groups
        .iter()
        .map(|g| {
            let mean = g
                .embeddings
                .mean_axis(Axis(0))
                .ok_or(ConsentError::EmptyGroup {
                    speaker: g.speaker,
                    bucket: g.bucket,
                })?;
            Ok(Prototype {
                speaker: g.speaker,
                bucket: g.bucket,
                vector: mean.to_vec(),
            })
        })
        .collect()
}

/// Squared Euclidean distance.
pub fn l2_distance(z: &[f64], c: &[f64]) -> Result<f64> {
    if z.len() != c.len() {
        return Err(ConsentError::DimMismatch {
            left: z.len(),
            right: c.len(),
        });
    }
    Ok(z.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Bucket of the nearest prototype. `new_means[b]` is the new speaker's
/// mean embedding under bucket `b`'s encoder. Ties go to the lowest bucket,
/// then the lowest speaker.
pub fn select_optimal_bucket(
    new_means: &BTreeMap<BucketId, Vec<f64>>,
    prototypes: &[Prototype],
) -> Result<BucketId> {
    let mut best: Option<(f64, BucketId, SpeakerId)> = None;
    for p in prototypes {
        let z = new_means
            .get(&p.bucket)
            .ok_or(ConsentError::UnknownBucket(p.bucket))?;
        let d = l2_distance(z, &p.vector)?;
        let better = match best {
            None => true,
            Some((bd, bb, bs)) => d < bd || (d == bd && (p.bucket, p.speaker) < (bb, bs)),
        };
        if better {
            best = Some((d, p.bucket, p.speaker));
        }
    }
    best.map(|(_, b, _)| b).ok_or(ConsentError::NoPrototypes)
}

/// Keeps each `(bucket, speaker)` pair whose bucket has not appeared before.
pub fn longest_unique_buckets(
    buckets: &[BucketId],
    speakers: &[SpeakerId],
) -> (Vec<BucketId>, Vec<SpeakerId>) {
    longest_unique_buckets_counted(buckets, speakers).0
}

/// Same as [`longest_unique_buckets`], also returning the number of
/// elementary steps taken.
pub fn longest_unique_buckets_counted(
    buckets: &[BucketId],
    speakers: &[SpeakerId],
) -> ((Vec<BucketId>, Vec<SpeakerId>), usize) {
    let mut seen = HashSet::new();
    let mut out_b = Vec::new();
    let mut out_s = Vec::new();
    let mut ops = 0;
    for (&b, &s) in buckets.iter().zip(speakers) {
        ops += 1;
        if seen.insert(b) {
            out_b.push(b);
            out_s.push(s);
        }
    }
    ((out_b, out_s), ops)
}

/// Bookkeeping carried between registration rounds.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrationRoundState {
    pub n_round: usize,
    /// Speakers still waiting, ascending.
    pub pending: Vec<SpeakerId>,
    /// Speakers registered last round.
    pub last_speakers: Vec<SpeakerId>,
    pub last_buckets: Vec<BucketId>,
    /// Registrations from rounds before the current one.
    pub b_sofar: Vec<BucketId>,
    pub s_sofar: Vec<SpeakerId>,
    pub pcnt_old: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundSelection {
    /// Per pending speaker (ascending), its optimal bucket.
    pub optimal: Vec<(SpeakerId, BucketId)>,
    pub unique_buckets: Vec<BucketId>,
    pub unique_speakers: Vec<SpeakerId>,
    pub b_sofar: Vec<BucketId>,
    pub s_sofar: Vec<SpeakerId>,
}

/// Optimal buckets for this round's pending speakers.
///
/// `new_means[s][b]` is pending speaker `s`'s mean hold-out embedding under
/// bucket `b`'s encoder.
pub fn opt_spk_bkt(
    state: &RegistrationRoundState,
    prototypes: &[Prototype],
    new_means: &BTreeMap<SpeakerId, BTreeMap<BucketId, Vec<f64>>>,
) -> Result<RoundSelection> {
    let (mut b_sofar, mut s_sofar) = (state.b_sofar.clone(), state.s_sofar.clone());
    if state.n_round > 0 {
        b_sofar.extend(&state.last_buckets);
        s_sofar.extend(&state.last_speakers);
    }
    let skip: BTreeSet<SpeakerId> = state.last_speakers.iter().copied().collect();
    let mut pending: Vec<SpeakerId> = state
        .pending
        .iter()
        .copied()
        .filter(|s| !skip.contains(s))
        .collect();
    pending.sort_unstable();
    let mut optimal = Vec::with_capacity(pending.len());
    for s in pending {
        let means = new_means.get(&s).ok_or(ConsentError::UnknownSpeaker(s))?;
        optimal.push((s, select_optimal_bucket(means, prototypes)?));
    }
    let b_star: Vec<BucketId> = optimal.iter().map(|&(_, b)| b).collect();
    let s_star: Vec<SpeakerId> = optimal.iter().map(|&(s, _)| s).collect();
    let (unique_buckets, unique_speakers) = longest_unique_buckets(&b_star, &s_star);
    Ok(RoundSelection {
        optimal,
        unique_buckets,
        unique_speakers,
        b_sofar,
        s_sofar,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegPattern {
    /// New registration only.
    Pattern1,
    /// Earlier registrations only.
    Pattern2,
    /// Both.
    Pattern3,
    /// Untouched.
    Pattern4,
}

impl RegPattern {
    pub fn registers(self) -> bool {
        matches!(self, Self::Pattern1 | Self::Pattern3)
    }
}

pub fn strategy_selct_reg(
    bucket: BucketId,
    unique_buckets: &[BucketId],
    b_sofar: &[BucketId],
) -> RegPattern {
    match (unique_buckets.contains(&bucket), b_sofar.contains(&bucket)) {
        (true, false) => RegPattern::Pattern1,
        (false, true) => RegPattern::Pattern2,
        (true, true) => RegPattern::Pattern3,
        (false, false) => RegPattern::Pattern4,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegistrationPlan {
    pub n_bkt: Vec<usize>,
    pub n_reg_bkt: Vec<usize>,
    /// Speakers added on top of the original members: earlier registrations
    /// first, then this round's speaker.
    pub s_reg: BTreeMap<BucketId, Vec<SpeakerId>>,
    pub patterns: BTreeMap<BucketId, RegPattern>,
}

/// Per-bucket speaker counts, registration flags, added speakers and patterns.
pub fn prop_reg(
    buckets: &[BucketId],
    n_bkt: &[usize],
    unique_buckets: &[BucketId],
    b_sofar: &[BucketId],
    unique_speakers: &[SpeakerId],
    s_sofar: &[SpeakerId],
) -> RegistrationPlan {
    let mut plan = RegistrationPlan {
        n_bkt: Vec::with_capacity(buckets.len()),
        n_reg_bkt: Vec::with_capacity(buckets.len()),
        s_reg: BTreeMap::new(),
        patterns: BTreeMap::new(),
    };
    for (&b, &n_b) in buckets.iter().zip(n_bkt) {
        let sofar: Vec<SpeakerId> = b_sofar
            .iter()
            .zip(s_sofar)
            .filter(|(&sb, _)| sb == b)
            .map(|(_, &s)| s)
            .collect();
        let new = unique_buckets
            .iter()
            .position(|&u| u == b)
            .map(|i| unique_speakers[i]);
        let pattern = strategy_selct_reg(b, unique_buckets, b_sofar);
        let (speakers, n, reg) = match pattern {
            RegPattern::Pattern1 => (new.into_iter().collect(), n_b, 1),
            RegPattern::Pattern2 => (sofar.clone(), n_b + sofar.len(), 0),
            RegPattern::Pattern3 => {
                let cnt = sofar.len();
                let mut all = sofar;
                all.extend(new);
                (all, n_b + cnt, 1)
            }
            RegPattern::Pattern4 => (Vec::new(), n_b, 0),
        };
        plan.n_bkt.push(n);
        plan.n_reg_bkt.push(reg);
        plan.s_reg.insert(b, speakers);
        plan.patterns.insert(b, pattern);
    }
    plan
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub unique_buckets: Vec<BucketId>,
    pub speakers: Vec<SpeakerId>,
    pub patterns: BTreeMap<BucketId, RegPattern>,
    pub epochs: usize,
    pub converged: bool,
    /// Hardest-prefix accuracy at the end of the round.
    pub final_accuracy: Option<f64>,
    pub prefix_accuracies: Vec<(BucketId, f64)>,
}

/// A registration session over several rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct Registration {
    pub state: RegistrationRoundState,
    /// Members of each bucket before the session started.
    pub original: BTreeMap<BucketId, Vec<SpeakerId>>,
}

impl Registration {
    /// Prepares `session` for registering `new_speakers`: widens the
    /// classifier head and fixes the retained subset of old utterances.
    pub fn begin(
        session: &mut TrainingSession,
        data: &Dataset,
        new_speakers: &[SpeakerId],
        pcnt_old: u32,
    ) -> Result<Self> {
        let mut pending: Vec<SpeakerId> = new_speakers.to_vec();
        pending.sort_unstable();
        pending.dedup();
        let registered: BTreeSet<SpeakerId> =
            session.membership.values().flatten().copied().collect();
        for &s in &pending {
            if !data.contains(s) {
                return Err(ConsentError::UnknownSpeaker(s));
            }
            if registered.contains(&s) {
                return Err(ConsentError::InvalidConfig(format!(
                    "speaker {s} is already registered"
                )));
            }
        }
        let original: BTreeMap<BucketId, Vec<SpeakerId>> = session
            .active_buckets()
            .into_iter()
            .map(|b| (b, session.membership[&b].clone()))
            .collect();
        if !pending.is_empty() {
            let old: Vec<SpeakerId> = original.values().flatten().copied().collect();
            session.retention = Some(Retention::choose(
                &session.pools,
                &old,
                pcnt_old,
                session.config.train.seed,
            )?);
            session.classes.extend(pending.iter().copied());
            let width = session.classes.len();
            if width != session.classifier.num_classes() {
                session
                    .classifier
                    .resize_head(width, session.config.train.seed);
            }
            session.reset_optimizer();
        }
        Ok(Self {
            state: RegistrationRoundState {
                pending,
                pcnt_old,
                ..Default::default()
            },
            original,
        })
    }

    pub fn is_done(&self) -> bool {
        self.state.pending.is_empty()
    }

    /// Prototypes of registered speakers and per-bucket means of pending
    /// speakers, both from hold-out utterances.
    #[allow(clippy::type_complexity)]
    fn embeddings(
        &self,
        session: &TrainingSession,
        data: &Dataset,
    ) -> Result<(
        Vec<Prototype>,
        BTreeMap<SpeakerId, BTreeMap<BucketId, Vec<f64>>>,
    )> {
        let mut groups = Vec::new();
        let mut new_means: BTreeMap<SpeakerId, BTreeMap<BucketId, Vec<f64>>> = BTreeMap::new();
        for (&b, members) in &self.original {
            let mut speakers = members.clone();
            speakers.extend(
                self.state
                    .b_sofar
                    .iter()
                    .chain(&self.state.last_buckets)
                    .zip(self.state.s_sofar.iter().chain(&self.state.last_speakers))
                    .filter(|(&sb, _)| sb == b)
                    .map(|(_, &s)| s),
            );
            for &s in &speakers {
                let emb = session.holdout_embeddings(data, b, &[s])?;
                groups.push(EmbeddingGroup {
                    speaker: s,
                    bucket: b,
                    embeddings: emb.embeddings,
                });
            }
            for &s in &self.state.pending {
                let emb = session.holdout_embeddings(data, b, &[s])?;
                let mean: Array1<f64> =
                    emb.embeddings
                        .mean_axis(Axis(0))
                        .ok_or(ConsentError::EmptyGroup {
                            speaker: s,
                            bucket: b,
                        })?;
                new_means.entry(s).or_default().insert(b, mean.to_vec());
            }
        }
        Ok((compute_prototypes(&groups)?, new_means))
    }

    /// Runs one round: selects speakers, trains, then excludes the
    /// registered speakers from the pending list.
    pub fn register_round(
        &mut self,
        session: &mut TrainingSession,
        data: &Dataset,
        observer: &mut dyn EpochObserver,
    ) -> Result<RoundReport> {
        if self.is_done() {
            return Err(ConsentError::EmptyRound { pending: 0 });
        }
        let (prototypes, new_means) = self.embeddings(session, data)?;
        let sel = opt_spk_bkt(&self.state, &prototypes, &new_means)?;
        if sel.unique_buckets.is_empty() {
            return Err(ConsentError::EmptyRound {
                pending: self.state.pending.len(),
            });
        }
        let buckets: Vec<BucketId> = self.original.keys().copied().collect();
        let n_bkt: Vec<usize> = self.original.values().map(Vec::len).collect();
        let plan = prop_reg(
            &buckets,
            &n_bkt,
            &sel.unique_buckets,
            &sel.b_sofar,
            &sel.unique_speakers,
            &sel.s_sofar,
        );
        let bucket_plans: Vec<BucketPlan> = buckets
            .iter()
            .enumerate()
            .map(|(k, &b)| {
                let mut speakers = self.original[&b].clone();
                speakers.extend(&plan.s_reg[&b]);
                BucketPlan {
                    bucket: b,
                    speakers,
                    n_b: plan.n_bkt[k],
                    n_reg: plan.n_reg_bkt[k],
                    train_encoder: plan.patterns[&b].registers(),
                }
            })
            .collect();
        let phase = PhasePlan {
            prefixes: bucket_plans
                .iter()
                .map(|p| (p.bucket, p.speakers.clone()))
                .collect(),
            buckets: bucket_plans,
            bands: Vec::new(),
            epochs: session.config.train.epochs,
        };
        info!(
            "registration round {}: speakers {:?} into buckets {:?}",
            self.state.n_round, sel.unique_speakers, sel.unique_buckets
        );
        let outcome: PhaseOutcome = session.run_phase(data, &phase, observer)?;
        for (&b, &s) in sel.unique_buckets.iter().zip(&sel.unique_speakers) {
            session
                .membership
                .get_mut(&b)
                .ok_or(ConsentError::UnknownBucket(b))?
                .push(s);
        }
        let report = RoundReport {
            round: self.state.n_round,
            unique_buckets: sel.unique_buckets.clone(),
            speakers: sel.unique_speakers.clone(),
            patterns: plan.patterns,
            epochs: outcome.epochs_run,
            converged: outcome.converged,
            final_accuracy: outcome.final_accuracy(),
            prefix_accuracies: outcome
                .last()
                .map(|r| {
                    r.report
                        .prefixes
                        .iter()
                        .map(|p| (p.bucket, p.accuracy))
                        .collect()
                })
                .unwrap_or_default(),
        };
        let chosen: BTreeSet<SpeakerId> = sel.unique_speakers.iter().copied().collect();
        self.state.pending.retain(|s| !chosen.contains(s));
        self.state.b_sofar = sel.b_sofar;
        self.state.s_sofar = sel.s_sofar;
        self.state.last_buckets = sel.unique_buckets;
        self.state.last_speakers = sel.unique_speakers;
        self.state.n_round += 1;
        Ok(report)
    }
}

/// Registers every new speaker, round after round.
pub fn register_speakers(
    session: &mut TrainingSession,
    data: &Dataset,
    new_speakers: &[SpeakerId],
    pcnt_old: u32,
    observer: &mut dyn EpochObserver,
) -> Result<Vec<RoundReport>> {
    let mut reg = Registration::begin(session, data, new_speakers, pcnt_old)?;
    let mut reports = Vec::new();
    while !reg.is_done() {
        reports.push(reg.register_round(session, data, observer)?);
    }
    Ok(reports)
}
