//! The training session and its epoch loop.
//!
//! Initial training, registration rounds and removals all run the same loop
//! over a [`PhasePlan`]: per bucket, load a shard, optionally take contrastive
//! steps on that bucket's encoder, embed the shard, grow the replay buffer and
//! train the classifier on it; then evaluate and check early stopping.

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, info};
use serde::{Deserialize, Serialize};

use crate::classifier::{
    eval_metric_b, score_rows, train_classifier, Adam, ClassIndex, ClassifierParams,
    EarlyStopConfig, EarlyStopState, HoldoutGroup, LatentPrototypes, ProgressiveReport, Scorer,
};
use crate::datastore::{
    load_shard, AccessLog, Checkpoint, CheckpointKind, Dataset, Retention, UtterancePools,
};
use crate::encoder::{train_contrastive_step, EncoderParams};
use crate::error::{ConsentError, Result};
use crate::rng::{self, Stream};
use crate::sampler::{collection_indx, num_spk_utts, sample_int_bkt};
use crate::types::{
    AgentConfig, BucketId, BucketTopology, LabeledEmbeddings, ReplayBuffer, SpeakerId, TrainConfig,
    TrainMode,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub agent: AgentConfig,
    pub train: TrainConfig,
    pub early_stop: EarlyStopConfig,
    /// Replay buffer budget in rows.
    pub max_mem: usize,
    pub embed_dim: usize,
    /// Half-width of the accuracy band a removal bucket must settle in.
    pub removal_tolerance: f64,
    /// Shuffle each bucket's rows as they enter the buffer.
    pub permute_buffer: bool,
    /// Silence the head rows of removed speakers instead of letting them decay.
    pub mask_removed: bool,
    /// Restart the encoder of a bucket losing speakers from its initial
    /// weights, so only residual speakers shape its features.
    pub reset_removal_encoders: bool,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            agent: AgentConfig::default(),
            train: TrainConfig::default(),
            early_stop: EarlyStopConfig::default(),
            max_mem: 120,
            embed_dim: 256,
            removal_tolerance: 0.05,
            permute_buffer: true,
            mask_removed: false,
            reset_removal_encoders: true,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        self.agent.validate()?;
        self.train.validate()?;
        if self.embed_dim == 0 {
            return Err(ConsentError::InvalidConfig("embed_dim must be >= 1".into()));
        }
        if self.early_stop.patience == 0 || !(self.early_stop.min_delta >= 0.0) {
            return Err(ConsentError::InvalidConfig(
                "early_stop needs patience >= 1 and min_delta >= 0".into(),
            ));
        }
        if !(self.removal_tolerance >= 0.0) {
            return Err(ConsentError::InvalidConfig(
                "removal_tolerance must be >= 0".into(),
            ));
        }
        num_spk_utts(
            self.max_mem,
            &self.agent.initial_topology().n_bkt,
            &vec![0; self.agent.num_buckets],
        )?;
        Ok(())
    }
}

/// One bucket's role within a phase.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BucketPlan {
    pub bucket: BucketId,
    /// Training speakers in shard order: `n_b` existing, then `n_reg` new.
    pub speakers: Vec<SpeakerId>,
    pub n_b: usize,
    pub n_reg: usize,
    pub train_encoder: bool,
}

/// A bucket evaluated on its own against a target accuracy.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct BandPlan {
    pub bucket: BucketId,
    pub speakers: Vec<SpeakerId>,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct PhasePlan {
    pub buckets: Vec<BucketPlan>,
    /// Buckets and speakers of the progressive prefixes, in order.
    pub prefixes: Vec<(BucketId, Vec<SpeakerId>)>,
    pub bands: Vec<BandPlan>,
    pub epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BandMetric {
    pub bucket: BucketId,
    pub accuracy: f64,
    pub target: f64,
    pub settled: bool,
}

/// Everything observable about one epoch, except wall-clock time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Session-wide epoch counter.
    pub epoch: u64,
    /// Epoch index within the current phase.
    pub phase_epoch: usize,
    pub report: ProgressiveReport,
    pub bands: Vec<BandMetric>,
    pub encoders_trained: Vec<BucketId>,
    pub buffer_rows: usize,
    pub classifier_loss: f64,
    pub stop: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseOutcome {
    pub epochs_run: usize,
    /// False when the epoch budget ran out before early stopping fired.
    pub converged: bool,
    pub history: Vec<EpochRecord>,
}

impl PhaseOutcome {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.history.last()
    }

    /// Accuracy of the hardest prefix in the final epoch.
    pub fn final_accuracy(&self) -> Option<f64> {
        self.last()
            .and_then(|r| r.report.last())
            .map(|p| p.accuracy)
    }
}

/// Called after every epoch, e.g. to persist checkpoints.
pub trait EpochObserver {
    fn epoch_end(&mut self, _session: &TrainingSession, _record: &EpochRecord) -> Result<()> {
        Ok(())
    }
}

impl EpochObserver for () {}

/// Collects every record it sees.
#[derive(Debug, Default)]
pub struct HistoryRecorder(pub Vec<EpochRecord>);

impl EpochObserver for HistoryRecorder {
    fn epoch_end(&mut self, _session: &TrainingSession, record: &EpochRecord) -> Result<()> {
        self.0.push(record.clone());
        Ok(())
    }
}

/// Serializable bookkeeping of a session; parameters live in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub config: SessionConfig,
    pub feature_dim: usize,
    pub membership: BTreeMap<BucketId, Vec<SpeakerId>>,
    pub removed: BTreeMap<BucketId, Vec<SpeakerId>>,
    pub excluded: BTreeSet<BucketId>,
    pub classes: ClassIndex,
    pub pools: UtterancePools,
    pub retention: Option<Retention>,
    pub early_stop: EarlyStopState,
    pub epoch: u64,
    #[serde(default)]
    pub encoder_resets: BTreeMap<BucketId, u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSession {
    pub config: SessionConfig,
    pub feature_dim: usize,
    /// Registered speakers per bucket.
    pub membership: BTreeMap<BucketId, Vec<SpeakerId>>,
    /// Speakers removed from each bucket and not re-registered.
    pub removed: BTreeMap<BucketId, Vec<SpeakerId>>,
    /// Buckets whose speakers were all removed.
    pub excluded: BTreeSet<BucketId>,
    pub encoders: BTreeMap<BucketId, EncoderParams>,
    pub classifier: ClassifierParams,
    pub adam: Adam,
    pub classes: ClassIndex,
    pub pools: UtterancePools,
    pub retention: Option<Retention>,
    pub early_stop: EarlyStopState,
    pub epoch: u64,
    /// How often each bucket's encoder was restarted.
    pub encoder_resets: BTreeMap<BucketId, u32>,
    pub access_log: AccessLog,
}

impl TrainingSession {
    /// Fresh session for the agent's speaker window.
    pub fn new(config: SessionConfig, data: &Dataset) -> Result<Self> {
        config.validate()?;
        let seed = config.train.seed;
        let pools = UtterancePools::split(data, config.train.holdout_fraction, seed)?;
        let membership: BTreeMap<_, _> = config.agent.initial_assignment().into_iter().collect();
        for &s in membership.values().flatten() {
            if !data.contains(s) {
                return Err(ConsentError::UnknownSpeaker(s));
            }
        }
        let feature_dim = data.feature_dim();
        let encoders = membership
            .keys()
            .map(|&b| {
                (
                    b,
                    EncoderParams::seeded(feature_dim, config.embed_dim, seed, b as u64),
                )
            })
            .collect();
        let classes = ClassIndex::new(config.agent.speaker_window().collect());
        let classifier = ClassifierParams::seeded(config.embed_dim, classes.len(), seed);
        let adam = Adam::new(config.train.classifier_lr, classifier.num_params());
        Ok(Self {
            early_stop: EarlyStopState::new(config.early_stop),
            config,
            feature_dim,
            membership,
            removed: BTreeMap::new(),
            excluded: BTreeSet::new(),
            encoders,
            classifier,
            adam,
            classes,
            pools,
            retention: None,
            epoch: 0,
            encoder_resets: BTreeMap::new(),
            access_log: AccessLog::default(),
        })
    }

    pub fn state(&self) -> SessionState {
        SessionState {
            config: self.config.clone(),
            feature_dim: self.feature_dim,
            membership: self.membership.clone(),
            removed: self.removed.clone(),
            excluded: self.excluded.clone(),
            classes: self.classes.clone(),
            pools: self.pools.clone(),
            retention: self.retention.clone(),
            early_stop: self.early_stop.clone(),
            epoch: self.epoch,
            encoder_resets: self.encoder_resets.clone(),
        }
    }

    /// Encoder checkpoints per active bucket, then classifier and optimizer.
    pub fn checkpoints(&self) -> Vec<Checkpoint> {
        let mut out: Vec<Checkpoint> = self
            .encoders
            .iter()
            .map(|(&b, p)| Checkpoint::from_encoder(b, p))
            .collect();
        out.push(Checkpoint::from_classifier(&self.classifier));
        out.push(Checkpoint::from_optimizer(&self.adam));
        out
    }

    pub fn restore(state: SessionState, checkpoints: &[Checkpoint]) -> Result<Self> {
        let mut encoders = BTreeMap::new();
        let mut classifier = None;
        let mut adam = None;
        for c in checkpoints {
            match c.kind {
                CheckpointKind::Encoder => {
                    let b = c.bucket.ok_or_else(|| {
                        ConsentError::Malformed("encoder checkpoint without bucket".into())
                    })?;
                    encoders.insert(b, c.to_encoder()?);
                }
                CheckpointKind::Classifier => classifier = Some(c.to_classifier()?),
                CheckpointKind::Optimizer => adam = Some(c.to_optimizer()?),
            }
        }
        let classifier =
            classifier.ok_or_else(|| ConsentError::MissingCheckpoint("classifier".into()))?;
        let adam = adam.ok_or_else(|| ConsentError::MissingCheckpoint("optimizer".into()))?;
        for b in state
            .membership
            .keys()
            .filter(|b| !state.excluded.contains(b))
        {
            if !encoders.contains_key(b) {
                return Err(ConsentError::MissingCheckpoint(format!(
                    "encoder for bucket {b}"
                )));
            }
        }
        Ok(Self {
            config: state.config,
            feature_dim: state.feature_dim,
            membership: state.membership,
            removed: state.removed,
            excluded: state.excluded,
            encoders,
            classifier,
            adam,
            classes: state.classes.reindex(),
            pools: state.pools,
            retention: state.retention,
            early_stop: state.early_stop,
            epoch: state.epoch,
            encoder_resets: state.encoder_resets,
            access_log: AccessLog::default(),
        })
    }

    /// Replaces the encoder of `bucket` with freshly drawn weights, a new
    /// draw on every reset.
    pub(crate) fn reset_encoder(&mut self, bucket: BucketId) {
        let generation = self.encoder_resets.entry(bucket).or_insert(0);
        *generation += 1;
        let mut rng = rng::stream(
            self.config.train.seed,
            Stream::EncoderInit,
            &[bucket as u64, *generation as u64],
        );
        let fresh = EncoderParams::init(self.feature_dim, self.config.embed_dim, &mut rng);
        self.encoders.insert(bucket, fresh);
    }

    /// Starts a new optimizer run over the current classifier parameters.
    pub(crate) fn reset_optimizer(&mut self) {
        self.adam = Adam::new(
            self.config.train.classifier_lr,
            self.classifier.num_params(),
        );
    }

    /// Buckets in agent order, skipping whole-bucket removals.
    pub fn active_buckets(&self) -> Vec<BucketId> {
        self.config
            .agent
            .bucket_list()
            .into_iter()
            .filter(|b| !self.excluded.contains(b))
            .collect()
    }

    pub fn members(&self, bucket: BucketId) -> Result<&[SpeakerId]> {
        self.membership
            .get(&bucket)
            .map(Vec::as_slice)
            .ok_or(ConsentError::UnknownBucket(bucket))
    }

    /// Current speakers per active bucket, no pending registrations.
    pub fn topology(&self) -> BucketTopology {
        let n_bkt: Vec<usize> = self
            .active_buckets()
            .iter()
            .map(|b| self.membership[b].len())
            .collect();
        BucketTopology {
            n_reg_bkt: vec![0; n_bkt.len()],
            n_bkt,
        }
    }

    pub fn registered_speakers(&self) -> Vec<SpeakerId> {
        self.active_buckets()
            .iter()
            .flat_map(|b| self.membership[b].iter().copied())
            .collect()
    }

    fn encoder(&self, bucket: BucketId) -> Result<&EncoderParams> {
        self.encoders
            .get(&bucket)
            .ok_or(ConsentError::UnknownBucket(bucket))
    }

    /// Hold-out embeddings of `speakers` through the encoder of `bucket`.
    pub fn holdout_embeddings(
        &self,
        data: &Dataset,
        bucket: BucketId,
        speakers: &[SpeakerId],
    ) -> Result<LabeledEmbeddings> {
        let idx = self.pools.holdout_for(speakers)?;
        self.encoder(bucket)?.embed_batch(&data.select(&idx))
    }

    /// Plan for plain training: every active bucket with its members.
    pub(crate) fn full_plan(&self, epochs: usize) -> PhasePlan {
        let buckets: Vec<BucketPlan> = self
            .active_buckets()
            .into_iter()
            .map(|b| BucketPlan {
                bucket: b,
                speakers: self.membership[&b].clone(),
                n_b: self.membership[&b].len(),
                n_reg: 0,
                train_encoder: true,
            })
            .collect();
        PhasePlan {
            prefixes: buckets
                .iter()
                .map(|p| (p.bucket, p.speakers.clone()))
                .collect(),
            buckets,
            bands: Vec::new(),
            epochs,
        }
    }

    /// Scores hold-out utterances for the plan's prefixes and bands.
    pub(crate) fn evaluate_plan(
        &self,
        data: &Dataset,
        prefixes: &[(BucketId, Vec<SpeakerId>)],
        bands: &[BandPlan],
        buffer: Option<&ReplayBuffer>,
    ) -> Result<(ProgressiveReport, BTreeMap<BucketId, f64>)> {
        self.with_scorer(buffer, |scorer| {
            self.evaluate_groups(data, scorer, prefixes, bands)
        })
    }

    fn with_scorer<T>(
        &self,
        buffer: Option<&ReplayBuffer>,
        f: impl FnOnce(&Scorer<'_>) -> Result<T>,
    ) -> Result<T> {
        match self.config.train.mode {
            TrainMode::Supervised => f(&Scorer::Classifier {
                params: &self.classifier,
                classes: &self.classes,
            }),
            TrainMode::Unsupervised => {
                let buffer = buffer.ok_or(ConsentError::NoPrototypes)?;
                let prototypes = LatentPrototypes::from_buffer(&self.classifier, buffer)?;
                f(&Scorer::Prototypes {
                    params: &self.classifier,
                    prototypes: &prototypes,
                    tau: self.config.train.temperature,
                })
            }
        }
    }

    fn evaluate_groups(
        &self,
        data: &Dataset,
        scorer: &Scorer<'_>,
        prefixes: &[(BucketId, Vec<SpeakerId>)],
        bands: &[BandPlan],
    ) -> Result<(ProgressiveReport, BTreeMap<BucketId, f64>)> {
        let groups = |list: &mut dyn Iterator<Item = (BucketId, &Vec<SpeakerId>)>| -> Result<Vec<HoldoutGroup<'_>>> {
            list.map(|(bucket, speakers)| {
                Ok(HoldoutGroup {
                    bucket,
                    utterances: data.select(&self.pools.holdout_for(speakers)?),
                })
            })
            .collect()
        };
        let report = if prefixes.is_empty() {
            ProgressiveReport::from_scores(Vec::new(), &[])
        } else {
            let g = groups(&mut prefixes.iter().map(|(b, s)| (*b, s)))?;
            eval_metric_b(scorer, &self.encoders, &g)?
        };
        let mut band_acc = BTreeMap::new();
        if !bands.is_empty() {
            let g = groups(&mut bands.iter().map(|p| (p.bucket, &p.speakers)))?;
            let r = eval_metric_b(scorer, &self.encoders, &g)?;
            for p in bands {
                band_acc.insert(p.bucket, r.bucket_accuracy(p.bucket).unwrap_or(0.0));
            }
        }
        Ok((report, band_acc))
    }

    /// Runs the shared epoch loop until the plan's early-stop condition
    /// holds or its epoch budget is spent.
    pub(crate) fn run_phase(
        &mut self,
        data: &Dataset,
        plan: &PhasePlan,
        observer: &mut dyn EpochObserver,
    ) -> Result<PhaseOutcome> {
        self.early_stop = EarlyStopState::new(self.config.early_stop);
        let cfg = self.config.train.clone();
        let seed = cfg.seed;
        let n_utt = cfg.n_utt;
        let order: Vec<BucketId> = plan.buckets.iter().map(|p| p.bucket).collect();
        let n_bkt: Vec<usize> = plan.buckets.iter().map(|p| p.n_b).collect();
        let n_reg: Vec<usize> = plan.buckets.iter().map(|p| p.n_reg).collect();
        let mut history = Vec::new();
        let mut converged = false;
        if plan.buckets.is_empty() || plan.epochs == 0 {
            return Ok(PhaseOutcome {
                epochs_run: 0,
                converged,
                history,
            });
        }
        let n_spk_utt = num_spk_utts(self.config.max_mem, &n_bkt, &n_reg)?;
        for phase_epoch in 0..plan.epochs {
            let epoch = self.epoch;
            let index = collection_indx(
                n_utt,
                n_spk_utt,
                &order,
                &n_bkt,
                &n_reg,
                n_spk_utt > n_utt,
                seed,
                epoch,
            )?;
            let mut buffer = ReplayBuffer::new(self.config.embed_dim, self.config.max_mem);
            let mut trained = Vec::new();
            let mut cls_loss = f64::NAN;
            for bp in &plan.buckets {
                let b = bp.bucket;
                let keys = [epoch, b as u64];
                let shard_idx = load_shard(
                    data,
                    &self.pools,
                    &bp.speakers,
                    n_utt,
                    self.retention.as_ref(),
                    seed,
                    &keys,
                    Some(&mut self.access_log),
                )?;
                let shard = data.select(&shard_idx);
                if bp.train_encoder && !self.early_stop.status(b) {
                    let (params, _) =
                        train_contrastive_step(self.encoder(b)?, &shard, &cfg, &keys)?;
                    self.encoders.insert(b, params);
                    trained.push(b);
                }
                let zy = self.encoder(b)?.embed_batch(&shard)?;
                let perm = self.config.permute_buffer.then_some((seed, &keys[..]));
                buffer = sample_int_bkt(&index[&b], &zy, buffer, perm)?;
                let (params, loss) = train_classifier(
                    &self.classifier,
                    &mut self.adam,
                    &buffer,
                    &self.classes,
                    &cfg,
                    &keys,
                )?;
                self.classifier = params;
                cls_loss = loss;
            }
            let (report, band_acc) =
                self.evaluate_plan(data, &plan.prefixes, &plan.bands, Some(&buffer))?;
            for p in &report.prefixes {
                self.early_stop.observe(p.bucket, p.accuracy);
            }
            let mut bands = Vec::with_capacity(plan.bands.len());
            for bp in &plan.bands {
                let acc = band_acc[&bp.bucket];
                self.early_stop.observe_band(
                    bp.bucket,
                    acc,
                    bp.target,
                    self.config.removal_tolerance,
                );
                bands.push(BandMetric {
                    bucket: bp.bucket,
                    accuracy: acc,
                    target: bp.target,
                    settled: self.early_stop.status(bp.bucket),
                });
            }
            let stop = if bands.is_empty() {
                report
                    .last()
                    .is_none_or(|p| self.early_stop.status(p.bucket))
            } else {
                bands.iter().all(|b| b.settled)
            };
            let record = EpochRecord {
                epoch,
                phase_epoch,
                report,
                bands,
                encoders_trained: trained,
                buffer_rows: buffer.len(),
                classifier_loss: cls_loss,
                stop,
            };
            debug!(
                "epoch {epoch}: hardest prefix accuracy {:?}, buffer {} rows",
                record.report.last().map(|p| p.accuracy),
                record.buffer_rows
            );
            self.epoch += 1;
            observer.epoch_end(self, &record)?;
            history.push(record);
            if stop {
                converged = true;
                break;
            }
        }
        info!(
            "phase finished after {} epochs (converged: {converged})",
            history.len()
        );
        Ok(PhaseOutcome {
            epochs_run: history.len(),
            converged,
            history,
        })
    }

    /// Accuracy over growing prefixes of all active buckets.
    pub fn evaluate(&self, data: &Dataset) -> Result<ProgressiveReport> {
        let plan = self.full_plan(0);
        let buffer = match self.config.train.mode {
            TrainMode::Supervised => None,
            TrainMode::Unsupervised => Some(self.prototype_buffer(data)?),
        };
        Ok(self
            .evaluate_plan(data, &plan.prefixes, &[], buffer.as_ref())?
            .0)
    }

    /// Fraction of each speaker's hold-out utterances, embedded by the
    /// encoder of `bucket`, that are predicted as that speaker.
    pub fn speaker_recall(
        &self,
        data: &Dataset,
        bucket: BucketId,
        speakers: &[SpeakerId],
    ) -> Result<BTreeMap<SpeakerId, f64>> {
        let buffer = match self.config.train.mode {
            TrainMode::Supervised => None,
            TrainMode::Unsupervised => Some(self.prototype_buffer(data)?),
        };
        self.with_scorer(buffer.as_ref(), |scorer| {
            speakers
                .iter()
                .map(|&s| {
                    let emb = self.holdout_embeddings(data, bucket, &[s])?;
                    let rows = score_rows(scorer, emb.embeddings.view(), &emb.labels)?;
                    let hits = rows.iter().filter(|(ok, _)| *ok).count();
                    Ok((s, hits as f64 / rows.len().max(1) as f64))
                })
                .collect()
        })
    }

    /// Buffer of training-shard embeddings used for latent prototypes when
    /// evaluating outside the training loop.
    fn prototype_buffer(&self, data: &Dataset) -> Result<ReplayBuffer> {
        let plan = self.full_plan(1);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for bp in &plan.buckets {
            let idx = load_shard(
                data,
                &self.pools,
                &bp.speakers,
                self.config.train.n_utt,
                self.retention.as_ref(),
                self.config.train.seed,
                &[self.epoch, bp.bucket as u64],
                None,
            )?;
            let emb = self.encoder(bp.bucket)?.embed_batch(&data.select(&idx))?;
            rows.push(emb.embeddings);
            labels.extend(emb.labels);
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        let stacked = ndarray::concatenate(ndarray::Axis(0), &views)
            .map_err(|e| ConsentError::ShapeMismatch(e.to_string()))?;
        ReplayBuffer::from_parts(stacked, labels.clone(), labels.len())
    }
}

/// Initial training over every bucket of the agent.
pub fn train_agent(
    session: &mut TrainingSession,
    data: &Dataset,
    observer: &mut dyn EpochObserver,
) -> Result<PhaseOutcome> {
    let plan = session.full_plan(session.config.train.epochs);
    session.run_phase(data, &plan, observer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::{synth_speakers, SyntheticConfig};

    pub(crate) fn tiny_setup() -> (SessionConfig, Dataset) {
        let data = synth_speakers(&SyntheticConfig {
            num_speakers: 8,
            num_noisy_speakers: 2,
            utterances_per_speaker: 10,
            segment_len: 6,
            feature_dim: 5,
            bucket_size: 4,
            ..Default::default()
        })
        .unwrap();
        let cfg = SessionConfig {
            agent: AgentConfig {
                agent_index: 0,
                num_buckets: 2,
                num_speakers: 8,
            },
            train: TrainConfig {
                epochs: 3,
                n_utt: 4,
                ..Default::default()
            },
            max_mem: 16,
            embed_dim: 8,
            ..Default::default()
        };
        (cfg, data)
    }

    #[test]
    fn zero_epochs_leaves_session_untouched() {
        let (mut cfg, data) = tiny_setup();
        cfg.train.epochs = 0;
        let mut s = TrainingSession::new(cfg, &data).unwrap();
        let before = s.clone();
        let out = train_agent(&mut s, &data, &mut ()).unwrap();
        assert!(out.history.is_empty());
        assert_eq!(s, before);
    }

    #[test]
    fn buffer_respects_budget_and_history_is_reproducible() {
        let (cfg, data) = tiny_setup();
        let mut a = TrainingSession::new(cfg.clone(), &data).unwrap();
        let mut b = TrainingSession::new(cfg, &data).unwrap();
        let ha = train_agent(&mut a, &data, &mut ()).unwrap();
        let hb = train_agent(&mut b, &data, &mut ()).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a, b);
        for r in &ha.history {
            assert_eq!(r.buffer_rows, 16);
            assert_eq!(r.report.prefixes.len(), 2);
        }
    }

    #[test]
    fn checkpoint_round_trip_restores_state() {
        let (cfg, data) = tiny_setup();
        let mut s = TrainingSession::new(cfg, &data).unwrap();
        train_agent(&mut s, &data, &mut ()).unwrap();
        let bytes: Vec<Vec<u8>> = s.checkpoints().iter().map(Checkpoint::to_bytes).collect();
        let ckpts: Vec<Checkpoint> = bytes
            .iter()
            .map(|b| Checkpoint::from_bytes(b).unwrap())
            .collect();
        let mut restored = TrainingSession::restore(s.state(), &ckpts).unwrap();
        restored.access_log = s.access_log.clone();
        assert_eq!(restored, s);
    }

    #[test]
    fn unknown_window_speaker_is_rejected() {
        let (mut cfg, data) = tiny_setup();
        cfg.agent.agent_index = 1;
        assert!(matches!(
            TrainingSession::new(cfg, &data),
            Err(ConsentError::UnknownSpeaker(_))
        ));
    }
}
