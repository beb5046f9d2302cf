//! Datasets, shards and persisted checkpoints.

mod checkpoint;
mod container;
mod shard;
mod synth;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind, CHECKPOINT_VERSION,
};
pub use container::{read_features, write_embeddings, write_features, FEATURE_VERSION};
pub use shard::{load_shard, AccessLog, Retention, UtterancePools};
pub use synth::{synth_speakers, SyntheticConfig, UNASSIGNED_BUCKET};

use std::collections::BTreeMap;

use crate::error::{ConsentError, Result};
use crate::types::{SpeakerId, UtteranceFeatures};

/// An immutable collection of utterances indexed by speaker.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    segment_len: usize,
    feature_dim: usize,
    utterances: Vec<UtteranceFeatures>,
    by_speaker: BTreeMap<SpeakerId, Vec<usize>>,
}

impl Dataset {
    pub fn new(
        segment_len: usize,
        feature_dim: usize,
        utterances: Vec<UtteranceFeatures>,
    ) -> Result<Self> {
        let mut by_speaker: BTreeMap<SpeakerId, Vec<usize>> = BTreeMap::new();
        for (i, u) in utterances.iter().enumerate() {
            u.validate(segment_len, feature_dim)?;
            by_speaker.entry(u.speaker).or_default().push(i);
        }
        Ok(Self {
            segment_len,
            feature_dim,
            utterances,
            by_speaker,
        })
    }

    pub fn segment_len(&self) -> usize {
        self.segment_len
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn utterances(&self) -> &[UtteranceFeatures] {
        &self.utterances
    }

    pub fn get(&self, index: usize) -> &UtteranceFeatures {
        &self.utterances[index]
    }

    pub fn select(&self, indices: &[usize]) -> Vec<&UtteranceFeatures> {
        indices.iter().map(|&i| &self.utterances[i]).collect()
    }

    pub fn speakers(&self) -> impl Iterator<Item = SpeakerId> + '_ {
        self.by_speaker.keys().copied()
    }

    pub fn contains(&self, speaker: SpeakerId) -> bool {
        self.by_speaker.contains_key(&speaker)
    }

    pub fn utterances_of(&self, speaker: SpeakerId) -> Result<&[usize]> {
        self.by_speaker
            .get(&speaker)
            .map(Vec::as_slice)
            .ok_or(ConsentError::UnknownSpeaker(speaker))
    }

    /// Speaker -> utterance count.
    pub fn manifest(&self) -> BTreeMap<SpeakerId, usize> {
        self.by_speaker.iter().map(|(&s, v)| (s, v.len())).collect()
    }
}
