use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{ConsentError, Result};
use crate::rng::{self, Stream};
use crate::types::SpeakerId;

/// Per-speaker split of utterance indices into training and hold-out pools.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtterancePools {
    pub train: BTreeMap<SpeakerId, Vec<usize>>,
    pub holdout: BTreeMap<SpeakerId, Vec<usize>>,
}

impl UtterancePools {
    /// Reserves `round(fraction * n)` utterances of each speaker for
    /// evaluation, keeping at least one on each side when `n >= 2`.
    pub fn split(data: &Dataset, holdout_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&holdout_fraction) {
            return Err(ConsentError::InvalidConfig(format!(
                "holdout_fraction {holdout_fraction} outside [0, 1)"
            )));
        }
        let mut train = BTreeMap::new();
        let mut holdout = BTreeMap::new();
        for s in data.speakers() {
            let mut idx = data.utterances_of(s)?.to_vec();
            let n = idx.len();
            let mut n_hold = (holdout_fraction * n as f64).round() as usize;
            if n >= 2 && holdout_fraction > 0.0 {
                n_hold = n_hold.clamp(1, n - 1);
            }
            idx.shuffle(&mut rng::stream(seed, Stream::Holdout, &[s as u64]));
            let mut held = idx.split_off(n - n_hold);
            held.sort_unstable();
            idx.sort_unstable();
            train.insert(s, idx);
            holdout.insert(s, held);
        }
        Ok(Self { train, holdout })
    }

    pub fn train_of(&self, speaker: SpeakerId) -> Result<&[usize]> {
        self.train
            .get(&speaker)
            .map(Vec::as_slice)
            .ok_or(ConsentError::UnknownSpeaker(speaker))
    }

    pub fn holdout_of(&self, speaker: SpeakerId) -> Result<&[usize]> {
        self.holdout
            .get(&speaker)
            .map(Vec::as_slice)
            .ok_or(ConsentError::UnknownSpeaker(speaker))
    }

    /// Hold-out indices of several speakers, in the given speaker order.
    pub fn holdout_for(&self, speakers: &[SpeakerId]) -> Result<Vec<usize>> {
        let mut out = Vec::new();
        for &s in speakers {
            out.extend_from_slice(self.holdout_of(s)?);
        }
        Ok(out)
    }
}

/// The fixed fraction of each old speaker's training utterances that stays
/// usable during registration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Retention {
    pub pcnt_old: u32,
    pub retained: BTreeMap<SpeakerId, Vec<usize>>,
}

impl Retention {
    /// Keeps `floor(pcnt_old * n / 100)` training utterances per speaker.
    pub fn choose(
        pools: &UtterancePools,
        speakers: &[SpeakerId],
        pcnt_old: u32,
        seed: u64,
    ) -> Result<Self> {
        if pcnt_old == 0 || pcnt_old > 100 {
            return Err(ConsentError::InvalidConfig(format!(
                "pcnt_old {pcnt_old} outside (0, 100]"
            )));
        }
        let mut retained = BTreeMap::new();
        for &s in speakers {
            let pool = pools.train_of(s)?;
            let keep = pool.len() * pcnt_old as usize / 100;
            let mut subset: Vec<usize> = pool
                .choose_multiple(&mut rng::stream(seed, Stream::Retention, &[s as u64]), keep)
                .copied()
                .collect();
            subset.sort_unstable();
            retained.insert(s, subset);
        }
        Ok(Self { pcnt_old, retained })
    }

    pub fn get(&self, speaker: SpeakerId) -> Option<&[usize]> {
        self.retained.get(&speaker).map(Vec::as_slice)
    }
}

/// Every training utterance handed out, per speaker.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessLog {
    accessed: BTreeMap<SpeakerId, BTreeSet<usize>>,
}

impl AccessLog {
    pub fn record(&mut self, speaker: SpeakerId, indices: &[usize]) {
        self.accessed.entry(speaker).or_default().extend(indices);
    }

    pub fn accessed(&self, speaker: SpeakerId) -> Option<&BTreeSet<usize>> {
        self.accessed.get(&speaker)
    }

    pub fn clear(&mut self) {
        self.accessed.clear();
    }
}

/// `n_utt` training utterances for each speaker, grouped per speaker in the
/// given order.
///
/// Speakers covered by `retention` draw only from their retained subset,
/// others from their whole training pool. When a source holds fewer than
/// `n_utt` utterances, it is cycled in shuffled passes.
#[allow(clippy::too_many_arguments)]
pub fn load_shard(
    data: &Dataset,
    pools: &UtterancePools,
    speakers: &[SpeakerId],
    n_utt: usize,
    retention: Option<&Retention>,
    seed: u64,
    keys: &[u64],
    mut log: Option<&mut AccessLog>,
) -> Result<Vec<usize>> {
    let mut shard = Vec::with_capacity(speakers.len() * n_utt);
    for &s in speakers {
        if !data.contains(s) {
            return Err(ConsentError::UnknownSpeaker(s));
        }
        let source = match retention.and_then(|r| r.get(s)) {
            Some(subset) => subset,
            None => pools.train_of(s)?,
        };
        if source.is_empty() {
            return Err(ConsentError::ExhaustedUtterances { speaker: s });
        }
        let mut key = keys.to_vec();
        key.push(s as u64);
        let mut rng = rng::stream(seed, Stream::Shard, &key);
        let picked: Vec<usize> = if source.len() >= n_utt {
            source.choose_multiple(&mut rng, n_utt).copied().collect()
        } else {
            let mut out = Vec::with_capacity(n_utt);
            let mut pass = source.to_vec();
            while out.len() < n_utt {
                pass.shuffle(&mut rng);
                out.extend(pass.iter().take(n_utt - out.len()));
            }
            out
        };
        if let Some(log) = log.as_deref_mut() {
            log.record(s, &picked);
        }
        shard.extend(picked);
    }
    Ok(shard)
}
