//! Behavioural forgetting after removal and recovery after re-registration,
//! on the default synthetic topology.

use std::collections::BTreeMap;

use consent_core::datastore::{synth_speakers, SyntheticConfig};
use consent_core::remover::{remove_speakers, reregister_speakers};
use consent_core::trainer::{train_agent, SessionConfig, TrainingSession};

const BUCKET: u16 = 4;
const REMOVED: u32 = 20;

fn mean(v: impl IntoIterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.into_iter().collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn removed_speakers_are_forgotten_and_residuals_kept() {
    let seeds = 0..5u64;
    let (mut removed_recall, mut residual_recall) = (Vec::new(), Vec::new());
    for seed in seeds {
        let data = synth_speakers(&SyntheticConfig {
            seed,
            ..Default::default()
        })
        .unwrap();
        let mut cfg = SessionConfig::default();
        cfg.train.seed = seed;
        let mut session = TrainingSession::new(cfg, &data).unwrap();
        train_agent(&mut session, &data, &mut ()).unwrap();

        let request = BTreeMap::from([(BUCKET, vec![REMOVED])]);
        remove_speakers(&mut session, &data, &request, &mut ()).unwrap();
        let all: Vec<u32> = (20..25).collect();
        let recall = session.speaker_recall(&data, BUCKET, &all).unwrap();
        removed_recall.push(recall[&REMOVED]);
        residual_recall.push(mean(all[1..].iter().map(|s| recall[s])));

        if seed == 0 {
            reregister_speakers(&mut session, &data, &request, &mut ()).unwrap();
            let back = session.speaker_recall(&data, BUCKET, &[REMOVED]).unwrap();
            assert!(
                back[&REMOVED] > 0.9,
                "re-registered recall {}",
                back[&REMOVED]
            );
        }
    }
    let (gone, kept) = (mean(removed_recall.clone()), mean(residual_recall.clone()));
    assert!(gone < 0.2, "removed recall {gone} ({removed_recall:?})");
    assert!(kept > 0.9, "residual recall {kept} ({residual_recall:?})");
}
