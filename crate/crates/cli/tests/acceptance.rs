//! Acceptance criteria 1 to 10. Prints one PASS/FAIL line per criterion and
//! exits non-zero when any fails.

#[path = "../../core/tests/support/mod.rs"]
mod support;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use consent_core::datastore::{synth_speakers, Dataset, SyntheticConfig};
use consent_core::metrics::{eer, min_cllr, min_dcf, DcfParams, TrialSet};
use consent_core::registrar::{longest_unique_buckets_counted, register_speakers};
use consent_core::remover::{remove_speakers, reregister_speakers};
use consent_core::sampler::num_spk_utts;
use consent_core::trainer::{
    train_agent, EpochObserver, EpochRecord, SessionConfig, TrainingSession,
};
use consent_core::{Result as CoreResult, TrainMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

/// Largest replay buffer seen over every epoch of every phase.
#[derive(Default)]
struct BufferWatch {
    max_rows: usize,
    epochs: usize,
}

impl EpochObserver for BufferWatch {
    fn epoch_end(&mut self, _session: &TrainingSession, record: &EpochRecord) -> CoreResult<()> {
        self.max_rows = self.max_rows.max(record.buffer_rows);
        self.epochs += 1;
        Ok(())
    }
}

struct Trained {
    data: Dataset,
    session: TrainingSession,
    seconds: f64,
}

fn copy(session: &TrainingSession) -> TrainingSession {
    TrainingSession::restore(session.state(), &session.checkpoints()).expect("restore session")
}

fn synthetic(seed: u64) -> Dataset {
    synth_speakers(&SyntheticConfig {
        seed,
        ..Default::default()
    })
    .expect("synthetic data")
}

fn session_config(seed: u64, mode: TrainMode) -> SessionConfig {
    let mut cfg = SessionConfig::default();
    cfg.train.seed = seed;
    cfg.train.mode = mode;
    cfg
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn hardest(session: &TrainingSession, data: &Dataset) -> f64 {
    session
        .evaluate(data)
        .expect("evaluate")
        .last()
        .map_or(0.0, |p| p.accuracy)
}

fn criterion_1(watch: &BufferWatch) -> Verdict {
    let start = Instant::now();
    let per_speaker = num_spk_utts(120, &[5; 8], &[0; 8]);
    let secs = start.elapsed().as_secs_f64();
    let ok = per_speaker.as_ref().is_ok_and(|&n| n == 3)
        && watch.max_rows <= 120
        && watch.epochs > 0
        && secs < 1.0;
    verdict(
        ok,
        format!(
            "num_spk_utts={per_speaker:?}, max buffer rows {} over {} epochs",
            watch.max_rows, watch.epochs
        ),
    )
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut mismatches, mut worst_ratio) = (0, 0.0f64);
    for _ in 0..1000 {
        let n = rng.random_range(1..=100);
        let range = rng.random_range(1..=16u16);
        let buckets: Vec<u16> = (0..n).map(|_| rng.random_range(0..range)).collect();
        let speakers: Vec<u32> = (0..n as u32).collect();
        let (got, ops) = longest_unique_buckets_counted(&buckets, &speakers);
        mismatches += (got != support::first_occurrence_oracle(&buckets, &speakers)) as usize;
        worst_ratio = worst_ratio.max(ops as f64 / n as f64);
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        mismatches == 0 && worst_ratio <= 1.0 && secs < 5.0,
        format!("{mismatches} mismatches, max ops/n {worst_ratio:.2}, {secs:.2}s"),
    )
}

fn criterion_3() -> Verdict {
    let start = Instant::now();
    let sup = support::supervised_worst(100);
    let two = support::two_view_worst(100);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        sup < 1e-4 && two < 1e-4 && secs < 30.0,
        format!("max relative error {sup:.2e} supervised, {two:.2e} two-view, {secs:.1}s"),
    )
}

fn criterion_4() -> Verdict {
    let start = Instant::now();
    support::check_registration_tables();
    support::check_removal_tables();
    let secs = start.elapsed().as_secs_f64();
    verdict(
        secs < 1.0,
        format!("16x16 registration and 16 removal memberships, {secs:.3}s"),
    )
}

fn criterion_5(watch: &mut BufferWatch) -> (Verdict, Vec<Trained>) {
    let start = Instant::now();
    let mut trained = Vec::new();
    let mut finals = Vec::new();
    let mut converged = true;
    for seed in SEEDS {
        let t0 = Instant::now();
        let data = synthetic(seed);
        let mut session = TrainingSession::new(session_config(seed, TrainMode::Supervised), &data)
            .expect("session");
        let outcome = train_agent(&mut session, &data, watch).expect("train");
        converged &= outcome.converged;
        finals.push(outcome.final_accuracy().unwrap_or(0.0));
        trained.push(Trained {
            data,
            session,
            seconds: t0.elapsed().as_secs_f64(),
        });
    }
    let secs = start.elapsed().as_secs_f64();
    let m = mean(&finals);
    (
        verdict(
            converged && m >= 0.95 && secs < 600.0,
            format!("final hardest-prefix accuracy {finals:.4?} mean {m:.4}, early stop fired: {converged}, {secs:.0}s"),
        ),
        trained,
    )
}

fn criterion_6(trained: &[Trained], watch: &mut BufferWatch) -> Verdict {
    let start = Instant::now();
    let new: Vec<u32> = (40..60).collect();
    let mut finals: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    let mut structure_ok = true;
    let mut rounds_seen = Vec::new();
    for t in trained {
        for pcnt in [50, 10] {
            let mut session = copy(&t.session);
            let rounds =
                register_speakers(&mut session, &t.data, &new, pcnt, watch).expect("register");
            let mut registered = BTreeSet::new();
            for r in &rounds {
                let distinct: BTreeSet<_> = r.unique_buckets.iter().collect();
                structure_ok &= distinct.len() == r.unique_buckets.len();
                registered.extend(r.speakers.iter().copied());
            }
            structure_ok &= rounds.len() >= 3 && registered == new.iter().copied().collect();
            rounds_seen.push(rounds.len());
            let report = session.evaluate(&t.data).expect("evaluate");
            structure_ok &= report.last().is_some_and(|p| p.utterances == 60 * 6);
            finals
                .entry(pcnt)
                .or_default()
                .push(report.last().map_or(0.0, |p| p.accuracy));
        }
    }
    let secs = start.elapsed().as_secs_f64() + trained.iter().map(|t| t.seconds).sum::<f64>();
    let (m50, m10) = (mean(&finals[&50]), mean(&finals[&10]));
    verdict(
        structure_ok && m50 >= 0.90 && m10 < m50 && secs < 900.0,
        format!(
            "rounds {rounds_seen:?}; pcnt_old 50 {:.4?} mean {m50:.4}; pcnt_old 10 {:.4?} mean {m10:.4} (needs < pcnt 50); {secs:.0}s incl. training",
            finals[&50], finals[&10]
        ),
    )
}

fn criterion_7(t: &Trained, watch: &mut BufferWatch) -> Verdict {
    let start = Instant::now();
    let before: BTreeMap<u16, f64> = t
        .session
        .evaluate(&t.data)
        .expect("evaluate")
        .prefixes
        .iter()
        .map(|p| (p.bucket, p.accuracy))
        .collect();
    let mut ok = true;
    let mut parts = Vec::new();
    for k in 1..=3u32 {
        let mut session = copy(&t.session);
        let request = BTreeMap::from([(4u16, (20..20 + k).collect::<Vec<u32>>())]);
        let removal = remove_speakers(&mut session, &t.data, &request, watch).expect("remove");
        let target = (5 - k) as f64 / 5.0;
        let acc = removal.buckets[0].accuracy.unwrap_or(f64::NAN);
        let worst_drop = removal
            .prefix_accuracies
            .iter()
            .map(|(b, a)| before[b] - a)
            .fold(0.0f64, f64::max);
        let back = reregister_speakers(&mut session, &t.data, &request, watch).expect("rereg");
        let restored = back.buckets[0].accuracy.unwrap_or(f64::NAN);
        ok &= (acc - target).abs() <= 0.05 && worst_drop <= 0.02 && restored >= 0.95;
        parts.push(format!(
            "k={k}: {acc:.3} (target {target:.1}), other prefixes drop {worst_drop:.3}, re-registered {restored:.3}"
        ));
    }
    let secs = start.elapsed().as_secs_f64() + t.seconds;
    verdict(
        ok && secs < 600.0,
        format!("{}; {secs:.0}s incl. training", parts.join("; ")),
    )
}

fn criterion_8() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = DcfParams::default();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let t = support::random_trials(&mut rng);
        worst = worst
            .max((eer(&t) - support::eer_oracle(&t)).abs())
            .max((min_dcf(&t, &params) - support::dcf_oracle(&t, &params)).abs())
            .max((min_cllr(&t) - support::cllr_oracle(&t)).abs());
    }
    let perfect = TrialSet::new(
        vec![0.9, 0.7, 0.2, -0.1, 0.0],
        vec![true, true, false, false, false],
    )
    .expect("trials");
    let zeros = [
        eer(&perfect),
        min_dcf(&perfect, &params),
        min_cllr(&perfect),
    ];
    verdict(
        worst < 1e-6 && zeros == [0.0; 3],
        format!("max deviation from oracles {worst:.2e}, perfect separation gives {zeros:?}"),
    )
}

fn artifact_hashes(dir: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(p) = stack.pop() {
        for entry in std::fs::read_dir(&p).expect("read run dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n != "timing.jsonl") {
                let digest = Sha256::digest(std::fs::read(&path).expect("read artifact"));
                let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
                out.insert(path.strip_prefix(dir).unwrap().display().to_string(), hex);
            }
        }
    }
    out
}

fn criterion_9() -> Verdict {
    let tmp = tempfile::tempdir().expect("tempdir");
    let commands: [&[&str]; 6] = [
        &["train"],
        &["register", "--new-speakers", "4"],
        &["remove", "--bucket", "4", "--speakers", "20"],
        &["rereg", "--bucket", "4", "--speakers", "20"],
        &["eval"],
        &["export-embeddings"],
    ];
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let dir = tmp.path().join(name);
        let mut per_command = Vec::new();
        for args in commands {
            let status = Command::new(env!("CARGO_BIN_EXE_consentctl"))
                .args(args)
                .args([
                    "--out",
                    dir.to_str().unwrap(),
                    "--epochs",
                    "2",
                    "--seed",
                    "5",
                ])
                .output()
                .expect("spawn consentctl");
            if !status.status.success() {
                return verdict(
                    false,
                    format!(
                        "{args:?} failed: {}",
                        String::from_utf8_lossy(&status.stderr)
                    ),
                );
            }
            per_command.push(artifact_hashes(&dir));
        }
        runs.push(per_command);
    }
    let files: usize = runs[0].last().map_or(0, |h| h.len());
    let differing: Vec<String> = commands
        .iter()
        .zip(runs[0].iter().zip(&runs[1]))
        .filter(|(_, (a, b))| a != b)
        .map(|(c, _)| c[0].to_string())
        .collect();
    verdict(
        differing.is_empty(),
        format!("{} commands twice, {files} artifact files hash-identical; differing after: {differing:?}", commands.len()),
    )
}

fn criterion_10(watch: &mut BufferWatch) -> Verdict {
    let start = Instant::now();
    let (mut finals, mut in_loop) = (Vec::new(), Vec::new());
    for seed in SEEDS {
        let data = synthetic(seed);
        let mut session =
            TrainingSession::new(session_config(seed, TrainMode::Unsupervised), &data)
                .expect("session");
        let outcome = train_agent(&mut session, &data, watch).expect("train");
        in_loop.push(outcome.final_accuracy().unwrap_or(0.0));
        finals.push(hardest(&session, &data));
    }
    let m = mean(&finals);
    verdict(
        m >= 0.90,
        format!(
            "nearest-prototype cosine accuracy {finals:.4?} mean {m:.4} (last training epoch, buffer prototypes: mean {:.4}), {:.0}s",
            mean(&in_loop),
            start.elapsed().as_secs_f64()
        ),
    )
}

fn guarded(f: impl FnOnce() -> Verdict) -> Verdict {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        verdict(false, format!("panicked: {msg}"))
    })
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut results: BTreeMap<u8, Verdict> = BTreeMap::new();
    let mut watch = BufferWatch::default();
    let report = |id: u8, v: Verdict, results: &mut BTreeMap<u8, Verdict>| {
        eprintln!("criterion {id} done");
        results.insert(id, v);
    };
    report(2, guarded(criterion_2), &mut results);
    report(3, guarded(criterion_3), &mut results);
    report(4, guarded(criterion_4), &mut results);
    report(8, guarded(criterion_8), &mut results);

    let mut trained = Vec::new();
    let v5 = guarded(|| {
        let (v, t) = criterion_5(&mut watch);
        trained = t;
        v
    });
    report(5, v5, &mut results);
    if trained.len() == SEEDS.len() {
        report(
            6,
            guarded(|| criterion_6(&trained, &mut watch)),
            &mut results,
        );
        report(
            7,
            guarded(|| criterion_7(&trained[0], &mut watch)),
            &mut results,
        );
    } else {
        for id in [6, 7] {
            report(
                id,
                verdict(false, "supervised training did not complete".into()),
                &mut results,
            );
        }
    }
    report(10, guarded(|| criterion_10(&mut watch)), &mut results);
    report(1, guarded(|| criterion_1(&watch)), &mut results);
    report(9, guarded(criterion_9), &mut results);

    println!();
    for (id, v) in &results {
        println!(
            "criterion {id:>2}: {} | {}",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
    }
    let failed = results.values().filter(|v| !v.pass).count();
    println!(
        "\nacceptance: {} passed, {failed} failed",
        results.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
