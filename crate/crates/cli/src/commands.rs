use std::collections::BTreeMap;

use consent_core::classifier::ProgressiveReport;
use consent_core::datastore::{
    read_features, synth_speakers, write_embeddings, Dataset, UNASSIGNED_BUCKET,
};
use consent_core::metrics::{build_trials, verification_report, VerificationReport};
use consent_core::registrar::{register_speakers, RoundReport};
use consent_core::remover::{remove_speakers, reregister_speakers, RemovalReport};
use consent_core::trainer::{train_agent, TrainingSession};
use consent_core::{BucketId, ConsentError, LabeledEmbeddings, SpeakerId};
use log::info;
use ndarray::{concatenate, Array2, ArrayView2, Axis};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::rundir::{HistoryWriter, RunDir};

/// Training settings come from the current config; the agent layout and
/// model sizes stay those the session was created with.
fn apply_settings(session: &mut TrainingSession, cfg: &RunConfig) -> Result<(), CliError> {
    let wanted = cfg.session_config();
    let have = &session.config;
    if wanted.agent != have.agent || wanted.embed_dim != have.embed_dim {
        return Err(CliError::Config(
            "session.agent and session.embed_dim must match the trained session".into(),
        ));
    }
    session.config = consent_core::trainer::SessionConfig {
        agent: have.agent.clone(),
        embed_dim: have.embed_dim,
        max_mem: have.max_mem,
        ..wanted
    };
    Ok(())
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset, CliError> {
    match &cfg.dataset.feature_file {
        Some(path) => Ok(read_features(path)?),
        None => Ok(synth_speakers(
            &cfg.dataset.synthetic.clone().unwrap_or_default(),
        )?),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub converged: bool,
    pub final_accuracy: Option<f64>,
    pub report: ProgressiveReport,
}

/// Fresh training of every bucket. Earlier artifacts in the run directory
/// are discarded.
pub fn train(cfg: &RunConfig, dir: &RunDir) -> Result<TrainReport, CliError> {
    let data = load_dataset(cfg)?;
    dir.reset()?;
    let mut session = TrainingSession::new(cfg.session_config(), &data)?;
    let mut history = HistoryWriter::open(dir, "train")?;
    let outcome = train_agent(&mut session, &data, &mut history)?;
    history.finish()?;
    let report = TrainReport {
        epochs: outcome.epochs_run,
        converged: outcome.converged,
        final_accuracy: outcome.final_accuracy(),
        report: session.evaluate(&data)?,
    };
    dir.save_session(&session)?;
    dir.write_json("report.json", &report)?;
    info!(
        "trained {} epochs, final accuracy {:?}",
        report.epochs, report.final_accuracy
    );
    Ok(report)
}

/// Unassigned speakers not yet known to the session, ascending.
pub fn registration_pool(session: &TrainingSession, data: &Dataset) -> Vec<SpeakerId> {
    data.speakers()
        .filter(|&s| session.classes.row_of(s).is_none())
        .filter(|&s| {
            data.utterances_of(s)
                .ok()
                .and_then(|idx| idx.first())
                .is_some_and(|&i| data.get(i).bucket == UNASSIGNED_BUCKET)
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct RegisterReport {
    pub pcnt_old: u32,
    pub speakers: Vec<SpeakerId>,
    pub rounds: Vec<RoundReport>,
    pub report: ProgressiveReport,
}

pub fn register(cfg: &RunConfig, dir: &RunDir) -> Result<RegisterReport, CliError> {
    let data = load_dataset(cfg)?;
    let mut session = dir.load_session()?;
    apply_settings(&mut session, cfg)?;
    let pool = registration_pool(&session, &data);
    let count = cfg.registration.new_speakers.unwrap_or(pool.len());
    if count > pool.len() {
        return Err(CliError::Config(format!(
            "{count} new speakers requested, only {} unassigned speakers available",
            pool.len()
        )));
    }
    let speakers = pool[..count].to_vec();
    let pcnt_old = cfg.registration.pcnt_old;
    let rounds = if speakers.is_empty() {
        Vec::new()
    } else {
        let mut history = HistoryWriter::open(dir, "register")?;
        let rounds = register_speakers(&mut session, &data, &speakers, pcnt_old, &mut history)?;
        history.finish()?;
        for r in &rounds {
            dir.append_jsonl("rounds.jsonl", r)?;
        }
        rounds
    };
    let report = RegisterReport {
        pcnt_old,
        speakers,
        rounds,
        report: session.evaluate(&data)?,
    };
    dir.save_session(&session)?;
    dir.write_json("report.json", &report)?;
    Ok(report)
}

/// Removal (`restore == false`) or re-registration of `speakers` in `bucket`.
pub fn remove(
    cfg: &RunConfig,
    dir: &RunDir,
    bucket: BucketId,
    speakers: &[SpeakerId],
    restore: bool,
) -> Result<RemovalReport, CliError> {
    let data = load_dataset(cfg)?;
    let mut session = dir.load_session()?;
    apply_settings(&mut session, cfg)?;
    let request = BTreeMap::from([(bucket, speakers.to_vec())]);
    let command = if restore { "rereg" } else { "remove" };
    let mut history = HistoryWriter::open(dir, command)?;
    let report = if restore {
        reregister_speakers(&mut session, &data, &request, &mut history)?
    } else {
        remove_speakers(&mut session, &data, &request, &mut history)?
    };
    history.finish()?;
    dir.save_session(&session)?;
    dir.write_json("report.json", &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub report: ProgressiveReport,
    pub verification: VerificationReport,
}

/// Hold-out embeddings of every active bucket's members through that
/// bucket's encoder.
fn holdout_groups(
    session: &TrainingSession,
    data: &Dataset,
) -> Result<Vec<(BucketId, LabeledEmbeddings)>, CliError> {
    session
        .active_buckets()
        .into_iter()
        .map(|b| Ok((b, session.holdout_embeddings(data, b, session.members(b)?)?)))
        .collect()
}

pub fn eval(cfg: &RunConfig, dir: &RunDir) -> Result<EvalReport, CliError> {
    let data = load_dataset(cfg)?;
    let session = dir.load_session()?;
    let groups = holdout_groups(&session, &data)?;
    let dim = groups.first().map_or(0, |(_, e)| e.dim());
    let views: Vec<_> = groups.iter().map(|(_, e)| e.embeddings.view()).collect();
    let stacked = ndarray_concat(&views, dim)?;
    let labels = groups
        .iter()
        .flat_map(|(_, e)| e.labels.iter().copied())
        .collect();
    let all = LabeledEmbeddings::new(stacked, labels)?;
    let trials = build_trials(&all, cfg.eval.max_trials, cfg.seed)?;
    let report = EvalReport {
        report: session.evaluate(&data)?,
        verification: verification_report(&trials, &cfg.eval.dcf),
    };
    dir.write_json("eval.json", &report)?;
    Ok(report)
}

fn ndarray_concat(views: &[ArrayView2<'_, f64>], dim: usize) -> Result<Array2<f64>, CliError> {
    if views.is_empty() {
        return Ok(Array2::zeros((0, dim)));
    }
    concatenate(Axis(0), views)
        .map_err(|e| CliError::Domain(ConsentError::ShapeMismatch(e.to_string())))
}

#[derive(Debug, Clone, Serialize)]
pub struct ExportReport {
    pub path: String,
    pub rows: usize,
}

/// Hold-out embeddings in the feature container, tagged per bucket.
pub fn export_embeddings(cfg: &RunConfig, dir: &RunDir) -> Result<ExportReport, CliError> {
    let data = load_dataset(cfg)?;
    let session = dir.load_session()?;
    let groups = holdout_groups(&session, &data)?;
    let refs: Vec<(BucketId, &LabeledEmbeddings)> = groups.iter().map(|(b, e)| (*b, e)).collect();
    let path = dir.path("embeddings.spkf");
    write_embeddings(&path, &refs)?;
    Ok(ExportReport {
        path: path.display().to_string(),
        rows: groups.iter().map(|(_, e)| e.len()).sum(),
    })
}
