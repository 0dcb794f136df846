//! Configuration, persistence and the drivers behind the command line.
//!
//! A run directory holds `metrics.csv`, `summary.json`, `messages.log`,
//! `checkpoint/model.ckpt` and, for generated data, `dataset/`. Theory runs
//! write `trace.csv` instead of metrics and checkpoint.

pub mod checkpoint;
pub mod config;
pub mod dataset_io;
pub mod metrics;

use std::path::Path;

use serde::Serialize;

use crate::datagen::{generate, ClientDataset};
use crate::error::{FlicError, Result};
use crate::federation::{
    client_accuracy, init_clients, local_baseline, onboard_new_client, run_training, ClientState, Evaluation,
    GlobalState, MessageLog, MetricsRecord,
};
use crate::theory::{run_theory_experiment, TraceRow};

pub use checkpoint::{Checkpoint, TensorFile};
pub use config::{parse_config, parse_config_str, ExperimentConfig, Mode};
pub use dataset_io::{read_dataset, write_dataset};
pub use metrics::{format_sig6, metrics_csv, write_metrics, METRICS_HEADER};

pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const MESSAGES_FILE: &str = "messages.log";
pub const TRACE_FILE: &str = "trace.csv";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const DATASET_DIR: &str = "dataset";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    pub clients: usize,
    pub rounds: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub client_accuracy: Option<Vec<f64>>,
    pub message_count: usize,
    pub bytes_up: u64,
    pub bytes_down: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub final_trace: Option<TraceRow>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_size: Option<f64>,
    pub config: ExperimentConfig,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| FlicError::io(path, e))
}

fn write_summary(path: &Path, s: &RunSummary) -> Result<()> {
    let text = serde_json::to_string_pretty(s).map_err(|e| FlicError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    write_text(path, &(text + "\n"))
}

/// Data named by the config, or freshly generated and saved under `out/dataset`.
pub fn load_or_generate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ClientDataset>> {
    match &cfg.dataset {
        Some(dir) => {
            let (manifest, clients) = read_dataset(dir)?;
            if manifest.num_classes != cfg.num_classes {
                return Err(FlicError::config(
                    "num_classes",
                    format!("config says {} but the dataset has {}", cfg.num_classes, manifest.num_classes),
                ));
            }
            Ok(clients)
        }
        None => {
            let spec = cfg.dataset_spec();
            let clients = generate(&spec)?;
            write_dataset(&out.join(DATASET_DIR), &clients, cfg.num_classes, Some(&spec))?;
            Ok(clients)
        }
    }
}

fn totals(log: &MessageLog) -> (u64, u64) {
    log.entries().iter().fold((0, 0), |(up, down), m| match m.direction {
        crate::federation::Direction::Up => (up + m.bytes, down),
        crate::federation::Direction::Down => (up, down + m.bytes),
    })
}

/// Execute the configured mode and write every artifact into `out`.
pub fn run_command(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| FlicError::io(out, e))?;
    let summary = match cfg.mode {
        Mode::Theory => {
            let trace = run_theory_experiment(&cfg.theory_config())?;
            write_text(&out.join(TRACE_FILE), &trace.to_csv())?;
            RunSummary {
                mode: cfg.mode,
                seed: cfg.seed,
                clients: cfg.theory_clients,
                rounds: cfg.theory_rounds,
                mean_accuracy: None,
                client_accuracy: None,
                message_count: 0,
                bytes_up: 0,
                bytes_down: 0,
                final_trace: trace.rows.last().copied(),
                step_size: Some(trace.step_size),
                config: cfg.clone(),
            }
        }
        Mode::Flic => {
            let data = load_or_generate(cfg, out)?;
            let round = cfg.round_config();
            let clients = init_clients(&data, &cfg.model_config(), &round)?;
            let global = GlobalState::init(&cfg.model_config(), cfg.seed)?;
            let run = run_training(clients, global, &round)?;
            write_metrics(&run.metrics, &out.join(METRICS_FILE))?;
            write_text(&out.join(MESSAGES_FILE), &run.messages.to_text())?;
            Checkpoint {
                global: run.global.clone(),
                phis: run.clients.iter().map(|c| c.phi.clone()).collect(),
                betas: run.clients.iter().map(|c| c.beta.clone()).collect(),
                alphas: None,
            }
            .save(&out.join(CHECKPOINT_DIR))?;
            let last = run.metrics.last();
            let (bytes_up, bytes_down) = totals(&run.messages);
            RunSummary {
                mode: cfg.mode,
                seed: cfg.seed,
                clients: run.clients.len(),
                rounds: cfg.rounds,
                mean_accuracy: last.map(|m| m.mean_accuracy),
                client_accuracy: last.map(|m| m.client_accuracy.clone()),
                message_count: run.messages.len(),
                bytes_up,
                bytes_down,
                final_trace: None,
                step_size: None,
                config: cfg.clone(),
            }
        }
        Mode::Local => {
            let data = load_or_generate(cfg, out)?;
            let round = cfg.round_config();
            let clients = init_clients(&data, &cfg.model_config(), &round)?;
            let global = GlobalState::init(&cfg.model_config(), cfg.seed)?;
            let started = std::time::Instant::now();
            let run = local_baseline(clients, &global.alpha, &round)?;
            let record = MetricsRecord {
                round: run.rounds_per_client,
                train_loss: run.final_loss,
                client_accuracy: run.evaluation.per_client.clone(),
                mean_accuracy: run.evaluation.mean,
                min_accuracy: run.evaluation.min(),
                max_accuracy: run.evaluation.max(),
                wall_ms: started.elapsed().as_secs_f64() * 1e3,
                bytes_up: 0,
                bytes_down: 0,
            };
            write_metrics(&[record], &out.join(METRICS_FILE))?;
            write_text(&out.join(MESSAGES_FILE), &MessageLog::new().to_text())?;
            Checkpoint {
                global,
                phis: run.clients.iter().map(|c| c.phi.clone()).collect(),
                betas: run.clients.iter().map(|c| c.beta.clone()).collect(),
                alphas: Some(run.alphas.clone()),
            }
            .save(&out.join(CHECKPOINT_DIR))?;
            RunSummary {
                mode: cfg.mode,
                seed: cfg.seed,
                clients: run.clients.len(),
                rounds: run.rounds_per_client,
                mean_accuracy: Some(run.evaluation.mean),
                client_accuracy: Some(run.evaluation.per_client),
                message_count: 0,
                bytes_up: 0,
                bytes_down: 0,
                final_trace: None,
                step_size: None,
                config: cfg.clone(),
            }
        }
    };
    write_summary(&out.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Rebuild clients from a checkpoint and dataset and score them.
pub fn evaluate_checkpoint(checkpoint_dir: &Path, dataset_dir: &Path) -> Result<Evaluation> {
    let ckpt = Checkpoint::load(checkpoint_dir)?;
    let (_, data) = read_dataset(dataset_dir)?;
    if data.len() != ckpt.phis.len() {
        return Err(FlicError::dims("checkpoint clients vs dataset", ckpt.phis.len(), data.len()));
    }
    let acc = data
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let client = ClientState::with_params(d, ckpt.phis[i].clone(), ckpt.betas[i].clone(), 0.0, 0.0)?;
            client.validate(ckpt.global.anchors.num_classes(), ckpt.global.anchors.latent_dim())?;
            let alpha = ckpt.alphas.as_ref().map_or(&ckpt.global.alpha, |a| &a[i]);
            client_accuracy(&client, alpha)
        })
        .collect::<Result<Vec<_>>>()?;
    Evaluation::from_accuracies(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OnboardReport {
    pub client: usize,
    pub accuracy: f64,
    /// Accuracy of the checkpoint's own parameters for this client, when it has them.
    pub reference_accuracy: Option<f64>,
    pub steps: usize,
}

/// Fit a client from `dataset_dir` against the frozen server state.
pub fn onboard_command(
    cfg: &ExperimentConfig,
    checkpoint_dir: &Path,
    dataset_dir: &Path,
    client: usize,
) -> Result<OnboardReport> {
    let ckpt = Checkpoint::load(checkpoint_dir)?;
    let (_, data) = read_dataset(dataset_dir)?;
    let d = data
        .get(client)
        .ok_or_else(|| FlicError::InvalidArgument(format!("dataset has no client {client}")))?;
    let model = cfg.model_config();
    let fitted = onboard_new_client(d, &ckpt.global, &model, &cfg.round_config(), cfg.onboard_rounds)?;
    let reference_accuracy = match (ckpt.phis.get(client), ckpt.betas.get(client)) {
        (Some(phi), Some(beta)) if ckpt.alphas.is_none() && phi.input_dim() == d.dim => {
            let original = ClientState::with_params(d, phi.clone(), beta.clone(), 0.0, 0.0)?;
            Some(client_accuracy(&original, &ckpt.global.alpha)?)
        }
        _ => None,
    };
    Ok(OnboardReport {
        client,
        accuracy: client_accuracy(&fitted, &ckpt.global.alpha)?,
        reference_accuracy,
        steps: cfg.onboard_rounds * cfg.local_steps,
    })
}
