use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::client::{client_local_round, fedrep_local_round, LocalOutcome};
use super::messages::{Direction, Message, MessageLog, PayloadKind};
use super::{ClientState, GlobalState, RoundConfig};
use crate::aggregate::{participation_weights, weighted_sum};
use crate::anchors::barycenter_average;
use crate::error::{FlicError, Result};
use crate::neural::MlpParams;
use crate::rng::{stream, tag};

/// Uniform subset of size `max(1, floor(r b))`, sorted ascending.
pub fn select_active_clients(num_clients: usize, participation: f64, seed: u64, round: usize) -> Result<Vec<usize>> {
    if num_clients == 0 {
        return Err(FlicError::Empty("select_active_clients: no clients"));
    }
    if !(participation > 0.0 && participation <= 1.0) {
        return Err(FlicError::InvalidArgument(format!("participation must be in (0, 1], got {participation}")));
    }
    let m = ((participation * num_clients as f64).floor() as usize).clamp(1, num_clients);
    if m == num_clients {
        return Ok((0..num_clients).collect());
    }
    let mut rng = stream(seed, &[tag::SELECTION, round as u64]);
    let mut ids = index::sample(&mut rng, num_clients, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// `(b/|A|) Σ_i ω_i α_i`, parameterwise.
pub fn aggregate_alpha(proposals: &[&MlpParams], weights: &[f64], total_clients: usize) -> Result<MlpParams> {
    let first = *proposals.first().ok_or(FlicError::Empty("aggregate_alpha: no proposals"))?;
    let flats: Vec<Vec<f64>> = proposals
        .iter()
        .map(|p| {
            if p.layers.len() != first.layers.len()
                || p.layers.iter().zip(&first.layers).any(|(a, b)| a.weight.shape() != b.weight.shape() || a.activation != b.activation)
            {
                Err(FlicError::dims("aggregate_alpha proposal shape", first.num_params(), p.num_params()))
            } else {
                Ok(p.to_flat())
            }
        })
        .collect::<Result<_>>()?;
    let w = participation_weights(weights, total_clients)?;
    let refs: Vec<&[f64]> = flats.iter().map(Vec::as_slice).collect();
    let mut out = first.clone();
    out.set_flat(&weighted_sum(&refs, &w)?)?;
    Ok(out)
}

/// Fraction of rows whose argmax (first index on ties) equals the label.
pub fn accuracy(logits: &DMatrix<f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(FlicError::Empty("accuracy: empty test set"));
    }
    if logits.nrows() != labels.len() {
        return Err(FlicError::dims("accuracy labels", logits.nrows(), labels.len()));
    }
    let correct = logits
        .row_iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best == y
        })
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Test accuracy of `β_i ∘ α ∘ φ_i` on the client's held-out split.
pub fn client_accuracy(client: &ClientState, alpha: &MlpParams) -> Result<f64> {
    if client.test_y.is_empty() {
        return Err(FlicError::InvalidArgument(format!("client {} has an empty test set", client.id)));
    }
    let logits = client.beta.predict(&alpha.predict(&client.phi.predict(&client.test_x)?)?)?;
    accuracy(&logits, &client.test_y)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub per_client: Vec<f64>,
    /// Unweighted mean over clients.
    pub mean: f64,
}

impl Evaluation {
    pub fn from_accuracies(per_client: Vec<f64>) -> Result<Self> {
        if per_client.is_empty() {
            return Err(FlicError::Empty("evaluation: no clients"));
        }
        let mean = per_client.iter().sum::<f64>() / per_client.len() as f64;
        Ok(Self { per_client, mean })
    }

    pub fn min(&self) -> f64 {
        self.per_client.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.per_client.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn evaluate(clients: &[ClientState], global: &GlobalState) -> Result<Evaluation> {
    let acc = clients
        .iter()
        .map(|c| client_accuracy(c, &global.alpha))
        .collect::<Result<Vec<_>>>()?;
    Evaluation::from_accuracies(acc)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    /// Mean local objective over the round's active clients.
    pub train_loss: f64,
    pub client_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub min_accuracy: f64,
    pub max_accuracy: f64,
    pub wall_ms: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    pub clients: Vec<ClientState>,
    pub global: GlobalState,
    pub metrics: Vec<MetricsRecord>,
    pub messages: MessageLog,
}

#[derive(Clone, Copy)]
enum LocalRule {
    Flic,
    FedRep,
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| FlicError::InvalidArgument(format!("cannot start worker pool: {e}")))
}

fn payload_bytes(global: &GlobalState) -> u64 {
    8 * (global.alpha.num_params() + global.anchors.num_values()) as u64
}

fn run(clients: Vec<ClientState>, global: GlobalState, cfg: &RoundConfig, rule: LocalRule) -> Result<TrainingOutcome> {
    cfg.validate()?;
    global.validate()?;
    if clients.is_empty() {
        return Err(FlicError::Empty("run_training: no clients"));
    }
    let latent = global.anchors.latent_dim();
    let num_classes = global.anchors.num_classes();
    for (pos, c) in clients.iter().enumerate() {
        if c.id != pos {
            return Err(FlicError::InvalidArgument(format!("client at position {pos} has id {}", c.id)));
        }
        c.validate(num_classes, latent)?;
    }
    let pool = build_pool(cfg.workers)?;
    let mut clients = clients;
    let mut global = global;
    let mut metrics = Vec::with_capacity(cfg.rounds);
    let mut messages = MessageLog::new();
    let b = clients.len();

    for _ in 0..cfg.rounds {
        let t = global.round;
        let started = Instant::now();
        let active = select_active_clients(b, cfg.participation, cfg.seed, t)?;
        let bytes = payload_bytes(&global);
        for &i in &active {
            messages.push(Message {
                round: t,
                direction: Direction::Down,
                client: i,
                payload: PayloadKind::SharedParameters,
                bytes,
            });
        }

        let mut slots: Vec<&mut ClientState> = clients.iter_mut().filter(|c| active.binary_search(&c.id).is_ok()).collect();
        let g = &global;
        let outcomes: Vec<Result<LocalOutcome>> = pool.install(|| {
            slots
                .par_iter_mut()
                .map(|c| match rule {
                    LocalRule::Flic => client_local_round(c, g, cfg, t),
                    LocalRule::FedRep => fedrep_local_round(c, g, cfg, t),
                })
                .collect()
        });
        let outcomes: Vec<LocalOutcome> = outcomes.into_iter().collect::<Result<_>>()?;

        for (&i, o) in active.iter().zip(&outcomes) {
            messages.push(Message {
                round: t,
                direction: Direction::Up,
                client: i,
                payload: PayloadKind::LocalProposal,
                bytes: 8 * (o.alpha.num_params() + o.anchors.num_values()) as u64,
            });
        }
        let weights: Vec<f64> = active.iter().map(|&i| clients[i].weight).collect();
        let alphas: Vec<&MlpParams> = outcomes.iter().map(|o| &o.alpha).collect();
        let alpha = aggregate_alpha(&alphas, &weights, b)?;
        let locals: Vec<_> = outcomes.iter().map(|o| o.anchors.clone()).collect();
        let anchors = barycenter_average(&locals, &weights, b)?;
        if !(alpha.iter_values().all(f64::is_finite) && anchors.is_finite()) {
            return Err(FlicError::Divergence {
                client: active[0],
                round: t,
                step: cfg.local_steps,
                reason: "non-finite aggregate".into(),
            });
        }
        global = GlobalState {
            alpha,
            anchors,
            round: t + 1,
        };

        let train_loss = outcomes.iter().map(|o| o.loss).sum::<f64>() / outcomes.len() as f64;
        let eval = evaluate(&clients, &global)?;
        let (bytes_up, bytes_down) = messages.round_bytes(t);
        metrics.push(MetricsRecord {
            round: t,
            train_loss,
            mean_accuracy: eval.mean,
            min_accuracy: eval.min(),
            max_accuracy: eval.max(),
            client_accuracy: eval.per_client,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            bytes_up,
            bytes_down,
        });
    }
    Ok(TrainingOutcome {
        clients,
        global,
        metrics,
        messages,
    })
}

/// `T` rounds of select, broadcast, concurrent local rounds, aggregation.
/// Client `i` must sit at position `i`.
pub fn run_training(clients: Vec<ClientState>, global: GlobalState, cfg: &RoundConfig) -> Result<TrainingOutcome> {
    run(clients, global, cfg, LocalRule::Flic)
}

/// The same loop with plain FedRep local rounds.
pub fn run_fedrep(clients: Vec<ClientState>, global: GlobalState, cfg: &RoundConfig) -> Result<TrainingOutcome> {
    run(clients, global, cfg, LocalRule::FedRep)
}
