//! The federated protocol: local (φ_i, β_i) training, one global step on the
//! shared representation α and the anchors, partial participation and
//! server-side averaging.

mod baseline;
mod client;
mod messages;
mod objective;
mod server;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::anchors::AnchorSet;
use crate::datagen::ClientDataset;
use crate::error::{FlicError, Result};
use crate::neural::{Activation, AdamConfig, AdamState, MlpParams};
use crate::rng::{stream, tag};

pub use baseline::{local_baseline, onboard_new_client, LocalBaselineOutcome};
pub use client::{client_local_round, fedrep_local_round, LocalOutcome};
pub use messages::{Direction, Message, MessageLog, PayloadKind};
pub use objective::{client_objective, group_rows_by_class, ObjectiveBatch, ObjectiveGrads, ObjectiveValue};
pub use server::{
    accuracy, aggregate_alpha, client_accuracy, evaluate, run_fedrep, run_training, select_active_clients,
    Evaluation, MetricsRecord, TrainingOutcome,
};

/// Client weights ω_i in the aggregation `(b/|A|) Σ ω_i x_i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// ω_i = 1/b.
    Uniform,
    /// ω_i = n_i / Σ_j n_j.
    DataSize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub rounds: usize,
    pub participation: f64,
    /// Local Adam steps M on (φ_i, β_i) per round.
    pub local_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Plain gradient step size for α and the anchors.
    pub global_lr: f64,
    /// Gradient steps on α per round; 1 is the single-step protocol.
    pub alpha_steps: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Anchor samples J per class and step.
    pub anchor_samples: usize,
    pub eps: f64,
    pub weighting: Weighting,
    pub workers: usize,
    pub seed: u64,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            participation: 0.1,
            local_steps: 10,
            batch_size: 100,
            lr: 1e-3,
            global_lr: 0.05,
            alpha_steps: 1,
            lambda1: 1e-3,
            lambda2: 1e-3,
            anchor_samples: 32,
            eps: 1e-6,
            weighting: Weighting::Uniform,
            workers: 1,
            seed: 0,
        }
    }
}

impl RoundConfig {
    /// Checks everything except the round count, which may be zero.
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(FlicError::config(key, msg));
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad("participation", format!("must be in (0, 1], got {}", self.participation));
        }
        for (key, v) in [
            ("local_steps", self.local_steps),
            ("batch_size", self.batch_size),
            ("alpha_steps", self.alpha_steps),
            ("anchor_samples", self.anchor_samples),
            ("workers", self.workers),
        ] {
            if v == 0 {
                return bad(key, "must be at least 1".into());
            }
        }
        for (key, v) in [
            ("lr", self.lr),
            ("global_lr", self.global_lr),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(key, format!("must be finite and non-negative, got {v}"));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return bad("eps", format!("must be positive, got {}", self.eps));
        }
        Ok(())
    }

    /// `max(1, floor(r b))`.
    pub fn active_count(&self, num_clients: usize) -> usize {
        ((self.participation * num_clients as f64).floor() as usize).clamp(1, num_clients.max(1))
    }
}

/// Layer widths shared by every client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub cov_learnable: bool,
    /// Anchor means are drawn as `scale * N(0, I)`; `None` means `sqrt(latent_dim)`.
    pub anchor_scale: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            latent_dim: 64,
            hidden_dim: 64,
            cov_learnable: true,
            anchor_scale: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("num_classes", self.num_classes),
            ("latent_dim", self.latent_dim),
            ("hidden_dim", self.hidden_dim),
        ] {
            if v == 0 {
                return Err(FlicError::config(key, "must be at least 1"));
            }
        }
        if let Some(s) = self.anchor_scale {
            if !(s.is_finite() && s >= 0.0) {
                return Err(FlicError::config("anchor_scale", format!("must be finite and non-negative, got {s}")));
            }
        }
        Ok(())
    }

    /// φ_i: `k_i -> hidden -> latent`.
    pub fn init_phi(&self, input_dim: usize, rng: &mut crate::rng::SimRng) -> Result<MlpParams> {
        MlpParams::init(
            &[input_dim, self.hidden_dim, self.latent_dim],
            &[Activation::Relu, Activation::Identity],
            rng,
        )
    }

    /// α: `latent -> latent`.
    pub fn init_alpha(&self, rng: &mut crate::rng::SimRng) -> Result<MlpParams> {
        MlpParams::init(&[self.latent_dim, self.latent_dim], &[Activation::LeakyRelu], rng)
    }

    /// β_i: `latent -> C` logits.
    pub fn init_beta(&self, rng: &mut crate::rng::SimRng) -> Result<MlpParams> {
        MlpParams::init(&[self.latent_dim, self.num_classes], &[Activation::Identity], rng)
    }
}

/// Stream id used for server-side initialization, outside the client id range.
const SERVER_ID: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState {
    pub alpha: MlpParams,
    pub anchors: AnchorSet,
    pub round: usize,
}

impl GlobalState {
    pub fn init(model: &ModelConfig, seed: u64) -> Result<Self> {
        model.validate()?;
        let alpha = model.init_alpha(&mut stream(seed, &[tag::INIT, SERVER_ID, 0]))?;
        let anchors = AnchorSet::init(
            model.num_classes,
            model.latent_dim,
            model.anchor_scale,
            model.cov_learnable,
            &mut stream(seed, &[tag::INIT, SERVER_ID, 1]),
        )?;
        Ok(Self { alpha, anchors, round: 0 })
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.input_dim() != self.anchors.latent_dim() {
            return Err(FlicError::dims("alpha input vs latent dim", self.anchors.latent_dim(), self.alpha.input_dim()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub dim: usize,
    /// Label classes Y_i held by this client.
    pub support: Vec<usize>,
    pub train_x: DMatrix<f64>,
    pub train_y: Vec<usize>,
    pub test_x: DMatrix<f64>,
    pub test_y: Vec<usize>,
    pub phi: MlpParams,
    pub beta: MlpParams,
    pub phi_opt: AdamState,
    pub beta_opt: AdamState,
    pub weight: f64,
}

impl ClientState {
    /// Fresh parameters drawn from the client's own initialization stream.
    pub fn from_dataset(data: &ClientDataset, model: &ModelConfig, cfg: &RoundConfig, weight: f64) -> Result<Self> {
        data.validate()?;
        model.validate()?;
        let mut rng = stream(cfg.seed, &[tag::INIT, data.client_id as u64]);
        let phi = model.init_phi(data.dim, &mut rng)?;
        let beta = model.init_beta(&mut rng)?;
        let (train_x, train_y) = data.train_split();
        let (test_x, test_y) = data.test_split();
        let adam = AdamConfig::with_lr(cfg.lr);
        let state = Self {
            id: data.client_id,
            dim: data.dim,
            support: data.classes.clone(),
            phi_opt: AdamState::new(&phi, adam),
            beta_opt: AdamState::new(&beta, adam),
            phi,
            beta,
            train_x,
            train_y,
            test_x,
            test_y,
            weight,
        };
        state.validate(model.num_classes, model.latent_dim)?;
        Ok(state)
    }

    /// A client carrying given parameters and fresh optimizer state.
    pub fn with_params(data: &ClientDataset, phi: MlpParams, beta: MlpParams, lr: f64, weight: f64) -> Result<Self> {
        data.validate()?;
        let (train_x, train_y) = data.train_split();
        let (test_x, test_y) = data.test_split();
        let adam = AdamConfig::with_lr(lr);
        Ok(Self {
            id: data.client_id,
            dim: data.dim,
            support: data.classes.clone(),
            phi_opt: AdamState::new(&phi, adam),
            beta_opt: AdamState::new(&beta, adam),
            phi,
            beta,
            train_x,
            train_y,
            test_x,
            test_y,
            weight,
        })
    }

    pub fn validate(&self, num_classes: usize, latent_dim: usize) -> Result<()> {
        if self.support.is_empty() {
            return Err(FlicError::Empty("client holds no classes"));
        }
        if let Some(&c) = self.support.iter().find(|&&c| c >= num_classes) {
            return Err(FlicError::UnknownClass { class: c, num_classes });
        }
        if let Some(&y) = self.train_y.iter().chain(&self.test_y).find(|y| !self.support.contains(y)) {
            return Err(FlicError::InvalidArgument(format!(
                "client {}: label {y} outside its class set {:?}",
                self.id, self.support
            )));
        }
        if self.phi.input_dim() != self.dim || self.train_x.ncols() != self.dim || self.test_x.ncols() != self.dim {
            return Err(FlicError::dims("client input dim", self.dim, self.phi.input_dim()));
        }
        if self.phi.output_dim() != latent_dim {
            return Err(FlicError::dims("client embedding dim", latent_dim, self.phi.output_dim()));
        }
        if self.beta.output_dim() != num_classes {
            return Err(FlicError::dims("client head classes", num_classes, self.beta.output_dim()));
        }
        Ok(())
    }
}

/// Build every client with ω_i set by `cfg.weighting`.
pub fn init_clients(datasets: &[ClientDataset], model: &ModelConfig, cfg: &RoundConfig) -> Result<Vec<ClientState>> {
    if datasets.is_empty() {
        return Err(FlicError::Empty("no clients"));
    }
    let total: usize = datasets.iter().map(|d| d.train.len()).sum();
    datasets
        .iter()
        .map(|d| {
            let w = match cfg.weighting {
                Weighting::Uniform => 1.0 / datasets.len() as f64,
                Weighting::DataSize => d.train.len() as f64 / total as f64,
            };
            ClientState::from_dataset(d, model, cfg, w)
        })
        .collect()
}
