use rayon::prelude::*;

use super::client::{fedrep_local_round, local_epoch, ClientRngs};
use super::server::{client_accuracy, Evaluation};
use super::{ClientState, GlobalState, ModelConfig, RoundConfig};
use crate::datagen::ClientDataset;
use crate::error::{FlicError, Result};
use crate::neural::MlpParams;
use crate::rng::{stream, tag};

#[derive(Debug, Clone)]
pub struct LocalBaselineOutcome {
    pub clients: Vec<ClientState>,
    /// Each client's private copy of the representation.
    pub alphas: Vec<MlpParams>,
    pub evaluation: Evaluation,
    pub rounds_per_client: usize,
    /// Mean over clients of the last round's mean objective (NaN with zero rounds).
    pub final_loss: f64,
}

/// Every client trains alone with the FedRep schedule and a private copy of
/// α. Each client gets `round(T |A| / b)` rounds, the expected number of
/// participations under federated training.
pub fn local_baseline(clients: Vec<ClientState>, initial_alpha: &MlpParams, cfg: &RoundConfig) -> Result<LocalBaselineOutcome> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(FlicError::Empty("local_baseline: no clients"));
    }
    let b = clients.len();
    let rounds = ((cfg.rounds * cfg.active_count(b)) as f64 / b as f64).round() as usize;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| FlicError::InvalidArgument(format!("cannot start worker pool: {e}")))?;
    // Anchors are never read by the FedRep path; any valid set will do.
    let placeholder = crate::anchors::AnchorSet::new(
        vec![nalgebra::DVector::zeros(initial_alpha.input_dim())],
        vec![nalgebra::DMatrix::identity(initial_alpha.input_dim(), initial_alpha.input_dim())],
        false,
    )?;
    let trained: Vec<Result<(ClientState, MlpParams, f64)>> = pool.install(|| {
        clients
            .into_par_iter()
            .map(|mut client| {
                let mut private = GlobalState {
                    alpha: initial_alpha.clone(),
                    anchors: placeholder.clone(),
                    round: 0,
                };
                let mut last = f64::NAN;
                for t in 0..rounds {
                    let out = fedrep_local_round(&mut client, &private, cfg, t)?;
                    private.alpha = out.alpha;
                    private.round = t + 1;
                    last = out.loss;
                }
                Ok((client, private.alpha, last))
            })
            .collect()
    });
    let trained: Vec<(ClientState, MlpParams, f64)> = trained.into_iter().collect::<Result<_>>()?;
    let acc = trained
        .iter()
        .map(|(c, a, _)| client_accuracy(c, a))
        .collect::<Result<Vec<_>>>()?;
    let final_loss = trained.iter().map(|t| t.2).sum::<f64>() / b as f64;
    let (clients, alphas): (Vec<_>, Vec<_>) = trained.into_iter().map(|(c, a, _)| (c, a)).unzip();
    Ok(LocalBaselineOutcome {
        clients,
        alphas,
        evaluation: Evaluation::from_accuracies(acc)?,
        rounds_per_client: rounds,
        final_loss,
    })
}

const ONBOARD_SALT: u64 = 0x0b0a_4d00;

/// Fit (φ, β) for a client that joins after training, with α and the anchors
/// frozen at the server's values. Runs `rounds * cfg.local_steps` steps.
pub fn onboard_new_client(
    data: &ClientDataset,
    global: &GlobalState,
    model: &ModelConfig,
    cfg: &RoundConfig,
    rounds: usize,
) -> Result<ClientState> {
    cfg.validate()?;
    if let Some(&c) = data.classes.iter().find(|&&c| c >= global.anchors.num_classes()) {
        return Err(FlicError::UnknownClass {
            class: c,
            num_classes: global.anchors.num_classes(),
        });
    }
    let mut client = ClientState::from_dataset(data, model, cfg, 0.0)?;
    client.validate(global.anchors.num_classes(), global.anchors.latent_dim())?;
    for t in 0..rounds {
        let mut rngs = ClientRngs {
            batch: stream(cfg.seed, &[tag::BATCH, data.client_id as u64, t as u64, ONBOARD_SALT]),
            anchor: stream(cfg.seed, &[tag::ANCHOR, data.client_id as u64, t as u64, ONBOARD_SALT]),
        };
        local_epoch(&mut client, global, cfg, t, &mut rngs)?;
    }
    Ok(client)
}
