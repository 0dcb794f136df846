use std::collections::BTreeMap;

use rand::seq::index;

use super::objective::{client_objective, group_rows_by_class, ObjectiveBatch};
use super::{ClientState, GlobalState, RoundConfig};
use crate::anchors::{local_anchor_update, sample_anchor, AnchorSet, AnchorStep};
use crate::error::{FlicError, Result};
use crate::gaussian::empirical_gaussian;
use crate::neural::{cross_entropy, MlpParams};
use crate::rng::{stream, tag, SimRng};

/// What an active client sends back to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalOutcome {
    pub alpha: MlpParams,
    pub anchors: AnchorSet,
    /// Mean objective over the local steps.
    pub loss: f64,
}

pub(crate) struct ClientRngs {
    pub batch: SimRng,
    pub anchor: SimRng,
}

impl ClientRngs {
    pub fn for_round(seed: u64, client: usize, round: usize) -> Self {
        Self {
            batch: stream(seed, &[tag::BATCH, client as u64, round as u64]),
            anchor: stream(seed, &[tag::ANCHOR, client as u64, round as u64]),
        }
    }
}

fn sample_batch(client: &ClientState, size: usize, rng: &mut SimRng) -> (nalgebra::DMatrix<f64>, Vec<usize>) {
    let n = client.train_x.nrows();
    let idx = index::sample(rng, n, size.min(n)).into_vec();
    let x = nalgebra::DMatrix::from_fn(idx.len(), client.dim, |r, c| client.train_x[(idx[r], c)]);
    let y = idx.iter().map(|&i| client.train_y[i]).collect();
    (x, y)
}

fn draw_batch(
    client: &ClientState,
    anchors: &AnchorSet,
    cfg: &RoundConfig,
    rngs: &mut ClientRngs,
) -> Result<ObjectiveBatch> {
    let (x, y) = sample_batch(client, cfg.batch_size, &mut rngs.batch);
    let anchor_samples = if cfg.lambda2 != 0.0 {
        client
            .support
            .iter()
            .map(|&c| sample_anchor(anchors, c, cfg.anchor_samples, &mut rngs.anchor))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    Ok(ObjectiveBatch { x, y, anchor_samples })
}

fn diverged(client: usize, round: usize, step: usize, reason: impl ToString) -> FlicError {
    FlicError::Divergence {
        client,
        round,
        step,
        reason: reason.to_string(),
    }
}

/// Numeric blow-ups become divergence reports; anything else passes through.
fn tag_divergence<T>(r: Result<T>, client: usize, round: usize, step: usize) -> Result<T> {
    r.map_err(|e| match e {
        FlicError::NonFinite(_) | FlicError::Singular(_) => diverged(client, round, step, e),
        other => other,
    })
}

/// M Adam steps on (φ_i, β_i) with α and the anchors held fixed. Returns the
/// mean objective.
pub(crate) fn local_epoch(
    client: &mut ClientState,
    global: &GlobalState,
    cfg: &RoundConfig,
    round: usize,
    rngs: &mut ClientRngs,
) -> Result<f64> {
    let mut total = 0.0;
    for step in 0..cfg.local_steps {
        let batch = draw_batch(client, &global.anchors, cfg, rngs)?;
        let g = tag_divergence(
            client_objective(
                &client.phi,
                &global.alpha,
                &client.beta,
                &global.anchors,
                &batch,
                cfg.lambda1,
                cfg.lambda2,
                cfg.eps,
            ),
            client.id,
            round,
            step,
        )?;
        if !g.value.total.is_finite() {
            return Err(diverged(client.id, round, step, "non-finite local objective"));
        }
        total += g.value.total;
        client.phi_opt.step(&mut client.phi, &g.phi)?;
        client.beta_opt.step(&mut client.beta, &g.beta)?;
        if !(client.phi.iter_values().all(f64::is_finite) && client.beta.iter_values().all(f64::is_finite)) {
            return Err(diverged(client.id, round, step, "non-finite parameters after update"));
        }
    }
    Ok(total / cfg.local_steps as f64)
}

/// One participation of a client: M local steps, then a single step on α and
/// on the anchors of the held classes. `global` is only read.
pub fn client_local_round(
    client: &mut ClientState,
    global: &GlobalState,
    cfg: &RoundConfig,
    round: usize,
) -> Result<LocalOutcome> {
    cfg.validate()?;
    let mut rngs = ClientRngs::for_round(cfg.seed, client.id, round);
    let loss = local_epoch(client, global, cfg, round, &mut rngs)?;
    let step = cfg.local_steps;

    let mut alpha = global.alpha.clone();
    let mut classifier_grads = BTreeMap::new();
    for s in 0..cfg.alpha_steps {
        let batch = draw_batch(client, &global.anchors, cfg, &mut rngs)?;
        let g = tag_divergence(
            client_objective(
                &client.phi,
                &alpha,
                &client.beta,
                &global.anchors,
                &batch,
                cfg.lambda1,
                cfg.lambda2,
                cfg.eps,
            ),
            client.id,
            round,
            step + s,
        )?;
        alpha.sgd_step(&g.alpha, cfg.global_lr)?;
        if s == 0 {
            classifier_grads = g.anchors;
        }
    }
    if !alpha.iter_values().all(f64::is_finite) {
        return Err(diverged(client.id, round, step, "non-finite alpha proposal"));
    }

    let mut empirical = BTreeMap::new();
    if cfg.lambda1 != 0.0 {
        let z = tag_divergence(client.phi.predict(&client.train_x), client.id, round, step)?;
        for (c, (_, points)) in group_rows_by_class(&z, &client.train_y) {
            empirical.insert(c, tag_divergence(empirical_gaussian(&points, cfg.eps), client.id, round, step)?);
        }
    }
    let anchor_step = AnchorStep {
        lr: cfg.global_lr,
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        eps: cfg.eps,
    };
    let anchors = tag_divergence(
        local_anchor_update(&global.anchors, &client.support, &empirical, &classifier_grads, &anchor_step),
        client.id,
        round,
        step,
    )?;
    Ok(LocalOutcome { alpha, anchors, loss })
}

/// Plain FedRep participation: data loss only, no anchors. Kept as its own
/// code path so the alignment terms can be checked to vanish exactly.
pub fn fedrep_local_round(
    client: &mut ClientState,
    global: &GlobalState,
    cfg: &RoundConfig,
    round: usize,
) -> Result<LocalOutcome> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, &[tag::BATCH, client.id as u64, round as u64]);
    let mut total = 0.0;
    for step in 0..cfg.local_steps {
        let (x, y) = sample_batch(client, cfg.batch_size, &mut rng);
        let (z, c_phi) = client.phi.forward(&x)?;
        let (h, c_alpha) = global.alpha.forward(&z)?;
        let (logits, c_beta) = client.beta.forward(&h)?;
        let (loss, g_logits) = cross_entropy(&logits, &y)?;
        if !loss.is_finite() {
            return Err(diverged(client.id, round, step, "non-finite local objective"));
        }
        total += loss;
        let (g_beta, g_h) = client.beta.backward(&c_beta, &g_logits)?;
        let (_, g_z) = global.alpha.backward(&c_alpha, &g_h)?;
        let (g_phi, _) = client.phi.backward(&c_phi, &g_z)?;
        client.phi_opt.step(&mut client.phi, &g_phi)?;
        client.beta_opt.step(&mut client.beta, &g_beta)?;
    }
    let mut alpha = global.alpha.clone();
    for _ in 0..cfg.alpha_steps {
        let (x, y) = sample_batch(client, cfg.batch_size, &mut rng);
        let z = client.phi.predict(&x)?;
        let (h, c_alpha) = alpha.forward(&z)?;
        let (logits, c_beta) = client.beta.forward(&h)?;
        let (_, g_logits) = cross_entropy(&logits, &y)?;
        let (_, g_h) = client.beta.backward(&c_beta, &g_logits)?;
        let (g_alpha, _) = alpha.backward(&c_alpha, &g_h)?;
        alpha.sgd_step(&g_alpha, cfg.global_lr)?;
    }
    Ok(LocalOutcome {
        alpha,
        anchors: global.anchors.clone(),
        loss: total / cfg.local_steps as f64,
    })
}
