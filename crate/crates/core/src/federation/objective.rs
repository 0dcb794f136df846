use std::collections::BTreeMap;

use nalgebra::DMatrix;

use crate::anchors::{AnchorGrad, AnchorSample, AnchorSet};
use crate::error::Result;
use crate::neural::{alignment_loss_grad, cross_entropy, MlpGrads, MlpParams};

/// Everything random in one evaluation of a client objective.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveBatch {
    pub x: DMatrix<f64>,
    pub y: Vec<usize>,
    /// One draw per class for the anchor-classification term.
    pub anchor_samples: Vec<AnchorSample>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub total: f64,
    pub data: f64,
    pub alignment: f64,
    pub anchor: f64,
}

/// Value and gradients of
/// `F = CE(β∘α∘φ) + λ₁ Σ_c W2²(μ_c, N(m̂_c, Σ̂_c + εI)) + λ₂ Σ_c CE(β∘α(Z_c), c)`.
///
/// `anchors` holds the gradient of the (unweighted) anchor-classification
/// term with respect to each sampled class's `(v_c, L_c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveGrads {
    pub value: ObjectiveValue,
    pub phi: MlpGrads,
    pub alpha: MlpGrads,
    pub beta: MlpGrads,
    pub anchors: BTreeMap<usize, AnchorGrad>,
}

/// Row indices and the gathered rows of `m` for each label.
pub fn group_rows_by_class(m: &DMatrix<f64>, labels: &[usize]) -> BTreeMap<usize, (Vec<usize>, DMatrix<f64>)> {
    let mut idx: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (r, &y) in labels.iter().enumerate() {
        idx.entry(y).or_default().push(r);
    }
    idx.into_iter()
        .map(|(c, rows)| {
            let g = DMatrix::from_fn(rows.len(), m.ncols(), |r, col| m[(rows[r], col)]);
            (c, (rows, g))
        })
        .collect()
}

/// Terms with a zero weight are skipped entirely, not multiplied by zero.
#[allow(clippy::too_many_arguments)]
pub fn client_objective(
    phi: &MlpParams,
    alpha: &MlpParams,
    beta: &MlpParams,
    anchors: &AnchorSet,
    batch: &ObjectiveBatch,
    lambda1: f64,
    lambda2: f64,
    eps: f64,
) -> Result<ObjectiveGrads> {
    let (z, phi_cache) = phi.forward(&batch.x)?;
    let (h, alpha_cache) = alpha.forward(&z)?;
    let (logits, beta_cache) = beta.forward(&h)?;
    let (data, g_logits) = cross_entropy(&logits, &batch.y)?;
    let (mut g_beta, g_h) = beta.backward(&beta_cache, &g_logits)?;
    let (mut g_alpha, mut g_z) = alpha.backward(&alpha_cache, &g_h)?;

    let mut alignment = 0.0;
    if lambda1 != 0.0 {
        let groups = group_rows_by_class(&z, &batch.y);
        let slices: BTreeMap<usize, DMatrix<f64>> = groups.iter().map(|(&c, (_, m))| (c, m.clone())).collect();
        let (loss, grads) = alignment_loss_grad(&slices, anchors, eps)?;
        alignment = loss;
        for (c, (rows, _)) in &groups {
            let g = &grads[c];
            for (r, &row) in rows.iter().enumerate() {
                let mut dst = g_z.row_mut(row);
                dst += g.row(r) * lambda1;
            }
        }
    }
    let (g_phi, _) = phi.backward(&phi_cache, &g_z)?;

    let mut anchor = 0.0;
    let mut anchor_grads = BTreeMap::new();
    if lambda2 != 0.0 {
        for sample in &batch.anchor_samples {
            let (h_c, a_cache) = alpha.forward(&sample.points)?;
            let (lg, b_cache) = beta.forward(&h_c)?;
            let labels = vec![sample.class; sample.points.nrows()];
            let (loss, g_lg) = cross_entropy(&lg, &labels)?;
            anchor += loss;
            let (gb, gh) = beta.backward(&b_cache, &g_lg)?;
            let (ga, g_points) = alpha.backward(&a_cache, &gh)?;
            g_beta.add_scaled(&gb, lambda2)?;
            g_alpha.add_scaled(&ga, lambda2)?;
            anchor_grads.insert(sample.class, sample.pullback(&g_points)?);
        }
    }

    Ok(ObjectiveGrads {
        value: ObjectiveValue {
            total: data + lambda1 * alignment + lambda2 * anchor,
            data,
            alignment,
            anchor,
        },
        phi: g_phi,
        alpha: g_alpha,
        beta: g_beta,
        anchors: anchor_grads,
    })
}
