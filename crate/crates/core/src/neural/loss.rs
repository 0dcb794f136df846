use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::anchors::AnchorSet;
use crate::error::{FlicError, Result};
use crate::gaussian::{bures_sq_with_grad, empirical_moments};

/// Mean softmax cross-entropy and its gradient `(softmax - onehot) / n`.
pub fn cross_entropy(logits: &DMatrix<f64>, labels: &[usize]) -> Result<(f64, DMatrix<f64>)> {
    let (n, classes) = logits.shape();
    if labels.len() != n {
        return Err(FlicError::dims("cross_entropy labels", n, labels.len()));
    }
    if n == 0 {
        return Err(FlicError::Empty("cross_entropy: empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(FlicError::UnknownClass {
            class: bad,
            num_classes: classes,
        });
    }
    let mut grad = DMatrix::zeros(n, classes);
    let mut loss = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.max();
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_sum = max + sum.ln();
        loss += log_sum - logits[(r, y)];
        for c in 0..classes {
            grad[(r, c)] = (logits[(r, c)] - log_sum).exp();
        }
        grad[(r, y)] -= 1.0;
    }
    let nf = n as f64;
    grad /= nf;
    let loss = loss / nf;
    if !loss.is_finite() {
        return Err(FlicError::NonFinite("cross_entropy"));
    }
    Ok((loss, grad))
}

/// `W2²(anchor, N(m̂, Σ̂ + εI))` for one class slice and the gradient with
/// respect to every row of the slice.
pub fn class_alignment_loss_grad(
    embedded: &DMatrix<f64>,
    anchor_mean: &DVector<f64>,
    anchor_cov: &DMatrix<f64>,
    eps: f64,
) -> Result<(f64, DMatrix<f64>)> {
    let (n, k) = embedded.shape();
    if n == 0 {
        return Err(FlicError::Empty("alignment: empty class slice"));
    }
    if anchor_mean.len() != k {
        return Err(FlicError::dims("alignment latent dim", anchor_mean.len(), k));
    }
    let (mean, cov) = empirical_moments(embedded, eps)?;
    let diff = &mean - anchor_mean;
    // B² is symmetric; the empirical side goes first so it carries the gradient.
    let (bures, grad_cov) = bures_sq_with_grad(&cov, anchor_cov)?;
    let loss = diff.norm_squared() + bures;

    // d/dx_j of ‖m̂ - v‖² is 2(m̂ - v)/n; d/dx_j of Σ̂ contracted with G is 2 G (x_j - m̂)/n.
    let nf = n as f64;
    let mut centered = embedded.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut grad = centered * &grad_cov * (2.0 / nf);
    let mean_part = diff.transpose() * (2.0 / nf);
    for mut row in grad.row_iter_mut() {
        row += &mean_part;
    }
    Ok((loss, grad))
}

/// Sum over present classes of the W2² distance between each class anchor
/// and the empirical Gaussian of that class's embedded batch.
pub fn alignment_loss_grad(
    embedded_by_class: &BTreeMap<usize, DMatrix<f64>>,
    anchors: &AnchorSet,
    eps: f64,
) -> Result<(f64, BTreeMap<usize, DMatrix<f64>>)> {
    let mut total = 0.0;
    let mut grads = BTreeMap::new();
    for (&class, batch) in embedded_by_class {
        if batch.nrows() == 0 {
            return Err(FlicError::Empty("alignment: empty class slice"));
        }
        let cov = anchors.covariance(class)?;
        let (loss, grad) = class_alignment_loss_grad(batch, &anchors.means[class], &cov, eps)?;
        total += loss;
        grads.insert(class, grad);
    }
    Ok((total, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{empirical_gaussian, w2_sq_gaussians};
    use crate::rng::stream;
    use nalgebra::dmatrix;
    use crate::rng::std_normal;

    #[test]
    fn confident_correct_logits_have_vanishing_loss() {
        let logits = dmatrix![100.0, 0.0, 0.0; 0.0, 0.0, 100.0];
        let (loss, _) = cross_entropy(&logits, &[0, 2]).unwrap();
        assert!(loss < 1e-40);
    }

    #[test]
    fn uniform_logits_give_log_c() {
        let (loss, grad) = cross_entropy(&DMatrix::zeros(4, 5), &[0, 1, 2, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-14);
        assert!(grad.column_sum().amax() < 1e-15);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range() {
        assert!(matches!(
            cross_entropy(&DMatrix::zeros(1, 3), &[3]),
            Err(FlicError::UnknownClass { .. })
        ));
    }

    #[test]
    fn matched_anchor_gives_eps_level_loss() {
        // a batch with mean v and population covariance exactly I (2 points per axis)
        let v = nalgebra::dvector![1.0, -2.0];
        let x = dmatrix![2.0, -2.0; 0.0, -2.0; 1.0, -1.0; 1.0, -3.0];
        let mut x = x;
        // scale so the population covariance is I: each axis has variance 2/4 * 1 = 0.5
        for mut row in x.row_iter_mut() {
            let d = (row.transpose() - &v) * 2f64.sqrt();
            row.copy_from(&(&v + d).transpose());
        }
        let eps = 1e-6;
        let (loss, grad) = class_alignment_loss_grad(&x, &v, &DMatrix::identity(2, 2), eps).unwrap();
        assert!(loss <= 2.0 * eps, "loss {loss}");
        assert!(grad.amax() < 1e-6);
    }

    #[test]
    fn total_loss_is_sum_of_class_w2() {
        let mut rng = stream(5, &[]);
        let anchors = AnchorSet::init(3, 4, None, false, &mut rng).unwrap();
        let mut by_class = BTreeMap::new();
        for (c, n) in [(0usize, 6usize), (2, 9)] {
            by_class.insert(c, DMatrix::from_fn(n, 4, |_, _| std_normal(&mut rng)));
        }
        let eps = 1e-6;
        let (total, grads) = alignment_loss_grad(&by_class, &anchors, eps).unwrap();
        let mut expected = 0.0;
        for (c, x) in &by_class {
            let emp = empirical_gaussian(x, eps).unwrap();
            expected += w2_sq_gaussians(&anchors.gaussian(*c).unwrap(), &emp).unwrap();
        }
        assert!((total - expected).abs() < 1e-9 * expected.max(1.0));
        assert_eq!(grads.keys().copied().collect::<Vec<_>>(), vec![0, 2]);
    }

    #[test]
    fn empty_slice_rejected() {
        let anchors = AnchorSet::init(2, 3, None, false, &mut stream(1, &[])).unwrap();
        let by_class: BTreeMap<_, _> = [(1usize, DMatrix::<f64>::zeros(0, 3))].into();
        assert!(alignment_loss_grad(&by_class, &anchors, 1e-6).is_err());
    }
}
