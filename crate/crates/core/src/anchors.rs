//! Learnable per-class Gaussian anchors in the shared latent space.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::aggregate::{participation_weights, weighted_sum};
use crate::error::{FlicError, Result};
use crate::gaussian::{grad_bures_wrt_factor, Gaussian};
use crate::rng::std_normal;

/// One Gaussian `N(v_c, L_c L_cᵀ)` per label class.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub means: Vec<DVector<f64>>,
    pub factors: Vec<DMatrix<f64>>,
    pub cov_learnable: bool,
}

impl AnchorSet {
    pub fn new(means: Vec<DVector<f64>>, factors: Vec<DMatrix<f64>>, cov_learnable: bool) -> Result<Self> {
        if means.is_empty() {
            return Err(FlicError::Empty("AnchorSet: no classes"));
        }
        if means.len() != factors.len() {
            return Err(FlicError::dims("AnchorSet factors", means.len(), factors.len()));
        }
        let k = means[0].len();
        for (v, l) in means.iter().zip(&factors) {
            if v.len() != k || l.shape() != (k, k) {
                return Err(FlicError::dims("AnchorSet entry", k, v.len()));
            }
        }
        if !cov_learnable && factors.iter().any(|l| *l != DMatrix::identity(k, k)) {
            return Err(FlicError::InvalidArgument(
                "fixed-covariance anchors must carry identity factors".into(),
            ));
        }
        Ok(Self {
            means,
            factors,
            cov_learnable,
        })
    }

    /// Means drawn from `N(0, I)` scaled by `scale` (default `sqrt(k)`), identity factors.
    pub fn init<R: Rng + ?Sized>(
        num_classes: usize,
        latent_dim: usize,
        scale: Option<f64>,
        cov_learnable: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if num_classes == 0 || latent_dim == 0 {
            return Err(FlicError::InvalidArgument("anchor set needs classes and a latent dimension".into()));
        }
        let scale = scale.unwrap_or((latent_dim as f64).sqrt());
        let means = (0..num_classes)
            .map(|_| DVector::from_fn(latent_dim, |_, _| scale * std_normal(rng)))
            .collect();
        let factors = vec![DMatrix::identity(latent_dim, latent_dim); num_classes];
        Self::new(means, factors, cov_learnable)
    }

    pub fn num_classes(&self) -> usize {
        self.means.len()
    }

    pub fn latent_dim(&self) -> usize {
        self.means[0].len()
    }

    fn check_class(&self, class: usize) -> Result<()> {
        if class >= self.num_classes() {
            return Err(FlicError::UnknownClass {
                class,
                num_classes: self.num_classes(),
            });
        }
        Ok(())
    }

    pub fn gaussian(&self, class: usize) -> Result<Gaussian> {
        self.check_class(class)?;
        Gaussian::new(self.means[class].clone(), self.factors[class].clone())
    }

    pub fn covariance(&self, class: usize) -> Result<DMatrix<f64>> {
        self.check_class(class)?;
        let l = &self.factors[class];
        Ok(l * l.transpose())
    }

    /// Number of scalars a transfer of this set carries.
    pub fn num_values(&self) -> usize {
        let k = self.latent_dim();
        self.num_classes() * (k + k * k)
    }

    pub fn is_finite(&self) -> bool {
        self.means.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.factors.iter().all(|l| l.iter().all(|x| x.is_finite()))
    }
}

/// Reparameterized draws `Z = v_c + L_c ξ`, keeping `ξ` for gradient routing.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSample {
    pub class: usize,
    /// `J x k`
    pub points: DMatrix<f64>,
    /// `J x k` standard-normal noise used to build `points`.
    pub noise: DMatrix<f64>,
}

pub fn sample_anchor<R: Rng + ?Sized>(anchors: &AnchorSet, class: usize, count: usize, rng: &mut R) -> Result<AnchorSample> {
    anchors.check_class(class)?;
    if count == 0 {
        return Err(FlicError::InvalidArgument("anchor sample count must be at least 1".into()));
    }
    let k = anchors.latent_dim();
    let noise = DMatrix::from_fn(count, k, |_, _| std_normal(rng));
    let mut points = &noise * anchors.factors[class].transpose();
    for mut row in points.row_iter_mut() {
        row += anchors.means[class].transpose();
    }
    Ok(AnchorSample { class, points, noise })
}

/// Gradient of some loss with respect to `(v_c, L_c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrad {
    pub mean: DVector<f64>,
    pub factor: DMatrix<f64>,
}

impl AnchorSample {
    /// Chain a gradient with respect to the sampled points back to `(v_c, L_c)`.
    pub fn pullback(&self, point_grad: &DMatrix<f64>) -> Result<AnchorGrad> {
        if point_grad.shape() != self.points.shape() {
            return Err(FlicError::dims(
                "AnchorSample::pullback",
                format!("{:?}", self.points.shape()),
                format!("{:?}", point_grad.shape()),
            ));
        }
        Ok(AnchorGrad {
            mean: point_grad.row_sum().transpose(),
            factor: point_grad.transpose() * &self.noise,
        })
    }
}

/// Step sizes and regularization weights for the client-side anchor step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorStep {
    pub lr: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub eps: f64,
}

/// One gradient step on the anchors of the classes a client holds.
///
/// `empirical` holds the client's embedded class-conditional Gaussians (only
/// consulted when `lambda1 != 0`) and
/// `classifier_grads` the gradient of the anchor-classification term. Classes
/// outside `support` pass through untouched.
pub fn local_anchor_update(
    anchors: &AnchorSet,
    support: &[usize],
    empirical: &BTreeMap<usize, Gaussian>,
    classifier_grads: &BTreeMap<usize, AnchorGrad>,
    step: &AnchorStep,
) -> Result<AnchorSet> {
    let mut out = anchors.clone();
    let k = anchors.latent_dim();
    for &c in support {
        anchors.check_class(c)?;
        let v = &anchors.means[c];
        let mut grad_v = DVector::zeros(k);
        let mut grad_l = DMatrix::zeros(k, k);
        if step.lambda1 != 0.0 {
            let emp = empirical
                .get(&c)
                .ok_or_else(|| FlicError::InvalidArgument(format!("class {c} is held but has no empirical Gaussian")))?;
            if emp.dim() != k {
                return Err(FlicError::dims("local_anchor_update empirical", k, emp.dim()));
            }
            grad_v += (v - &emp.mean) * (2.0 * step.lambda1);
            if anchors.cov_learnable {
                grad_l += grad_bures_wrt_factor(&anchors.factors[c], &emp.covariance(), step.eps)? * step.lambda1;
            }
        }
        if step.lambda2 != 0.0 {
            if let Some(g) = classifier_grads.get(&c) {
                grad_v += &g.mean * step.lambda2;
                if anchors.cov_learnable {
                    grad_l += &g.factor * step.lambda2;
                }
            }
        }
        out.means[c] = v - grad_v * step.lr;
        if anchors.cov_learnable {
            out.factors[c] = &anchors.factors[c] - grad_l * step.lr;
        }
    }
    if !out.is_finite() {
        return Err(FlicError::NonFinite("local_anchor_update"));
    }
    Ok(out)
}

/// Server-side averaging of local anchor proposals:
/// `v_c = (b/|A|) Σ ω_i v_{i,c}` and the same for the factors.
pub fn barycenter_average(locals: &[AnchorSet], weights: &[f64], total_clients: usize) -> Result<AnchorSet> {
    let first = locals.first().ok_or(FlicError::Empty("barycenter_average: empty active set"))?;
    if locals.len() != weights.len() {
        return Err(FlicError::dims("barycenter_average weights", locals.len(), weights.len()));
    }
    let (c, k) = (first.num_classes(), first.latent_dim());
    if let Some(bad) = locals.iter().find(|a| a.num_classes() != c || a.latent_dim() != k) {
        return Err(FlicError::dims(
            "barycenter_average anchor shape",
            format!("{c} classes x {k}"),
            format!("{} classes x {}", bad.num_classes(), bad.latent_dim()),
        ));
    }
    if locals.iter().any(|a| a.cov_learnable != first.cov_learnable) {
        return Err(FlicError::InvalidArgument("mixed cov_learnable flags".into()));
    }
    let w = participation_weights(weights, total_clients)?;
    let mut means = Vec::with_capacity(c);
    let mut factors = Vec::with_capacity(c);
    for class in 0..c {
        let vs: Vec<&[f64]> = locals.iter().map(|a| a.means[class].as_slice()).collect();
        means.push(DVector::from_vec(weighted_sum(&vs, &w)?));
        if first.cov_learnable {
            let ls: Vec<&[f64]> = locals.iter().map(|a| a.factors[class].as_slice()).collect();
            factors.push(DMatrix::from_vec(k, k, weighted_sum(&ls, &w)?));
        } else {
            factors.push(DMatrix::identity(k, k));
        }
    }
    AnchorSet::new(means, factors, first.cov_learnable)
}

/// Regression anchor `N(m(y), I)` with `m(y) = y a + (1 - y) b`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionAnchor {
    a: DVector<f64>,
    b: DVector<f64>,
}

impl RegressionAnchor {
    pub fn new(a: DVector<f64>, b: DVector<f64>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(FlicError::dims("RegressionAnchor", a.len(), b.len()));
        }
        if a == b {
            return Err(FlicError::InvalidArgument("regression anchor endpoints must differ".into()));
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(FlicError::NonFinite("RegressionAnchor::new"));
        }
        Ok(Self { a, b })
    }

    pub fn mean(&self, y: f64) -> Result<DVector<f64>> {
        if !y.is_finite() {
            return Err(FlicError::NonFinite("regression anchor target"));
        }
        Ok(&self.a * y + &self.b * (1.0 - y))
    }

    /// Single-sample alignment loss `‖z - m(y)‖²`.
    pub fn alignment_loss(&self, embedded: &DVector<f64>, y: f64) -> Result<f64> {
        if embedded.len() != self.a.len() {
            return Err(FlicError::dims("regression alignment", self.a.len(), embedded.len()));
        }
        Ok((embedded - self.mean(y)?).norm_squared())
    }
}

pub fn regression_anchor_mean(anchor: &RegressionAnchor, y: f64) -> Result<DVector<f64>> {
    anchor.mean(y)
}
