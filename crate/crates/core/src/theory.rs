//! Linear-regression harness with known ground truth.
//!
//! Client `i` draws `x ~ N(m_i, Σ_i)` in `R^{k_i}` and observes
//! `y = (A* β*_i)ᵀ φ*_i(x)`, where `φ*_i` whitens the top-`k` eigendirections
//! of `Σ_i`. The learner only sees `φ̂_i = Q φ*_i` with an unknown sign flip
//! `Q = diag(±1)` and runs the alternating FedRep scheme: exact least squares
//! for each `β_i`, one gradient step on the shared `A`, averaging, QR.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlicError, Result};
use crate::federation::select_active_clients;
use crate::rng::{std_normal, stream, tag, SimRng};

const LSQ_JITTER: f64 = 1e-10;
const EIGEN_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryConfig {
    pub clients: usize,
    pub samples: usize,
    pub test_samples: usize,
    pub latent_dim: usize,
    pub rank: usize,
    pub dim_min: usize,
    pub dim_max: usize,
    pub participation: f64,
    pub rounds: usize,
    /// Requested step size; the run uses `min(step_size, 1 / (4 σ̄²_max))`.
    pub step_size: f64,
    pub seed: u64,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            clients: 20,
            samples: 500,
            test_samples: 500,
            latent_dim: 5,
            rank: 3,
            dim_min: 8,
            dim_max: 16,
            participation: 1.0,
            rounds: 100,
            step_size: 0.05,
            seed: 0,
        }
    }
}

impl TheoryConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(FlicError::config(key, msg));
        if self.clients == 0 || self.samples == 0 || self.test_samples == 0 {
            return bad("clients", "client and sample counts must be positive".into());
        }
        if self.rank == 0 || self.rank > self.latent_dim {
            return bad("rank", format!("need 1 <= d <= k, got d = {} and k = {}", self.rank, self.latent_dim));
        }
        if self.latent_dim > self.dim_min || self.dim_min > self.dim_max {
            return bad(
                "dim_min",
                format!("need k <= dim_min <= dim_max, got {} / {} / {}", self.latent_dim, self.dim_min, self.dim_max),
            );
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return bad("participation", format!("must be in (0, 1], got {}", self.participation));
        }
        if !(self.step_size.is_finite() && self.step_size >= 0.0) {
            return bad("step_size", format!("must be finite and non-negative, got {}", self.step_size));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TheoryClient {
    pub dim: usize,
    pub mean: DVector<f64>,
    /// Eigenvectors of Σ_i as columns, ordered by decreasing eigenvalue.
    pub eigvecs: DMatrix<f64>,
    /// Decreasing.
    pub eigvals: DVector<f64>,
    pub beta_star: DVector<f64>,
    pub train_x: DMatrix<f64>,
    pub train_y: DVector<f64>,
    pub test_x: DMatrix<f64>,
    pub test_y: DVector<f64>,
    /// `φ̂_i` applied to every training row.
    pub train_emb: DMatrix<f64>,
    pub test_emb: DMatrix<f64>,
    pub beta: DVector<f64>,
}

impl TheoryClient {
    pub fn covariance(&self) -> DMatrix<f64> {
        &self.eigvecs * DMatrix::from_diagonal(&self.eigvals) * self.eigvecs.transpose()
    }
}

#[derive(Debug, Clone)]
pub struct TheoryInstance {
    pub config: TheoryConfig,
    pub a_star: DMatrix<f64>,
    pub sign_star: DVector<f64>,
    pub sign_hat: DVector<f64>,
    pub clients: Vec<TheoryClient>,
    pub a: DMatrix<f64>,
    pub step_size: f64,
}

fn random_orthogonal(n: usize, rng: &mut SimRng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| std_normal(rng));
    orthonormalize(&g).expect("Gaussian matrices are full rank almost surely")
}

fn random_signs(k: usize, rng: &mut SimRng) -> DVector<f64> {
    DVector::from_fn(k, |_, _| if rng.random_bool(0.5) { 1.0 } else { -1.0 })
}

/// Thin QR with the diagonal of R made positive, returning Q.
pub fn orthonormalize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (rows, cols) = m.shape();
    if cols == 0 || cols > rows {
        return Err(FlicError::RankDeficient(format!("{rows}x{cols} cannot have orthonormal columns")));
    }
    let qr = m.clone().qr();
    let r = qr.r();
    let mut q = qr.q();
    let scale = m.amax().max(f64::MIN_POSITIVE);
    for j in 0..cols {
        let d = r[(j, j)];
        if d.abs() <= 1e-12 * scale || !d.is_finite() {
            return Err(FlicError::RankDeficient(format!("column {j} is dependent on the previous ones")));
        }
        if d < 0.0 {
            let mut col = q.column_mut(j);
            col *= -1.0;
        }
    }
    Ok(q)
}

/// `‖M̂_⊥ᵀ N̂‖₂` for the orthonormalized column spaces.
pub fn principal_angle_dist(m: &DMatrix<f64>, n: &DMatrix<f64>) -> Result<f64> {
    if m.nrows() != n.nrows() {
        return Err(FlicError::dims("principal_angle_dist rows", m.nrows(), n.nrows()));
    }
    let mh = orthonormalize(m)?;
    let nh = orthonormalize(n)?;
    let resid = &nh - &mh * (mh.transpose() * &nh);
    let s = resid.singular_values().max();
    Ok(s.clamp(0.0, 1.0))
}

/// Sorted `(eigvals desc, eigvecs)` of a symmetric matrix.
fn sorted_eigen(s: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let eig = s.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = DVector::from_fn(order.len(), |i, _| eig.eigenvalues[order[i]]);
    let vecs = DMatrix::from_fn(s.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

/// Spectral initialization: top-`d` eigenvectors of the client average of
/// `Z_i = (1/n_i) Σ_j y_j² φ̂(x_j) φ̂(x_j)ᵀ`.
pub fn init_a0(embedded: &[&DMatrix<f64>], labels: &[&DVector<f64>], rank: usize) -> Result<DMatrix<f64>> {
    let first = embedded.first().ok_or(FlicError::Empty("init_a0: no clients"))?;
    if embedded.len() != labels.len() {
        return Err(FlicError::dims("init_a0 labels", embedded.len(), labels.len()));
    }
    let k = first.ncols();
    if rank == 0 || rank > k {
        return Err(FlicError::InvalidArgument(format!("rank {rank} outside [1, {k}]")));
    }
    let mut z = DMatrix::zeros(k, k);
    for (e, y) in embedded.iter().zip(labels) {
        if e.ncols() != k || e.nrows() != y.len() || y.is_empty() {
            return Err(FlicError::dims("init_a0 client data", k, e.ncols()));
        }
        let weighted = DMatrix::from_fn(e.nrows(), k, |r, c| y[r] * y[r] * e[(r, c)]);
        z += e.transpose() * weighted / y.len() as f64;
    }
    z /= embedded.len() as f64;
    let (vals, vecs) = sorted_eigen(&z);
    let scale = vals[0].abs().max(f64::MIN_POSITIVE);
    if vals[rank - 1] <= EIGEN_FLOOR * scale {
        return Err(FlicError::RankDeficient(format!(
            "only {} dominant directions for rank {rank}",
            vals.iter().filter(|&&v| v > EIGEN_FLOOR * scale).count()
        )));
    }
    if rank < k && (vals[rank - 1] - vals[rank]).abs() <= EIGEN_FLOOR * scale {
        return Err(FlicError::RankDeficient("no eigengap after the dominant directions".into()));
    }
    orthonormalize(&vecs.columns(0, rank).into_owned())
}

/// `(FᵀF + jitter I)⁻¹ Fᵀ y`.
fn least_squares(f: &DMatrix<f64>, y: &DVector<f64>) -> Result<DVector<f64>> {
    let d = f.ncols();
    let gram = f.transpose() * f + DMatrix::identity(d, d) * LSQ_JITTER;
    let chol = gram
        .cholesky()
        .ok_or_else(|| FlicError::RankDeficient("least-squares normal equations".into()))?;
    let sol = chol.solve(&(f.transpose() * y));
    if !sol.iter().all(|v| v.is_finite()) {
        return Err(FlicError::RankDeficient("least-squares normal equations".into()));
    }
    Ok(sol)
}

impl TheoryInstance {
    pub fn generate(config: &TheoryConfig) -> Result<Self> {
        config.validate()?;
        let (k, d) = (config.latent_dim, config.rank);
        let mut rng = stream(config.seed, &[tag::THEORY, 0]);
        let a_star = orthonormalize(&DMatrix::from_fn(k, d, |_, _| std_normal(&mut rng)))?;
        let sign_star = random_signs(k, &mut rng);
        let sign_hat = random_signs(k, &mut rng);
        let mut instance = Self {
            config: config.clone(),
            a_star,
            sign_star,
            sign_hat,
            clients: Vec::with_capacity(config.clients),
            a: DMatrix::zeros(k, d),
            step_size: config.step_size,
        };
        for i in 0..config.clients {
            let mut rng = stream(config.seed, &[tag::THEORY, 1, i as u64]);
            let dim = if config.dim_min == config.dim_max {
                config.dim_min
            } else {
                rng.random_range(config.dim_min..=config.dim_max)
            };
            let mean = DVector::from_fn(dim, |_, _| std_normal(&mut rng));
            let p = random_orthogonal(dim, &mut rng);
            let raw: Vec<f64> = (0..dim).map(|_| rng.random_range(0.5..2.0)).collect();
            let mut order: Vec<usize> = (0..dim).collect();
            order.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]));
            let eigvals = DVector::from_fn(dim, |j, _| raw[order[j]]);
            let eigvecs = DMatrix::from_fn(dim, dim, |r, c| p[(r, order[c])]);
            let g = DVector::from_fn(d, |_, _| std_normal(&mut rng));
            let beta_star = &g * ((d as f64).sqrt() / g.norm());
            let sqrt_cov = &eigvecs * DMatrix::from_diagonal(&eigvals.map(f64::sqrt));
            let mut draw = |n: usize| {
                let noise = DMatrix::from_fn(n, dim, |_, _| std_normal(&mut rng));
                let mut x = noise * sqrt_cov.transpose();
                for mut row in x.row_iter_mut() {
                    row += mean.transpose();
                }
                x
            };
            let train_x = draw(config.samples);
            let test_x = draw(config.test_samples);
            instance.clients.push(TheoryClient {
                dim,
                mean,
                eigvecs,
                eigvals,
                beta_star,
                train_y: DVector::zeros(0),
                test_y: DVector::zeros(0),
                train_emb: DMatrix::zeros(0, k),
                test_emb: DMatrix::zeros(0, k),
                train_x,
                test_x,
                beta: DVector::zeros(d),
            });
        }
        let target = &instance.a_star;
        for i in 0..config.clients {
            let star_train = instance.embed_rows(i, &instance.clients[i].train_x, &instance.sign_star)?;
            let star_test = instance.embed_rows(i, &instance.clients[i].test_x, &instance.sign_star)?;
            let w = target * &instance.clients[i].beta_star;
            let train_y = &star_train * &w;
            let test_y = &star_test * &w;
            let train_emb = instance.embed_rows(i, &instance.clients[i].train_x, &instance.sign_hat)?;
            let test_emb = instance.embed_rows(i, &instance.clients[i].test_x, &instance.sign_hat)?;
            let c = &mut instance.clients[i];
            c.train_y = train_y;
            c.test_y = test_y;
            c.train_emb = train_emb;
            c.test_emb = test_emb;
        }
        instance.step_size = config.step_size.min(1.0 / (4.0 * instance.sigma_max_sq()));
        Ok(instance)
    }

    /// Largest eigenvalue of `(1/b) B*ᵀ B*`, the step-size scale.
    pub fn sigma_max_sq(&self) -> f64 {
        let d = self.config.rank;
        let mut m = DMatrix::zeros(d, d);
        for c in &self.clients {
            m += &c.beta_star * c.beta_star.transpose();
        }
        m /= self.clients.len() as f64;
        m.symmetric_eigenvalues().max()
    }

    /// `Q = Ĩ Ĩ*` as a diagonal.
    pub fn q(&self) -> DVector<f64> {
        self.sign_hat.component_mul(&self.sign_star)
    }

    pub fn q_a_star(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&self.q()) * &self.a_star
    }

    fn client(&self, i: usize) -> Result<&TheoryClient> {
        self.clients
            .get(i)
            .ok_or_else(|| FlicError::InvalidArgument(format!("no theory client {i}")))
    }

    /// `sign ⊙ D_k^{-1/2} P_kᵀ (x - m)` for every row.
    fn embed_rows(&self, i: usize, x: &DMatrix<f64>, sign: &DVector<f64>) -> Result<DMatrix<f64>> {
        let c = self.client(i)?;
        let k = self.config.latent_dim;
        if x.ncols() != c.dim {
            return Err(FlicError::dims("theory embedding input", c.dim, x.ncols()));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(FlicError::NonFinite("theory embedding input"));
        }
        if c.eigvals.iter().take(k).any(|&v| v < EIGEN_FLOOR) {
            return Err(FlicError::Singular(format!("client {i}: top-{k} eigenvalue below {EIGEN_FLOOR}")));
        }
        let mut centered = x.clone();
        for mut row in centered.row_iter_mut() {
            row -= c.mean.transpose();
        }
        let proj = centered * c.eigvecs.columns(0, k);
        let scale = DVector::from_fn(k, |j, _| 1.0 / c.eigvals[j].sqrt());
        Ok(DMatrix::from_fn(proj.nrows(), k, |r, j| sign[j] * (scale[j] * proj[(r, j)])))
    }

    fn embed_one(&self, i: usize, x: &DVector<f64>, sign: &DVector<f64>) -> Result<DVector<f64>> {
        let row = self.embed_rows(i, &DMatrix::from_row_slice(1, x.len(), x.as_slice()), sign)?;
        Ok(row.row(0).transpose())
    }

    pub fn oracle_phi_star(&self, i: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.embed_one(i, x, &self.sign_star)
    }

    pub fn phi_hat(&self, i: usize, x: &DVector<f64>) -> Result<DVector<f64>> {
        self.embed_one(i, x, &self.sign_hat)
    }

    pub fn init_a0(&mut self) -> Result<()> {
        let e: Vec<&DMatrix<f64>> = self.clients.iter().map(|c| &c.train_emb).collect();
        let y: Vec<&DVector<f64>> = self.clients.iter().map(|c| &c.train_y).collect();
        self.a = init_a0(&e, &y, self.config.rank)?;
        for i in 0..self.clients.len() {
            self.clients[i].beta = least_squares(&(&self.clients[i].train_emb * &self.a), &self.clients[i].train_y)?;
        }
        Ok(())
    }

    /// Exact β solves on the active clients, one step on A each, average, QR.
    pub fn fedrep_linear_round(&mut self, active: &[usize]) -> Result<()> {
        if active.is_empty() {
            return Err(FlicError::Empty("fedrep_linear_round: no active clients"));
        }
        let mut sum = DMatrix::zeros(self.a.nrows(), self.a.ncols());
        for &i in active {
            self.client(i)?;
            let c = &self.clients[i];
            let beta = least_squares(&(&c.train_emb * &self.a), &c.train_y)?;
            let resid = &c.train_emb * (&self.a * &beta) - &c.train_y;
            // gradient of (1/2n) Σ (βᵀAᵀφ̂ - y)²
            let grad = c.train_emb.transpose() * resid * beta.transpose() / c.train_y.len() as f64;
            sum += &self.a - grad * self.step_size;
            self.clients[i].beta = beta;
        }
        self.a = orthonormalize(&(sum / active.len() as f64))?;
        Ok(())
    }

    /// Held-out `mean_i mean_j (y - (A β_i)ᵀ φ̂(x))²`.
    pub fn test_mse(&self) -> f64 {
        let total: f64 = self
            .clients
            .iter()
            .map(|c| {
                let pred = &c.test_emb * (&self.a * &c.beta);
                (pred - &c.test_y).norm_squared() / c.test_y.len() as f64
            })
            .sum();
        total / self.clients.len() as f64
    }

    pub fn distance(&self) -> Result<f64> {
        principal_angle_dist(&self.a, &self.q_a_star())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub dist: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryTrace {
    pub rows: Vec<TraceRow>,
    pub step_size: f64,
}

impl TheoryTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,dist,mse\n");
        for r in &self.rows {
            out.push_str(&format!("{},{:.6e},{:.6e}\n", r.round, r.dist, r.mse));
        }
        out
    }
}

/// Spectral initialization, then `T` rounds; `T + 1` trace rows.
pub fn run_theory_experiment(config: &TheoryConfig) -> Result<TheoryTrace> {
    let mut inst = TheoryInstance::generate(config)?;
    inst.init_a0()?;
    let mut rows = Vec::with_capacity(config.rounds + 1);
    rows.push(TraceRow {
        round: 0,
        dist: inst.distance()?,
        mse: inst.test_mse(),
    });
    for t in 0..config.rounds {
        let active = select_active_clients(config.clients, config.participation, config.seed, t)?;
        inst.fedrep_linear_round(&active)?;
        rows.push(TraceRow {
            round: t + 1,
            dist: inst.distance()?,
            mse: inst.test_mse(),
        });
    }
    Ok(TheoryTrace {
        rows,
        step_size: inst.step_size,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn distance_examples() {
        let a = dmatrix![1.0, 0.0; 0.0, 1.0; 0.0, 0.0];
        assert!(principal_angle_dist(&a, &a).unwrap() < 1e-15);
        let e1 = dmatrix![1.0; 0.0];
        let e2 = dmatrix![0.0; 1.0];
        assert!((principal_angle_dist(&e1, &e2).unwrap() - 1.0).abs() < 1e-15);
        assert!(principal_angle_dist(&dmatrix![1.0, 2.0; 2.0, 4.0], &e1).is_err());
    }

    #[test]
    fn orthonormalize_has_positive_r() {
        let m = dmatrix![-2.0, 1.0; 0.0, -3.0; 1.0, 1.0];
        let q = orthonormalize(&m).unwrap();
        let r = q.transpose() * &m;
        assert!(r[(0, 0)] > 0.0 && r[(1, 1)] > 0.0);
        assert!((q.transpose() * &q - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn ground_truth_invariants() {
        let inst = TheoryInstance::generate(&TheoryConfig::default()).unwrap();
        let d = inst.config.rank;
        assert!((inst.a_star.transpose() * &inst.a_star - DMatrix::identity(d, d)).amax() < 1e-10);
        for c in &inst.clients {
            assert!((c.beta_star.norm_squared() - d as f64).abs() < 1e-12);
            assert!(c.eigvals.as_slice().windows(2).all(|w| w[0] >= w[1]));
        }
        assert!(inst.step_size <= 0.05);
    }

    #[test]
    fn phi_at_mean_is_zero() {
        let inst = TheoryInstance::generate(&TheoryConfig::default()).unwrap();
        let m = inst.clients[3].mean.clone();
        assert_eq!(inst.oracle_phi_star(3, &m).unwrap().amax(), 0.0);
    }

    #[test]
    fn identity_instance_gives_identity_map() {
        let mut inst = TheoryInstance::generate(&TheoryConfig {
            clients: 1,
            latent_dim: 3,
            rank: 2,
            dim_min: 3,
            dim_max: 3,
            ..TheoryConfig::default()
        })
        .unwrap();
        let c = &mut inst.clients[0];
        c.mean = DVector::zeros(3);
        c.eigvals = DVector::from_element(3, 1.0);
        c.eigvecs = DMatrix::identity(3, 3);
        inst.sign_star = DVector::from_element(3, 1.0);
        let x = DVector::from_vec(vec![0.3, -1.2, 2.5]);
        assert_eq!(inst.oracle_phi_star(0, &x).unwrap(), x);
    }

    #[test]
    fn fixed_point_stays_put() {
        let mut inst = TheoryInstance::generate(&TheoryConfig::default()).unwrap();
        inst.a = inst.q_a_star();
        let all: Vec<usize> = (0..inst.clients.len()).collect();
        inst.fedrep_linear_round(&all).unwrap();
        assert!(inst.distance().unwrap() < 1e-7);
    }

    #[test]
    fn zero_step_keeps_subspace() {
        let cfg = TheoryConfig {
            step_size: 0.0,
            ..TheoryConfig::default()
        };
        let mut inst = TheoryInstance::generate(&cfg).unwrap();
        inst.init_a0().unwrap();
        let before = inst.a.clone();
        inst.fedrep_linear_round(&[0, 1, 2]).unwrap();
        assert!((&inst.a - &before).amax() < 1e-12);
    }

    #[test]
    fn trace_has_one_row_per_round_plus_init() {
        let trace = run_theory_experiment(&TheoryConfig {
            rounds: 7,
            ..TheoryConfig::default()
        })
        .unwrap();
        assert_eq!(trace.rows.len(), 8);
        assert_eq!(trace.to_csv().lines().count(), 9);
    }
}
