use flic_core::rng::{std_normal, stream};
use flic_core::theory::{init_a0, orthonormalize, principal_angle_dist, run_theory_experiment, TheoryConfig, TheoryInstance};
use nalgebra::{DMatrix, DVector};

fn instance(seed: u64) -> TheoryInstance {
    TheoryInstance::generate(&TheoryConfig { seed, ..Default::default() }).unwrap()
}

fn gauss(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = stream(seed, &[7]);
    DMatrix::from_fn(rows, cols, |_, _| std_normal(&mut rng))
}

#[test]
fn oracle_embedding_whitens_the_client_law() {
    let inst = instance(1);
    let c = &inst.clients[0];
    let n = 50_000;
    let k = inst.config.latent_dim;
    let root = &c.eigvecs * DMatrix::from_diagonal(&c.eigvals.map(f64::sqrt));
    let mut rng = stream(11, &[0]);
    let mut sum = DVector::zeros(k);
    let mut outer = DMatrix::zeros(k, k);
    for _ in 0..n {
        let z = DVector::from_fn(c.dim, |_, _| std_normal(&mut rng));
        let x = &c.mean + &root * z;
        let e = inst.oracle_phi_star(0, &x).unwrap();
        outer += &e * e.transpose();
        sum += e;
    }
    let mean = sum / n as f64;
    let cov = outer / n as f64 - &mean * mean.transpose();
    assert!(mean.amax() < 4.0 / (n as f64).sqrt());
    assert!((cov - DMatrix::identity(k, k)).amax() < 0.05);
}

#[test]
fn hat_and_star_differ_only_by_signs() {
    let inst = instance(2);
    let q = inst.q();
    let mut rng = stream(12, &[0]);
    for (i, c) in inst.clients.iter().enumerate() {
        let x = DVector::from_fn(c.dim, |_, _| 3.0 * std_normal(&mut rng));
        let (hat, star) = (inst.phi_hat(i, &x).unwrap(), inst.oracle_phi_star(i, &x).unwrap());
        assert!((hat.abs() - star.abs()).amax() < 1e-12);
        let recovered = hat.component_div(&star).map(f64::signum);
        assert_eq!(recovered, q);
        assert_eq!(q, inst.sign_hat.component_mul(&inst.sign_star));
    }
}

#[test]
fn spectral_init_lands_in_the_contraction_regime() {
    for seed in 0..5 {
        let mut inst = instance(seed);
        inst.init_a0().unwrap();
        let gram = inst.a.transpose() * &inst.a;
        assert!((gram - DMatrix::identity(inst.config.rank, inst.config.rank)).amax() < 1e-10);
        let d = inst.distance().unwrap();
        assert!(d < 0.5, "seed {seed}: initial distance {d}");
    }
}

#[test]
fn full_rank_init_spans_everything() {
    let cfg = TheoryConfig {
        rank: 5,
        latent_dim: 5,
        seed: 3,
        ..Default::default()
    };
    let inst = TheoryInstance::generate(&cfg).unwrap();
    let e: Vec<&DMatrix<f64>> = inst.clients.iter().map(|c| &c.train_emb).collect();
    let y: Vec<&DVector<f64>> = inst.clients.iter().map(|c| &c.train_y).collect();
    let a0 = init_a0(&e, &y, 5).unwrap();
    assert!((a0.transpose() * &a0 - DMatrix::identity(5, 5)).amax() < 1e-10);
    let other = orthonormalize(&gauss(5, 5, 3)).unwrap();
    assert!(principal_angle_dist(&a0, &other).unwrap() < 1e-10);
}

#[test]
fn one_round_moves_towards_the_truth() {
    for seed in 0..10 {
        let mut inst = instance(seed);
        inst.init_a0().unwrap();
        let before = inst.distance().unwrap();
        let all: Vec<usize> = (0..inst.clients.len()).collect();
        inst.fedrep_linear_round(&all).unwrap();
        let after = inst.distance().unwrap();
        assert!(after < before, "seed {seed}: {before} -> {after}");
        let d = inst.config.rank;
        assert!((inst.a.transpose() * &inst.a - DMatrix::identity(d, d)).amax() < 1e-10);
    }
}

#[test]
fn principal_angles_are_symmetric_bounded_and_basis_free() {
    for seed in 0..50 {
        let (k, d) = (6, 1 + seed as usize % 4);
        let m = gauss(k, d, 2 * seed);
        let n = gauss(k, d, 2 * seed + 1);
        let dist = principal_angle_dist(&m, &n).unwrap();
        assert!((0.0..=1.0 + 1e-12).contains(&dist));
        assert!((dist - principal_angle_dist(&n, &m).unwrap()).abs() < 1e-10);
        let g = gauss(d, d, 1000 + seed) + DMatrix::identity(d, d) * 2.0;
        let h = gauss(d, d, 2000 + seed) + DMatrix::identity(d, d) * 2.0;
        assert!((principal_angle_dist(&(&m * g), &(&n * h)).unwrap() - dist).abs() < 1e-10);
    }
}

#[test]
fn contraction_rate_is_steady_with_plenty_of_data() {
    let cfg = TheoryConfig {
        samples: 5000,
        rounds: 60,
        seed: 4,
        ..Default::default()
    };
    let trace = run_theory_experiment(&cfg).unwrap();
    let rates: Vec<f64> = trace.rows[1..].windows(2).map(|w| 1.0 - w[1].dist / w[0].dist).collect();
    let half = rates.len() / 2;
    let early = rates[..half].iter().sum::<f64>() / half as f64;
    let late = rates[half..].iter().sum::<f64>() / (rates.len() - half) as f64;
    assert!(early > 0.0 && late > 0.0);
    assert!((early - late).abs() <= 0.2 * early.max(late), "early {early} late {late}");
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    for (rank, &i) in idx.iter().enumerate() {
        r[i] = rank as f64;
    }
    r
}

#[test]
fn prediction_error_tracks_the_distance() {
    let trace = run_theory_experiment(&TheoryConfig::default()).unwrap();
    let rd = ranks(&trace.rows.iter().map(|r| r.dist).collect::<Vec<_>>());
    let rm = ranks(&trace.rows.iter().map(|r| r.mse).collect::<Vec<_>>());
    let n = rd.len() as f64;
    let mean = (n - 1.0) / 2.0;
    let cov: f64 = rd.iter().zip(&rm).map(|(a, b)| (a - mean) * (b - mean)).sum();
    let var: f64 = rd.iter().map(|a| (a - mean).powi(2)).sum();
    let rho = cov / var;
    assert!(rho > 0.9, "spearman {rho}");
}

#[test]
fn partial_participation_still_converges() {
    let trace = run_theory_experiment(&TheoryConfig {
        participation: 0.5,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let (first, last) = (trace.rows[0], *trace.rows.last().unwrap());
    assert!(last.dist < first.dist / 2.0);
    assert!(last.mse < first.mse);
}
