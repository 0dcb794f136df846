#![allow(dead_code)]

use flic_core::datagen::{generate, ClientDataset, ToyDatasetSpec, ToyVariant};
use flic_core::federation::{ModelConfig, RoundConfig};
use nalgebra::DMatrix;
use rand::Rng;

/// Central differences of `f` at `x`.
pub fn fd_grad(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let x0 = probe[i];
            probe[i] = x0 + h;
            let up = f(&probe);
            probe[i] = x0 - h;
            let down = f(&probe);
            probe[i] = x0;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = norm(a).max(norm(b));
    if scale < 1e-300 {
        0.0
    } else {
        diff / scale
    }
}

pub fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn gauss_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| flic_core::rng::std_normal(rng))
}

/// `M Mᵀ / k + floor I`.
pub fn random_spd<R: Rng>(k: usize, floor: f64, rng: &mut R) -> DMatrix<f64> {
    let m = gauss_matrix(k, k, rng);
    &m * m.transpose() / k as f64 + DMatrix::identity(k, k) * floor
}

/// A few heterogeneous clients; small enough for debug-speed federated runs.
pub fn small_spec(seed: u64) -> ToyDatasetSpec {
    ToyDatasetSpec {
        variant: ToyVariant::LinearMapping,
        num_classes: 6,
        samples_per_class: 60,
        num_clients: 8,
        classes_per_client: 2,
        map_dim_min: 3,
        map_dim_max: 8,
        subsample_min: 0.5,
        seed,
        ..Default::default()
    }
}

pub fn small_data(seed: u64) -> Vec<ClientDataset> {
    generate(&small_spec(seed)).unwrap()
}

pub fn small_model() -> ModelConfig {
    ModelConfig {
        num_classes: 6,
        latent_dim: 4,
        hidden_dim: 8,
        ..Default::default()
    }
}

pub fn small_round(seed: u64) -> RoundConfig {
    RoundConfig {
        rounds: 4,
        participation: 0.5,
        local_steps: 3,
        batch_size: 16,
        lambda1: 0.05,
        lambda2: 0.05,
        anchor_samples: 8,
        seed,
        ..Default::default()
    }
}
