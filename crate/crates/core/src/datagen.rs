//! Synthetic heterogeneous-feature classification benchmarks.
//!
//! Both toy problems start from Gaussian class-conditionals in a small base
//! space. "Noisy features" clients append pure-noise coordinates; "linear
//! mapping" clients see their share of the base data through a private random
//! Gaussian linear map. Samples of each class are split evenly between the
//! clients holding that class and then subsampled per client for imbalance.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FlicError, Result};
use crate::rng::{std_normal, stream, tag, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyVariant {
    /// Base features plus client-specific standard-normal noise coordinates.
    NoisyFeatures,
    /// Base features pushed through a client-specific random linear map.
    LinearMapping,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDatasetSpec {
    pub variant: ToyVariant,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub base_dim: usize,
    /// Noise coordinates appended per client (noisy features), inclusive range.
    pub noise_dim_min: usize,
    pub noise_dim_max: usize,
    /// Output dimension of the client maps (linear mapping), inclusive range.
    pub map_dim_min: usize,
    pub map_dim_max: usize,
    pub num_clients: usize,
    pub classes_per_client: usize,
    /// Each client keeps a fraction drawn uniformly from this range.
    pub subsample_min: f64,
    pub subsample_max: f64,
    /// Class means are drawn from `N(0, class_mean_std² I)`.
    pub class_mean_std: f64,
    /// Per-coordinate standard deviations of the linear-mapping base classes.
    pub class_std_min: f64,
    pub class_std_max: f64,
    pub train_fraction: f64,
    /// Replace every client map by the identity (requires output dim = base dim).
    pub identity_map: bool,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        Self {
            variant: ToyVariant::LinearMapping,
            num_classes: 20,
            samples_per_class: 2000,
            base_dim: 5,
            noise_dim_min: 1,
            noise_dim_max: 10,
            map_dim_min: 5,
            map_dim_max: 50,
            num_clients: 100,
            classes_per_client: 3,
            subsample_min: 0.1,
            subsample_max: 1.0,
            class_mean_std: 2.0,
            class_std_min: 0.5,
            class_std_max: 1.5,
            train_fraction: 0.8,
            identity_map: false,
            seed: 0,
        }
    }
}

impl ToyDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(FlicError::InvalidArgument(msg));
        if self.num_classes == 0 || self.num_clients == 0 || self.samples_per_class == 0 || self.base_dim == 0 {
            return bad("class count, client count, samples per class and base dimension must be positive".into());
        }
        if self.classes_per_client == 0 || self.classes_per_client > self.num_classes {
            return bad(format!(
                "classes per client must be in [1, {}], got {}",
                self.num_classes, self.classes_per_client
            ));
        }
        if self.noise_dim_min > self.noise_dim_max || self.map_dim_min > self.map_dim_max {
            return bad("dimension ranges must satisfy min <= max".into());
        }
        if self.variant == ToyVariant::LinearMapping && self.map_dim_min < 1 {
            return bad("mapped dimension must be at least 1".into());
        }
        if self.identity_map && (self.map_dim_min != self.base_dim || self.map_dim_max != self.base_dim) {
            return bad("identity maps require the mapped dimension to equal the base dimension".into());
        }
        if !(0.0 < self.subsample_min && self.subsample_min <= self.subsample_max && self.subsample_max <= 1.0) {
            return bad(format!(
                "subsampling range must satisfy 0 < min <= max <= 1, got [{}, {}]",
                self.subsample_min, self.subsample_max
            ));
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return bad(format!("train fraction must be in (0, 1), got {}", self.train_fraction));
        }
        if !(0.0 < self.class_std_min && self.class_std_min <= self.class_std_max) {
            return bad("class standard deviation range must be positive and ordered".into());
        }
        Ok(())
    }
}

/// One client's local data. Rows of `features` are samples; `train` and
/// `test` index into them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientDataset {
    pub client_id: usize,
    pub dim: usize,
    pub classes: Vec<usize>,
    #[serde(with = "crate::serde_matrix")]
    pub features: DMatrix<f64>,
    pub labels: Vec<usize>,
    /// Global identifiers of the underlying base samples.
    pub sample_ids: Vec<u64>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClientDataset {
    pub fn validate(&self) -> Result<()> {
        let n = self.features.nrows();
        if self.features.ncols() != self.dim {
            return Err(FlicError::dims("client features", self.dim, self.features.ncols()));
        }
        if self.labels.len() != n || self.sample_ids.len() != n {
            return Err(FlicError::dims("client labels", n, self.labels.len()));
        }
        if let Some(y) = self.labels.iter().find(|y| !self.classes.contains(y)) {
            return Err(FlicError::InvalidArgument(format!(
                "client {}: label {y} outside its class set {:?}",
                self.client_id, self.classes
            )));
        }
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.test) {
            if i >= n || seen[i] {
                return Err(FlicError::InvalidArgument(format!(
                    "client {}: split index {i} out of range or used twice",
                    self.client_id
                )));
            }
            seen[i] = true;
        }
        Ok(())
    }

    fn select(&self, idx: &[usize]) -> (DMatrix<f64>, Vec<usize>) {
        let features = DMatrix::from_fn(idx.len(), self.dim, |r, c| self.features[(idx[r], c)]);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (features, labels)
    }

    pub fn train_split(&self) -> (DMatrix<f64>, Vec<usize>) {
        self.select(&self.train)
    }

    pub fn test_split(&self) -> (DMatrix<f64>, Vec<usize>) {
        self.select(&self.test)
    }
}

/// Sample ids of one client, already split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientAssignment {
    pub train: Vec<u64>,
    pub test: Vec<u64>,
}

/// Client `i` holds `perm[(i * per + j) mod C]` for `j < per`, with `perm` a
/// random permutation of the classes; every class is held as soon as `b * per >= C`.
pub fn assign_classes(num_clients: usize, num_classes: usize, per_client: usize, rng: &mut SimRng) -> Result<Vec<Vec<usize>>> {
    if per_client == 0 || per_client > num_classes {
        return Err(FlicError::InvalidArgument(format!(
            "cannot give {per_client} distinct classes out of {num_classes}"
        )));
    }
    let mut perm: Vec<usize> = (0..num_classes).collect();
    perm.shuffle(rng);
    Ok((0..num_clients)
        .map(|i| {
            let mut cls: Vec<usize> = (0..per_client).map(|j| perm[(i * per_client + j) % num_classes]).collect();
            cls.sort_unstable();
            cls
        })
        .collect())
}

/// Split every class pool evenly among its holders, subsample each client by
/// a uniformly drawn fraction, then split each client 80/20 per class.
///
/// `pools` maps class -> sample ids; `holders[i]` lists the classes of client `i`.
pub fn partition_clients(
    pools: &BTreeMap<usize, Vec<u64>>,
    holders: &[Vec<usize>],
    spec: &ToyDatasetSpec,
    rng: &mut SimRng,
) -> Result<Vec<ClientAssignment>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (client, classes) in holders.iter().enumerate() {
        for &c in classes {
            if !pools.contains_key(&c) {
                return Err(FlicError::InvalidArgument(format!("client {client} holds class {c} with no sample pool")));
            }
            by_class.entry(c).or_default().push(client);
        }
    }
    // client -> class -> share of the pool
    let mut shares: Vec<BTreeMap<usize, Vec<u64>>> = vec![BTreeMap::new(); holders.len()];
    for (&class, pool) in pools {
        let owners = by_class
            .get(&class)
            .ok_or_else(|| FlicError::InvalidArgument(format!("class {class} has no holder")))?;
        let mut ids = pool.clone();
        ids.shuffle(rng);
        let h = owners.len();
        let (base, extra) = (ids.len() / h, ids.len() % h);
        let mut start = 0;
        for (pos, &client) in owners.iter().enumerate() {
            let len = base + usize::from(pos < extra);
            shares[client].insert(class, ids[start..start + len].to_vec());
            start += len;
        }
    }
    let mut out = Vec::with_capacity(holders.len());
    for client_shares in shares {
        let fraction = if spec.subsample_min == spec.subsample_max {
            spec.subsample_min
        } else {
            rng.random_range(spec.subsample_min..=spec.subsample_max)
        };
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (_, ids) in client_shares {
            let keep = ((fraction * ids.len() as f64).round() as usize).max(2).min(ids.len());
            let kept = &ids[..keep];
            let n_test = if keep >= 2 {
                (((1.0 - spec.train_fraction) * keep as f64).round() as usize).clamp(1, keep - 1)
            } else {
                0
            };
            train.extend_from_slice(&kept[..keep - n_test]);
            test.extend_from_slice(&kept[keep - n_test..]);
        }
        out.push(ClientAssignment { train, test });
    }
    Ok(out)
}

struct BasePool {
    /// `num_classes * samples_per_class` rows; sample id `c * spc + j` is row `c * spc + j`.
    samples: DMatrix<f64>,
    samples_per_class: usize,
}

impl BasePool {
    fn class_of(&self, id: u64) -> usize {
        id as usize / self.samples_per_class
    }

    fn pools(&self, num_classes: usize) -> BTreeMap<usize, Vec<u64>> {
        let spc = self.samples_per_class as u64;
        (0..num_classes).map(|c| (c, (c as u64 * spc..(c as u64 + 1) * spc).collect())).collect()
    }
}

/// Per-class means and per-coordinate standard deviations of the base Gaussians.
fn class_params(spec: &ToyDatasetSpec) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
    let mut mean_rng = stream(spec.seed, &[tag::DATA, 0]);
    let k = spec.base_dim;
    let means: Vec<DVector<f64>> = (0..spec.num_classes)
        .map(|_| DVector::from_fn(k, |_, _| spec.class_mean_std * std_normal(&mut mean_rng)))
        .collect();
    let stds: Vec<DVector<f64>> = (0..spec.num_classes)
        .map(|_| match spec.variant {
            ToyVariant::NoisyFeatures => DVector::from_element(k, 1.0),
            ToyVariant::LinearMapping => DVector::from_fn(k, |_, _| {
                if spec.class_std_min == spec.class_std_max {
                    spec.class_std_min
                } else {
                    mean_rng.random_range(spec.class_std_min..spec.class_std_max)
                }
            }),
        })
        .collect();
    (means, stds)
}

/// The base-space class means `m_c` the generator draws for `spec`.
pub fn class_means(spec: &ToyDatasetSpec) -> Vec<DVector<f64>> {
    class_params(spec).0
}

fn base_pool(spec: &ToyDatasetSpec) -> BasePool {
    let k = spec.base_dim;
    let (means, stds) = class_params(spec);
    let spc = spec.samples_per_class;
    let mut samples = DMatrix::zeros(spec.num_classes * spc, k);
    for c in 0..spec.num_classes {
        let mut rng = stream(spec.seed, &[tag::DATA, 1, c as u64]);
        for j in 0..spc {
            for d in 0..k {
                samples[(c * spc + j, d)] = means[c][d] + stds[c][d] * std_normal(&mut rng);
            }
        }
    }
    BasePool {
        samples,
        samples_per_class: spc,
    }
}

/// Client-side feature transform applied to base rows.
enum ClientView {
    Noise { extra: usize },
    Map(DMatrix<f64>),
}

fn build_clients(spec: &ToyDatasetSpec, views: Vec<ClientView>) -> Result<Vec<ClientDataset>> {
    let pool = base_pool(spec);
    let mut class_rng = stream(spec.seed, &[tag::DATA, 3]);
    let holders = assign_classes(spec.num_clients, spec.num_classes, spec.classes_per_client, &mut class_rng)?;
    let mut held: Vec<usize> = holders.iter().flatten().copied().collect();
    held.sort_unstable();
    held.dedup();
    let pools: BTreeMap<usize, Vec<u64>> = pool
        .pools(spec.num_classes)
        .into_iter()
        .filter(|(c, _)| held.binary_search(c).is_ok())
        .collect();
    let assignments = partition_clients(&pools, &holders, spec, &mut class_rng)?;
    let k = spec.base_dim;
    let mut clients = Vec::with_capacity(spec.num_clients);
    for (client_id, ((assignment, classes), view)) in assignments.into_iter().zip(holders).zip(views).enumerate() {
        let ids: Vec<u64> = assignment.train.iter().chain(&assignment.test).copied().collect();
        let n = ids.len();
        let base = DMatrix::from_fn(n, k, |r, c| pool.samples[(ids[r] as usize, c)]);
        let features = match view {
            ClientView::Noise { extra } => {
                let mut rng = stream(spec.seed, &[tag::DATA, 4, client_id as u64]);
                let mut f = DMatrix::zeros(n, k + extra);
                f.columns_mut(0, k).copy_from(&base);
                for r in 0..n {
                    for c in k..k + extra {
                        f[(r, c)] = std_normal(&mut rng);
                    }
                }
                f
            }
            ClientView::Map(map) => base * map.transpose(),
        };
        let n_train = assignment.train.len();
        let client = ClientDataset {
            client_id,
            dim: features.ncols(),
            classes,
            labels: ids.iter().map(|&id| pool.class_of(id)).collect(),
            sample_ids: ids,
            features,
            train: (0..n_train).collect(),
            test: (n_train..n).collect(),
        };
        client.validate()?;
        clients.push(client);
    }
    Ok(clients)
}

fn uniform_dim(rng: &mut SimRng, lo: usize, hi: usize) -> usize {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Noisy-features benchmark: base Gaussians with identity covariance plus
/// per-client noise coordinates.
pub fn gen_toy_nf(spec: &ToyDatasetSpec) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    if spec.variant != ToyVariant::NoisyFeatures {
        return Err(FlicError::InvalidArgument("gen_toy_nf needs the noisy-features variant".into()));
    }
    let mut rng = stream(spec.seed, &[tag::DATA, 2]);
    let views = (0..spec.num_clients)
        .map(|_| ClientView::Noise {
            extra: uniform_dim(&mut rng, spec.noise_dim_min, spec.noise_dim_max),
        })
        .collect();
    build_clients(spec, views)
}

/// Linear-mapping benchmark: base Gaussians with random diagonal covariance
/// seen through a private `k_i x base_dim` Gaussian map per client.
pub fn gen_toy_lm(spec: &ToyDatasetSpec) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    if spec.variant != ToyVariant::LinearMapping {
        return Err(FlicError::InvalidArgument("gen_toy_lm needs the linear-mapping variant".into()));
    }
    let views = client_maps(spec)?.into_iter().map(ClientView::Map).collect();
    build_clients(spec, views)
}

/// The `k_i x base_dim` map of every client in a linear-mapping spec.
pub fn client_maps(spec: &ToyDatasetSpec) -> Result<Vec<DMatrix<f64>>> {
    spec.validate()?;
    if spec.variant != ToyVariant::LinearMapping {
        return Err(FlicError::InvalidArgument("client maps exist only for the linear-mapping variant".into()));
    }
    let mut rng = stream(spec.seed, &[tag::DATA, 2]);
    Ok((0..spec.num_clients)
        .map(|_| {
            let out = uniform_dim(&mut rng, spec.map_dim_min, spec.map_dim_max);
            if spec.identity_map {
                DMatrix::identity(spec.base_dim, spec.base_dim)
            } else {
                DMatrix::from_fn(out, spec.base_dim, |_, _| std_normal(&mut rng))
            }
        })
        .collect())
}

pub fn generate(spec: &ToyDatasetSpec) -> Result<Vec<ClientDataset>> {
    match spec.variant {
        ToyVariant::NoisyFeatures => gen_toy_nf(spec),
        ToyVariant::LinearMapping => gen_toy_lm(spec),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small(variant: ToyVariant) -> ToyDatasetSpec {
        ToyDatasetSpec {
            variant,
            num_classes: 6,
            samples_per_class: 200,
            num_clients: 8,
            classes_per_client: 2,
            seed: 17,
            ..ToyDatasetSpec::default()
        }
    }

    #[test]
    fn nf_without_noise_has_base_dimension() {
        let spec = ToyDatasetSpec {
            noise_dim_min: 0,
            noise_dim_max: 0,
            ..small(ToyVariant::NoisyFeatures)
        };
        let clients = gen_toy_nf(&spec).unwrap();
        assert!(clients.iter().all(|c| c.dim == 5));
    }

    #[test]
    fn nf_dimensions_in_range() {
        let clients = gen_toy_nf(&small(ToyVariant::NoisyFeatures)).unwrap();
        assert!(clients.iter().all(|c| (6..=15).contains(&c.dim)));
    }

    #[test]
    fn identity_map_reproduces_base_rows() {
        let spec = ToyDatasetSpec {
            map_dim_min: 5,
            map_dim_max: 5,
            identity_map: true,
            ..small(ToyVariant::LinearMapping)
        };
        let lm = gen_toy_lm(&spec).unwrap();
        let nf = gen_toy_nf(&ToyDatasetSpec {
            variant: ToyVariant::NoisyFeatures,
            noise_dim_min: 0,
            noise_dim_max: 0,
            class_std_min: 1.0,
            class_std_max: 1.0,
            ..spec.clone()
        })
        .unwrap();
        // same ids -> same base rows when the base classes coincide
        for (a, b) in lm.iter().zip(&nf) {
            assert_eq!(a.sample_ids, b.sample_ids);
        }
        let pool = base_pool(&spec);
        for c in &lm {
            for (r, &id) in c.sample_ids.iter().enumerate() {
                for d in 0..5 {
                    assert_eq!(c.features[(r, d)], pool.samples[(id as usize, d)]);
                }
            }
        }
    }

    #[test]
    fn lm_rank_bounded_by_base_dimension() {
        let clients = gen_toy_lm(&small(ToyVariant::LinearMapping)).unwrap();
        for c in &clients {
            let rank = c.features.clone().svd(false, false).rank(1e-8 * c.features.amax());
            assert!(rank <= c.dim.min(5), "rank {rank} dim {}", c.dim);
        }
    }

    #[test]
    fn clients_hold_disjoint_samples_with_exact_class_counts() {
        let spec = small(ToyVariant::LinearMapping);
        let clients = gen_toy_lm(&spec).unwrap();
        let mut seen = BTreeSet::new();
        for c in &clients {
            for id in &c.sample_ids {
                assert!(seen.insert(*id), "sample {id} on two clients");
            }
            let labels: BTreeSet<_> = c.labels.iter().collect();
            assert_eq!(labels.len(), spec.classes_per_client);
            let test_labels: BTreeSet<_> = c.test.iter().map(|&i| c.labels[i]).collect();
            assert_eq!(test_labels.len(), spec.classes_per_client);
        }
    }

    #[test]
    fn single_client_gets_everything_without_subsampling() {
        let spec = ToyDatasetSpec {
            num_classes: 3,
            classes_per_client: 3,
            num_clients: 1,
            samples_per_class: 50,
            subsample_min: 1.0,
            subsample_max: 1.0,
            ..small(ToyVariant::NoisyFeatures)
        };
        let clients = gen_toy_nf(&spec).unwrap();
        assert_eq!(clients[0].features.nrows(), 150);
        assert_eq!(clients[0].test.len(), 30);
    }

    #[test]
    fn partition_rejects_unheld_class() {
        let pools: BTreeMap<usize, Vec<u64>> = [(0, vec![0, 1, 2]), (1, vec![3, 4])].into();
        let holders = vec![vec![0]];
        let err = partition_clients(&pools, &holders, &ToyDatasetSpec::default(), &mut stream(0, &[]));
        assert!(err.is_err());
    }

    #[test]
    fn infeasible_spec_rejected() {
        let spec = ToyDatasetSpec {
            classes_per_client: 7,
            ..small(ToyVariant::NoisyFeatures)
        };
        assert!(gen_toy_nf(&spec).is_err());
        assert!(gen_toy_lm(&small(ToyVariant::NoisyFeatures)).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small(ToyVariant::LinearMapping);
        assert_eq!(gen_toy_lm(&spec).unwrap(), gen_toy_lm(&spec).unwrap());
    }
}
