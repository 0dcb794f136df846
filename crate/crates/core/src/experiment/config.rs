use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::{ToyDatasetSpec, ToyVariant};
use crate::error::{FlicError, Result};
use crate::federation::{ModelConfig, RoundConfig, Weighting};
use crate::theory::TheoryConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Flic,
    Local,
    Theory,
}

impl std::str::FromStr for Mode {
    type Err = FlicError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flic" => Ok(Mode::Flic),
            "local" | "local-baseline" | "local_baseline" => Ok(Mode::Local),
            "theory" => Ok(Mode::Theory),
            other => Err(FlicError::config("mode", format!("expected flic, local or theory, got `{other}`"))),
        }
    }
}

/// Every tunable of a run, as one flat table. Missing keys take the
/// documented defaults; unknown keys are an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    pub seed: u64,
    pub workers: usize,
    /// Directory written by `datagen`; when absent the toy spec below is generated.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,

    pub variant: ToyVariant,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub base_dim: usize,
    pub noise_dim_min: usize,
    pub noise_dim_max: usize,
    pub map_dim_min: usize,
    pub map_dim_max: usize,
    pub num_clients: usize,
    pub classes_per_client: usize,
    pub subsample_min: f64,
    pub subsample_max: f64,
    pub class_mean_std: f64,
    pub class_std_min: f64,
    pub class_std_max: f64,
    pub train_fraction: f64,
    pub identity_map: bool,

    pub rounds: usize,
    pub participation: f64,
    pub local_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub global_lr: f64,
    pub alpha_steps: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub anchor_samples: usize,
    pub eps: f64,
    pub weighting: Weighting,

    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub cov_learnable: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub anchor_scale: Option<f64>,
    pub onboard_rounds: usize,

    pub theory_clients: usize,
    pub theory_samples: usize,
    pub theory_test_samples: usize,
    pub theory_latent_dim: usize,
    pub theory_rank: usize,
    pub theory_dim_min: usize,
    pub theory_dim_max: usize,
    pub theory_participation: f64,
    pub theory_rounds: usize,
    pub theory_step_size: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let data = ToyDatasetSpec::default();
        let round = RoundConfig::default();
        let model = ModelConfig::default();
        let theory = TheoryConfig::default();
        Self {
            mode: Mode::Flic,
            seed: 0,
            workers: 1,
            dataset: None,
            variant: data.variant,
            num_classes: data.num_classes,
            samples_per_class: data.samples_per_class,
            base_dim: data.base_dim,
            noise_dim_min: data.noise_dim_min,
            noise_dim_max: data.noise_dim_max,
            map_dim_min: data.map_dim_min,
            map_dim_max: data.map_dim_max,
            num_clients: data.num_clients,
            classes_per_client: data.classes_per_client,
            subsample_min: data.subsample_min,
            subsample_max: data.subsample_max,
            class_mean_std: data.class_mean_std,
            class_std_min: data.class_std_min,
            class_std_max: data.class_std_max,
            train_fraction: data.train_fraction,
            identity_map: data.identity_map,
            rounds: round.rounds,
            participation: round.participation,
            local_steps: round.local_steps,
            batch_size: round.batch_size,
            lr: round.lr,
            global_lr: round.global_lr,
            alpha_steps: round.alpha_steps,
            lambda1: round.lambda1,
            lambda2: round.lambda2,
            anchor_samples: round.anchor_samples,
            eps: round.eps,
            weighting: round.weighting,
            latent_dim: model.latent_dim,
            hidden_dim: model.hidden_dim,
            cov_learnable: model.cov_learnable,
            anchor_scale: model.anchor_scale,
            onboard_rounds: 5,
            theory_clients: theory.clients,
            theory_samples: theory.samples,
            theory_test_samples: theory.test_samples,
            theory_latent_dim: theory.latent_dim,
            theory_rank: theory.rank,
            theory_dim_min: theory.dim_min,
            theory_dim_max: theory.dim_max,
            theory_participation: theory.participation,
            theory_rounds: theory.rounds,
            theory_step_size: theory.step_size,
        }
    }
}

/// Re-key validation failures of the sub-configs as config errors.
fn as_config(key: &str, r: Result<()>) -> Result<()> {
    r.map_err(|e| match e {
        FlicError::Config { .. } => e,
        other => FlicError::config(key, other.to_string()),
    })
}

impl ExperimentConfig {
    pub fn dataset_spec(&self) -> ToyDatasetSpec {
        ToyDatasetSpec {
            variant: self.variant,
            num_classes: self.num_classes,
            samples_per_class: self.samples_per_class,
            base_dim: self.base_dim,
            noise_dim_min: self.noise_dim_min,
            noise_dim_max: self.noise_dim_max,
            map_dim_min: self.map_dim_min,
            map_dim_max: self.map_dim_max,
            num_clients: self.num_clients,
            classes_per_client: self.classes_per_client,
            subsample_min: self.subsample_min,
            subsample_max: self.subsample_max,
            class_mean_std: self.class_mean_std,
            class_std_min: self.class_std_min,
            class_std_max: self.class_std_max,
            train_fraction: self.train_fraction,
            identity_map: self.identity_map,
            seed: self.seed,
        }
    }

    pub fn round_config(&self) -> RoundConfig {
        RoundConfig {
            rounds: self.rounds,
            participation: self.participation,
            local_steps: self.local_steps,
            batch_size: self.batch_size,
            lr: self.lr,
            global_lr: self.global_lr,
            alpha_steps: self.alpha_steps,
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            anchor_samples: self.anchor_samples,
            eps: self.eps,
            weighting: self.weighting,
            workers: self.workers,
            seed: self.seed,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            num_classes: self.num_classes,
            latent_dim: self.latent_dim,
            hidden_dim: self.hidden_dim,
            cov_learnable: self.cov_learnable,
            anchor_scale: self.anchor_scale,
        }
    }

    pub fn theory_config(&self) -> TheoryConfig {
        TheoryConfig {
            clients: self.theory_clients,
            samples: self.theory_samples,
            test_samples: self.theory_test_samples,
            latent_dim: self.theory_latent_dim,
            rank: self.theory_rank,
            dim_min: self.theory_dim_min,
            dim_max: self.theory_dim_max,
            participation: self.theory_participation,
            rounds: self.theory_rounds,
            step_size: self.theory_step_size,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(FlicError::config("rounds", "must be at least 1"));
        }
        if self.workers == 0 {
            return Err(FlicError::config("workers", "must be at least 1"));
        }
        self.round_config().validate()?;
        self.model_config().validate()?;
        as_config("theory", self.theory_config().validate())?;
        match &self.dataset {
            Some(dir) => {
                if !dir.join(super::dataset_io::MANIFEST).is_file() {
                    return Err(FlicError::config(
                        "dataset",
                        format!("{} does not contain a dataset manifest", dir.display()),
                    ));
                }
            }
            None => as_config("dataset spec", self.dataset_spec().validate())?,
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }
}

/// Name the offending key: unknown fields carry it in the message, value
/// errors through the span of the line they sit on.
fn describe_toml_error(e: &toml::de::Error, text: &str) -> FlicError {
    let message = e.message().trim().to_string();
    let from_message = message
        .split('`')
        .nth(1)
        .filter(|_| message.contains("unknown field"))
        .map(str::to_string);
    let from_span = e.span().and_then(|span| {
        let start = text[..span.start.min(text.len())].rfind('\n').map_or(0, |i| i + 1);
        let line = &text[start..];
        let (key, _) = line.split_once('=')?;
        let key = key.trim();
        (!key.is_empty() && !key.contains('\n')).then(|| key.to_string())
    });
    let key = from_message.or(from_span).unwrap_or_else(|| "<document>".into());
    FlicError::config(key, message)
}

/// Parse `text`, then apply `FLIC_<KEY>` overrides from `env`. Override values
/// are read as TOML scalars, falling back to plain strings.
pub fn parse_config_str<I>(text: &str, env: I) -> Result<ExperimentConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| describe_toml_error(&e, text))?;
    let mut overrides: Vec<(String, String)> = env
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix("FLIC_").map(|key| (key.to_ascii_lowercase(), v)))
        .collect();
    overrides.sort();
    for (key, raw) in overrides {
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or(toml::Value::String(raw));
        table.insert(key, value);
    }
    let merged = toml::to_string(&table).map_err(|e| FlicError::config("<document>", e.to_string()))?;
    let cfg: ExperimentConfig = toml::from_str(&merged).map_err(|e| describe_toml_error(&e, &merged))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Read and validate a config file, with overrides from the process environment.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| FlicError::io(path, e))?;
    parse_config_str(&text, std::env::vars())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig> {
        parse_config_str(text, std::iter::empty())
    }

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!((cfg.lambda1, cfg.lambda2, cfg.lr), (1e-3, 1e-3, 1e-3));
        assert_eq!((cfg.rounds, cfg.participation), (50, 0.1));
        assert_eq!((cfg.batch_size, cfg.latent_dim, cfg.hidden_dim), (100, 64, 64));
    }

    #[test]
    fn zero_participation_rejected() {
        match parse("participation = 0.0") {
            Err(FlicError::Config { key, .. }) => assert_eq!(key, "participation"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected_with_name() {
        match parse("lamda1 = 0.1") {
            Err(FlicError::Config { key, .. }) => assert_eq!(key, "lamda1"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn type_error_names_key() {
        match parse("seed = 3\nrounds = \"many\"") {
            Err(FlicError::Config { key, .. }) => assert_eq!(key, "rounds"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn env_overrides_win() {
        let env = vec![
            ("FLIC_ROUNDS".to_string(), "7".to_string()),
            ("FLIC_MODE".to_string(), "theory".to_string()),
            ("HOME".to_string(), "/x".to_string()),
        ];
        let cfg = parse_config_str("rounds = 3", env).unwrap();
        assert_eq!(cfg.rounds, 7);
        assert_eq!(cfg.mode, Mode::Theory);
    }

    #[test]
    fn round_trip() {
        let cfg = parse("lambda1 = 0.25\nanchor_scale = 1.5\nvariant = \"noisy_features\"\nweighting = \"data_size\"").unwrap();
        assert_eq!(parse(&cfg.to_toml()).unwrap(), cfg);
    }
}
