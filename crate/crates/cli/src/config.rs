//! Experiment configuration: TOML parsing and total validation.
//!
//! Every rejected field names its exact key path. Nothing reaches the engine
//! until the whole file has been converted into validated core types.

use std::fmt::Display;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use fedsim_core::aggregate::{ServerOptKind, ServerOptimizerState, WeightScheme};
use fedsim_core::client::LocalTrainConfig;
use fedsim_core::compress::SparsitySpec;
use fedsim_core::orchestrate::{CohortSpec, StalenessConfig};
use fedsim_core::params::{Activation, ModelKind};
use fedsim_core::privacy::{DpConfig, DpMode};
use fedsim_core::rng;
use fedsim_core::{Error, Result};

fn bad(path: &str, msg: impl Display) -> Error {
    Error::Config(format!("{path}: {msg}"))
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawConfig {
    pub seed: u64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    pub model: ModelSection,
    pub data: DataSection,
    pub client: ClientSection,
    pub server: ServerSection,
    pub compress: Option<CompressSection>,
    pub dp: Option<DpSection>,
    pub staleness: Option<StalenessSection>,
    pub personalization: Option<PersonalizationSection>,
}

fn default_workers() -> usize {
    4
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub kind: String,
    pub input_dim: usize,
    pub n_classes: Option<usize>,
    pub hidden: Option<Vec<usize>>,
    pub activation: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub source: String,
    pub train_images: Option<PathBuf>,
    pub train_labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub n_samples: Option<usize>,
    pub noise: Option<f64>,
    pub n_clients: usize,
    pub partition: String,
    pub dirichlet_alpha: Option<f64>,
    #[serde(default)]
    pub feature_transforms: bool,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
}

fn default_test_fraction() -> f64 {
    0.2
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub prox_mu: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServerSection {
    pub optimizer: String,
    pub lr: f64,
    #[serde(default = "default_weights_scheme")]
    pub weights_scheme: String,
    pub rounds: u32,
    pub clients_per_round: ClientsPerRound,
    pub test_frequency: u32,
}

fn default_weights_scheme() -> String {
    "data_size".into()
}

/// Either a fixed cohort size or a per-round sampled range.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ClientsPerRound {
    Fixed(usize),
    Range { min: usize, max: usize },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressSection {
    pub bits: Option<u8>,
    pub sparsity: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpSection {
    pub mode: String,
    pub epsilon: f64,
    pub delta: f64,
    pub clip: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StalenessSection {
    pub fraction: f64,
    #[serde(default)]
    pub adaptive_lr: bool,
    #[serde(default = "default_c_floor", alias = "C_floor")]
    pub c_floor: f64,
}

fn default_c_floor() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PersonalizationSection {
    pub enabled: bool,
    pub alpha_mode: String,
    pub alpha: Option<f64>,
}

/// Where the training data comes from.
#[derive(Debug, Clone)]
pub enum DataSource {
    Synthetic { n_samples: usize, noise: f64, test_fraction: f64 },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PartitionKind {
    Iid,
    Dirichlet(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlphaMode {
    Fixed,
    Grid,
}

#[derive(Debug, Clone)]
pub struct PersonalizationPlan {
    pub alpha_mode: AlphaMode,
    pub alpha: f64,
    pub holdout_fraction: f64,
}

/// The fully validated experiment, in core types only.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub seed: u64,
    pub workers: usize,
    pub model_kind: ModelKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub source: DataSource,
    pub n_clients: usize,
    pub partition: PartitionKind,
    pub feature_transforms: bool,
    pub local: LocalTrainConfig,
    pub optimizer: ServerOptimizerState,
    pub weight_scheme: WeightScheme,
    pub rounds: u32,
    pub cohort: CohortSpec,
    pub test_frequency: u32,
    pub bits: Option<u8>,
    pub sparsity: Option<SparsitySpec>,
    pub dp: Option<DpConfig>,
    pub staleness: StalenessConfig,
    pub personalization: Option<PersonalizationPlan>,
}

pub fn load_config(path: &Path) -> Result<Experiment> {
    let text = std::fs::read_to_string(path)?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<Experiment> {
    let raw: RawConfig = toml::from_str(text)
        .map_err(|e| Error::Config(format!("config parse: {}", e.message())))?;
    validate(raw)
}

fn validate(raw: RawConfig) -> Result<Experiment> {
    let (model_kind, output_dim) = validate_model(&raw.model)?;
    let source = validate_data_source(&raw.data)?;
    if raw.data.n_clients == 0 {
        return Err(bad("data.n_clients", "must be at least 1"));
    }
    let partition = match raw.data.partition.as_str() {
        "iid" => PartitionKind::Iid,
        "dirichlet" => {
            let alpha = raw
                .data
                .dirichlet_alpha
                .ok_or_else(|| bad("data.dirichlet_alpha", "required when partition = \"dirichlet\""))?;
            if !alpha.is_finite() || alpha <= 0.0 {
                return Err(bad("data.dirichlet_alpha", format!("must be positive (got {alpha})")));
            }
            PartitionKind::Dirichlet(alpha)
        }
        other => {
            return Err(bad(
                "data.partition",
                format!("unknown partition {other:?}, expected \"iid\" or \"dirichlet\""),
            ))
        }
    };
    if raw.data.partition == "iid" && raw.data.dirichlet_alpha.is_some() {
        return Err(bad("data.dirichlet_alpha", "only valid with partition = \"dirichlet\""));
    }
    if raw.data.feature_transforms {
        // Transform family 2 needs square feature grids; checked here so a
        // bad dimension fails at load, not mid-round.
        let side = (raw.model.input_dim as f64).sqrt().round() as usize;
        if side * side != raw.model.input_dim {
            return Err(bad(
                "data.feature_transforms",
                format!(
                    "rotation transforms need a square input_dim (got {})",
                    raw.model.input_dim
                ),
            ));
        }
    }

    if raw.client.epochs == 0 {
        return Err(bad("client.epochs", "must be at least 1"));
    }
    if raw.client.batch_size == 0 {
        return Err(bad("client.batch_size", "must be at least 1"));
    }
    if !raw.client.lr.is_finite() || raw.client.lr < 0.0 {
        return Err(bad("client.lr", format!("must be finite and >= 0 (got {})", raw.client.lr)));
    }
    if !raw.client.prox_mu.is_finite() || raw.client.prox_mu < 0.0 {
        return Err(bad(
            "client.prox_mu",
            format!("must be finite and >= 0 (got {})", raw.client.prox_mu),
        ));
    }
    // The per-round shuffle seed is derived later from (seed, round, client).
    let local = LocalTrainConfig {
        epochs: raw.client.epochs,
        batch_size: raw.client.batch_size,
        lr: raw.client.lr,
        prox_mu: raw.client.prox_mu,
        shuffle_seed: 0,
    };

    let opt_kind = match raw.server.optimizer.as_str() {
        "sgd" => ServerOptKind::Sgd,
        "adam" => ServerOptKind::Adam,
        "yogi" => ServerOptKind::Yogi,
        "lamb" => ServerOptKind::Lamb,
        "lars" => ServerOptKind::Lars,
        other => {
            return Err(bad(
                "server.optimizer",
                format!("unknown optimizer {other:?}, expected sgd|adam|yogi|lamb|lars"),
            ))
        }
    };
    if !raw.server.lr.is_finite() || raw.server.lr <= 0.0 {
        return Err(bad("server.lr", format!("must be positive (got {})", raw.server.lr)));
    }
    let optimizer = ServerOptimizerState::new(opt_kind, raw.server.lr)
        .map_err(|e| bad("server.lr", e))?;
    let weight_scheme = match raw.server.weights_scheme.as_str() {
        "uniform" => WeightScheme::Uniform,
        "data_size" => WeightScheme::DataSize,
        "grad_norm_softmax" => WeightScheme::GradNormSoftmax,
        other => {
            return Err(bad(
                "server.weights_scheme",
                format!("unknown scheme {other:?}, expected uniform|data_size|grad_norm_softmax"),
            ))
        }
    };
    let cohort = match raw.server.clients_per_round {
        ClientsPerRound::Fixed(k) => {
            if k == 0 {
                return Err(bad("server.clients_per_round", "must be at least 1"));
            }
            if k > raw.data.n_clients {
                return Err(bad(
                    "server.clients_per_round",
                    format!("{k} exceeds data.n_clients = {}", raw.data.n_clients),
                ));
            }
            CohortSpec::Fixed(k)
        }
        ClientsPerRound::Range { min, max } => {
            if min == 0 || min > max {
                return Err(bad(
                    "server.clients_per_round",
                    format!("range {min}..={max} must satisfy 1 <= min <= max"),
                ));
            }
            if max > raw.data.n_clients {
                return Err(bad(
                    "server.clients_per_round",
                    format!("range max {max} exceeds data.n_clients = {}", raw.data.n_clients),
                ));
            }
            CohortSpec::Range { min, max }
        }
    };
    if raw.server.test_frequency == 0 {
        return Err(bad("server.test_frequency", "must be at least 1"));
    }

    let (bits, sparsity) = match &raw.compress {
        None => (None, None),
        Some(c) => {
            if c.bits.is_none() && c.sparsity.is_none() {
                return Err(bad("compress", "section present but neither bits nor sparsity set"));
            }
            if let Some(b) = c.bits {
                if b == 0 || b > fedsim_core::compress::MAX_BITS {
                    return Err(bad(
                        "compress.bits",
                        format!("must be in 1..={} (got {b})", fedsim_core::compress::MAX_BITS),
                    ));
                }
            }
            let spec = match c.sparsity {
                None => None,
                Some(s) => Some(SparsitySpec::new(s).map_err(|e| bad("compress.sparsity", e))?),
            };
            (c.bits, spec)
        }
    };

    let dp = match &raw.dp {
        None => None,
        Some(d) => {
            let mode = match d.mode.as_str() {
                "local" => DpMode::Local,
                "global" => DpMode::Global,
                other => {
                    return Err(bad(
                        "dp.mode",
                        format!("unknown mode {other:?}, expected \"local\" or \"global\""),
                    ))
                }
            };
            let cfg = DpConfig {
                mode,
                clip: d.clip,
                epsilon: d.epsilon,
                delta: d.delta,
                noise_seed: rng::derive(raw.seed, &[rng::tag("dp-seed")]),
            };
            cfg.validate().map_err(|e| bad("dp", e))?;
            Some(cfg)
        }
    };

    let staleness = match &raw.staleness {
        None => StalenessConfig::default(),
        Some(s) => {
            if !(0.0..=1.0).contains(&s.fraction) {
                return Err(bad(
                    "staleness.fraction",
                    format!("must be in [0, 1] (got {})", s.fraction),
                ));
            }
            if !s.c_floor.is_finite() || s.c_floor <= 0.0 {
                return Err(bad(
                    "staleness.c_floor",
                    format!("must be positive (got {})", s.c_floor),
                ));
            }
            StalenessConfig {
                fraction: s.fraction,
                adaptive_lr: s.adaptive_lr,
                c_floor: s.c_floor,
            }
        }
    };

    let personalization = match &raw.personalization {
        None => None,
        Some(p) if !p.enabled => None,
        Some(p) => {
            let alpha_mode = match p.alpha_mode.as_str() {
                "fixed" => AlphaMode::Fixed,
                "grid" => AlphaMode::Grid,
                other => {
                    return Err(bad(
                        "personalization.alpha_mode",
                        format!("unknown mode {other:?}, expected \"fixed\" or \"grid\""),
                    ))
                }
            };
            let alpha = match (alpha_mode, p.alpha) {
                (AlphaMode::Fixed, None) => {
                    return Err(bad("personalization.alpha", "required when alpha_mode = \"fixed\""))
                }
                (AlphaMode::Fixed, Some(a)) => {
                    if !(0.0..=1.0).contains(&a) {
                        return Err(bad(
                            "personalization.alpha",
                            format!("must be in [0, 1] (got {a})"),
                        ));
                    }
                    a
                }
                (AlphaMode::Grid, Some(_)) => {
                    return Err(bad(
                        "personalization.alpha",
                        "only valid with alpha_mode = \"fixed\"",
                    ))
                }
                (AlphaMode::Grid, None) => 0.0,
            };
            Some(PersonalizationPlan {
                alpha_mode,
                alpha,
                holdout_fraction: 0.25,
            })
        }
    };

    if raw.workers == 0 {
        return Err(bad("workers", "must be at least 1"));
    }

    Ok(Experiment {
        seed: raw.seed,
        workers: raw.workers,
        model_kind,
        input_dim: raw.model.input_dim,
        output_dim,
        source,
        n_clients: raw.data.n_clients,
        partition,
        feature_transforms: raw.data.feature_transforms,
        local,
        optimizer,
        weight_scheme,
        rounds: raw.server.rounds,
        cohort,
        test_frequency: raw.server.test_frequency,
        bits,
        sparsity,
        dp,
        staleness,
        personalization,
    })
}

fn validate_model(m: &ModelSection) -> Result<(ModelKind, usize)> {
    if m.input_dim == 0 {
        return Err(bad("model.input_dim", "must be at least 1"));
    }
    match m.kind.as_str() {
        "linear_regression" => {
            if m.hidden.is_some() {
                return Err(bad("model.hidden", "only valid for kind = \"mlp\""));
            }
            if let Some(c) = m.n_classes {
                if c != 1 {
                    return Err(bad(
                        "model.n_classes",
                        format!("linear regression has one output (got {c})"),
                    ));
                }
            }
            Ok((ModelKind::LinearRegression, 1))
        }
        "logistic_regression" => {
            if m.hidden.is_some() {
                return Err(bad("model.hidden", "only valid for kind = \"mlp\""));
            }
            let c = m
                .n_classes
                .ok_or_else(|| bad("model.n_classes", "required for classifiers"))?;
            if c < 2 {
                return Err(bad("model.n_classes", format!("need at least 2 classes (got {c})")));
            }
            Ok((ModelKind::LogisticRegression, c))
        }
        "mlp" => {
            let c = m
                .n_classes
                .ok_or_else(|| bad("model.n_classes", "required for classifiers"))?;
            if c < 2 {
                return Err(bad("model.n_classes", format!("need at least 2 classes (got {c})")));
            }
            let hidden = m
                .hidden
                .clone()
                .ok_or_else(|| bad("model.hidden", "required for kind = \"mlp\""))?;
            if hidden.is_empty() || hidden.len() > 2 {
                return Err(bad(
                    "model.hidden",
                    format!("need 1 or 2 hidden layers (got {})", hidden.len()),
                ));
            }
            if hidden.iter().any(|&h| h == 0) {
                return Err(bad("model.hidden", "hidden widths must be positive"));
            }
            let activation = match m.activation.as_deref() {
                None | Some("tanh") => Activation::Tanh,
                Some("relu") => Activation::Relu,
                Some(other) => {
                    return Err(bad(
                        "model.activation",
                        format!("unknown activation {other:?}, expected \"tanh\" or \"relu\""),
                    ))
                }
            };
            Ok((ModelKind::Mlp { hidden, activation }, c))
        }
        other => Err(bad(
            "model.kind",
            format!(
                "unknown kind {other:?}, expected linear_regression|logistic_regression|mlp"
            ),
        )),
    }
}

fn validate_data_source(d: &DataSection) -> Result<DataSource> {
    match d.source.as_str() {
        "synthetic" => {
            for (key, present) in [
                ("data.train_images", d.train_images.is_some()),
                ("data.train_labels", d.train_labels.is_some()),
                ("data.test_images", d.test_images.is_some()),
                ("data.test_labels", d.test_labels.is_some()),
            ] {
                if present {
                    return Err(bad(key, "only valid with source = \"idx\""));
                }
            }
            let n_samples = d
                .n_samples
                .ok_or_else(|| bad("data.n_samples", "required when source = \"synthetic\""))?;
            if n_samples == 0 {
                return Err(bad("data.n_samples", "must be at least 1"));
            }
            let noise = d.noise.unwrap_or(0.1);
            if !noise.is_finite() || noise < 0.0 {
                return Err(bad("data.noise", format!("must be finite and >= 0 (got {noise})")));
            }
            if !(0.0..1.0).contains(&d.test_fraction) || d.test_fraction == 0.0 {
                return Err(bad(
                    "data.test_fraction",
                    format!("must be in (0, 1) (got {})", d.test_fraction),
                ));
            }
            Ok(DataSource::Synthetic {
                n_samples,
                noise,
                test_fraction: d.test_fraction,
            })
        }
        "idx" => {
            if d.n_samples.is_some() {
                return Err(bad("data.n_samples", "only valid with source = \"synthetic\""));
            }
            if d.noise.is_some() {
                return Err(bad("data.noise", "only valid with source = \"synthetic\""));
            }
            let get = |key: &str, v: &Option<PathBuf>| {
                v.clone().ok_or_else(|| bad(key, "required when source = \"idx\""))
            };
            Ok(DataSource::Idx {
                train_images: get("data.train_images", &d.train_images)?,
                train_labels: get("data.train_labels", &d.train_labels)?,
                test_images: get("data.test_images", &d.test_images)?,
                test_labels: get("data.test_labels", &d.test_labels)?,
            })
        }
        other => Err(bad(
            "data.source",
            format!("unknown source {other:?}, expected \"synthetic\" or \"idx\""),
        )),
    }
}
