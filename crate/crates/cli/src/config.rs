//! Run settings, resolved from command-line flags, `RECALL_*` environment
//! variables, an optional TOML config file and built-in defaults, in that
//! order of precedence.
//!
//! Config files use the same key names as the resolved echo written to
//! `config.toml` in every output directory, so an echo can be fed back with
//! `--config` to repeat a run.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use recall_core::math::ActivationKind;
use recall_core::model::ArchMode;
use recall_core::trainer::{OptimizerKind, TrainConfig};

use crate::error::{CliError, CliResult};

pub const MODES: [&str; 5] = ["recall", "recall-var", "recall-reg", "recall-var-reg", "naive"];
pub const ARCHS: [&str; 2] = ["per-seq-head", "expand-last"];
pub const ACTIVATIONS: [&str; 2] = ["relu", "siren"];

#[derive(Debug, Clone, Default, PartialEq, Args, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunArgs {
    /// TOML file with any of the options below
    #[arg(long, env = "RECALL_CONFIG")]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Sequence manifest (TOML)
    #[arg(long, env = "RECALL_MANIFEST")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,

    /// Base settings before overrides
    #[arg(long, env = "RECALL_PRESET", value_parser = ["default", "benchmark"])]
    pub preset: Option<String>,

    #[arg(long, env = "RECALL_MODE", value_parser = MODES)]
    pub mode: Option<String>,

    #[arg(long, env = "RECALL_ARCH", value_parser = ARCHS)]
    pub arch: Option<String>,

    #[arg(long, env = "RECALL_ACTIVATION", value_parser = ACTIVATIONS)]
    pub activation: Option<String>,

    /// SIREN frequency of the first layer of each head
    #[arg(long, env = "RECALL_OMEGA_FIRST")]
    pub omega_first: Option<f64>,

    /// SIREN frequency of deeper layers
    #[arg(long, env = "RECALL_OMEGA_HIDDEN")]
    pub omega_hidden: Option<f64>,

    #[arg(long, visible_alias = "epochs", env = "RECALL_EPOCHS_PER_SEQUENCE")]
    pub epochs_per_sequence: Option<usize>,

    #[arg(long, env = "RECALL_BATCH_SIZE")]
    pub batch_size: Option<usize>,

    #[arg(long, env = "RECALL_OPTIMIZER", value_parser = ["adam", "sgd"])]
    pub optimizer: Option<String>,

    /// Learning rate; 0 runs a no-update diagnostic
    #[arg(long, visible_alias = "lr", env = "RECALL_LEARNING_RATE")]
    pub learning_rate: Option<f64>,

    #[arg(long, env = "RECALL_BETA1")]
    pub beta1: Option<f64>,

    #[arg(long, env = "RECALL_BETA2")]
    pub beta2: Option<f64>,

    #[arg(long, env = "RECALL_EPSILON")]
    pub epsilon: Option<f64>,

    /// Reset optimizer state at the start of every sequence
    #[arg(long, env = "RECALL_RESET_OPTIMIZER")]
    pub reset_optimizer: Option<bool>,

    #[arg(long, env = "RECALL_HIDDEN_WIDTH")]
    pub hidden_width: Option<usize>,

    /// Hidden layers per head, 0 to 3
    #[arg(long, env = "RECALL_HIDDEN_LAYERS")]
    pub hidden_layers: Option<usize>,

    /// Lower bound on recall-label variances in the variance modes
    #[arg(long, env = "RECALL_VARIANCE_FLOOR")]
    pub variance_floor: Option<f64>,

    /// Examples per parallel gradient shard
    #[arg(long, env = "RECALL_SHARD_SIZE")]
    pub shard_size: Option<usize>,

    /// First run seed
    #[arg(long, env = "RECALL_SEED")]
    pub seed: Option<u64>,

    /// Number of runs, with seeds seed, seed+1, ...
    #[arg(long, env = "RECALL_REPEATS")]
    pub repeats: Option<usize>,

    /// Must be true; runs are always bit-reproducible
    #[arg(long, env = "RECALL_DETERMINISTIC")]
    pub deterministic: Option<bool>,
}

macro_rules! layered {
    ($upper:expr, $lower:expr, $($field:ident),*) => {
        RunArgs {
            config: $upper.config.clone(),
            $($field: $upper.$field.clone().or($lower.$field.clone()),)*
        }
    };
}

impl RunArgs {
    /// Fills every unset field from `lower`.
    pub fn or(&self, lower: &RunArgs) -> RunArgs {
        layered!(
            self,
            lower,
            manifest,
            preset,
            mode,
            arch,
            activation,
            omega_first,
            omega_hidden,
            epochs_per_sequence,
            batch_size,
            optimizer,
            learning_rate,
            beta1,
            beta2,
            epsilon,
            reset_optimizer,
            hidden_width,
            hidden_layers,
            variance_floor,
            shard_size,
            seed,
            repeats,
            deterministic
        )
    }

    /// Reads a config file; a relative manifest path is taken relative to it.
    pub fn load(path: &Path) -> CliResult<RunArgs> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        let mut args: RunArgs =
            toml::from_str(&text).map_err(|e| CliError::Io(format!("malformed config {}: {e}", path.display())))?;
        if let Some(m) = &args.manifest {
            if m.is_relative() {
                let dir = path.parent().unwrap_or(Path::new(""));
                args.manifest = Some(dir.join(m));
            }
        }
        Ok(args)
    }
}

pub fn arch_name(a: ArchMode) -> &'static str {
    match a {
        ArchMode::PerSequenceHead => "per-seq-head",
        ArchMode::ExpandLastLayer => "expand-last",
    }
}

pub fn parse_arch(s: &str) -> CliResult<ArchMode> {
    match s {
        "per-seq-head" => Ok(ArchMode::PerSequenceHead),
        "expand-last" => Ok(ArchMode::ExpandLastLayer),
        _ => Err(CliError::Validation(format!(
            "unknown arch {s:?}; expected per-seq-head or expand-last"
        ))),
    }
}

pub fn activation_name(a: ActivationKind) -> &'static str {
    match a {
        ActivationKind::Relu => "relu",
        ActivationKind::Siren => "siren",
    }
}

pub fn parse_activation(s: &str) -> CliResult<ActivationKind> {
    match s {
        "relu" => Ok(ActivationKind::Relu),
        "siren" => Ok(ActivationKind::Siren),
        _ => Err(CliError::Validation(format!(
            "unknown activation {s:?}; expected relu or siren"
        ))),
    }
}

/// Fully resolved settings of a `train` or `ablate` invocation.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: TrainConfig,
    pub seeds: Vec<u64>,
    pub manifest: Option<PathBuf>,
    /// Every option with its effective value, as written to `config.toml`.
    pub echo: RunArgs,
}

pub fn resolve(flags: &RunArgs) -> CliResult<Resolved> {
    let args = match &flags.config {
        Some(path) => flags.or(&RunArgs::load(path)?),
        None => flags.clone(),
    };

    let preset = args.preset.clone().unwrap_or_else(|| "default".into());
    let mut c = match preset.as_str() {
        "default" => TrainConfig::default(),
        "benchmark" => TrainConfig::benchmark(),
        p => return Err(CliError::Validation(format!("unknown preset {p:?}"))),
    };
    if let Some(m) = &args.mode {
        c.mode = m.parse()?;
    }
    if let Some(a) = &args.arch {
        c.arch_mode = parse_arch(a)?;
    }
    if let Some(a) = &args.activation {
        c.activation.kind = parse_activation(a)?;
    }
    if let Some(w) = args.omega_first {
        c.activation.omega_first = w;
    }
    if let Some(w) = args.omega_hidden {
        c.activation.omega_hidden = w;
    }
    if let Some(v) = args.epochs_per_sequence {
        c.epochs_per_sequence = v;
    }
    if let Some(v) = args.batch_size {
        c.batch_size = v;
    }
    if let Some(o) = &args.optimizer {
        c.optimizer.kind = match o.as_str() {
            "adam" => OptimizerKind::Adam,
            "sgd" => OptimizerKind::Sgd,
            _ => {
                return Err(CliError::Validation(format!(
                    "unknown optimizer {o:?}; expected adam or sgd"
                )))
            }
        };
    }
    if let Some(v) = args.learning_rate {
        c.optimizer.learning_rate = v;
        c.zero_lr_diagnostic = v == 0.0;
    }
    if let Some(v) = args.beta1 {
        c.optimizer.beta1 = v;
    }
    if let Some(v) = args.beta2 {
        c.optimizer.beta2 = v;
    }
    if let Some(v) = args.epsilon {
        c.optimizer.epsilon = v;
    }
    if let Some(v) = args.reset_optimizer {
        c.reset_optimizer_each_sequence = v;
    }
    if let Some(v) = args.hidden_width {
        c.hidden_width = v;
    }
    if let Some(v) = args.hidden_layers {
        c.hidden_layers = v;
    }
    if let Some(v) = args.variance_floor {
        c.variance_floor = v;
    }
    if let Some(v) = args.shard_size {
        c.shard_size = v;
    }
    if args.deterministic == Some(false) {
        return Err(CliError::Validation(
            "non-deterministic execution is not supported; runs are always reproducible".into(),
        ));
    }
    let seed = args.seed.unwrap_or(1);
    let repeats = args.repeats.unwrap_or(1);
    if repeats == 0 {
        return Err(CliError::Validation("repeats must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..repeats as u64)
        .map(|i| seed.checked_add(i))
        .collect::<Option<_>>()
        .ok_or_else(|| CliError::Validation("seed range overflows".into()))?;
    c.validate()?;

    let echo = RunArgs {
        config: None,
        manifest: args
            .manifest
            .as_deref()
            .map(std::path::absolute)
            .transpose()
            .map_err(|e| CliError::Io(format!("cannot resolve manifest path: {e}")))?,
        preset: Some(preset),
        mode: Some(c.mode.name().into()),
        arch: Some(arch_name(c.arch_mode).into()),
        activation: Some(activation_name(c.activation.kind).into()),
        omega_first: Some(c.activation.omega_first),
        omega_hidden: Some(c.activation.omega_hidden),
        epochs_per_sequence: Some(c.epochs_per_sequence),
        batch_size: Some(c.batch_size),
        optimizer: Some(match c.optimizer.kind {
            OptimizerKind::Adam => "adam".into(),
            OptimizerKind::Sgd => "sgd".into(),
        }),
        learning_rate: Some(c.optimizer.learning_rate),
        beta1: Some(c.optimizer.beta1),
        beta2: Some(c.optimizer.beta2),
        epsilon: Some(c.optimizer.epsilon),
        reset_optimizer: Some(c.reset_optimizer_each_sequence),
        hidden_width: Some(c.hidden_width),
        hidden_layers: Some(c.hidden_layers),
        variance_floor: Some(c.variance_floor),
        shard_size: Some(c.shard_size),
        seed: Some(seed),
        repeats: Some(repeats),
        deterministic: Some(true),
    };
    Ok(Resolved {
        config: c,
        seeds,
        manifest: args.manifest,
        echo,
    })
}
