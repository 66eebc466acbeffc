//! Run files: one TOML document per run, validated before any work starts.

use std::fmt;
use std::path::{Path, PathBuf};

use pgnn::dataset::{Schema, SplitSpec};
use pgnn::eval::{NoiseSweepConfig, Variant};
use pgnn::nn::{Optimizer, TrainConfig, DEFAULT_ARCHITECTURE};
use pgnn::pruning::{ElementKind, PruneConfig, Scheme};
use pgnn::search::GridSpec;
use pgnn::synth::SynthConfig;
use serde::Deserialize;

/// Problems with the run file or the command line. Maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Missing or unreadable inputs. Maps to exit code 3.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "input error: {}", self.0)
    }
}

impl std::error::Error for InputError {}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    /// Output directory; `--out` takes precedence.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Variant name used by `eval` and `compare`; inferred when absent.
    #[serde(default)]
    pub label: Option<Variant>,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub synth: Option<SynthConfig>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub prune: Option<PruneSection>,
    #[serde(default)]
    pub search: Option<GridSpec>,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Raw minute CSV read by `ingest`.
    #[serde(default)]
    pub raw: Option<PathBuf>,
    /// Column schema for `raw`; the built-in schema when absent.
    #[serde(default)]
    pub schema: Option<PathBuf>,
    /// Directory of derived rows written by `ingest` and read by later stages.
    #[serde(default)]
    pub supervised: Option<PathBuf>,
    #[serde(default)]
    pub split: SplitSpec,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            raw: None,
            schema: None,
            supervised: None,
            split: SplitSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            architecture: DEFAULT_ARCHITECTURE.to_vec(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss_threshold: Option<f64>,
    pub optimizer: Optimizer,
    pub lambda: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            epochs: t.epochs,
            batch_size: t.batch_size,
            loss_threshold: t.loss_threshold,
            optimizer: t.optimizer,
            lambda: 0.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSection {
    /// Trained model file to prune.
    pub base_model: PathBuf,
    pub scheme: Scheme,
    pub kind: ElementKind,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default)]
    pub alpha: f64,
    #[serde(default)]
    pub fine_tune_epochs: Option<usize>,
    #[serde(default)]
    pub scoring_rows: Option<usize>,
}

fn default_ratio() -> f64 {
    PruneConfig::default().ratio
}

impl PruneSection {
    pub fn prune_config(&self) -> PruneConfig {
        let d = PruneConfig::default();
        PruneConfig {
            kind: self.kind,
            ratio: self.ratio,
            alpha: self.alpha,
            fine_tune_epochs: self.fine_tune_epochs,
            scoring_rows: self.scoring_rows.unwrap_or(d.scoring_rows),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub noise_levels: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            noise_levels: NoiseSweepConfig::default().levels,
        }
    }
}

impl RunConfig {
    /// Parses and validates a run file. Relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, anyhow::Error> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| InputError(format!("cannot read run file {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(q) = p {
                *q = resolve(base, q);
            }
        };
        fix(&mut cfg.out_dir);
        fix(&mut cfg.data.raw);
        fix(&mut cfg.data.schema);
        fix(&mut cfg.data.supervised);
        if let Some(p) = &mut cfg.prune {
            p.base_model = resolve(base, &p.base_model);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError(m));
        let arch = &self.model.architecture;
        if arch.len() < 2 || arch.contains(&0) {
            return bad("model.architecture needs at least two positive widths".into());
        }
        if arch[0] != 10 || arch[arch.len() - 1] != 7 {
            return bad(format!(
                "model.architecture must map 10 features to 7 targets, got {arch:?}"
            ));
        }
        let wrap = |r: pgnn::Result<()>| r.map_err(|e| ConfigError(e.to_string()));
        wrap(self.train_config().validate())?;
        if !(0.0..=1.0).contains(&self.train.lambda) {
            return bad(format!("train.lambda must lie in [0, 1], got {}", self.train.lambda));
        }
        if let Some(s) = &self.synth {
            wrap(s.validate())?;
        }
        if let Some(p) = &self.prune {
            wrap(p.prune_config().validate())?;
        }
        if let Some(g) = &self.search {
            wrap(g.validate())?;
        }
        wrap(self.noise_sweep().validate())?;
        let sp = self.data.split;
        if !(sp.train_fraction > 0.0 && sp.train_fraction < 1.0)
            || !(sp.validation_fraction > 0.0 && sp.validation_fraction < 1.0)
        {
            return bad("data.split fractions must lie in (0, 1)".into());
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.seed = s;
        }
        self
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.train.learning_rate,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.seed,
            loss_threshold: self.train.loss_threshold,
            optimizer: self.train.optimizer,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            ..self.synth.clone().unwrap_or_default()
        }
    }

    pub fn noise_sweep(&self) -> NoiseSweepConfig {
        NoiseSweepConfig {
            levels: self.eval.noise_levels.clone(),
            seed: self.seed,
        }
    }

    pub fn schema(&self) -> Result<Schema, anyhow::Error> {
        match &self.data.schema {
            Some(p) => Ok(Schema::load(p)?),
            None => Ok(Schema::default()),
        }
    }

    pub fn raw_path(&self) -> Result<&Path, ConfigError> {
        self.data
            .raw
            .as_deref()
            .ok_or_else(|| ConfigError("data.raw is required for this command".into()))
    }

    pub fn supervised_dir(&self) -> Result<&Path, ConfigError> {
        self.data
            .supervised
            .as_deref()
            .ok_or_else(|| ConfigError("data.supervised is required for this command".into()))
    }

    pub fn prune_section(&self) -> Result<&PruneSection, ConfigError> {
        self.prune
            .as_ref()
            .ok_or_else(|| ConfigError("a [prune] section is required for this command".into()))
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
