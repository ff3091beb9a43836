//! Pipeline configuration: a TOML file with one section per stage.
//! Unknown keys are rejected so typos fail loudly, and the configuration
//! hash covers every parsed field.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// VaR levels, e.g. [0.05, 0.01]; the first is the primary level used
    /// for labeling, calibration, and EVT.
    pub alphas: Vec<f64>,
    pub data: DataConfig,
    pub features: FeaturesConfig,
    pub split: SplitConfig,
    pub garch: GarchConfig,
    pub threshold: ThresholdConfigSection,
    pub agent: AgentConfigSection,
    pub calibration: CalibrationConfig,
    pub backtest: BacktestConfig,
    pub evt: EvtConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// "csv" reads `path`; "simulate" generates a GARCH price path.
    pub source: String,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default = "default_sim_len")]
    pub simulate_len: usize,
    #[serde(default = "default_alpha0")]
    pub simulate_alpha0: f64,
    #[serde(default = "default_alpha1")]
    pub simulate_alpha1: f64,
    #[serde(default = "default_beta1")]
    pub simulate_beta1: f64,
    #[serde(default)]
    pub simulate_gamma: f64,
    #[serde(default = "default_start_price")]
    pub simulate_start_price: f64,
}

fn default_sim_len() -> usize {
    5000
}
fn default_alpha0() -> f64 {
    1e-6
}
fn default_alpha1() -> f64 {
    0.08
}
fn default_beta1() -> f64 {
    0.90
}
fn default_start_price() -> f64 {
    100.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FeaturesConfig {
    /// feature spec strings, e.g. "ret lag 1", "SMA 5", "RSI 14",
    /// "BB upper 20", "signal sma"
    pub columns: Vec<String>,
    #[serde(default = "default_rsi_lower")]
    pub rsi_lower: f64,
    #[serde(default = "default_rsi_upper")]
    pub rsi_upper: f64,
}

fn default_rsi_lower() -> f64 {
    30.0
}
fn default_rsi_upper() -> f64 {
    70.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    pub train_frac: f64,
    pub val_frac: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GarchConfig {
    /// "garch" or "gjr"
    pub model: String,
    /// "normal" or "student_t"
    pub innovation: String,
    #[serde(default)]
    pub zero_mean: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ThresholdConfigSection {
    pub horizon: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct AgentConfigSection {
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_eps_start")]
    pub epsilon_start: f64,
    #[serde(default = "default_eps_min")]
    pub epsilon_min: f64,
    #[serde(default = "default_eps_decay")]
    pub epsilon_decay: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_buffer")]
    pub buffer_capacity: usize,
    #[serde(default = "default_sync")]
    pub target_sync_every: u64,
    pub n_episodes: usize,
    #[serde(default = "default_true")]
    pub terminate_on_false_negative: bool,
    #[serde(default)]
    pub early_stop_gmean: Option<f64>,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![96, 64]
}
fn default_gamma() -> f64 {
    0.95
}
fn default_lr() -> f64 {
    0.0005
}
fn default_eps_start() -> f64 {
    1.0
}
fn default_eps_min() -> f64 {
    0.01
}
fn default_eps_decay() -> f64 {
    0.995
}
fn default_batch() -> usize {
    64
}
fn default_buffer() -> usize {
    100_000
}
fn default_sync() -> u64 {
    500
}
fn default_true() -> bool {
    true
}
fn default_eval_every() -> usize {
    5
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    /// "grid", "mcmc", or "both"; the adjust stage applies the grid
    /// optimum unless only MCMC ran.
    pub method: String,
    #[serde(default = "default_grid_resolution")]
    pub grid_resolution: usize,
    #[serde(default = "default_mcmc_iter")]
    pub mcmc_iterations: usize,
    #[serde(default = "default_proposal_sd")]
    pub proposal_sd: f64,
    #[serde(default = "default_burn_in")]
    pub burn_in_frac: f64,
}

fn default_grid_resolution() -> usize {
    26
}
fn default_mcmc_iter() -> usize {
    10_000
}
fn default_proposal_sd() -> f64 {
    0.03
}
fn default_burn_in() -> f64 {
    0.2
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BacktestConfig {
    /// block count for the paired rank tests on per-block violation
    /// counts
    #[serde(default = "default_blocks")]
    pub rank_test_blocks: usize,
}

fn default_blocks() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvtConfig {
    #[serde(default = "default_bootstrap")]
    pub ks_bootstrap: usize,
}

fn default_bootstrap() -> usize {
    2000
}

impl PipelineConfig {
    pub fn from_path(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_str(&text)
    }

    pub fn from_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: PipelineConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.alphas.is_empty() {
            return bad("alphas must be non-empty".into());
        }
        for &a in &self.alphas {
            if !(0.0 < a && a < 1.0) {
                return bad(format!("alpha {a} outside (0, 1)"));
            }
        }
        match self.data.source.as_str() {
            "csv" => {
                if self.data.path.is_none() {
                    return bad("data.source = \"csv\" requires data.path".into());
                }
            }
            "simulate" => {
                if self.data.simulate_len < 300 {
                    return bad("data.simulate_len must be at least 300".into());
                }
            }
            other => return bad(format!("unknown data.source {other:?}")),
        }
        if !(self.split.train_frac > 0.0
            && self.split.val_frac >= 0.0
            && self.split.train_frac + self.split.val_frac < 1.0)
        {
            return bad("split fractions must be positive and sum below 1".into());
        }
        if !matches!(self.garch.model.as_str(), "garch" | "gjr") {
            return bad(format!("unknown garch.model {:?}", self.garch.model));
        }
        if !matches!(self.garch.innovation.as_str(), "normal" | "student_t") {
            return bad(format!("unknown garch.innovation {:?}", self.garch.innovation));
        }
        if self.threshold.horizon == 0 {
            return bad("threshold.horizon must be positive".into());
        }
        if self.features.columns.is_empty() {
            return bad("features.columns must be non-empty".into());
        }
        for c in &self.features.columns {
            crate::timeseries::FeatureSpec::parse(c)
                .map_err(|e| ConfigError::Invalid(format!("feature {c:?}: {e}")))?;
        }
        if self.agent.n_episodes == 0 {
            return bad("agent.n_episodes must be positive".into());
        }
        if !matches!(self.calibration.method.as_str(), "grid" | "mcmc" | "both") {
            return bad(format!(
                "unknown calibration.method {:?}",
                self.calibration.method
            ));
        }
        if self.calibration.grid_resolution < 2 {
            return bad("calibration.grid_resolution must be at least 2".into());
        }
        if self.backtest.rank_test_blocks < 2 {
            return bad("backtest.rank_test_blocks must be at least 2".into());
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the parsed config, so
    /// formatting and comments do not affect the hash but every field
    /// value does.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn agent_config(&self, seed: u64) -> crate::ddqn::AgentConfig {
        let a = &self.agent;
        crate::ddqn::AgentConfig {
            hidden: a.hidden.clone(),
            gamma: a.gamma,
            lr: a.lr,
            epsilon_start: a.epsilon_start,
            epsilon_min: a.epsilon_min,
            epsilon_decay: a.epsilon_decay,
            batch_size: a.batch_size,
            buffer_capacity: a.buffer_capacity,
            target_sync_every: a.target_sync_every,
            n_episodes: a.n_episodes,
            terminate_on_false_negative: a.terminate_on_false_negative,
            early_stop_gmean: a.early_stop_gmean,
            eval_every: a.eval_every,
            seed,
        }
    }

    pub fn garch_spec(&self) -> crate::garch::GarchSpec {
        crate::garch::GarchSpec {
            model: if self.garch.model == "gjr" {
                crate::garch::GarchModel::Gjr
            } else {
                crate::garch::GarchModel::Garch
            },
            innovation: if self.garch.innovation == "student_t" {
                crate::garch::Innovation::StudentT
            } else {
                crate::garch::Innovation::Normal
            },
        }
    }
}

/// A complete simulated-data configuration used by tests and `--example`
/// style smoke runs.
pub fn example_config_toml(out_dir: &str, seed: u64) -> String {
    format!(
        r#"seed = {seed}
output_dir = "{out_dir}"
alphas = [0.05, 0.01]

[data]
source = "simulate"
simulate_len = 3000

[features]
columns = ["ret lag 1", "ret lag 2", "SMA 5", "EMA 10", "RSI 14", "BB upper 20", "BB lower 20", "signal sma"]

[split]
train_frac = 0.6
val_frac = 0.2

[garch]
model = "garch"
innovation = "normal"
zero_mean = true

[threshold]
horizon = 250

[agent]
n_episodes = 30
hidden = [32, 16]
epsilon_decay = 0.95
early_stop_gmean = 0.9
eval_every = 2

[calibration]
method = "both"
grid_resolution = 26
mcmc_iterations = 4000

[backtest]
rank_test_blocks = 8

[evt]
ks_bootstrap = 200
"#
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_parses_and_validates() {
        let cfg = PipelineConfig::from_str(&example_config_toml("out", 7)).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.alphas, vec![0.05, 0.01]);
        assert_eq!(cfg.agent.hidden, vec![32, 16]);
        assert_eq!(cfg.agent.lr, 0.0005);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = example_config_toml("out", 1).replace("[garch]", "[garch]\nbogus = 1");
        assert!(matches!(
            PipelineConfig::from_str(&text),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn invalid_values_rejected() {
        for (from, to) in [
            ("alphas = [0.05, 0.01]", "alphas = [1.5]"),
            ("train_frac = 0.6", "train_frac = 0.9"),
            ("model = \"garch\"", "model = \"egarch\""),
            ("horizon = 250", "horizon = 0"),
            ("method = \"both\"", "method = \"annealing\""),
            ("\"SMA 5\"", "\"SMA five\""),
        ] {
            let text = example_config_toml("out", 1).replace(from, to);
            assert!(
                matches!(PipelineConfig::from_str(&text), Err(ConfigError::Invalid(_))),
                "expected rejection for {to}"
            );
        }
    }

    #[test]
    fn hash_stable_and_field_sensitive() {
        let a = PipelineConfig::from_str(&example_config_toml("out", 1)).unwrap();
        let b = PipelineConfig::from_str(&example_config_toml("out", 1)).unwrap();
        assert_eq!(a.hash(), b.hash());
        // formatting-only change leaves the hash alone
        let spaced = example_config_toml("out", 1).replace("seed = 1", "seed   =   1");
        let c = PipelineConfig::from_str(&spaced).unwrap();
        assert_eq!(a.hash(), c.hash());
        // every touched field must move the hash
        for (from, to) in [
            ("seed = 1", "seed = 2"),
            ("simulate_len = 3000", "simulate_len = 3001"),
            ("train_frac = 0.6", "train_frac = 0.61"),
            ("horizon = 250", "horizon = 251"),
            ("n_episodes = 30", "n_episodes = 31"),
            ("grid_resolution = 26", "grid_resolution = 27"),
            ("ks_bootstrap = 200", "ks_bootstrap = 201"),
        ] {
            let text = example_config_toml("out", 1).replace(from, to);
            let d = PipelineConfig::from_str(&text).unwrap();
            assert_ne!(a.hash(), d.hash(), "hash ignored {to}");
        }
    }

    #[test]
    fn csv_source_requires_path() {
        let text = example_config_toml("out", 1).replace("source = \"simulate\"", "source = \"csv\"");
        assert!(matches!(
            PipelineConfig::from_str(&text),
            Err(ConfigError::Invalid(_))
        ));
    }
}
