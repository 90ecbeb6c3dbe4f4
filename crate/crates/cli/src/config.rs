use std::path::{Path, PathBuf};

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config value: {0}")]
    Value(String),
}

/// τ value that may be the string "inf".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tau(pub f64);

impl Serialize for Tau {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Tau {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Tau(v)),
            Raw::Text(t) if t == "inf" || t == "infinity" => Ok(Tau(f64::INFINITY)),
            Raw::Text(t) => Err(D::Error::custom(format!(
                "tau must be a number or \"inf\", got \"{t}\""
            ))),
        }
    }
}

/// One JSON document with per-command sections; every field has a default
/// matching the training protocol and unknown keys are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; per-run streams derive from it together with the
    /// estimator/critic/task tags and the run index.
    pub master_seed: u64,
    /// Run indices (reported as the `seed` column).
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Grid cells training in parallel.
    pub workers: usize,
    pub benchmark: BenchmarkConfig,
    pub selfcheck: SelfCheckConfig,
    pub verify: VerifyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            master_seed: 20200101,
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("out"),
            workers: 2,
            benchmark: BenchmarkConfig::default(),
            selfcheck: SelfCheckConfig::default(),
            verify: VerifyConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    pub dim: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub total_iters: usize,
    pub step_every: usize,
    pub start_mi: f64,
    pub step_mi: f64,
    /// Any of "cpc", "nwj", "mine", "smile", "gm".
    pub estimators: Vec<String>,
    /// Evaluation τ grid for the shared SMILE critic.
    pub taus: Vec<Tau>,
    /// "joint" and/or "separable".
    pub critics: Vec<String>,
    /// "gaussian" and/or "cubic".
    pub tasks: Vec<String>,
    pub mine_ema_decay: f64,
    pub hidden_width: usize,
    pub embed_dim: usize,
    pub flow_layers: usize,
    pub flow_hidden: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            dim: 20,
            batch_size: 64,
            learning_rate: 5e-4,
            total_iters: 20_000,
            step_every: 4_000,
            start_mi: 2.0,
            step_mi: 2.0,
            estimators: vec!["cpc".into(), "nwj".into(), "smile".into(), "gm".into()],
            taus: vec![Tau(1.0), Tau(5.0), Tau(f64::INFINITY)],
            critics: vec!["joint".into()],
            tasks: vec!["gaussian".into(), "cubic".into()],
            mine_ema_decay: 0.99,
            hidden_width: 256,
            embed_dim: 32,
            flow_layers: 5,
            flow_hidden: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelfCheckConfig {
    /// IDX image/label paths; when absent a deterministic synthetic digit
    /// corpus of `synthetic_count` images is generated instead.
    pub images_path: Option<PathBuf>,
    pub labels_path: Option<PathBuf>,
    pub synthetic_count: usize,
    /// Cap on dataset size after loading (applies to real data too).
    pub max_images: Option<usize>,
    /// 14 (2×2 pooled) or 28.
    pub working_resolution: usize,
    /// Use the full-size CNN widths instead of the desk-scaled ones.
    pub full_size_model: bool,
    pub batch_size: usize,
    /// Discriminative critics train this many epochs.
    pub epochs: usize,
    /// The generative models train longer, following the image protocol.
    pub gm_epochs: usize,
    pub learning_rate: f64,
    /// Rows-kept sweep for the baseline curve; the full height is always
    /// included so Î(X;X) exists for normalization.
    pub baseline_t_values: Vec<usize>,
    /// Rows kept in the first view of the data-processing setting (second
    /// view keeps three fewer). Empty list skips the setting.
    pub data_processing_t_values: Vec<usize>,
    /// Rows kept in the additivity setting. Empty list skips the setting.
    pub additivity_t_values: Vec<usize>,
    /// Any of "cpc", "mine", "smile", "gm".
    pub estimators: Vec<String>,
    pub taus: Vec<Tau>,
    pub mine_ema_decay: f64,
    /// Batches averaged for the post-training estimate.
    pub eval_batches: usize,
    pub latent_dim: usize,
    pub decoder_width: usize,
}

impl Default for SelfCheckConfig {
    fn default() -> Self {
        SelfCheckConfig {
            images_path: None,
            labels_path: None,
            synthetic_count: 4096,
            max_images: None,
            working_resolution: 14,
            full_size_model: false,
            batch_size: 64,
            epochs: 2,
            gm_epochs: 10,
            learning_rate: 1e-4,
            baseline_t_values: vec![0, 3, 6, 9, 14],
            data_processing_t_values: vec![6, 9, 14],
            additivity_t_values: vec![3, 6, 9, 14],
            estimators: vec!["cpc".into(), "smile".into(), "gm".into()],
            taus: vec![Tau(5.0), Tau(f64::INFINITY)],
            mine_ema_decay: 0.99,
            eval_batches: 20,
            latent_dim: 10,
            decoder_width: 400,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub kl_values: Vec<f64>,
    pub variance_n: usize,
    pub variance_trials: usize,
    pub log_partition_kls: Vec<f64>,
    pub log_partition_n: usize,
    pub log_partition_trials: usize,
    pub taus: Vec<f64>,
    pub clip_variance_n: usize,
    pub clip_variance_trials: usize,
    pub mse_s_values: Vec<f64>,
    pub mse_n: usize,
    pub mse_trials: usize,
    /// Force every check to fail; exercises the nonzero-exit path.
    pub break_slack: Option<f64>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            kl_values: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            variance_n: 64,
            variance_trials: 10_000,
            log_partition_kls: vec![1.0, 2.0, 3.0],
            log_partition_n: 4096,
            log_partition_trials: 2_000,
            taus: vec![0.5, 1.0, 2.0, 5.0],
            clip_variance_n: 100,
            clip_variance_trials: 100_000,
            mse_s_values: vec![0.8, 1.0, 1.25],
            mse_n: 64,
            mse_trials: 20_000,
            break_slack: None,
        }
    }
}

/// Flag-level overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub master_seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub workers: Option<usize>,
}

/// Load and validate a config: file values (when given) under flag overrides.
pub fn parse_config(path: Option<&Path>, overrides: &Overrides) -> Result<RunConfig, ConfigError> {
    let mut config = match path {
        None => RunConfig::default(),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.display().to_string(),
                source,
            })?;
            serde_json::from_str(&text).map_err(|e| ConfigError::Parse(e.to_string()))?
        }
    };
    if let Some(seed) = overrides.master_seed {
        config.master_seed = seed;
    }
    if let Some(dir) = &overrides.out_dir {
        config.out_dir = dir.clone();
    }
    if let Some(w) = overrides.workers {
        config.workers = w;
    }
    validate(&config)?;
    Ok(config)
}

fn validate(c: &RunConfig) -> Result<(), ConfigError> {
    let bad = |msg: String| Err(ConfigError::Value(msg));
    if c.seeds.is_empty() {
        return bad("seeds must be non-empty".into());
    }
    if c.workers == 0 {
        return bad("workers must be positive".into());
    }
    if c.benchmark.batch_size < 2 {
        return bad(format!(
            "benchmark.batch_size must be ≥ 2, got {}",
            c.benchmark.batch_size
        ));
    }
    if c.selfcheck.batch_size < 2 {
        return bad(format!(
            "selfcheck.batch_size must be ≥ 2, got {}",
            c.selfcheck.batch_size
        ));
    }
    if c.benchmark.step_every == 0 || c.benchmark.total_iters == 0 {
        return bad("benchmark iteration counts must be positive".into());
    }
    for tau in c.benchmark.taus.iter().chain(&c.selfcheck.taus) {
        if tau.0.is_nan() || tau.0 < 0.0 {
            return bad(format!("tau must be ≥ 0 or \"inf\", got {}", tau.0));
        }
    }
    if !(0.0 < c.benchmark.mine_ema_decay && c.benchmark.mine_ema_decay < 1.0) {
        return bad("mine_ema_decay must lie in (0, 1)".into());
    }
    for e in c.benchmark.estimators.iter() {
        if !["cpc", "nwj", "mine", "smile", "gm"].contains(&e.as_str()) {
            return bad(format!("unknown benchmark estimator \"{e}\""));
        }
    }
    for e in c.selfcheck.estimators.iter() {
        if !["cpc", "mine", "smile", "gm"].contains(&e.as_str()) {
            return bad(format!("unknown selfcheck estimator \"{e}\""));
        }
    }
    for cr in c.benchmark.critics.iter() {
        if !["joint", "separable"].contains(&cr.as_str()) {
            return bad(format!("unknown critic \"{cr}\""));
        }
    }
    for t in c.benchmark.tasks.iter() {
        if !["gaussian", "cubic"].contains(&t.as_str()) {
            return bad(format!("unknown task \"{t}\""));
        }
    }
    if c.selfcheck.working_resolution != 14 && c.selfcheck.working_resolution != 28 {
        return bad(format!(
            "working_resolution must be 14 or 28, got {}",
            c.selfcheck.working_resolution
        ));
    }
    if c.selfcheck.images_path.is_some() != c.selfcheck.labels_path.is_some() {
        return bad("images_path and labels_path must be given together".into());
    }
    Ok(())
}

/// Write the fully-defaulted effective config next to the run outputs.
pub fn echo_config(config: &RunConfig, out_dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let text = serde_json::to_string_pretty(config).expect("config serializes");
    std::fs::write(out_dir.join("config.echo.json"), text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_protocol_defaults() {
        let c = parse_config(None, &Overrides::default()).unwrap();
        assert_eq!(c.benchmark.batch_size, 64);
        assert_eq!(c.benchmark.learning_rate, 5e-4);
        assert_eq!(c.benchmark.total_iters, 20_000);
        assert_eq!(c.benchmark.dim, 20);
        assert_eq!(c.selfcheck.learning_rate, 1e-4);
        assert_eq!(c.selfcheck.epochs, 2);
        assert_eq!(c.seeds, vec![0, 1, 2]);
    }

    #[test]
    fn tau_inf_sentinel_round_trips() {
        let json = r#"{"benchmark": {"taus": [1.0, "inf"]}}"#;
        let c: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(c.benchmark.taus[0].0, 1.0);
        assert!(c.benchmark.taus[1].0.is_infinite());
        let back = serde_json::to_string(&c).unwrap();
        assert!(back.contains("\"inf\""));
    }

    #[test]
    fn negative_batch_size_is_rejected() {
        let json = r#"{"benchmark": {"batch_size": -4}}"#;
        let err = serde_json::from_str::<RunConfig>(json).unwrap_err();
        assert!(err.to_string().contains("invalid"), "{err}");
    }

    #[test]
    fn tiny_batch_size_is_rejected() {
        let dir = std::env::temp_dir().join(format!("cfg_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("c.json");
        std::fs::write(&p, r#"{"benchmark": {"batch_size": 1}}"#).unwrap();
        let err = parse_config(Some(&p), &Overrides::default()).unwrap_err();
        assert!(err.to_string().contains("batch_size"), "{err}");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn unknown_keys_are_rejected_by_name() {
        let json = r#"{"benchmark": {"batchsize": 64}}"#;
        let err = serde_json::from_str::<RunConfig>(json).unwrap_err();
        assert!(err.to_string().contains("batchsize"), "{err}");
    }

    #[test]
    fn overrides_beat_file_values() {
        let dir = std::env::temp_dir().join(format!("cfg_ovr_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("c.json");
        std::fs::write(&p, r#"{"master_seed": 7, "workers": 1}"#).unwrap();
        let ovr = Overrides {
            master_seed: Some(99),
            out_dir: None,
            workers: Some(4),
        };
        let c = parse_config(Some(&p), &ovr).unwrap();
        assert_eq!(c.master_seed, 99);
        assert_eq!(c.workers, 4);
        std::fs::remove_dir_all(&dir).ok();
    }
}
