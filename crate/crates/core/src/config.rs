//! Run configuration: schema, defaults, file/flag resolution.
//!
//! Configs are TOML with `deny_unknown_fields` everywhere, so typos fail
//! loudly with the offending key. Command-line `-s key=value` overrides
//! are deep-merged over the file before deserialization. Every resolved
//! run writes its config back into the run directory (`config.toml`), and
//! re-running from that echo reproduces the run bit for bit.
//!
//! Defaults follow the published training recipe: mask ratio 0.7,
//! alpha 0.5, K 2048, tau_s 0.1, teacher temperature ramp 0.04 -> 0.07
//! over n_tau epochs, head EMA 0.998 -> 1, 300 epochs at batch 2048 with
//! 20 warm-up epochs. Desk-scale runs override sizes, never semantics.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend;
use crate::model::ModelDims;

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable: root directory prepended to relative output dirs.
pub const RUN_ROOT_ENV: &str = "AUDIOSSL_RUN_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub frontend: FrontendConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            output_dir: PathBuf::from("run"),
            frontend: FrontendConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrontendConfig {
    /// Training segment length; longer clips are randomly cropped,
    /// shorter ones zero-padded.
    pub clip_duration_s: f64,
    /// Sample size for dataset-level standardization statistics.
    pub stats_max_clips: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            clip_duration_s: 6.0,
            stats_max_clips: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub depth: usize,
    pub n_heads: usize,
    pub d_pred: usize,
    pub pred_depth: usize,
    pub pred_heads: usize,
    pub head_hidden: usize,
    pub head_bottleneck: usize,
    pub k: usize,
    /// Add the predictor's positional embedding at every slot (true) or
    /// only at masked slots (false).
    pub predictor_pos_all: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 768,
            depth: 12,
            n_heads: 12,
            d_pred: 512,
            pred_depth: 8,
            pred_heads: 8,
            head_hidden: 2048,
            head_bottleneck: 256,
            k: 2048,
            predictor_pos_all: true,
        }
    }
}

impl ModelConfig {
    pub fn dims(&self, n_positions: usize) -> ModelDims {
        ModelDims {
            patch_dim: frontend::PATCH_DIM,
            d_model: self.d_model,
            depth: self.depth,
            n_heads: self.n_heads,
            d_pred: self.d_pred,
            pred_depth: self.pred_depth,
            pred_heads: self.pred_heads,
            head_hidden: self.head_hidden,
            head_bottleneck: self.head_bottleneck,
            k: self.k,
            n_positions,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mask_ratio: f64,
    pub alpha: f64,
    pub tau_s: f64,
    pub n_tau_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub center_momentum: f64,
    pub train_head_gain: bool,
    pub checkpoint_every_epochs: usize,
    /// Stop the loop once the collapse predicate fires.
    pub stop_on_collapse: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mask_ratio: 0.7,
            alpha: 0.5,
            tau_s: 0.1,
            n_tau_epochs: 10,
            epochs: 300,
            batch_size: 2048,
            warmup_epochs: 20,
            base_lr: 3e-4,
            weight_decay: 0.0,
            lambda_start: 0.99995,
            lambda_end: 0.99999,
            center_momentum: 0.9,
            train_head_gain: false,
            checkpoint_every_epochs: 1,
            stop_on_collapse: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskType {
    MultiClass,
    MultiLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    Tvt,
    KFold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub task_type: TaskType,
    pub protocol: Protocol,
    pub probe_epochs: usize,
    pub probe_batch: usize,
    pub probe_lr: f64,
    pub repeats: usize,
    /// Embed with the EMA teacher encoder (default) or the student.
    pub use_teacher_encoder: bool,
    /// Fraction of k-fold training data held out for best-loss selection.
    pub kfold_val_fraction: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            task_type: TaskType::MultiClass,
            protocol: Protocol::Tvt,
            probe_epochs: 100,
            probe_batch: 128,
            probe_lr: 1e-4,
            repeats: 5,
            use_teacher_encoder: true,
            kfold_val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// One-factor-at-a-time grids over the base config.
    pub alpha_grid: Vec<f64>,
    pub k_grid: Vec<usize>,
    pub n_tau_grid: Vec<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            alpha_grid: vec![0.25, 0.5, 0.75, 1.0],
            k_grid: vec![1024, 2048, 4096, 8192],
            n_tau_grid: vec![10, 20],
        }
    }
}

impl RunConfig {
    /// Minimum clip duration yielding one full patch column (16 frames).
    pub fn min_clip_duration_s() -> f64 {
        (frontend::WIN_LEN + (frontend::PATCH_SIZE - 1) * frontend::HOP_LEN) as f64
            / f64::from(frontend::SAMPLE_RATE)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |key: &str, msg: String| Err(Error::config(key, msg));

        if self.schema_version != SCHEMA_VERSION {
            return cfg_err(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            );
        }
        if !(self.frontend.clip_duration_s >= Self::min_clip_duration_s()) {
            return cfg_err(
                "frontend.clip_duration_s",
                format!(
                    "must be at least {:.3}s (one patch column), got {}",
                    Self::min_clip_duration_s(),
                    self.frontend.clip_duration_s
                ),
            );
        }
        if self.frontend.stats_max_clips == 0 {
            return cfg_err("frontend.stats_max_clips", "must be positive".into());
        }

        let grid = frontend::grid_for_duration(self.frontend.clip_duration_s);
        self.model
            .dims(grid.0 * grid.1)
            .validate()
            .map_err(|e| Error::config("model", e.to_string()))?;

        let t = &self.train;
        if !(0.0..1.0).contains(&t.mask_ratio) {
            return cfg_err("train.mask_ratio", format!("must be in [0,1), got {}", t.mask_ratio));
        }
        if !(0.0..=1.0).contains(&t.alpha) {
            return cfg_err("train.alpha", format!("must be in [0,1], got {}", t.alpha));
        }
        if !(t.tau_s > 0.0) {
            return cfg_err("train.tau_s", format!("must be positive, got {}", t.tau_s));
        }
        if t.n_tau_epochs == 0 {
            return cfg_err("train.n_tau_epochs", "must be at least 1".into());
        }
        if t.epochs == 0 {
            return cfg_err("train.epochs", "must be at least 1".into());
        }
        if t.batch_size == 0 {
            return cfg_err("train.batch_size", "must be positive".into());
        }
        if t.warmup_epochs >= t.epochs {
            return cfg_err(
                "train.warmup_epochs",
                format!("warmup {} must be shorter than training {}", t.warmup_epochs, t.epochs),
            );
        }
        if !(t.base_lr > 0.0) {
            return cfg_err("train.base_lr", format!("must be positive, got {}", t.base_lr));
        }
        if t.weight_decay < 0.0 {
            return cfg_err("train.weight_decay", "must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&t.lambda_start)
            || !(0.0..=1.0).contains(&t.lambda_end)
            || t.lambda_start > t.lambda_end
        {
            return cfg_err(
                "train.lambda_start",
                format!(
                    "need 0 <= lambda_start <= lambda_end <= 1, got ({}, {})",
                    t.lambda_start, t.lambda_end
                ),
            );
        }
        if !(0.0..=1.0).contains(&t.center_momentum) {
            return cfg_err(
                "train.center_momentum",
                format!("must be in [0,1], got {}", t.center_momentum),
            );
        }
        if t.checkpoint_every_epochs == 0 {
            return cfg_err("train.checkpoint_every_epochs", "must be at least 1".into());
        }

        let e = &self.eval;
        if e.probe_epochs == 0 {
            return cfg_err("eval.probe_epochs", "must be at least 1".into());
        }
        if e.probe_batch == 0 {
            return cfg_err("eval.probe_batch", "must be positive".into());
        }
        if !(e.probe_lr > 0.0) {
            return cfg_err("eval.probe_lr", format!("must be positive, got {}", e.probe_lr));
        }
        if e.repeats < 2 {
            return cfg_err("eval.repeats", "need at least 2 repeats for a CI".into());
        }
        if !(0.0..0.5).contains(&e.kfold_val_fraction) {
            return cfg_err(
                "eval.kfold_val_fraction",
                format!("must be in [0, 0.5), got {}", e.kfold_val_fraction),
            );
        }

        for (i, &a) in self.ablate.alpha_grid.iter().enumerate() {
            if !(0.0..=1.0).contains(&a) {
                return cfg_err(
                    "ablate.alpha_grid",
                    format!("entry {i} must be in [0,1], got {a}"),
                );
            }
        }
        if self.ablate.alpha_grid.is_empty()
            && self.ablate.k_grid.is_empty()
            && self.ablate.n_tau_grid.is_empty()
        {
            return cfg_err("ablate", "all grids are empty".into());
        }
        Ok(())
    }

    /// Grid dimensions implied by the configured clip duration.
    pub fn grid(&self) -> (usize, usize) {
        frontend::grid_for_duration(self.frontend.clip_duration_s)
    }

    pub fn dims(&self) -> ModelDims {
        let (nf, nt) = self.grid();
        self.model.dims(nf * nt)
    }

    /// Output directory with the optional run-root env var applied.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(RUN_ROOT_ENV) {
            Some(root) if self.output_dir.is_relative() => {
                PathBuf::from(root).join(&self.output_dir)
            }
            _ => self.output_dir.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Write the resolved config into a run directory.
    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.toml");
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}

fn merge_toml(base: &mut toml::Value, patch: toml::Value) {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parse a `key.path=value` override into a nested TOML table.
fn override_to_table(spec: &str) -> Result<toml::Value> {
    let (key, value) = spec.split_once('=').ok_or_else(|| {
        Error::config(spec, "override must have the form key.path=value".to_string())
    })?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(|seg| seg.is_empty()) {
        return Err(Error::config(spec, "empty key path".to_string()));
    }
    let doc = format!("{key} = {value}");
    // Bare strings (e.g. output_dir=foo) get a second chance quoted.
    let parsed: toml::Value = doc.parse().or_else(|_| {
        format!("{key} = {value:?}")
            .parse()
            .map_err(|e| Error::config(key, format!("unparseable value `{value}`: {e}")))
    })?;
    Ok(parsed)
}

/// Parse and validate a config from TOML text (checkpoint metadata).
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let doc: toml::Value = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("config", e.to_string()))?;
    let config: RunConfig = doc
        .try_into()
        .map_err(|e| Error::config("config", e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Resolve a config from an optional file plus `key=value` overrides,
/// then validate. Flags win over the file, the file over defaults.
pub fn parse_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut doc: toml::Value = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse::<toml::Value>()
                .map_err(|e| Error::config(p.display().to_string(), e.to_string()))?
        }
        None => toml::Value::Table(toml::map::Map::new()),
    };
    for spec in overrides {
        merge_toml(&mut doc, override_to_table(spec)?);
    }
    let config: RunConfig = doc
        .try_into()
        .map_err(|e| Error::config("config", e.to_string()))?;
    config.validate()?;
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_published_defaults() {
        let c = parse_config(None, &[]).unwrap();
        assert_eq!(c.train.mask_ratio, 0.7);
        assert_eq!(c.train.alpha, 0.5);
        assert_eq!(c.model.k, 2048);
        assert_eq!(c.train.tau_s, 0.1);
        assert_eq!(c.train.n_tau_epochs, 10);
        assert_eq!(c.train.epochs, 300);
        assert_eq!(c.train.batch_size, 2048);
        assert_eq!(c.train.warmup_epochs, 20);
        assert_eq!(c.frontend.clip_duration_s, 6.0);
        assert_eq!(c.model.head_bottleneck, 256);
        assert_eq!(c.model.head_hidden, 2048);
        assert_eq!(c.ablate.alpha_grid, vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(c.ablate.k_grid, vec![1024, 2048, 4096, 8192]);
        assert_eq!(c.ablate.n_tau_grid, vec![10, 20]);
    }

    #[test]
    fn out_of_range_alpha_names_key() {
        let err = parse_config(None, &["train.alpha=1.5".into()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train.alpha"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nmask_ration = 0.7\n").unwrap();
        let err = parse_config(Some(&p), &[]).unwrap_err();
        assert!(err.to_string().contains("mask_ration"), "{err}");
    }

    #[test]
    fn flag_overrides_file_value() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "seed = 7\n[train]\nalpha = 0.25\n").unwrap();
        let c = parse_config(Some(&p), &["train.alpha=0.75".into()]).unwrap();
        assert_eq!(c.train.alpha, 0.75);
        assert_eq!(c.seed, 7);

        // String override without quotes.
        let c = parse_config(Some(&p), &["output_dir=my/run".into()]).unwrap();
        assert_eq!(c.output_dir, PathBuf::from("my/run"));
    }

    #[test]
    fn echo_roundtrip_is_identical() {
        let c = parse_config(None, &["seed=9".into(), "train.epochs=50".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        c.write_echo(dir.path()).unwrap();
        let echoed = parse_config(Some(&dir.path().join("config.toml")), &[]).unwrap();
        assert_eq!(echoed, c);
    }

    #[test]
    fn validation_catches_ranges() {
        assert!(parse_config(None, &["train.mask_ratio=1.0".into()]).is_err());
        assert!(parse_config(None, &["train.tau_s=0".into()]).is_err());
        assert!(parse_config(None, &["frontend.clip_duration_s=0.05".into()]).is_err());
        assert!(parse_config(None, &["train.warmup_epochs=400".into()]).is_err());
        assert!(parse_config(None, &["eval.repeats=1".into()]).is_err());
        assert!(parse_config(None, &["model.n_heads=7".into()]).is_err());
        // Valid edge: alpha endpoints are allowed.
        assert!(parse_config(None, &["train.alpha=1.0".into()]).is_ok());
        assert!(parse_config(None, &["train.alpha=0.0".into()]).is_ok());
    }

    #[test]
    fn run_root_env_applies_to_relative_dirs() {
        let c = parse_config(None, &["output_dir=rel/x".into()]).unwrap();
        std::env::set_var(RUN_ROOT_ENV, "/tmp/rootdir");
        assert_eq!(c.resolved_output_dir(), PathBuf::from("/tmp/rootdir/rel/x"));
        std::env::remove_var(RUN_ROOT_ENV);
        assert_eq!(c.resolved_output_dir(), PathBuf::from("rel/x"));
    }
}
