//! Run configuration. Values resolve in order: built-in defaults, the TOML
//! file given with `--config`, `LATENTGUARD_<SECTION>_<KEY>` environment
//! variables, then command-line flags.

use std::path::{Path, PathBuf};

use latentguard_core::guard::{FailurePolicy, GuardConfig, ViolationAction};
use latentguard_core::probes::ProbeKind;
use latentguard_core::store::{SignalKind, SyntheticSpec};
use latentguard_core::training::{AdamWConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

pub const ENV_PREFIX: &str = "LATENTGUARD_";
pub const CONFIG_ECHO: &str = "config.resolved.toml";
pub const DEFAULT_MAX_INLINE_BYTES: usize = 64 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub probe: ProbeSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub guard: GuardSection,
    pub pipeline: PipelineSection,
    pub bench: BenchSection,
    pub serve: ServeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub kind: ProbeKind,
    /// Checkpoint to load for eval, score, pipeline, bench and serve.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub archive: PathBuf,
    pub clips: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    pub signal: SignalKind,
    pub amplitude: f64,
    pub noise_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuardSection {
    pub threshold: f64,
    pub action: ViolationAction,
    pub on_error: FailurePolicy,
    pub review_queue: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSection {
    pub requests: usize,
    pub decode_ms: f64,
    /// Sleep for the simulated decode cost instead of only accounting it.
    pub decode_sleep: bool,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub runs: usize,
    pub warmup: usize,
    pub batch: usize,
    pub frames: usize,
    pub sequential: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeSection {
    pub bind: String,
    pub max_inline_bytes: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            probe: ProbeSection::default(),
            data: DataSection::default(),
            train: TrainSection::default(),
            guard: GuardSection::default(),
            pipeline: PipelineSection::default(),
            bench: BenchSection::default(),
            serve: ServeSection::default(),
        }
    }
}

impl Default for ProbeSection {
    fn default() -> Self {
        Self {
            kind: ProbeKind::CnnTransformer,
            checkpoint: None,
        }
    }
}

impl Default for DataSection {
    fn default() -> Self {
        let s = SyntheticSpec::default();
        Self {
            archive: PathBuf::from("latents"),
            clips: s.total(),
            frames: s.frames,
            height: s.height,
            width: s.width,
            fps: s.fps,
            signal: s.signal,
            amplitude: s.amplitude,
            noise_std: s.noise_std,
            seed: s.seed,
        }
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            epochs: t.epochs,
            batch_size: t.batch_size,
            eval_batch_size: t.eval_batch_size,
            lr: t.optimizer.lr,
            weight_decay: t.optimizer.weight_decay,
            seed: t.seed,
            out_dir: PathBuf::from("runs/train"),
        }
    }
}

impl Default for GuardSection {
    fn default() -> Self {
        let g = GuardConfig::default();
        Self {
            threshold: g.threshold,
            action: g.action,
            on_error: g.on_error,
            review_queue: None,
        }
    }
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            requests: 20,
            decode_ms: 1000.0,
            decode_sleep: false,
            out_dir: PathBuf::from("runs/pipeline"),
        }
    }
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            runs: 100,
            warmup: 10,
            batch: 1,
            frames: 13,
            sequential: false,
        }
    }
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:7878".into(),
            max_inline_bytes: DEFAULT_MAX_INLINE_BYTES,
        }
    }
}

impl RunConfig {
    /// Resolves the configuration from an optional file, the process
    /// environment and `section.key=value` flag overrides.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, CliError> {
        let env: Vec<(String, String)> = std::env::vars().collect();
        Self::resolve_with_env(file, &env, overrides)
    }

    pub fn resolve_with_env(
        file: Option<&Path>,
        env: &[(String, String)],
        overrides: &[(String, String)],
    ) -> Result<Self, CliError> {
        let mut table = toml::Table::try_from(RunConfig::default()).map_err(|e| CliError::internal(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
            let from_file: toml::Table =
                toml::from_str(&text).map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))?;
            merge(&mut table, from_file);
        }
        for (key, value) in env {
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let path = env_key_to_path(&table, rest).ok_or_else(|| CliError::usage(format!("unknown config variable {key}")))?;
            set_path(&mut table, &path, value)?;
        }
        for (key, value) in overrides {
            set_path(&mut table, key, value)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| CliError::usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.synthetic_spec().validate()?;
        self.train_config().validate()?;
        self.guard_config().validate()?;
        if self.bench.runs == 0 || self.bench.batch == 0 {
            return Err(CliError::usage("bench runs and batch must be positive"));
        }
        if self.serve.max_inline_bytes == 0 {
            return Err(CliError::usage("serve.max_inline_bytes must be positive"));
        }
        Ok(())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let d = &self.data;
        SyntheticSpec {
            frames: d.frames,
            height: d.height,
            width: d.width,
            fps: d.fps,
            signal: d.signal,
            amplitude: d.amplitude,
            noise_std: d.noise_std,
            seed: d.seed,
            ..SyntheticSpec::with_total(d.clips)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            eval_batch_size: t.eval_batch_size,
            optimizer: AdamWConfig {
                lr: t.lr,
                weight_decay: t.weight_decay,
                ..AdamWConfig::default()
            },
            seed: t.seed,
            ..TrainConfig::default()
        }
    }

    pub fn guard_config(&self) -> GuardConfig {
        GuardConfig {
            threshold: self.guard.threshold,
            action: self.guard.action,
            on_error: self.guard.on_error,
            review_queue: self.guard.review_queue.clone(),
            checkpoint: self.probe.checkpoint.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).unwrap_or_default()
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo_to(&self, dir: &Path) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
        let path = dir.join(CONFIG_ECHO);
        std::fs::write(&path, self.to_toml()).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Maps `TRAIN_BATCH_SIZE` to `train.batch_size` by matching the section
/// name first, since keys themselves contain underscores.
fn env_key_to_path(table: &toml::Table, rest: &str) -> Option<String> {
    let lower = rest.to_ascii_lowercase();
    table.keys().find_map(|section| {
        let key = lower.strip_prefix(section.as_str())?.strip_prefix('_')?;
        Some(format!("{section}.{key}"))
    })
}

/// Sets `section.key` from a string, keeping the type of the default value
/// where there is one.
pub fn set_path(table: &mut toml::Table, path: &str, raw: &str) -> Result<(), CliError> {
    let (section, key) = path
        .split_once('.')
        .ok_or_else(|| CliError::usage(format!("config key {path:?} must look like section.key")))?;
    let sec = table
        .get_mut(section)
        .and_then(|v| v.as_table_mut())
        .ok_or_else(|| CliError::usage(format!("unknown config section {section:?}")))?;
    let value = match sec.get(key) {
        Some(toml::Value::Integer(_)) => raw
            .parse::<i64>()
            .map(toml::Value::Integer)
            .map_err(|_| CliError::usage(format!("{path} expects an integer, got {raw:?}")))?,
        Some(toml::Value::Float(_)) => raw
            .parse::<f64>()
            .map(toml::Value::Float)
            .map_err(|_| CliError::usage(format!("{path} expects a number, got {raw:?}")))?,
        Some(toml::Value::Boolean(_)) => raw
            .parse::<bool>()
            .map(toml::Value::Boolean)
            .map_err(|_| CliError::usage(format!("{path} expects true or false, got {raw:?}")))?,
        Some(toml::Value::String(_)) => toml::Value::String(raw.to_string()),
        // Optional keys have no default entry and are always strings (paths).
        None if is_optional_key(section, key) => toml::Value::String(raw.to_string()),
        _ => return Err(CliError::usage(format!("unknown config key {path:?}"))),
    };
    sec.insert(key.to_string(), value);
    Ok(())
}

fn is_optional_key(section: &str, key: &str) -> bool {
    matches!((section, key), ("probe", "checkpoint") | ("guard", "review_queue"))
}

/// Parses `KEY=VALUE` for `--set`.
pub fn parse_override(s: &str) -> Result<(String, String), String> {
    s.split_once('=')
        .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        .ok_or_else(|| format!("expected section.key=value, got {s:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(k: &str, v: &str) -> (String, String) {
        (k.to_string(), v.to_string())
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = RunConfig::default();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.train.lr, 5e-3);
        assert_eq!(c.serve.max_inline_bytes, 64 << 20);
    }

    #[test]
    fn precedence_is_file_then_env_then_flags() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        std::fs::write(&file, "[train]\nepochs = 7\nbatch_size = 4\nlr = 0.001\n").unwrap();
        let env = [kv("LATENTGUARD_TRAIN_BATCH_SIZE", "6"), kv("LATENTGUARD_GUARD_THRESHOLD", "0.25"), kv("HOME", "/x")];
        let c = RunConfig::resolve_with_env(Some(&file), &env, &[kv("train.batch_size", "2")]).unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.train.batch_size, 2);
        assert_eq!(c.guard.threshold, 0.25);
    }

    #[test]
    fn optional_paths_and_enums_from_strings() {
        let c = RunConfig::resolve_with_env(
            None,
            &[],
            &[
                kv("probe.checkpoint", "ck.lspc"),
                kv("probe.kind", "vanilla_3dcnn"),
                kv("guard.action", "flag_for_review"),
            ],
        )
        .unwrap();
        assert_eq!(c.probe.checkpoint, Some(PathBuf::from("ck.lspc")));
        assert_eq!(c.probe.kind, ProbeKind::Vanilla3dcnn);
        assert_eq!(c.guard.action, ViolationAction::FlagForReview);
    }

    #[test]
    fn bad_values_are_usage_errors() {
        for (k, v) in [("train.epochs", "ten"), ("nope.key", "1"), ("train.nope", "1"), ("guard.threshold", "1.5"), ("data.amplitude", "-1")] {
            let e = RunConfig::resolve_with_env(None, &[], &[kv(k, v)]).unwrap_err();
            assert_eq!(e.code, crate::error::EXIT_USAGE, "{k}={v}: {e}");
        }
        let e = RunConfig::resolve_with_env(None, &[kv("LATENTGUARD_BOGUS", "1")], &[]).unwrap_err();
        assert_eq!(e.code, crate::error::EXIT_USAGE);
    }

    #[test]
    fn echo_reproduces_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let c = RunConfig::resolve_with_env(None, &[], &[kv("train.epochs", "3")]).unwrap();
        let path = c.echo_to(dir.path()).unwrap();
        let again = RunConfig::resolve_with_env(Some(&path), &[], &[]).unwrap();
        assert_eq!(again, c);
    }
}
