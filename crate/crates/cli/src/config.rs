use std::path::{Path, PathBuf};

use ecgmoe::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Top-level run configuration, read from TOML.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

/// Train/validation/test fractions of the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for Splits {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

/// Synthetic dataset description. Per-record generator parameters are drawn
/// uniformly from the `[lo, hi]` ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub records: usize,
    pub seed: u64,
    pub duration_s: f64,
    pub sample_rate_hz: f64,
    pub leads: usize,
    pub heart_rate_bpm: [f64; 2],
    pub hr_jitter_pct: [f64; 2],
    pub noise_std_mv: [f64; 2],
    pub splits: Splits,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            records: 200,
            seed: 7,
            duration_s: 8.0,
            sample_rate_hz: 250.0,
            leads: 1,
            heart_rate_bpm: [50.0, 150.0],
            hr_jitter_pct: [0.0, 0.1],
            noise_std_mv: [0.0, 0.05],
            splits: Splits::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Where `synth` writes records and where the other commands read them.
    pub data_dir: PathBuf,
    /// Where `train`, `eval` and `bench` write their artifacts.
    pub out_dir: PathBuf,
    /// Defaults to `<out_dir>/model.ckpt`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            checkpoint: None,
        }
    }
}

impl PathsConfig {
    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.out_dir.join("model.ckpt"))
    }
}

impl RunConfig {
    /// Reads and validates a config file. Errors carry the file, line and
    /// offending field where they can be located.
    pub fn load(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses config text; `origin` names the source in diagnostics.
    pub fn parse(text: &str, origin: &str) -> Result<RunConfig, CliError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let at = e
                .span()
                .map(|s| format!(":{}", line_of(text, s.start)))
                .unwrap_or_default();
            CliError::Config(format!("{origin}{at}: {}", e.message().trim_end()))
        })?;
        cfg.validate().map_err(|(field, message)| {
            let at = locate(text, &field).map(|l| format!(":{l}")).unwrap_or_default();
            CliError::Config(format!("{origin}{at}: `{field}`: {message}"))
        })?;
        Ok(cfg)
    }

    /// Checks every section; the error names the offending field.
    pub fn validate(&self) -> Result<(), (String, String)> {
        let core = |e: ecgmoe::Error| match e {
            ecgmoe::Error::Config { field, message } => (field, message),
            other => ("".to_string(), other.to_string()),
        };
        self.model.validate().map_err(core)?;
        self.train.validate().map_err(core)?;
        self.data.validate()?;
        if self.model.leads != self.data.leads {
            return Err((
                "data.leads".into(),
                format!("{} does not match model.leads = {}", self.data.leads, self.model.leads),
            ));
        }
        Ok(())
    }

    /// Applies `--seed`: both the dataset and the training seed follow it.
    pub fn override_seed(&mut self, seed: u64) {
        self.data.seed = seed;
        self.train.seed = seed;
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<(), (String, String)> {
        let fail = |field: &str, msg: String| Err((format!("data.{field}"), msg));
        if self.records < 3 {
            return fail("records", format!("{} must be >= 3", self.records));
        }
        for (name, [lo, hi]) in [
            ("heart_rate_bpm", self.heart_rate_bpm),
            ("hr_jitter_pct", self.hr_jitter_pct),
            ("noise_std_mv", self.noise_std_mv),
        ] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return fail(name, format!("[{lo}, {hi}] is not a valid range"));
            }
        }
        // The generator's own bounds on each end of the ranges.
        let probe = |hr: f64, jitter: f64, noise: f64| ecgmoe::signal::SyntheticConfig {
            seed: 0,
            heart_rate_bpm: hr,
            hr_jitter_pct: jitter,
            noise_std_mv: noise,
            leads: self.leads,
            duration_s: self.duration_s,
            sample_rate_hz: self.sample_rate_hz,
            morphology_class: 0,
        };
        for i in 0..2 {
            probe(self.heart_rate_bpm[i], self.hr_jitter_pct[i], self.noise_std_mv[i])
                .validate()
                .map_err(|e| match e {
                    ecgmoe::Error::Config { field, message } => {
                        (field.replacen("synthetic.", "data.", 1), message)
                    }
                    other => ("data".to_string(), other.to_string()),
                })?;
        }
        let s = self.splits;
        for (name, v) in [("train", s.train), ("val", s.val), ("test", s.test)] {
            if !(0.0..=1.0).contains(&v) {
                return fail(&format!("splits.{name}"), format!("{v} outside [0, 1]"));
            }
        }
        let sum = s.train + s.val + s.test;
        if (sum - 1.0).abs() > 1e-9 {
            return fail("splits", format!("fractions sum to {sum}, expected 1"));
        }
        if s.train == 0.0 {
            return fail("splits.train", "must be > 0".into());
        }
        Ok(())
    }
}

/// 1-based line of a byte offset.
fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Best-effort line of a dotted field such as `train.lambda` or
/// `model.extractors[2].output_dim`: the first `key =` line inside the
/// field's table, or the table header itself.
fn locate(text: &str, field: &str) -> Option<usize> {
    let mut parts = field.split('.');
    let section = parts.next()?;
    let key = parts.next().map(|k| k.split('[').next().unwrap_or(k));
    let mut in_section = false;
    let mut header = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') {
            let name = line.trim_matches(|c| c == '[' || c == ']').trim();
            in_section = name == section || name.starts_with(&format!("{section}."));
            if in_section && header.is_none() {
                header = Some(i + 1);
            }
            if let Some(k) = key {
                if in_section && name == format!("{section}.{k}") {
                    return Some(i + 1);
                }
            }
            continue;
        }
        if in_section {
            if let Some(k) = key {
                let lhs = line.split('=').next().unwrap_or("").trim();
                if line.contains('=') && lhs == k {
                    return Some(i + 1);
                }
            }
        }
    }
    header
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        let cfg = RunConfig::parse("", "x.toml").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn negative_lambda_points_at_line() {
        let text = "[data]\nrecords = 10\n\n[train]\nepochs = 2\nlambda = -0.1\n";
        let err = RunConfig::parse(text, "run.toml").unwrap_err().to_string();
        assert!(err.contains("run.toml:6"), "{err}");
        assert!(err.contains("train.lambda"), "{err}");
    }

    #[test]
    fn unknown_key_is_reported_with_line() {
        let err = RunConfig::parse("[train]\nlamda = 0.1\n", "run.toml").unwrap_err().to_string();
        assert!(err.contains("run.toml:2"), "{err}");
        assert!(err.contains("lamda"), "{err}");
    }

    #[test]
    fn unknown_task_is_rejected() {
        let err = RunConfig::parse("[train]\ntasks = [\"rr\", \"qt\"]\n", "run.toml").unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
        assert!(err.to_string().contains("qt"), "{err}");
    }

    #[test]
    fn splits_must_sum_to_one() {
        let text = "[data.splits]\ntrain = 0.7\nval = 0.2\ntest = 0.2\n";
        let err = RunConfig::parse(text, "run.toml").unwrap_err().to_string();
        assert!(err.contains("data.splits"), "{err}");
        assert!(err.contains("run.toml:1"), "{err}");
        let ok = "[data.splits]\ntrain = 0.6\nval = 0.3\ntest = 0.1\n";
        RunConfig::parse(ok, "run.toml").unwrap();
    }

    #[test]
    fn leads_must_agree() {
        let err = RunConfig::parse("[data]\nleads = 2\n", "run.toml").unwrap_err().to_string();
        assert!(err.contains("data.leads"), "{err}");
    }

    #[test]
    fn seed_override_covers_data_and_train() {
        let mut cfg = RunConfig::default();
        cfg.override_seed(42);
        assert_eq!((cfg.data.seed, cfg.train.seed), (42, 42));
    }
}
