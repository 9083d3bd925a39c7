//! Run configuration: built-in defaults, then an optional `key = value`
//! file, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Flrml,
    Mflrml,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub rank: usize,
    pub svd_cap: usize,
    pub margin_ratio: f64,
    pub triplets_per_sample: usize,
    pub batch_triplets: usize,
    pub num_batches: usize,
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
    pub k: usize,
    pub normalize: bool,
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub triplets: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub model_out: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub trace_out: Option<PathBuf>,
    pub report_out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: Mode::Flrml,
            rank: 100,
            svd_cap: 3000,
            margin_ratio: 1.0,
            triplets_per_sample: 5,
            batch_triplets: 80,
            num_batches: 20,
            max_iters: 50,
            tol: 1e-5,
            seed: 0,
            k: 5,
            normalize: true,
            train: None,
            test: None,
            input: None,
            triplets: None,
            model: None,
            model_out: None,
            out: None,
            trace_out: None,
            report_out: None,
        }
    }
}

/// Options shared by every subcommand. Unset flags fall back to the config
/// file, then to the defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// `key = value` file; keys are the long flag names without dashes.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Target rank d of the metric.
    #[arg(long)]
    pub rank: Option<usize>,
    /// Upper bound on the SVD rank r.
    #[arg(long)]
    pub svd_cap: Option<usize>,
    /// Margin as a multiple of the initial mean squared embedding norm.
    #[arg(long)]
    pub margin_ratio: Option<f64>,
    #[arg(long)]
    pub triplets_per_sample: Option<usize>,
    /// Triplets drawn per mini-batch.
    #[arg(long)]
    pub batch_triplets: Option<usize>,
    #[arg(long)]
    pub num_batches: Option<usize>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Relative objective change that ends the optimization.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Neighbors used by the k-NN classifier.
    #[arg(long)]
    pub k: Option<usize>,
    /// Skip unit-length normalization of the input columns.
    #[arg(long)]
    pub no_normalize: bool,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub triplets: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub trace_out: Option<PathBuf>,
    #[arg(long)]
    pub report_out: Option<PathBuf>,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("invalid value {value:?} for {key}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("invalid value {value:?} for {key}")),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let path = || Some(PathBuf::from(value));
        match key.replace('_', "-").as_str() {
            "mode" => {
                self.mode = Mode::from_str(value, true).map_err(|_| format!("unknown mode {value:?}"))?
            }
            "rank" => self.rank = parse(key, value)?,
            "svd-cap" => self.svd_cap = parse(key, value)?,
            "margin-ratio" => self.margin_ratio = parse(key, value)?,
            "triplets-per-sample" => self.triplets_per_sample = parse(key, value)?,
            "batch-triplets" => self.batch_triplets = parse(key, value)?,
            "num-batches" => self.num_batches = parse(key, value)?,
            "max-iters" => self.max_iters = parse(key, value)?,
            "tol" => self.tol = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "normalize" => self.normalize = parse_bool(key, value)?,
            "train" => self.train = path(),
            "test" => self.test = path(),
            "input" => self.input = path(),
            "triplets" => self.triplets = path(),
            "model" => self.model = path(),
            "model-out" => self.model_out = path(),
            "out" => self.out = path(),
            "trace-out" => self.trace_out = path(),
            "report-out" => self.report_out = path(),
            _ => return Err(format!("unknown configuration key {key:?}")),
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), String> {
        let text = fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| format!("{}:{}: expected key = value", path.display(), n + 1))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| format!("{}:{}: {e}", path.display(), n + 1))?;
        }
        Ok(())
    }

    pub fn resolve(args: &RunArgs) -> Result<RunConfig, String> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &args.config {
            cfg.apply_file(path)?;
        }
        macro_rules! take {
            ($($field:ident),*) => {
                $(if let Some(v) = &args.$field {
                    cfg.$field = v.clone();
                })*
            };
        }
        take!(mode, rank, svd_cap, margin_ratio, triplets_per_sample, batch_triplets, num_batches,
              max_iters, tol, seed, k);
        if args.no_normalize {
            cfg.normalize = false;
        }
        macro_rules! take_path {
            ($($field:ident),*) => {
                $(if args.$field.is_some() {
                    cfg.$field = args.$field.clone();
                })*
            };
        }
        take_path!(train, test, input, triplets, model, model_out, out, trace_out, report_out);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("rank", self.rank),
            ("svd-cap", self.svd_cap),
            ("triplets-per-sample", self.triplets_per_sample),
            ("max-iters", self.max_iters),
            ("k", self.k),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(format!("{name} must be at least 1"));
            }
        }
        if !(self.margin_ratio > 0.0 && self.margin_ratio.is_finite()) {
            return Err("margin-ratio must be positive".into());
        }
        if !(self.tol >= 0.0 && self.tol.is_finite()) {
            return Err("tol must be nonnegative".into());
        }
        if self.mode == Mode::Mflrml && (self.batch_triplets == 0 || self.num_batches == 0) {
            return Err("batch-triplets and num-batches must be at least 1".into());
        }
        Ok(())
    }

    /// Settings that determine the learned model, without any file paths.
    pub fn hyperparameters(&self) -> serde_json::Value {
        let mut value = serde_json::json!({
            "mode": self.mode,
            "rank": self.rank,
            "margin_ratio": self.margin_ratio,
            "triplets_per_sample": self.triplets_per_sample,
            "seed": self.seed,
            "normalize": self.normalize,
        });
        let extra = match self.mode {
            Mode::Flrml => serde_json::json!({
                "svd_cap": self.svd_cap,
                "max_iters": self.max_iters,
                "tol": self.tol,
            }),
            Mode::Mflrml => serde_json::json!({
                "batch_triplets": self.batch_triplets,
                "num_batches": self.num_batches,
            }),
        };
        value
            .as_object_mut()
            .unwrap()
            .extend(extra.as_object().unwrap().clone());
        value
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_protocol() {
        let cfg = RunConfig::default();
        assert_eq!((cfg.rank, cfg.triplets_per_sample, cfg.svd_cap), (100, 5, 3000));
        assert_eq!(cfg.margin_ratio, 1.0);
        assert_eq!((cfg.batch_triplets, cfg.num_batches), (80, 20));
        assert_eq!(cfg.k, 5);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.conf");
        fs::write(&path, "# comment\nrank = 12\nmode = mflrml\nseed=4\nmargin_ratio = 0.5\n").unwrap();
        let args = RunArgs {
            config: Some(path),
            rank: Some(7),
            ..RunArgs::default()
        };
        let cfg = RunConfig::resolve(&args).unwrap();
        assert_eq!(cfg.rank, 7);
        assert_eq!(cfg.mode, Mode::Mflrml);
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.margin_ratio, 0.5);
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("rank", "many").is_err());
        assert!(cfg.set("colour", "red").is_err());
        let args = RunArgs {
            margin_ratio: Some(0.0),
            ..RunArgs::default()
        };
        assert!(RunConfig::resolve(&args).is_err());
    }
}
