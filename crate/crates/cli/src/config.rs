//! Per-subcommand options. Every field is optional so a value can come
//! from a flag, from the config file, or from the built-in default, in
//! that order of precedence.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenDataOpts {
    /// Case file (`.m` or `.toml`; extension optional).
    #[arg(long)]
    pub case: Option<PathBuf>,
    #[arg(long)]
    pub train_count: Option<usize>,
    #[arg(long)]
    pub test_count: Option<usize>,
    /// Load scaling range as `lo:hi`.
    #[arg(long)]
    pub range: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOpts {
    #[arg(long)]
    pub case: Option<PathBuf>,
    /// Directory holding `train.csv`.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub w1: Option<f64>,
    #[arg(long)]
    pub w2: Option<f64>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hidden layer widths, comma separated.
    #[arg(long)]
    pub hidden: Option<String>,
    #[arg(long)]
    pub diverged_penalty: Option<f64>,
    /// Checkpoint path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-epoch metrics path; defaults to the checkpoint path with a
    /// `.metrics.csv` suffix.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOpts {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub case: Option<PathBuf>,
    /// Directory holding `test.csv`.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Re-solve infeasible predictions from a warm start.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub recover: Option<bool>,
    /// Report path; the CSV goes here, the table and full JSON next to it.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Predicted-versus-reference values per instance.
    #[arg(long)]
    pub dump_comparison: Option<PathBuf>,
    /// Skip the sequential timing passes.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub no_timing: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub workers: Option<usize>,
    #[serde(rename = "gen-data")]
    pub gen_data: Option<GenDataOpts>,
    pub train: Option<TrainOpts>,
    pub eval: Option<EvalOpts>,
}

/// Reads a TOML config, or the `config` table of a JSON run manifest.
pub fn read_config(path: &Path, subcommand: &str) -> Result<ConfigFile, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    if path.extension().and_then(|e| e.to_str()) == Some("json") {
        let manifest: crate::manifest::RunManifest =
            serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        if manifest.subcommand != subcommand {
            return Err(CliError::Usage(format!(
                "manifest {} records `{}`, not `{subcommand}`",
                path.display(),
                manifest.subcommand
            )));
        }
        let mut cfg = ConfigFile::default();
        let bad = |e: serde_json::Error| CliError::Usage(format!("{}: {e}", path.display()));
        match subcommand {
            "gen-data" => cfg.gen_data = Some(serde_json::from_value(manifest.config).map_err(bad)?),
            "train" => cfg.train = Some(serde_json::from_value(manifest.config).map_err(bad)?),
            "eval" => cfg.eval = Some(serde_json::from_value(manifest.config).map_err(bad)?),
            _ => {}
        }
        return Ok(cfg);
    }
    toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

macro_rules! merge_fields {
    ($flags:expr, $file:expr, $($f:ident),*) => {{
        let file = $file.unwrap_or_default();
        $( $flags.$f = $flags.$f.or(file.$f); )*
        $flags
    }};
}

impl GenDataOpts {
    pub fn merged(mut self, file: Option<GenDataOpts>) -> GenDataOpts {
        merge_fields!(self, file, case, train_count, test_count, range, seed, out_dir)
    }

    /// Fills defaults; the case is required.
    pub fn resolved(self) -> Result<GenDataOpts, CliError> {
        Ok(GenDataOpts {
            case: Some(self.case.ok_or_else(|| CliError::Usage("gen-data needs --case".into()))?),
            train_count: Some(self.train_count.unwrap_or(10_000)),
            test_count: Some(self.test_count.unwrap_or(1_000)),
            range: Some(self.range.unwrap_or_else(|| "0.9:1.1".into())),
            seed: Some(self.seed.unwrap_or(0)),
            out_dir: Some(self.out_dir.unwrap_or_else(|| PathBuf::from("data"))),
        })
    }
}

impl TrainOpts {
    pub fn merged(mut self, file: Option<TrainOpts>) -> TrainOpts {
        merge_fields!(
            self,
            file,
            case,
            data_dir,
            w1,
            w2,
            delta,
            epochs,
            batch,
            lr,
            seed,
            hidden,
            diverged_penalty,
            out,
            metrics
        )
    }

    pub fn resolved(
        self,
        default_hidden: impl FnOnce(&Path) -> Result<String, CliError>,
    ) -> Result<TrainOpts, CliError> {
        let d = deepsolve::trainer::TrainConfig::default();
        let case = self.case.ok_or_else(|| CliError::Usage("train needs --case".into()))?;
        let out = self.out.unwrap_or_else(|| PathBuf::from("model.ckpt"));
        let metrics = self.metrics.unwrap_or_else(|| with_suffix(&out, ".metrics.csv"));
        let hidden = match self.hidden {
            Some(h) => h,
            None => default_hidden(&case)?,
        };
        Ok(TrainOpts {
            data_dir: Some(self.data_dir.unwrap_or_else(|| PathBuf::from("data"))),
            w1: Some(self.w1.unwrap_or(d.w1)),
            w2: Some(self.w2.unwrap_or(d.w2)),
            delta: Some(self.delta.unwrap_or(d.delta)),
            epochs: Some(self.epochs.unwrap_or(d.epochs)),
            batch: Some(self.batch.unwrap_or(d.batch_size)),
            lr: Some(self.lr.unwrap_or(d.lr)),
            seed: Some(self.seed.unwrap_or(d.seed)),
            hidden: Some(hidden),
            diverged_penalty: Some(self.diverged_penalty.unwrap_or(d.diverged_pf_penalty)),
            case: Some(case),
            out: Some(out),
            metrics: Some(metrics),
        })
    }
}

impl EvalOpts {
    pub fn merged(mut self, file: Option<EvalOpts>) -> EvalOpts {
        merge_fields!(self, file, model, case, data_dir, recover, report, dump_comparison, no_timing)
    }

    pub fn resolved(self) -> Result<EvalOpts, CliError> {
        Ok(EvalOpts {
            model: Some(self.model.ok_or_else(|| CliError::Usage("eval needs --model".into()))?),
            case: Some(self.case.ok_or_else(|| CliError::Usage("eval needs --case".into()))?),
            data_dir: Some(self.data_dir.unwrap_or_else(|| PathBuf::from("data"))),
            recover: Some(self.recover.unwrap_or(false)),
            report: self.report,
            dump_comparison: self.dump_comparison,
            no_timing: Some(self.no_timing.unwrap_or(false)),
        })
    }
}

/// `path` with `suffix` appended to its file name.
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn parse_range(s: &str) -> Result<(f64, f64), CliError> {
    let bad = || CliError::Usage(format!("--range expects lo:hi with 0 < lo <= hi, got {s:?}"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    let lo: f64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: f64 = hi.trim().parse().map_err(|_| bad())?;
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(bad());
    }
    Ok((lo, hi))
}

pub fn parse_hidden(s: &str) -> Result<Vec<usize>, CliError> {
    let bad = || CliError::Usage(format!("--hidden expects positive widths like 64,32, got {s:?}"));
    let widths: Vec<usize> = s
        .split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| t.trim().parse::<usize>().map_err(|_| bad()))
        .collect::<Result<_, _>>()?;
    if widths.contains(&0) {
        return Err(bad());
    }
    Ok(widths)
}
