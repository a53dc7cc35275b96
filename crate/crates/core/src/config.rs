//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment line, keys are dotted
//! (`train.beta`, `data.n_items`, `paths.out_dir`, `eval.ks`). Every key is
//! optional; missing keys take their defaults. A single `seed` drives the
//! data, init and shuffle streams.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::eval::DEFAULT_KS;
use crate::formats::{self, fmt_f64};
use crate::objective::MiningCriterion;
use crate::trainer::TrainConfig;

/// Name of the resolved-config echo written beside reports.
pub const ECHO_FILE: &str = "config.resolved";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub train: TrainConfig,
    pub data: SynthConfig,
    /// Dataset directory; when absent the synthetic generator is used.
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub ks: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train: TrainConfig::default(),
            data: SynthConfig::default(),
            data_dir: None,
            out_dir: None,
            ks: DEFAULT_KS.to_vec(),
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "train.alpha",
    "train.beta",
    "train.lambda_start_epoch",
    "train.lambda_start_value",
    "train.lambda_end_epoch",
    "train.lambda_end_value",
    "train.warmup_epochs",
    "train.epochs",
    "train.batch_size",
    "train.learning_rate",
    "train.mining_criterion",
    "train.hidden_dim",
    "train.joint_dim",
    "train.experts.dse_text",
    "train.experts.dse_video",
    "train.experts.sse_text",
    "train.experts.sse_video",
    "data.n_items",
    "data.n_concepts",
    "data.latent_dim",
    "data.video_dim",
    "data.text_dim",
    "data.frames_per_video",
    "data.noise_video",
    "data.noise_text",
    "data.sse_text_noise",
    "data.duplicate_rate",
    "data.val_fraction",
    "paths.data_dir",
    "paths.out_dir",
    "eval.ks",
];

fn typed<T: FromStr>(key: &str, line: usize, raw: &str, what: &str) -> Result<T> {
    raw.parse().map_err(|_| Error::Type {
        key: key.to_string(),
        line,
        msg: format!("expected {what}, got `{raw}`"),
    })
}

fn real(key: &str, line: usize, raw: &str, min: Option<f64>) -> Result<f64> {
    let v: f64 = typed(key, line, raw, "a real number")?;
    if !v.is_finite() {
        return Err(Error::Type {
            key: key.into(),
            line,
            msg: "must be finite".into(),
        });
    }
    if let Some(lo) = min {
        if v < lo {
            return Err(Error::Type {
                key: key.into(),
                line,
                msg: if lo == 0.0 {
                    format!("must be non-negative, got {v}")
                } else {
                    format!("must be >= {lo}, got {v}")
                },
            });
        }
    }
    Ok(v)
}

fn count(key: &str, line: usize, raw: &str) -> Result<usize> {
    typed(key, line, raw, "a non-negative integer")
}

fn positive(key: &str, line: usize, raw: &str) -> Result<usize> {
    let v = count(key, line, raw)?;
    if v == 0 {
        return Err(Error::Type {
            key: key.into(),
            line,
            msg: "must be positive".into(),
        });
    }
    Ok(v)
}

fn path(key: &str, line: usize, raw: &str) -> Result<PathBuf> {
    let raw = raw.trim_matches('"');
    if raw.is_empty() || raw.contains('\0') {
        return Err(Error::Type {
            key: key.into(),
            line,
            msg: "expected a path".into(),
        });
    }
    Ok(PathBuf::from(raw))
}

fn ks(key: &str, line: usize, raw: &str) -> Result<Vec<usize>> {
    let mut out = raw
        .split(',')
        .map(|t| positive(key, line, t.trim()))
        .collect::<Result<Vec<_>>>()?;
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

impl RunConfig {
    /// Applies one assignment. `line` is reported in errors.
    pub fn set(&mut self, key: &str, raw: &str, line: usize) -> Result<()> {
        let t = &mut self.train;
        let d = &mut self.data;
        let raw = raw.trim();
        match key {
            "seed" => self.seed = typed(key, line, raw, "an unsigned integer")?,
            "train.alpha" => t.alpha = real(key, line, raw, None)?,
            "train.beta" => t.beta = real(key, line, raw, Some(0.0))?,
            "train.lambda_start_epoch" => t.lambda_start_epoch = positive(key, line, raw)?,
            "train.lambda_start_value" => t.lambda_start_value = real(key, line, raw, Some(0.0))?,
            "train.lambda_end_epoch" => t.lambda_end_epoch = positive(key, line, raw)?,
            "train.lambda_end_value" => t.lambda_end_value = real(key, line, raw, Some(0.0))?,
            "train.warmup_epochs" => t.warmup_epochs = count(key, line, raw)?,
            "train.epochs" => t.epochs = count(key, line, raw)?,
            "train.batch_size" => t.batch_size = positive(key, line, raw)?,
            "train.learning_rate" => t.learning_rate = real(key, line, raw, Some(0.0))?,
            "train.mining_criterion" => {
                t.mining_criterion = raw.parse::<MiningCriterion>().map_err(|_| Error::Type {
                    key: key.into(),
                    line,
                    msg: format!("expected `combined` or `hard_only`, got `{raw}`"),
                })?
            }
            "train.hidden_dim" => t.hidden_dim = count(key, line, raw)?,
            "train.joint_dim" => t.joint_dim = positive(key, line, raw)?,
            "train.experts.dse_text" => t.experts.dse_text = typed(key, line, raw, "true or false")?,
            "train.experts.dse_video" => t.experts.dse_video = typed(key, line, raw, "true or false")?,
            "train.experts.sse_text" => t.experts.sse_text = typed(key, line, raw, "true or false")?,
            "train.experts.sse_video" => t.experts.sse_video = typed(key, line, raw, "true or false")?,
            "data.n_items" => d.n_items = positive(key, line, raw)?,
            "data.n_concepts" => d.n_concepts = positive(key, line, raw)?,
            "data.latent_dim" => d.latent_dim = positive(key, line, raw)?,
            "data.video_dim" => d.video_dim = positive(key, line, raw)?,
            "data.text_dim" => d.text_dim = positive(key, line, raw)?,
            "data.frames_per_video" => d.frames_per_video = positive(key, line, raw)?,
            "data.noise_video" => d.noise_video = real(key, line, raw, Some(0.0))?,
            "data.noise_text" => d.noise_text = real(key, line, raw, Some(0.0))?,
            "data.sse_text_noise" => d.sse_text_noise = real(key, line, raw, Some(0.0))?,
            "data.duplicate_rate" => d.duplicate_rate = real(key, line, raw, Some(0.0))?,
            "data.val_fraction" => d.val_fraction = real(key, line, raw, Some(0.0))?,
            "paths.data_dir" => self.data_dir = Some(path(key, line, raw)?),
            "paths.out_dir" => self.out_dir = Some(path(key, line, raw)?),
            "eval.ks" => self.ks = ks(key, line, raw)?,
            _ => {
                return Err(Error::UnknownKey {
                    key: key.to_string(),
                    line,
                })
            }
        }
        Ok(())
    }

    /// Copies the shared seed into the sub-configs and checks cross-field
    /// constraints.
    pub fn resolve(mut self) -> Result<Self> {
        self.train.seed = self.seed;
        self.data.seed = self.seed;
        self.train.validate(None)?;
        if self.data_dir.is_none() {
            self.data.validate()?;
        }
        if self.ks.is_empty() {
            return Err(Error::Config("eval.ks must list at least one K".into()));
        }
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.train.seed = seed;
        self.data.seed = seed;
        self
    }

    /// The fully-resolved configuration in the input syntax.
    pub fn echo(&self) -> String {
        let d = &self.data;
        let mut out = String::from("# resolved configuration\n");
        let _ = writeln!(out, "seed = {}", self.seed);
        for (k, v) in self.train.canonical_lines() {
            let _ = writeln!(out, "{k} = {v}");
        }
        for (k, v) in [
            ("n_items", d.n_items.to_string()),
            ("n_concepts", d.n_concepts.to_string()),
            ("latent_dim", d.latent_dim.to_string()),
            ("video_dim", d.video_dim.to_string()),
            ("text_dim", d.text_dim.to_string()),
            ("frames_per_video", d.frames_per_video.to_string()),
            ("noise_video", fmt_f64(d.noise_video)),
            ("noise_text", fmt_f64(d.noise_text)),
            ("sse_text_noise", fmt_f64(d.sse_text_noise)),
            ("duplicate_rate", fmt_f64(d.duplicate_rate)),
            ("val_fraction", fmt_f64(d.val_fraction)),
        ] {
            let _ = writeln!(out, "data.{k} = {v}");
        }
        for (k, p) in [("data_dir", &self.data_dir), ("out_dir", &self.out_dir)] {
            match p {
                Some(p) => {
                    let _ = writeln!(out, "paths.{k} = {}", p.display());
                }
                None => {
                    let _ = writeln!(out, "# paths.{k} unset");
                }
            }
        }
        let ks: Vec<String> = self.ks.iter().map(usize::to_string).collect();
        let _ = writeln!(out, "eval.ks = {}", ks.join(","));
        out
    }

    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        formats::write_text(&dir.join(ECHO_FILE), &self.echo())
    }
}

/// Parses configuration text and resolves defaults.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    let mut seen = HashSet::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw_line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let Some((key, value)) = trimmed.split_once('=') else {
            return Err(Error::Type {
                key: trimmed.to_string(),
                line,
                msg: "expected `key = value`".into(),
            });
        };
        let key = key.trim();
        if !seen.insert(key.to_string()) && KEYS.contains(&key) {
            return Err(Error::Type {
                key: key.to_string(),
                line,
                msg: "key assigned twice".into(),
            });
        }
        cfg.set(key, value, line)?;
    }
    cfg.resolve()
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    parse_config_str(&formats::read_text(path)?)
}
