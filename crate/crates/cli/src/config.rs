//! Experiment configuration: a flat INI file with `[model]`, `[channel]`,
//! `[train]` and `[data]` sections.
//!
//! Omitted keys keep their defaults; unknown sections or keys, duplicates
//! and malformed values are errors. [`ExperimentConfig::dump`] writes every
//! key in a fixed order, and parsing the dump gives back the same config.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use semcom::channel::ChannelConfig;
use semcom::data::{load_ppm_dir, synth_dataset, Dataset, Split};
use semcom::model::{ModelConfig, Ratio};
use semcom::training::{Regimen, TrainConfig};

#[derive(Debug, thiserror::Error)]
#[error("{origin}:{line}: {message}")]
pub struct ConfigError {
    pub origin: String,
    pub line: usize,
    pub message: String,
}

/// Where images come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    /// `synth:N:EXTENT:SEED`
    Synthetic { count: usize, extent: usize, seed: u64 },
    /// A directory of binary PPM files, center-cropped to `crop` pixels.
    PpmDir {
        dir: PathBuf,
        crop: usize,
        limit: Option<usize>,
    },
}

impl DataSource {
    /// Parses `synth:N:E:SEED` or `ppm:DIR:CROP[:LIMIT]`; anything else is
    /// taken as a PPM directory cropped to `default_crop`.
    pub fn parse(spec: &str, default_crop: usize) -> Result<Self, String> {
        let parts: Vec<&str> = spec.split(':').collect();
        let num = |s: &str, what: &str| {
            s.trim()
                .parse::<u64>()
                .map_err(|_| format!("bad {what} `{s}` in `{spec}`"))
        };
        match parts[0] {
            "synth" => {
                if parts.len() != 4 {
                    return Err(format!("expected synth:N:EXTENT:SEED, got `{spec}`"));
                }
                Ok(DataSource::Synthetic {
                    count: num(parts[1], "count")? as usize,
                    extent: num(parts[2], "extent")? as usize,
                    seed: num(parts[3], "seed")?,
                })
            }
            "ppm" if parts.len() == 3 || parts.len() == 4 => Ok(DataSource::PpmDir {
                dir: PathBuf::from(parts[1]),
                crop: num(parts[2], "crop")? as usize,
                limit: parts.get(3).map(|l| num(l, "limit")).transpose()?.map(|l| l as usize),
            }),
            "ppm" => Err(format!("expected ppm:DIR:CROP[:LIMIT], got `{spec}`")),
            _ if spec.is_empty() => Err("empty data source".into()),
            _ => Ok(DataSource::PpmDir {
                dir: PathBuf::from(spec),
                crop: default_crop,
                limit: None,
            }),
        }
    }

    pub fn load(&self, split: Split) -> semcom::Result<Dataset> {
        match self {
            DataSource::Synthetic { count, extent, seed } => synth_dataset(*count, *extent, *seed, split),
            DataSource::PpmDir { dir, crop, limit } => load_ppm_dir(dir, *crop, *limit, split),
        }
    }
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DataSource::Synthetic { count, extent, seed } => write!(f, "synth:{count}:{extent}:{seed}"),
            DataSource::PpmDir { dir, crop, limit: None } => write!(f, "ppm:{}:{crop}", dir.display()),
            DataSource::PpmDir {
                dir,
                crop,
                limit: Some(l),
            } => write!(f, "ppm:{}:{crop}:{l}", dir.display()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataConfig {
    pub train: DataSource,
    pub test: DataSource,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: DataSource::Synthetic {
                count: 64,
                extent: 32,
                seed: 1,
            },
            test: DataSource::Synthetic {
                count: 16,
                extent: 32,
                seed: 2,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub channel: ChannelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

fn list<T: FromStr>(value: &str) -> Result<Vec<T>, String> {
    value
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<T>()
                .map_err(|_| format!("bad list element `{}`", v.trim()))
        })
        .collect()
}

fn four(value: &str) -> Result<[usize; 4], String> {
    let v: Vec<usize> = list(value)?;
    v.try_into()
        .map_err(|v: Vec<usize>| format!("expected 4 values, got {}", v.len()))
}

fn scalar<T: FromStr>(value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("bad value `{value}`"))
}

fn boolean(value: &str) -> Result<bool, String> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(format!("expected true or false, got `{value}`")),
    }
}

fn join<T: ToString>(values: &[T]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        let mut section: Option<String> = None;
        let mut seen: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |message: String| ConfigError {
                origin: origin.to_string(),
                line: i + 1,
                message,
            };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !["model", "channel", "train", "data"].contains(&name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(format!("expected `key = value`, got `{line}`")));
            };
            let (key, value) = (key.trim(), value.trim());
            let Some(sec) = section.as_deref() else {
                return Err(err(format!("`{key}` appears before any section")));
            };
            if seen.iter().any(|(s, k)| s == sec && k == key) {
                return Err(err(format!("duplicate key `{key}` in [{sec}]")));
            }
            seen.push((sec.to_string(), key.to_string()));
            cfg.set(sec, key, value).map_err(err)?;
        }
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        let (m, c, t) = (&mut self.model, &mut self.channel, &mut self.train);
        match (section, key) {
            ("model", "patch_size") => m.patch_size = scalar(value)?,
            ("model", "stage_dims") => m.stage_dims = four(value)?,
            ("model", "encoder_depths") => m.encoder_depths = four(value)?,
            ("model", "hcd_depths") => m.hcd_depths = four(value)?,
            ("model", "lcd_depths") => m.lcd_depths = four(value)?,
            ("model", "heads") => m.heads = four(value)?,
            ("model", "window") => m.window = scalar(value)?,
            ("model", "shifted_windows") => m.shifted_windows = boolean(value)?,
            ("model", "compression_ratio") => {
                m.compression_ratio = value.parse::<Ratio>().map_err(|e| e.to_string())?;
            }
            ("model", "channel_coder_layers") => m.channel_coder_layers = scalar(value)?,
            ("model", "mlp_ratio") => m.mlp_ratio = scalar(value)?,
            ("channel", "snr_set_db") => c.snr_set_db = list(value)?,
            ("channel", "noise_seed") => c.noise_seed = scalar(value)?,
            ("channel", "eval_seed") => c.eval_seed = scalar(value)?,
            ("train", "epochs_per_decoder") => t.epochs_per_decoder = scalar(value)?,
            ("train", "learning_rate") => t.learning_rate = scalar(value)?,
            ("train", "batch_size") => t.batch_size = scalar(value)?,
            ("train", "alpha") => t.alpha = scalar(value)?,
            ("train", "regimen") => t.regimen = value.parse::<Regimen>().map_err(|e| e.to_string())?,
            ("train", "master_seed") => t.master_seed = scalar(value)?,
            ("train", "eval_every") => t.eval_every = scalar(value)?,
            ("data", "train") => self.data.train = DataSource::parse(value, 32)?,
            ("data", "test") => self.data.test = DataSource::parse(value, 32)?,
            _ => return Err(format!("unknown key `{key}` in [{section}]")),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let origin = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            origin: origin.clone(),
            line: 0,
            message: e.to_string(),
        })?;
        Self::parse(&text, &origin)
    }

    /// Checks every section's own invariants.
    pub fn validate(&self) -> semcom::Result<()> {
        self.model.validate()?;
        self.channel.validate()?;
        self.train.validate()
    }

    /// Canonical text form: every key, fixed order, LF line endings.
    pub fn dump(&self) -> String {
        let (m, c, t) = (&self.model, &self.channel, &self.train);
        let mut out = String::new();
        let _ = writeln!(out, "[model]");
        let _ = writeln!(out, "patch_size = {}", m.patch_size);
        let _ = writeln!(out, "stage_dims = {}", join(&m.stage_dims));
        let _ = writeln!(out, "encoder_depths = {}", join(&m.encoder_depths));
        let _ = writeln!(out, "hcd_depths = {}", join(&m.hcd_depths));
        let _ = writeln!(out, "lcd_depths = {}", join(&m.lcd_depths));
        let _ = writeln!(out, "heads = {}", join(&m.heads));
        let _ = writeln!(out, "window = {}", m.window);
        let _ = writeln!(out, "shifted_windows = {}", m.shifted_windows);
        let _ = writeln!(out, "compression_ratio = {}", m.compression_ratio);
        let _ = writeln!(out, "channel_coder_layers = {}", m.channel_coder_layers);
        let _ = writeln!(out, "mlp_ratio = {}", m.mlp_ratio);
        let _ = writeln!(out, "\n[channel]");
        let _ = writeln!(out, "snr_set_db = {}", join(&c.snr_set_db));
        let _ = writeln!(out, "noise_seed = {}", c.noise_seed);
        let _ = writeln!(out, "eval_seed = {}", c.eval_seed);
        let _ = writeln!(out, "\n[train]");
        let _ = writeln!(out, "epochs_per_decoder = {}", t.epochs_per_decoder);
        let _ = writeln!(out, "learning_rate = {:e}", t.learning_rate);
        let _ = writeln!(out, "batch_size = {}", t.batch_size);
        let _ = writeln!(out, "alpha = {}", t.alpha);
        let _ = writeln!(out, "regimen = {}", t.regimen);
        let _ = writeln!(out, "master_seed = {}", t.master_seed);
        let _ = writeln!(out, "eval_every = {}", t.eval_every);
        let _ = writeln!(out, "\n[data]");
        let _ = writeln!(out, "train = {}", self.data.train);
        let _ = writeln!(out, "test = {}", self.data.test);
        out
    }
}
