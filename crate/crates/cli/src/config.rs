//! Run configuration: flat `key = value` text with command-line overrides.
//!
//! ```text
//! # comments and blank lines are ignored
//! w_bits = 1
//! a_bits = 2
//! g_bits = 4
//! quantize_first = false
//! quantize_last = false
//! model = conv:16:3,pool:2,conv:32:3,pool:2,conv:32:3,fc
//! lr = 0.001
//! epochs = 10
//! batch_size = 32
//! seed = 0
//! data = synthetic:classes=10,train=2000,test=1000,size=12,channels=1,noise=0.4,seed=0
//! resize = none
//! fused_backward = false
//! out = runs/default
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use lobit_core::engine::{ModelSpec, QConfig};

use crate::dataset::DatasetSpec;
use crate::error::{CliError, Result};

/// Every recognized key, in serialization order.
pub const KEYS: [&str; 14] = [
    "w_bits",
    "a_bits",
    "g_bits",
    "quantize_first",
    "quantize_last",
    "model",
    "lr",
    "epochs",
    "batch_size",
    "seed",
    "data",
    "resize",
    "fused_backward",
    "out",
];

pub const DEFAULT_MODEL: &str = "conv:16:3,pool:2,conv:32:3,pool:2,conv:32:3,fc";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub w_bits: u32,
    pub a_bits: u32,
    pub g_bits: u32,
    pub quantize_first: bool,
    pub quantize_last: bool,
    pub model: ModelSpec,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub data: DatasetSpec,
    /// Square side length images are resampled to on load.
    pub resize: Option<usize>,
    pub fused_backward: bool,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            w_bits: 32,
            a_bits: 32,
            g_bits: 32,
            quantize_first: false,
            quantize_last: false,
            model: DEFAULT_MODEL.parse().expect("default model"),
            lr: 0.001,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            data: DatasetSpec::default(),
            resize: None,
            fused_backward: false,
            out: PathBuf::from("runs/default"),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Config(format!("{key}: expected true/false, got '{v}'"))),
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| CliError::Config(format!("{key}: cannot parse '{v}'")))
}

/// Splits config text into `(key, value)` pairs.
pub fn parse_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "w_bits" => self.w_bits = parse_num(key, value)?,
            "a_bits" => self.a_bits = parse_num(key, value)?,
            "g_bits" => self.g_bits = parse_num(key, value)?,
            "quantize_first" => self.quantize_first = parse_bool(key, value)?,
            "quantize_last" => self.quantize_last = parse_bool(key, value)?,
            "model" => {
                self.model = value
                    .parse()
                    .map_err(|e| CliError::Config(format!("model: {e}")))?
            }
            "lr" => self.lr = parse_num(key, value)?,
            "epochs" => self.epochs = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "seed" => self.seed = parse_num(key, value)?,
            "data" => self.data = value.parse()?,
            "resize" => {
                self.resize = match value {
                    "none" | "" => None,
                    v => Some(parse_num(key, v)?),
                }
            }
            "fused_backward" => self.fused_backward = parse_bool(key, value)?,
            "out" => self.out = PathBuf::from(value),
            _ => return Err(CliError::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Defaults, then the config file (if any), then `overrides` in order.
    /// The result is validated.
    pub fn from_sources(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| CliError::io(path.display(), e))?;
            for (k, v) in parse_text(&text)? {
                cfg.set(&k, &v)?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn qconfig(&self) -> Result<QConfig> {
        Ok(QConfig::new(self.w_bits, self.a_bits, self.g_bits)
            .map_err(|_| {
                CliError::Config(format!(
                    "bitwidths ({},{},{}) must each be 1..=16 or 32",
                    self.w_bits, self.a_bits, self.g_bits
                ))
            })?
            .with_first(self.quantize_first)
            .with_last(self.quantize_last))
    }

    pub fn validate(&self) -> Result<()> {
        self.qconfig()?;
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(CliError::Config(format!("lr must be finite and >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(CliError::Config("batch_size must be positive".into()));
        }
        if self.resize == Some(0) {
            return Err(CliError::Config("resize must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text form; `from_sources` on it reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let value = match key {
                "w_bits" => self.w_bits.to_string(),
                "a_bits" => self.a_bits.to_string(),
                "g_bits" => self.g_bits.to_string(),
                "quantize_first" => self.quantize_first.to_string(),
                "quantize_last" => self.quantize_last.to_string(),
                "model" => self.model.to_string(),
                "lr" => self.lr.to_string(),
                "epochs" => self.epochs.to_string(),
                "batch_size" => self.batch_size.to_string(),
                "seed" => self.seed.to_string(),
                "data" => self.data.to_string(),
                "resize" => self.resize.map_or("none".to_string(), |r| r.to_string()),
                "fused_backward" => self.fused_backward.to_string(),
                "out" => self.out.display().to_string(),
                _ => unreachable!(),
            };
            let _ = writeln!(s, "{key} = {value}");
        }
        s
    }
}
