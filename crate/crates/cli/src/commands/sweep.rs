//! `sweep`: one training run per `(W, A, G)` grid point, all with the same
//! seed, summarized in `sweep.csv`.
//!
//! Cells run concurrently, each writing its own `w{W}_a{A}_g{G}` output
//! directory. A failing cell is reported with `status = failed: ...` and the
//! remaining cells still run.
//!
//! Complexity columns count bit operations relative to a 1-bit by 1-bit
//! product: inference `W*A`, training `W*A + W*G` (forward product plus the
//! gradient products, whose cost tracks the weight and gradient widths).
//! Both are `-` when any width is 32. Storage is `W` relative to 1-bit
//! weights.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;

use super::train::run_training;
use crate::config::RunConfig;
use crate::dataset::load_dataset;
use crate::error::{CliError, Result};

pub const SWEEP_HEADER: &str = "w,a,g,quantize_first,quantize_last,training_complexity,inference_complexity,storage_relative_size,final_accuracy,best_accuracy,status";

/// One grid point, written `W,A,G` with optional `+first` / `+last`
/// suffixes. Flags left unspecified inherit the base configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridPoint {
    pub w: u32,
    pub a: u32,
    pub g: u32,
    pub first: Option<bool>,
    pub last: Option<bool>,
}

impl FromStr for GridPoint {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.trim().split('+');
        let widths: Vec<u32> = parts
            .next()
            .unwrap_or_default()
            .split(',')
            .map(|v| v.trim().parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| CliError::Config(format!("bad grid point '{s}'")))?;
        let [w, a, g] = widths[..] else {
            return Err(CliError::Config(format!("grid point '{s}' needs W,A,G")));
        };
        let mut p = GridPoint { w, a, g, first: None, last: None };
        for flag in parts {
            match flag {
                "first" => p.first = Some(true),
                "last" => p.last = Some(true),
                _ => return Err(CliError::Config(format!("unknown grid flag '+{flag}'"))),
            }
        }
        Ok(p)
    }
}

/// Parses `W,A,G;W,A,G+first;...`.
pub fn parse_grid(s: &str) -> Result<Vec<GridPoint>> {
    let grid: Vec<GridPoint> = s
        .split(';')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if grid.is_empty() {
        return Err(CliError::Config("sweep grid is empty".into()));
    }
    Ok(grid)
}

/// `(training, inference)` relative complexity, `None` for full precision.
pub fn complexity(w: u32, a: u32, g: u32) -> Option<(u32, u32)> {
    if [w, a, g].contains(&32) {
        None
    } else {
        Some((w * a + w * g, w * a))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub config: RunConfig,
    pub result: std::result::Result<(f64, f64), String>,
}

impl SweepRow {
    pub fn final_accuracy(&self) -> Option<f64> {
        self.result.as_ref().ok().map(|r| r.0)
    }
}

pub fn cell_name(cfg: &RunConfig) -> String {
    let mut s = format!("w{}_a{}_g{}", cfg.w_bits, cfg.a_bits, cfg.g_bits);
    if cfg.quantize_first {
        s.push_str("_first");
    }
    if cfg.quantize_last {
        s.push_str("_last");
    }
    s
}

fn cell_config(base: &RunConfig, p: &GridPoint) -> RunConfig {
    let mut cfg = base.clone();
    cfg.w_bits = p.w;
    cfg.a_bits = p.a;
    cfg.g_bits = p.g;
    cfg.quantize_first = p.first.unwrap_or(base.quantize_first);
    cfg.quantize_last = p.last.unwrap_or(base.quantize_last);
    cfg.out = base.out.join(cell_name(&cfg));
    cfg
}

pub fn render(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    for r in rows {
        let c = &r.config;
        let (train_c, inf_c) = match complexity(c.w_bits, c.a_bits, c.g_bits) {
            Some((t, i)) => (t.to_string(), i.to_string()),
            None => ("-".into(), "-".into()),
        };
        let (fin, best, status) = match &r.result {
            Ok((f, b)) => (format!("{f:.6}"), format!("{b:.6}"), "ok".to_string()),
            Err(e) => (
                "-".into(),
                "-".into(),
                format!("failed: {}", e.replace([',', '\n'], ";")),
            ),
        };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{train_c},{inf_c},{},{fin},{best},{status}",
            c.w_bits, c.a_bits, c.g_bits, c.quantize_first, c.quantize_last, c.w_bits
        );
    }
    s
}

/// Runs every grid cell and writes `sweep.csv` under `base.out`.
pub fn cmd_sweep(base: &RunConfig, grid: &[GridPoint]) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(CliError::Config("sweep grid is empty".into()));
    }
    base.validate()?;
    let (train, test) = load_dataset(&base.data, base.resize)?;
    fs::create_dir_all(&base.out).map_err(|e| CliError::io(base.out.display(), e))?;
    let rows: Vec<SweepRow> = grid
        .par_iter()
        .map(|p| {
            let cfg = cell_config(base, p);
            let result = run_training(&cfg, &train, &test, Some(&cfg.out))
                .map(|r| (r.final_accuracy, r.best_accuracy))
                .map_err(|e| e.to_string());
            SweepRow { config: cfg, result }
        })
        .collect();
    let path: PathBuf = base.out.join("sweep.csv");
    fs::write(&path, render(&rows)).map_err(|e| CliError::io(path.display(), e))?;
    Ok(rows)
}
