//! `bench`: bit-plane GEMM throughput against an `f64` reference.
//!
//! For every size `RxCxL` (R row vectors, C column vectors, length L) and
//! every pair of operand widths `(M, K)`, random codes are multiplied with
//! `bit_gemm`. Before anything is timed, the result must equal a plain
//! integer GEMM exactly and the affine (decoded) product must match the
//! `f64` product on decoded values. Plane-pair counters record the work:
//! `R * C * M * K` AND/popcount plane products.

use std::fmt::Write as _;
use std::time::Instant;

use lobit_core::bitkernel::{affine_gemm, bit_gemm_counted, decompose_planes, AffineCode, PlanePairCounter, PlaneStack};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, Result};

pub const BENCH_HEADER: &str = "rows,cols,len,m,k,plane_pairs,work_ratio,bit_seconds,float_seconds,bit_gops,float_gops,time_ratio";

/// GEMM shape: `rows` vectors dotted with `cols` vectors of length `len`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchSize {
    pub rows: usize,
    pub cols: usize,
    pub len: usize,
}

impl std::str::FromStr for BenchSize {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        let dims: Vec<usize> = s
            .split('x')
            .map(|d| d.trim().parse().ok().filter(|&v| v > 0))
            .collect::<Option<_>>()
            .ok_or_else(|| CliError::Config(format!("bad size '{s}', expected RxCxL")))?;
        match dims[..] {
            [rows, cols, len] => Ok(BenchSize { rows, cols, len }),
            _ => Err(CliError::Config(format!("bad size '{s}', expected RxCxL"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub size: BenchSize,
    pub m: u32,
    pub k: u32,
    pub plane_pairs: u64,
    /// `plane_pairs` relative to the narrowest width pair of the same size.
    pub work_ratio: f64,
    pub bit_seconds: f64,
    pub float_seconds: f64,
    /// `bit_seconds` relative to the narrowest width pair of the same size.
    pub time_ratio: f64,
}

impl BenchRow {
    fn macs(&self) -> f64 {
        (self.size.rows * self.size.cols * self.size.len) as f64
    }
}

fn random_codes(count: usize, len: usize, bits: u32, rng: &mut ChaCha8Rng) -> Vec<Vec<u32>> {
    let max = (1u64 << bits) as u32;
    (0..count)
        .map(|_| (0..len).map(|_| rng.gen_range(0..max)).collect())
        .collect()
}

fn stacks(codes: &[Vec<u32>], bits: u32) -> Result<Vec<PlaneStack>> {
    codes
        .iter()
        .map(|c| decompose_planes(c, bits).map_err(CliError::from))
        .collect()
}

fn float_gemm(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<f64> {
    a.iter()
        .flat_map(|x| b.iter().map(move |y| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>()))
        .collect()
}

fn timed<T>(repeats: usize, mut f: impl FnMut() -> T) -> (T, f64) {
    let mut best = f64::INFINITY;
    let mut out = None;
    for _ in 0..repeats.max(1) {
        let start = Instant::now();
        out = Some(f());
        best = best.min(start.elapsed().as_secs_f64());
    }
    (out.expect("at least one repeat"), best)
}

/// Benchmarks every `(size, M, K)` combination; fails if any equivalence
/// gate does not hold.
pub fn run_bench(sizes: &[BenchSize], bits: &[u32], repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if sizes.is_empty() || bits.is_empty() {
        return Err(CliError::Config("bench needs at least one size and one bitwidth".into()));
    }
    if let Some(b) = bits.iter().find(|&&b| !(1..=16).contains(&b)) {
        return Err(CliError::Config(format!("bench bitwidth {b} outside 1..=16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    for &size in sizes {
        let first = rows.len();
        for &m in bits {
            for &k in bits {
                let a = random_codes(size.rows, size.len, m, &mut rng);
                let b = random_codes(size.cols, size.len, k, &mut rng);
                let (sa, sb) = (stacks(&a, m)?, stacks(&b, k)?);

                let counter = PlanePairCounter::new();
                let ints = bit_gemm_counted(&sa, &sb, Some(&counter))?;
                let plane_pairs = counter.get();
                for (i, x) in a.iter().enumerate() {
                    for (j, y) in b.iter().enumerate() {
                        let oracle: i64 = x.iter().zip(y).map(|(&p, &q)| p as i64 * q as i64).sum();
                        if ints.get(i, j) != oracle {
                            return Err(CliError::Runtime(format!(
                                "bit_gemm mismatch at ({i},{j}) for M={m} K={k}: {} vs {oracle}",
                                ints.get(i, j)
                            )));
                        }
                    }
                }

                let ca = AffineCode::new(0.5, -0.25)?;
                let cb = AffineCode::new(2.0 / ((1u64 << k) - 1) as f64, -1.0)?;
                let da: Vec<Vec<f64>> = a.iter().map(|r| r.iter().map(|&c| ca.decode(c as u64)).collect()).collect();
                let db: Vec<Vec<f64>> = b.iter().map(|r| r.iter().map(|&c| cb.decode(c as u64)).collect()).collect();
                let decoded = affine_gemm(&sa, &vec![ca; sa.len()], &sb, &vec![cb; sb.len()])?;
                let (reference, float_seconds) = timed(repeats, || float_gemm(&da, &db));
                for (i, (x, y)) in decoded.iter().zip(&reference).enumerate() {
                    let bound = 1e-9 * (size.len as f64) * (1u64 << m) as f64;
                    if (x - y).abs() > bound {
                        return Err(CliError::Runtime(format!(
                            "decoded product mismatch at {i} for M={m} K={k}: {x} vs {y}"
                        )));
                    }
                }

                let (_, bit_seconds) = timed(repeats, || bit_gemm_counted(&sa, &sb, None));
                rows.push(BenchRow {
                    size,
                    m,
                    k,
                    plane_pairs,
                    work_ratio: 0.0,
                    bit_seconds,
                    float_seconds,
                    time_ratio: 0.0,
                });
            }
        }
        let base = rows[first..]
            .iter()
            .min_by_key(|r| (r.m * r.k, r.m))
            .cloned()
            .expect("rows for this size");
        for r in &mut rows[first..] {
            r.work_ratio = r.plane_pairs as f64 / base.plane_pairs as f64;
            r.time_ratio = r.bit_seconds / base.bit_seconds.max(f64::MIN_POSITIVE);
        }
    }
    Ok(rows)
}

pub fn render(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        let gops = |secs: f64| if secs > 0.0 { r.macs() / secs / 1e9 } else { f64::INFINITY };
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{:.6e},{:.6e},{:.4},{:.4},{:.3}",
            r.size.rows,
            r.size.cols,
            r.size.len,
            r.m,
            r.k,
            r.plane_pairs,
            r.work_ratio,
            r.bit_seconds,
            r.float_seconds,
            gops(r.bit_seconds),
            gops(r.float_seconds),
            r.time_ratio
        );
    }
    s
}
