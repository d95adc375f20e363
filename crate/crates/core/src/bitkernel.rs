//! Bit-plane packing and fixed-point dot products built from AND/XNOR and popcount.
//!
//! A vector of unsigned `M`-bit integers is stored as `M` bit planes; plane `m`
//! holds bit `m` of every element. The dot product of an `M`-bit and a `K`-bit
//! vector is then
//!
//! ```text
//! x . y = sum_{m<M} sum_{k<K} 2^(m+k) * popcount(and(plane_m(x), plane_k(y)))
//! ```
//!
//! which touches exactly `M * K` plane pairs. Bit `i` of a plane lives in word
//! `i / 64` at bit position `i % 64`; bits past the logical length are always
//! zero.

use std::sync::atomic::{AtomicU64, Ordering};

use rayon::prelude::*;

use crate::error::{Error, Result};

pub const WORD_BITS: usize = 64;

/// Widest accumulator budget, in bits, for `M + K + log2(len)`.
pub const ACCUMULATOR_BITS: u32 = 62;

#[inline]
fn words_for(len: usize) -> usize {
    len.div_ceil(WORD_BITS)
}

#[inline]
fn tail_mask(len: usize) -> u64 {
    match len % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// A packed vector of bits with a logical length.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BitPlane {
    words: Vec<u64>,
    len: usize,
}

impl BitPlane {
    pub fn zeros(len: usize) -> Self {
        Self {
            words: vec![0; words_for(len)],
            len,
        }
    }

    pub fn ones(len: usize) -> Self {
        let mut plane = Self {
            words: vec![u64::MAX; words_for(len)],
            len,
        };
        plane.canonicalize();
        plane
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut plane = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                plane.words[i / WORD_BITS] |= 1 << (i % WORD_BITS);
            }
        }
        plane
    }

    /// Wraps raw words, clearing anything past `len` in the last word.
    pub fn from_words(words: Vec<u64>, len: usize) -> Result<Self> {
        if words.len() != words_for(len) {
            return Err(Error::LengthMismatch {
                left: words.len(),
                right: words_for(len),
            });
        }
        let mut plane = Self { words, len };
        plane.canonicalize();
        Ok(plane)
    }

    fn canonicalize(&mut self) {
        if let Some(last) = self.words.last_mut() {
            *last &= tail_mask(self.len);
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    pub fn to_bits(&self) -> Vec<bool> {
        (0..self.len).map(|i| self.get(i)).collect()
    }

    pub fn count_ones(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }

    /// Bitwise complement within the logical length.
    pub fn complement(&self) -> Self {
        let mut plane = Self {
            words: self.words.iter().map(|w| !w).collect(),
            len: self.len,
        };
        plane.canonicalize();
        plane
    }

    fn check_len(&self, other: &Self) -> Result<()> {
        if self.len != other.len {
            return Err(Error::LengthMismatch {
                left: self.len,
                right: other.len,
            });
        }
        Ok(())
    }
}

pub fn pack_bits(bits: &[bool]) -> BitPlane {
    BitPlane::from_bits(bits)
}

pub fn unpack_bits(plane: &BitPlane) -> Vec<bool> {
    plane.to_bits()
}

#[inline]
fn and_popcount(x: &[u64], y: &[u64]) -> u64 {
    x.iter()
        .zip(y)
        .map(|(a, b)| (a & b).count_ones() as u64)
        .sum()
}

/// `popcount(and(x, y))`: the dot product of two {0,1} vectors.
pub fn dot_and_popcount(x: &BitPlane, y: &BitPlane) -> Result<u64> {
    x.check_len(y)?;
    Ok(and_popcount(&x.words, &y.words))
}

/// Dot product of two {-1,+1} vectors where a set bit encodes +1.
///
/// Computed as `2 * popcount(xnor(x, y)) - n`. Padding bits would read as
/// matches under xnor, so the last word is masked first.
pub fn dot_xnor(x: &BitPlane, y: &BitPlane) -> Result<i64> {
    x.check_len(y)?;
    let n = x.len;
    let last = x.words.len().saturating_sub(1);
    let matches: u64 = x
        .words
        .iter()
        .zip(&y.words)
        .enumerate()
        .map(|(w, (a, b))| {
            let mut eq = !(a ^ b);
            if w == last {
                eq &= tail_mask(n);
            }
            eq.count_ones() as u64
        })
        .sum();
    Ok(2 * matches as i64 - n as i64)
}

/// `M` bit planes encoding a vector of unsigned `M`-bit integers.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PlaneStack {
    planes: Vec<BitPlane>,
    len: usize,
}

impl PlaneStack {
    pub fn bits(&self) -> u32 {
        self.planes.len() as u32
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn planes(&self) -> &[BitPlane] {
        &self.planes
    }

    pub fn from_planes(planes: Vec<BitPlane>) -> Result<Self> {
        let len = planes.first().map(BitPlane::len).unwrap_or(0);
        if planes.is_empty() || planes.len() > 32 {
            return Err(Error::InvalidBits(planes.len() as u32));
        }
        for p in &planes {
            if p.len() != len {
                return Err(Error::LengthMismatch {
                    left: p.len(),
                    right: len,
                });
            }
        }
        Ok(Self { planes, len })
    }

    pub fn value(&self, i: usize) -> u64 {
        self.planes
            .iter()
            .enumerate()
            .map(|(m, p)| (p.get(i) as u64) << m)
            .sum()
    }

    pub fn reconstruct(&self) -> Vec<u64> {
        (0..self.len).map(|i| self.value(i)).collect()
    }

    /// Sum of the encoded integers, from one popcount per plane.
    pub fn element_sum(&self) -> u64 {
        self.planes
            .iter()
            .enumerate()
            .map(|(m, p)| p.count_ones() << m)
            .sum()
    }
}

/// Splits `values` into `bits` planes. Every value must be below `2^bits`.
pub fn decompose_planes(values: &[u32], bits: u32) -> Result<PlaneStack> {
    if bits == 0 || bits > 32 {
        return Err(Error::InvalidBits(bits));
    }
    if let Some(&v) = values.iter().find(|&&v| bits < 32 && v >> bits != 0) {
        return Err(Error::ValueOutOfRange {
            value: v as u64,
            bits,
        });
    }
    let len = values.len();
    let n_words = words_for(len);
    let mut planes: Vec<Vec<u64>> = vec![vec![0u64; n_words]; bits as usize];
    for (w, chunk) in values.chunks(WORD_BITS).enumerate() {
        for (j, &v) in chunk.iter().enumerate() {
            let mut rest = v;
            while rest != 0 {
                let m = rest.trailing_zeros() as usize;
                planes[m][w] |= 1 << j;
                rest &= rest - 1;
            }
        }
    }
    Ok(PlaneStack {
        planes: planes
            .into_iter()
            .map(|words| BitPlane { words, len })
            .collect(),
        len,
    })
}

/// Counts plane-pair popcount passes executed by the kernels.
#[derive(Debug, Default)]
pub struct PlanePairCounter(AtomicU64);

impl PlanePairCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }

    fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }
}

fn check_accumulator(bits_a: u32, bits_b: u32, len: usize) -> Result<()> {
    let len_bits = usize::BITS - len.leading_zeros();
    if bits_a + bits_b + len_bits > ACCUMULATOR_BITS {
        return Err(Error::AccumulatorOverflow {
            bits_a,
            bits_b,
            len,
        });
    }
    Ok(())
}

#[inline]
fn planes_dot(x: &PlaneStack, y: &PlaneStack) -> i64 {
    let mut acc = 0i64;
    for (m, xm) in x.planes.iter().enumerate() {
        for (k, yk) in y.planes.iter().enumerate() {
            acc += (and_popcount(&xm.words, &yk.words) as i64) << (m + k);
        }
    }
    acc
}

/// Exact integer dot product of two plane stacks.
pub fn fixed_point_dot(x: &PlaneStack, y: &PlaneStack) -> Result<i64> {
    fixed_point_dot_counted(x, y, None)
}

pub fn fixed_point_dot_counted(
    x: &PlaneStack,
    y: &PlaneStack,
    counter: Option<&PlanePairCounter>,
) -> Result<i64> {
    if x.len != y.len {
        return Err(Error::LengthMismatch {
            left: x.len,
            right: y.len,
        });
    }
    check_accumulator(x.bits(), y.bits(), x.len)?;
    if let Some(c) = counter {
        c.add(x.bits() as u64 * y.bits() as u64);
    }
    Ok(planes_dot(x, y))
}

/// Dense row-major integer matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<i64>,
}

impl IntMatrix {
    pub fn get(&self, i: usize, j: usize) -> i64 {
        self.data[i * self.cols + j]
    }
}

fn check_inner(a_rows: &[PlaneStack], b_cols: &[PlaneStack]) -> Result<usize> {
    let inner = a_rows
        .first()
        .or(b_cols.first())
        .map(PlaneStack::len)
        .unwrap_or(0);
    for s in a_rows.iter().chain(b_cols) {
        if s.len != inner {
            return Err(Error::ShapeMismatch(format!(
                "inner dimension {} vs {}",
                s.len, inner
            )));
        }
    }
    let max_a = a_rows.iter().map(PlaneStack::bits).max().unwrap_or(0);
    let max_b = b_cols.iter().map(PlaneStack::bits).max().unwrap_or(0);
    check_accumulator(max_a, max_b, inner)?;
    Ok(inner)
}

/// `out[i][j] = fixed_point_dot(a_rows[i], b_cols[j])`.
///
/// Rows are computed in parallel; each entry is an exact integer so the
/// result does not depend on the thread count.
pub fn bit_gemm(a_rows: &[PlaneStack], b_cols: &[PlaneStack]) -> Result<IntMatrix> {
    bit_gemm_counted(a_rows, b_cols, None)
}

pub fn bit_gemm_counted(
    a_rows: &[PlaneStack],
    b_cols: &[PlaneStack],
    counter: Option<&PlanePairCounter>,
) -> Result<IntMatrix> {
    check_inner(a_rows, b_cols)?;
    let cols = b_cols.len();
    let mut data = vec![0i64; a_rows.len() * cols];
    if cols > 0 {
        data.par_chunks_mut(cols)
            .zip(a_rows.par_iter())
            .for_each(|(out, a)| {
                for (o, b) in out.iter_mut().zip(b_cols) {
                    *o = planes_dot(a, b);
                }
            });
    }
    if let Some(c) = counter {
        let pairs: u64 = a_rows.iter().map(|a| a.bits() as u64).sum::<u64>()
            * b_cols.iter().map(|b| b.bits() as u64).sum::<u64>();
        c.add(pairs);
    }
    Ok(IntMatrix {
        rows: a_rows.len(),
        cols,
        data,
    })
}

/// Affine map from integer codes to reals: `value = scale * code + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineCode {
    scale: f64,
    offset: f64,
}

impl AffineCode {
    pub const IDENTITY: AffineCode = AffineCode {
        scale: 1.0,
        offset: 0.0,
    };

    pub fn new(scale: f64, offset: f64) -> Result<Self> {
        if scale == 0.0 || !scale.is_finite() || !offset.is_finite() {
            return Err(Error::InvalidAffine { scale, offset });
        }
        Ok(Self { scale, offset })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn offset(&self) -> f64 {
        self.offset
    }

    #[inline]
    pub fn decode(&self, code: u64) -> f64 {
        self.scale * code as f64 + self.offset
    }
}

#[inline]
fn affine_combine(
    dot: i64,
    sum_x: u64,
    sum_y: u64,
    len: usize,
    cx: &AffineCode,
    cy: &AffineCode,
) -> f64 {
    // (sx*x + ox) . (sy*y + oy) expanded term by term
    cx.scale * cy.scale * dot as f64
        + cx.scale * cy.offset * sum_x as f64
        + cx.offset * cy.scale * sum_y as f64
        + len as f64 * cx.offset * cy.offset
}

/// Dot product of two affinely coded vectors: one fixed-point dot, two plane
/// sums and a length term.
pub fn affine_dot(
    x: &PlaneStack,
    cx: &AffineCode,
    y: &PlaneStack,
    cy: &AffineCode,
) -> Result<f64> {
    let dot = fixed_point_dot(x, y)?;
    Ok(affine_combine(
        dot,
        x.element_sum(),
        y.element_sum(),
        x.len,
        cx,
        cy,
    ))
}

/// Matrix product of affinely coded operands with one code per row of `a`
/// and one per column of `b`. Returns a row-major `a_rows.len() x b_cols.len()`
/// real matrix.
pub fn affine_gemm(
    a_rows: &[PlaneStack],
    a_codes: &[AffineCode],
    b_cols: &[PlaneStack],
    b_codes: &[AffineCode],
) -> Result<Vec<f64>> {
    if a_rows.len() != a_codes.len() {
        return Err(Error::LengthMismatch {
            left: a_rows.len(),
            right: a_codes.len(),
        });
    }
    if b_cols.len() != b_codes.len() {
        return Err(Error::LengthMismatch {
            left: b_cols.len(),
            right: b_codes.len(),
        });
    }
    let inner = check_inner(a_rows, b_cols)?;
    let cols = b_cols.len();
    let b_sums: Vec<u64> = b_cols.iter().map(PlaneStack::element_sum).collect();
    let mut out = vec![0.0; a_rows.len() * cols];
    if cols > 0 {
        out.par_chunks_mut(cols)
            .zip(a_rows.par_iter().zip(a_codes.par_iter()))
            .for_each(|(row, (a, ca))| {
                let a_sum = a.element_sum();
                for (j, o) in row.iter_mut().enumerate() {
                    let dot = planes_dot(a, &b_cols[j]);
                    *o = affine_combine(dot, a_sum, b_sums[j], inner, ca, &b_codes[j]);
                }
            });
    }
    Ok(out)
}
