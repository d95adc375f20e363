//! Fused activation/quantization paths that never materialize the
//! full-precision intermediate.
//!
//! For a monotone bounded activation `h`, `quantize_k(h(x))` is a step
//! function of `x` with `2^k - 1` jumps, so it can be evaluated by comparing
//! `x` against a threshold table. Max pooling commutes with `quantize_k`,
//! which lets pooling run directly on integer codes.

use crate::error::{Error, Result};
use crate::quant::{quantize_code, Bits};
use crate::tensor::Tensor;

/// A monotone non-decreasing function into `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub enum BoundedFn {
    /// `clamp(x, 0, 1)`.
    Clamp,
    /// Linear interpolation through `(x, y)` knots, constant past both ends.
    Piecewise(Vec<(f64, f64)>),
}

impl BoundedFn {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            BoundedFn::Clamp => x.clamp(0.0, 1.0),
            BoundedFn::Piecewise(knots) => {
                let (x0, y0) = knots[0];
                if x <= x0 {
                    return y0;
                }
                for w in knots.windows(2) {
                    let ((xa, ya), (xb, yb)) = (w[0], w[1]);
                    if x <= xb {
                        if xb == xa {
                            return yb;
                        }
                        return ya + (yb - ya) * (x - xa) / (xb - xa);
                    }
                }
                knots[knots.len() - 1].1
            }
        }
    }

    fn validate(&self) -> Result<()> {
        if let BoundedFn::Piecewise(knots) = self {
            if knots.is_empty() {
                return Err(Error::NonMonotone("no knots".into()));
            }
            for &(x, y) in knots {
                if !x.is_finite() || !(0.0..=1.0).contains(&y) {
                    return Err(Error::NonMonotone(format!("knot ({x}, {y}) out of range")));
                }
            }
            for w in knots.windows(2) {
                if w[1].0 < w[0].0 || w[1].1 < w[0].1 {
                    return Err(Error::NonMonotone(format!(
                        "knots {:?} -> {:?} decrease",
                        w[0], w[1]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Interval outside of which the function is constant.
    fn support(&self) -> (f64, f64) {
        match self {
            BoundedFn::Clamp => (0.0, 1.0),
            BoundedFn::Piecewise(knots) => (knots[0].0, knots[knots.len() - 1].0),
        }
    }
}

// Order-preserving map between f64 and i64 (for non-NaN values).
fn to_key(x: f64) -> i64 {
    let b = x.to_bits() as i64;
    if b >= 0 {
        b
    } else {
        b ^ i64::MAX
    }
}

fn from_key(k: i64) -> f64 {
    let b = if k >= 0 { k } else { k ^ i64::MAX };
    f64::from_bits(b as u64)
}

/// Ascending thresholds `t_1 <= ... <= t_{2^k-1}` and the grid values they
/// select: `fused(x) = outputs[#{i : t_i <= x}]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdTable {
    thresholds: Vec<f64>,
    outputs: Vec<f64>,
    bits: Bits,
}

impl ThresholdTable {
    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn outputs(&self) -> &[f64] {
        &self.outputs
    }

    pub fn bits(&self) -> Bits {
        self.bits
    }

    #[inline]
    pub fn code(&self, x: f64) -> u32 {
        self.thresholds.partition_point(|&t| t <= x) as u32
    }

    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        self.outputs[self.code(x) as usize]
    }
}

/// Builds the comparison table for `quantize_k(h(x))`.
///
/// Each threshold is the smallest `f64` whose composed code reaches the next
/// level, found by bisection over the ordered bit patterns, so the table
/// reproduces the unfused rounding bit for bit. For clamp these are the bin
/// midpoints `(2i + 1) / (2(2^k - 1))` up to one ulp.
pub fn build_threshold_table(h: &BoundedFn, k: Bits) -> Result<ThresholdTable> {
    h.validate()?;
    let n = k.levels();
    let (lo_x, hi_x) = h.support();
    let code_at = |x: f64| quantize_code(h.eval(x), k);
    let mut thresholds = Vec::with_capacity(n as usize);
    for level in 1..=n {
        let t = if code_at(lo_x) >= level {
            f64::NEG_INFINITY
        } else if code_at(hi_x) < level {
            f64::INFINITY
        } else {
            let (mut lo, mut hi) = (to_key(lo_x), to_key(hi_x));
            while (hi as i128) - (lo as i128) > 1 {
                let mid = ((lo as i128 + hi as i128) / 2) as i64;
                if code_at(from_key(mid)) >= level {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            from_key(hi)
        };
        thresholds.push(t);
    }
    let outputs = (0..=n).map(|i| i as f64 / n as f64).collect();
    Ok(ThresholdTable {
        thresholds,
        outputs,
        bits: k,
    })
}

/// `quantize_k(h(x))` elementwise by threshold comparisons.
pub fn fused_activation_quantize(x: &Tensor, table: &ThresholdTable) -> Tensor {
    x.map(|v| table.apply(v))
}

/// Integer codes of `quantize_k(h(x))`.
pub fn fused_activation_codes(x: &Tensor, table: &ThresholdTable) -> Vec<u32> {
    x.data().iter().map(|&v| table.code(v)).collect()
}

/// Whether `quantize_k(max(a, b)) == max(quantize_k(a), quantize_k(b))`.
pub fn quantize_max_commute_check(a: f64, b: f64, k: Bits) -> bool {
    let n = k.levels() as f64;
    let q = |r: f64| quantize_code(r, k) as f64 / n;
    q(a.max(b)) == q(a).max(q(b))
}

/// Non-overlapping `window x window` max pooling over `[B, C, H, W]` followed
/// by (equivalently, preceded by) `quantize_k`, evaluated on integer codes.
/// Trailing rows/columns that do not fill a window are dropped.
pub fn fused_maxpool_quantize(x: &Tensor, window: usize, k: Bits) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "max pooling needs [B, C, H, W], got {shape:?}"
        )));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if window == 0 || window > h || window > w {
        return Err(Error::ShapeMismatch(format!(
            "window {window} does not fit {h}x{w}"
        )));
    }
    let (oh, ow) = (h / window, w / window);
    let n = k.levels() as f64;
    let src = x.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = 0u32;
                for di in 0..window {
                    let row = base + (i * window + di) * w + j * window;
                    for &v in &src[row..row + window] {
                        if !(0.0..=1.0).contains(&v) {
                            return Err(Error::ActivationOutOfRange {
                                index: row,
                                value: v,
                            });
                        }
                        best = best.max(quantize_code(v, k));
                    }
                }
                out.push(best as f64 / n);
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{activation_quantize, quantize_k, NoiseSource};
    use proptest::prelude::*;

    fn b(k: u32) -> Bits {
        Bits::new(k).unwrap()
    }

    #[test]
    fn clamp_table_thresholds_are_bin_midpoints() {
        let t1 = build_threshold_table(&BoundedFn::Clamp, b(1)).unwrap();
        assert_eq!(t1.thresholds(), &[0.5]);

        let t2 = build_threshold_table(&BoundedFn::Clamp, b(2)).unwrap();
        let want = [1.0 / 6.0, 3.0 / 6.0, 5.0 / 6.0];
        for (t, w) in t2.thresholds().iter().zip(want) {
            assert!((t - w).abs() <= 1e-15, "{t} vs {w}");
        }
        for k in 1..=8 {
            let t = build_threshold_table(&BoundedFn::Clamp, b(k)).unwrap();
            assert_eq!(t.thresholds().len(), (1 << k) - 1);
            assert_eq!(t.outputs().len(), 1 << k);
            assert!(t.thresholds().windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn rejects_non_monotone_fn() {
        let h = BoundedFn::Piecewise(vec![(0.0, 0.0), (1.0, 0.8), (2.0, 0.3)]);
        assert!(matches!(
            build_threshold_table(&h, b(2)),
            Err(Error::NonMonotone(_))
        ));
        let h = BoundedFn::Piecewise(vec![(0.0, 0.0), (1.0, 1.5)]);
        assert!(build_threshold_table(&h, b(2)).is_err());
    }

    #[test]
    fn fused_examples() {
        let t = build_threshold_table(&BoundedFn::Clamp, b(1)).unwrap();
        let x = Tensor::vector(vec![-5.0, 0.49, 0.51, 7.0]);
        assert_eq!(fused_activation_quantize(&x, &t).data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn fused_matches_composition_at_midpoints() {
        for k in 1..=6 {
            let t = build_threshold_table(&BoundedFn::Clamp, b(k)).unwrap();
            let n = ((1u32 << k) - 1) as f64;
            for i in 0..(1u32 << k) {
                let mid = (2.0 * i as f64 + 1.0) / (2.0 * n);
                for x in [mid, f64::from_bits(mid.to_bits() - 1), f64::from_bits(mid.to_bits() + 1)] {
                    assert_eq!(t.apply(x), quantize_k(x.clamp(0.0, 1.0), b(k)), "k={k} x={x}");
                }
            }
        }
    }

    #[test]
    fn piecewise_table_matches_composition() {
        let h = BoundedFn::Piecewise(vec![(-2.0, 0.0), (0.0, 0.25), (1.0, 0.25), (3.0, 1.0)]);
        let t = build_threshold_table(&h, b(3)).unwrap();
        let mut rng = NoiseSource::new(4);
        for _ in 0..10_000 {
            let x = rng.uniform_centered() * 10.0;
            assert_eq!(t.apply(x), quantize_k(h.eval(x), b(3)));
        }
    }

    #[test]
    fn partial_range_fn_uses_infinite_thresholds() {
        let h = BoundedFn::Piecewise(vec![(0.0, 0.4), (1.0, 0.6)]);
        let t = build_threshold_table(&h, b(2)).unwrap();
        assert_eq!(t.thresholds()[2], f64::INFINITY);
        assert_eq!(t.apply(100.0), quantize_k(0.6, b(2)));
    }

    #[test]
    fn commute_examples() {
        assert!(quantize_max_commute_check(0.3, 0.3, b(2)));
        assert!(quantize_max_commute_check(0.2, 0.9, b(2)));
        assert_eq!(quantize_k(0.9, b(2)), 1.0);
        for k in 1..=4 {
            for i in 0..=100 {
                for j in 0..=100 {
                    let (a, c) = (i as f64 / 100.0, j as f64 / 100.0);
                    assert!(quantize_max_commute_check(a, c, b(k)));
                }
            }
        }
    }

    fn maxpool_oracle(x: &Tensor, window: usize) -> Tensor {
        let s = x.shape();
        let (oh, ow) = (s[2] / window, s[3] / window);
        let mut out = Vec::new();
        for p in 0..s[0] * s[1] {
            for i in 0..oh {
                for j in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for di in 0..window {
                        for dj in 0..window {
                            m = m.max(x.data()[p * s[2] * s[3] + (i * window + di) * s[3] + j * window + dj]);
                        }
                    }
                    out.push(m);
                }
            }
        }
        Tensor::new(vec![s[0], s[1], oh, ow], out).unwrap()
    }

    #[test]
    fn fused_maxpool_examples() {
        let x = Tensor::full(&[1, 1, 2, 2], 0.4);
        let y = fused_maxpool_quantize(&x, 2, b(2)).unwrap();
        assert_eq!(y.data(), &[quantize_k(0.4, b(2))]);

        let mut rng = NoiseSource::new(8);
        let x = Tensor::new(
            vec![2, 3, 8, 8],
            (0..384).map(|_| rng.uniform_open()).collect(),
        )
        .unwrap();
        let fused = fused_maxpool_quantize(&x, 2, b(2)).unwrap();
        let pool_then_q = activation_quantize(&maxpool_oracle(&x, 2), b(2)).unwrap();
        let q_then_pool = maxpool_oracle(&activation_quantize(&x, b(2)).unwrap(), 2);
        assert_eq!(fused, pool_then_q);
        assert_eq!(fused, q_then_pool);

        assert!(fused_maxpool_quantize(&x, 9, b(2)).is_err());
        assert!(fused_maxpool_quantize(&Tensor::zeros(&[4, 4]), 2, b(2)).is_err());
    }

    #[test]
    fn fused_maxpool_ties_are_order_independent() {
        // windows made entirely of values that quantize to the same level
        let vals = [0.34, 0.3333333333333333, 0.2, 0.45];
        let mut rng = NoiseSource::new(2);
        for _ in 0..100 {
            let mut perm = vals.to_vec();
            for i in (1..perm.len()).rev() {
                let j = (rng.uniform_open() * (i + 1) as f64) as usize;
                perm.swap(i, j.min(i));
            }
            let x = Tensor::new(vec![1, 1, 2, 2], perm).unwrap();
            assert_eq!(fused_maxpool_quantize(&x, 2, b(2)).unwrap().data(), &[1.0 / 3.0]);
        }
    }

    proptest! {
        #[test]
        fn fused_equals_unfused(x in proptest::collection::vec(-2.0f64..3.0, 1..64), k in 1u32..=4) {
            let t = build_threshold_table(&BoundedFn::Clamp, b(k)).unwrap();
            let x = Tensor::vector(x);
            let unfused = activation_quantize(&x.map(|v| v.clamp(0.0, 1.0)), b(k)).unwrap();
            prop_assert_eq!(fused_activation_quantize(&x, &t), unfused);
        }

        #[test]
        fn fused_is_monotone(x in -2.0f64..3.0, y in -2.0f64..3.0, k in 1u32..=6) {
            let t = build_threshold_table(&BoundedFn::Clamp, b(k)).unwrap();
            let (lo, hi) = if x <= y { (x, y) } else { (y, x) };
            prop_assert!(t.apply(lo) <= t.apply(hi));
        }
    }
}
