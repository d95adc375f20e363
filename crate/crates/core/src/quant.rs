//! Quantizers for weights, activations and gradients, with their
//! straight-through backward rules.
//!
//! Every quantizer is built on `quantize_k`, which maps `[0, 1]` onto the
//! uniform grid `{i / (2^k - 1)}` with round-half-away-from-zero. Outputs carry
//! both the real values used by float arithmetic and the integer codes plus
//! affine maps consumed by the bit kernels.

use rand::distributions::Open01;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bitkernel::AffineCode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A quantizer bitwidth in `1..=16`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Bits(u8);

impl Bits {
    pub const MAX: u32 = 16;

    pub fn new(k: u32) -> Result<Self> {
        if (1..=Self::MAX).contains(&k) {
            Ok(Self(k as u8))
        } else {
            Err(Error::InvalidBits(k))
        }
    }

    pub fn get(self) -> u32 {
        self.0 as u32
    }

    /// `2^k - 1`, the largest code.
    pub fn levels(self) -> u32 {
        (1u32 << self.0) - 1
    }
}

/// Either a quantizer bitwidth or full precision (written as 32).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Precision {
    Full,
    Bits(Bits),
}

impl Precision {
    pub const FULL_WIDTH: u32 = 32;

    pub fn from_width(w: u32) -> Result<Self> {
        if w == Self::FULL_WIDTH {
            Ok(Precision::Full)
        } else {
            Bits::new(w).map(Precision::Bits)
        }
    }

    pub fn width(self) -> u32 {
        match self {
            Precision::Full => Self::FULL_WIDTH,
            Precision::Bits(b) => b.get(),
        }
    }

    pub fn bits(self) -> Option<Bits> {
        match self {
            Precision::Full => None,
            Precision::Bits(b) => Some(b),
        }
    }
}

/// Integer code of `quantize_k(r)`. Inputs slightly outside `[0, 1]` round
/// first and are then clamped onto the grid.
#[inline]
pub fn quantize_code(r: f64, k: Bits) -> u32 {
    let n = k.levels() as f64;
    (n * r).round().clamp(0.0, n) as u32
}

#[inline]
pub fn quantize_k(r: f64, k: Bits) -> f64 {
    quantize_code(r, k) as f64 / k.levels() as f64
}

/// Straight-through backward of `quantize_k`.
#[inline]
pub fn quantize_k_backward(upstream: f64) -> f64 {
    upstream
}

/// Identity backward shared by every straight-through quantizer here except
/// the multi-bit weight quantizer.
pub fn ste_backward(upstream: &Tensor) -> Tensor {
    upstream.clone()
}

/// Reproducible source of dithering noise.
///
/// A source is a ChaCha stream selected by `(seed, stream)`; samples depend
/// only on the seed, the stream id and the position within the stream.
#[derive(Clone, Debug)]
pub struct NoiseSource {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self { seed, stream, rng }
    }

    /// Stream for one quantization site within one training step.
    pub fn for_step(seed: u64, step: u64, site: u32) -> Self {
        Self::with_stream(seed, (step << 16) | site as u64)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn seek(&mut self, position: u128) {
        self.rng.set_word_pos(position);
    }

    /// Sample of `Uniform(-0.5, 0.5)`; the endpoints are never produced.
    pub fn uniform_centered(&mut self) -> f64 {
        let u: f64 = self.rng.sample(Open01);
        u - 0.5
    }

    /// Uniform sample in the open interval `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        self.rng.sample(Open01)
    }
}

/// `N(k) = sigma / (2^k - 1)` with `sigma ~ Uniform(-0.5, 0.5)`.
pub fn sample_noise(k: Bits, rng: &mut NoiseSource) -> f64 {
    rng.uniform_centered() / k.levels() as f64
}

/// Forward of the Bernoulli straight-through estimator. Its backward is the
/// identity (`ste_backward`).
pub fn bernoulli_ste(p: f64, rng: &mut NoiseSource) -> Result<bool> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidProbability(p));
    }
    Ok(rng.uniform_open() < p)
}

/// A quantized tensor: real values, integer codes and the affine map(s)
/// between them. `affine` holds one map per instance of `instance_len`
/// consecutive elements (a single map covers the whole tensor).
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub values: Tensor,
    pub codes: Vec<u32>,
    pub bits: Bits,
    pub affine: Vec<AffineCode>,
    pub instance_len: usize,
}

pub type QuantizedWeights = QuantizedTensor;

impl QuantizedTensor {
    pub fn affine_for(&self, index: usize) -> AffineCode {
        if self.affine.len() == 1 {
            self.affine[0]
        } else {
            self.affine[index / self.instance_len]
        }
    }

    pub fn decode(&self) -> Tensor {
        self.values.clone()
    }

    fn uniform(values: Tensor, codes: Vec<u32>, bits: Bits, affine: AffineCode) -> Self {
        let instance_len = values.len().max(1);
        Self {
            values,
            codes,
            bits,
            affine: vec![affine],
            instance_len,
        }
    }
}

/// Binary weights `sign(w) * E(|w|)` with `E` the mean magnitude over the
/// whole tensor and `sign(0) = +1`.
pub fn weight_quantize_1bit(w: &Tensor) -> Result<QuantizedWeights> {
    if w.is_empty() {
        return Err(Error::EmptyTensor);
    }
    w.check_finite("weights")?;
    let bits = Bits::new(1)?;
    let mean_abs = w.data().iter().map(|x| x.abs()).sum::<f64>() / w.len() as f64;
    if mean_abs == 0.0 {
        return Ok(QuantizedTensor::uniform(
            Tensor::zeros(w.shape()),
            vec![0; w.len()],
            bits,
            AffineCode::IDENTITY,
        ));
    }
    let codes: Vec<u32> = w.data().iter().map(|&x| (x >= 0.0) as u32).collect();
    let values = w.map(|x| if x >= 0.0 { mean_abs } else { -mean_abs });
    Ok(QuantizedTensor::uniform(
        values,
        codes,
        bits,
        AffineCode::new(2.0 * mean_abs, -mean_abs)?,
    ))
}

fn max_abs_tanh(w: &Tensor) -> f64 {
    w.data().iter().map(|x| x.tanh().abs()).fold(0.0, f64::max)
}

/// `2 * quantize_k(tanh(w) / (2 max|tanh(w)|) + 1/2) - 1` for `k >= 2`.
pub fn weight_quantize_k(w: &Tensor, k: Bits) -> Result<QuantizedWeights> {
    if k.get() < 2 {
        return Err(Error::InvalidBits(k.get()));
    }
    if w.is_empty() {
        return Err(Error::EmptyTensor);
    }
    w.check_finite("weights")?;
    let max_t = max_abs_tanh(w);
    if max_t == 0.0 {
        return Ok(QuantizedTensor::uniform(
            Tensor::zeros(w.shape()),
            vec![0; w.len()],
            k,
            AffineCode::IDENTITY,
        ));
    }
    let n = k.levels() as f64;
    let codes: Vec<u32> = w
        .data()
        .iter()
        .map(|&x| quantize_code(x.tanh() / (2.0 * max_t) + 0.5, k))
        .collect();
    let values = Tensor::new(
        w.shape().to_vec(),
        codes.iter().map(|&c| 2.0 * (c as f64 / n) - 1.0).collect(),
    )?;
    Ok(QuantizedTensor::uniform(
        values,
        codes,
        k,
        AffineCode::new(2.0 / n, -1.0)?,
    ))
}

/// Backward of `weight_quantize_k`: `upstream * (1 - tanh^2(w)) / max|tanh|`,
/// with the max and `quantize_k` treated as straight-through constants.
pub fn weight_quantize_k_backward(w: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    w.same_shape(upstream)?;
    let max_t = max_abs_tanh(w);
    if max_t == 0.0 {
        return Ok(upstream.clone());
    }
    let data = w
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| {
            let t = x.tanh();
            g * (1.0 - t * t) / max_t
        })
        .collect();
    Tensor::new(w.shape().to_vec(), data)
}

/// Weight quantizer selected by precision: identity, binary (1 bit) or tanh
/// normalized (2+ bits).
pub fn weight_quantize(w: &Tensor, precision: Precision) -> Result<Option<QuantizedWeights>> {
    match precision {
        Precision::Full => Ok(None),
        Precision::Bits(b) if b.get() == 1 => weight_quantize_1bit(w).map(Some),
        Precision::Bits(b) => weight_quantize_k(w, b).map(Some),
    }
}

/// Maps the gradient with respect to quantized weights back to the master
/// weights.
pub fn weight_quantize_backward(
    w: &Tensor,
    upstream: &Tensor,
    precision: Precision,
) -> Result<Tensor> {
    match precision {
        Precision::Bits(b) if b.get() > 1 => weight_quantize_k_backward(w, upstream),
        _ => {
            w.same_shape(upstream)?;
            Ok(ste_backward(upstream))
        }
    }
}

/// Elementwise `quantize_k` on activations already bounded to `[0, 1]`.
pub fn activation_quantize(a: &Tensor, k: Bits) -> Result<Tensor> {
    activation_codes(a, k).map(|q| q.values)
}

pub fn activation_codes(a: &Tensor, k: Bits) -> Result<QuantizedTensor> {
    let n = k.levels() as f64;
    let mut codes = Vec::with_capacity(a.len());
    let mut values = Vec::with_capacity(a.len());
    for (index, &value) in a.data().iter().enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::ActivationOutOfRange { index, value });
        }
        let c = quantize_code(value, k);
        codes.push(c);
        values.push(c as f64 / n);
    }
    Ok(QuantizedTensor::uniform(
        Tensor::new(a.shape().to_vec(), values)?,
        codes,
        k,
        AffineCode::new(1.0 / n, 0.0)?,
    ))
}

/// Dithered `k`-bit gradient quantization with one scale per mini-batch
/// instance.
pub fn gradient_quantize(dr: &Tensor, k: Bits, rng: &mut NoiseSource) -> Result<Tensor> {
    gradient_codes(dr, k, rng).map(|q| q.values)
}

pub fn gradient_codes(dr: &Tensor, k: Bits, rng: &mut NoiseSource) -> Result<QuantizedTensor> {
    gradient_codes_with(dr, k, || rng.uniform_centered())
}

/// Like `gradient_codes` but with an explicit source of `sigma` samples in
/// `(-0.5, 0.5)`, drawn once per element in row-major order.
pub fn gradient_codes_with(
    dr: &Tensor,
    k: Bits,
    mut sigma: impl FnMut() -> f64,
) -> Result<QuantizedTensor> {
    dr.check_finite("gradient")?;
    let batch = if dr.shape().is_empty() { 1 } else { dr.batch() };
    let inst = dr.instance_len().max(1);
    let mut codes = vec![0u32; dr.len()];
    let mut values = vec![0.0; dr.len()];
    let mut affine = Vec::with_capacity(batch);
    for b in 0..batch {
        let range = b * inst..(b + 1) * inst;
        affine.push(quantize_instance(
            &dr.data()[range.clone()],
            k,
            &mut sigma,
            &mut codes[range.clone()],
            &mut values[range],
        )?);
    }
    Ok(QuantizedTensor {
        values: Tensor::new(dr.shape().to_vec(), values)?,
        codes,
        bits: k,
        affine,
        instance_len: inst,
    })
}

/// Quantizes one instance in place and returns its affine map. Noise is
/// consumed for every element, including all-zero instances, so stream
/// positions do not depend on the data.
pub(crate) fn quantize_instance(
    dr: &[f64],
    k: Bits,
    sigma: &mut impl FnMut() -> f64,
    codes: &mut [u32],
    values: &mut [f64],
) -> Result<AffineCode> {
    let n = k.levels() as f64;
    let max = dr.iter().map(|x| x.abs()).fold(0.0, f64::max);
    for ((&g, c), v) in dr.iter().zip(codes.iter_mut()).zip(values.iter_mut()) {
        let s = sigma();
        if max == 0.0 {
            *c = 0;
            *v = 0.0;
        } else {
            *c = quantize_code(g / (2.0 * max) + 0.5 + s / n, k);
            *v = 2.0 * max * (*c as f64 / n - 0.5);
        }
    }
    if max == 0.0 {
        Ok(AffineCode::IDENTITY)
    } else {
        AffineCode::new(2.0 * max / n, -max)
    }
}
