//! Layer kernels. Convolution and fully connected products are lowered to
//! "dot every vector of set A with every vector of set B", which runs on the
//! bit-plane kernels when both sets carry integer codes and in `f64`
//! otherwise.

use rayon::prelude::*;

use crate::bitkernel::{affine_gemm, decompose_planes, AffineCode, PlaneStack};
use crate::error::{Error, Result};
use crate::quant::{Bits, QuantizedTensor};
use crate::tensor::Tensor;

/// Integer codes behind a quantized operand, with one affine map per
/// instance of `instance_len` elements (or a single map for all).
#[derive(Clone, Debug, PartialEq)]
pub struct Codes {
    pub codes: Vec<u32>,
    pub bits: Bits,
    pub affine: Vec<AffineCode>,
    pub instance_len: usize,
}

impl Codes {
    pub fn affine_for(&self, index: usize) -> AffineCode {
        if self.affine.len() == 1 {
            self.affine[0]
        } else {
            self.affine[index / self.instance_len]
        }
    }

    fn zero_offset(&self) -> bool {
        self.affine.iter().all(|a| a.offset() == 0.0)
    }
}

/// A tensor flowing through the network, optionally with the integer codes
/// it was quantized from.
#[derive(Clone, Debug, PartialEq)]
pub struct Operand {
    pub values: Tensor,
    pub codes: Option<Codes>,
}

impl Operand {
    pub fn float(values: Tensor) -> Self {
        Self {
            values,
            codes: None,
        }
    }

    pub fn quantized(q: QuantizedTensor) -> Self {
        Self {
            values: q.values,
            codes: Some(Codes {
                codes: q.codes,
                bits: q.bits,
                affine: q.affine,
                instance_len: q.instance_len,
            }),
        }
    }

    pub fn is_quantized(&self) -> bool {
        self.codes.is_some()
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }
}

/// `count` vectors of length `len`, stored contiguously.
struct VecSet {
    count: usize,
    len: usize,
    values: Vec<f64>,
    codes: Option<(Vec<u32>, Bits, Vec<AffineCode>)>,
}

impl VecSet {
    fn stacks(&self) -> Result<Option<(Vec<PlaneStack>, &[AffineCode])>> {
        let Some((codes, bits, affine)) = &self.codes else {
            return Ok(None);
        };
        let len = self.len;
        let stacks = (0..self.count)
            .into_par_iter()
            .map(|i| decompose_planes(&codes[i * len..(i + 1) * len], bits.get()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Some((stacks, affine)))
    }
}

/// `out[i * b.count + j] = a_i . b_j`.
fn dot_all(a: &VecSet, b: &VecSet) -> Result<Vec<f64>> {
    if a.len != b.len {
        return Err(Error::ShapeMismatch(format!(
            "vector length {} vs {}",
            a.len, b.len
        )));
    }
    if a.codes.is_some() && b.codes.is_some() {
        if let (Some((sa, ca)), Some((sb, cb))) = (a.stacks()?, b.stacks()?) {
            return affine_gemm(&sa, ca, &sb, cb);
        }
    }
    let len = a.len;
    let mut out = vec![0.0; a.count * b.count];
    if b.count == 0 || len == 0 {
        return Ok(out);
    }
    out.par_chunks_mut(b.count)
        .zip(a.values.par_chunks(len))
        .for_each(|(row, av)| {
            for (o, bv) in row.iter_mut().zip(b.values.chunks(len)) {
                *o = av.iter().zip(bv).map(|(x, y)| x * y).sum();
            }
        });
    Ok(out)
}

fn transpose<T: Copy + Default>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::default(); src.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// Geometry of a stride-1, "same"-padded square convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvGeom {
    pub fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Patch length `C * k * k`.
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn positions(&self) -> usize {
        self.height * self.width
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() != 4
            || shape[1] != self.in_channels
            || shape[2] != self.height
            || shape[3] != self.width
        {
            return Err(Error::ShapeMismatch(format!(
                "conv input {:?} vs expected [B, {}, {}, {}]",
                shape, self.in_channels, self.height, self.width
            )));
        }
        Ok(shape[0])
    }

    fn check_output(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() != 4
            || shape[1] != self.out_channels
            || shape[2] != self.height
            || shape[3] != self.width
        {
            return Err(Error::ShapeMismatch(format!(
                "conv output gradient {:?} vs expected [B, {}, {}, {}]",
                shape, self.out_channels, self.height, self.width
            )));
        }
        Ok(shape[0])
    }

    fn check_weight(&self, shape: &[usize]) -> Result<()> {
        if shape != self.weight_shape() {
            return Err(Error::ShapeMismatch(format!(
                "conv weight {:?} vs expected {:?}",
                shape,
                self.weight_shape()
            )));
        }
        Ok(())
    }

    /// Unrolls `[B, C, H, W]` into `B * H * W` patches of length `C * k * k`.
    fn im2col<T: Copy>(&self, src: &[T], batch: usize, pad_value: T) -> Vec<T> {
        let (c, h, w, k) = (self.in_channels, self.height, self.width, self.kernel);
        let pad = self.pad() as isize;
        let plen = self.patch_len();
        let mut out = Vec::with_capacity(batch * h * w * plen);
        for b in 0..batch {
            let img = &src[b * c * h * w..(b + 1) * c * h * w];
            for oy in 0..h as isize {
                for ox in 0..w as isize {
                    for ch in 0..c {
                        for ky in 0..k as isize {
                            let iy = oy + ky - pad;
                            for kx in 0..k as isize {
                                let ix = ox + kx - pad;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    out.push(pad_value);
                                } else {
                                    out.push(img[(ch * h + iy as usize) * w + ix as usize]);
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of `im2col`: scatters patch gradients back onto the image.
    fn col2im(&self, cols: &[f64], batch: usize) -> Vec<f64> {
        let (c, h, w, k) = (self.in_channels, self.height, self.width, self.kernel);
        let pad = self.pad() as isize;
        let mut out = vec![0.0; batch * c * h * w];
        let mut it = cols.iter();
        for b in 0..batch {
            let img = &mut out[b * c * h * w..(b + 1) * c * h * w];
            for oy in 0..h as isize {
                for ox in 0..w as isize {
                    for ch in 0..c {
                        for ky in 0..k as isize {
                            let iy = oy + ky - pad;
                            for kx in 0..k as isize {
                                let ix = ox + kx - pad;
                                let g = *it.next().expect("patch matrix size");
                                if iy >= 0 && ix >= 0 && iy < h as isize && ix < w as isize {
                                    img[(ch * h + iy as usize) * w + ix as usize] += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

fn repeat_affine(codes: &Codes, count: usize, instance_of: impl Fn(usize) -> usize) -> Vec<AffineCode> {
    (0..count)
        .map(|i| {
            if codes.affine.len() == 1 {
                codes.affine[0]
            } else {
                codes.affine[instance_of(i)]
            }
        })
        .collect()
}

fn check_batch_affine(codes: &Codes, batch: usize) -> Result<()> {
    if codes.affine.len() != 1 && codes.affine.len() != batch {
        return Err(Error::ShapeMismatch(format!(
            "{} affine maps for batch {}",
            codes.affine.len(),
            batch
        )));
    }
    Ok(())
}

/// Weight matrix `[O, C*k*k]` as `O` vectors.
fn weight_rows(weight: &Operand, rows: usize, cols: usize) -> VecSet {
    VecSet {
        count: rows,
        len: cols,
        values: weight.values.data().to_vec(),
        codes: weight
            .codes
            .as_ref()
            .map(|c| (c.codes.clone(), c.bits, repeat_affine(c, rows, |_| 0))),
    }
}

/// Transposed weight matrix as `cols` vectors of length `rows`.
fn weight_cols(weight: &Operand, rows: usize, cols: usize) -> VecSet {
    VecSet {
        count: cols,
        len: rows,
        values: transpose(weight.values.data(), rows, cols),
        codes: weight.codes.as_ref().map(|c| {
            (
                transpose(&c.codes, rows, cols),
                c.bits,
                repeat_affine(c, cols, |_| 0),
            )
        }),
    }
}

/// Convolution forward: `[B, C, H, W] * [O, C, k, k] -> [B, O, H, W]`.
pub fn conv2d_forward(input: &Operand, weight: &Operand, geom: &ConvGeom) -> Result<Tensor> {
    let batch = geom.check_input(input.shape())?;
    geom.check_weight(weight.shape())?;
    let (o, p, plen) = (geom.out_channels, geom.positions(), geom.patch_len());
    let a = weight_rows(weight, o, plen);
    let input_codes = input.codes.as_ref().filter(|c| c.zero_offset());
    if let Some(c) = input_codes {
        check_batch_affine(c, batch)?;
    }
    let b = VecSet {
        count: batch * p,
        len: plen,
        values: geom.im2col(input.values.data(), batch, 0.0),
        codes: match (input_codes, &a.codes) {
            (Some(c), Some(_)) => Some((
                geom.im2col(&c.codes, batch, 0),
                c.bits,
                repeat_affine(c, batch * p, |i| i / p),
            )),
            _ => None,
        },
    };
    let out = dot_all(&a, &b)?;
    let mut y = vec![0.0; batch * o * p];
    for oc in 0..o {
        for bi in 0..batch {
            let src = &out[oc * batch * p + bi * p..oc * batch * p + (bi + 1) * p];
            y[(bi * o + oc) * p..(bi * o + oc + 1) * p].copy_from_slice(src);
        }
    }
    Tensor::new(vec![batch, o, geom.height, geom.width], y)
}

/// Gradient with respect to the convolution input.
pub fn conv2d_backward_input(grad: &Operand, weight: &Operand, geom: &ConvGeom) -> Result<Tensor> {
    let batch = geom.check_output(grad.shape())?;
    geom.check_weight(weight.shape())?;
    let (o, p, plen) = (geom.out_channels, geom.positions(), geom.patch_len());
    let a = weight_cols(weight, o, plen);
    // dY re-laid out as one length-O vector per (instance, position)
    let g = grad.values.data();
    let mut values = vec![0.0; batch * p * o];
    for bi in 0..batch {
        for oc in 0..o {
            for pos in 0..p {
                values[(bi * p + pos) * o + oc] = g[(bi * o + oc) * p + pos];
            }
        }
    }
    let codes = match (&grad.codes, &a.codes) {
        (Some(c), Some(_)) => {
            check_batch_affine(c, batch)?;
            let mut codes = vec![0u32; batch * p * o];
            for bi in 0..batch {
                for oc in 0..o {
                    for pos in 0..p {
                        codes[(bi * p + pos) * o + oc] = c.codes[(bi * o + oc) * p + pos];
                    }
                }
            }
            Some((codes, c.bits, repeat_affine(c, batch * p, |i| i / p)))
        }
        _ => None,
    };
    let b = VecSet {
        count: batch * p,
        len: o,
        values,
        codes,
    };
    let out = dot_all(&a, &b)?; // [plen][batch * p]
    let cols = transpose(&out, plen, batch * p); // [batch * p][plen]
    Tensor::new(
        vec![batch, geom.in_channels, geom.height, geom.width],
        geom.col2im(&cols, batch),
    )
}

/// Gradient with respect to the convolution weights. Dot products run over
/// the positions of one instance at a time, so per-instance gradient scales
/// stay exact on the bit path; instance contributions are summed in order.
pub fn conv2d_backward_weight(grad: &Operand, input: &Operand, geom: &ConvGeom) -> Result<Tensor> {
    let batch = geom.check_output(grad.shape())?;
    if geom.check_input(input.shape())? != batch {
        return Err(Error::ShapeMismatch("batch sizes differ".into()));
    }
    let (o, p, plen) = (geom.out_channels, geom.positions(), geom.patch_len());
    let input_codes = input.codes.as_ref().filter(|c| c.zero_offset());
    let bit_path = grad.codes.is_some() && input_codes.is_some();
    let patches = geom.im2col(input.values.data(), batch, 0.0);
    let patch_codes = if bit_path {
        input_codes.map(|c| geom.im2col(&c.codes, batch, 0))
    } else {
        None
    };
    let mut acc = vec![0.0; o * plen];
    for bi in 0..batch {
        let grad_range = bi * o * p..(bi + 1) * o * p;
        let a = VecSet {
            count: o,
            len: p,
            values: grad.values.data()[grad_range.clone()].to_vec(),
            codes: match (&grad.codes, bit_path) {
                (Some(c), true) => {
                    check_batch_affine(c, batch)?;
                    let aff = if c.affine.len() == 1 { c.affine[0] } else { c.affine[bi] };
                    Some((c.codes[grad_range].to_vec(), c.bits, vec![aff; o]))
                }
                _ => None,
            },
        };
        let patch_range = bi * p * plen..(bi + 1) * p * plen;
        let b = VecSet {
            count: plen,
            len: p,
            values: transpose(&patches[patch_range.clone()], p, plen),
            codes: match (&patch_codes, input_codes) {
                (Some(pc), Some(c)) => {
                    let aff = if c.affine.len() == 1 { c.affine[0] } else { c.affine[bi] };
                    Some((transpose(&pc[patch_range], p, plen), c.bits, vec![aff; plen]))
                }
                _ => None,
            },
        };
        let part = dot_all(&a, &b)?;
        for (s, v) in acc.iter_mut().zip(part) {
            *s += v;
        }
    }
    Tensor::new(geom.weight_shape().to_vec(), acc)
}

fn check_fc(input_shape: &[usize], weight_shape: &[usize]) -> Result<(usize, usize, usize)> {
    if input_shape.len() != 2 || weight_shape.len() != 2 || input_shape[1] != weight_shape[1] {
        return Err(Error::ShapeMismatch(format!(
            "fc input {input_shape:?} vs weight {weight_shape:?}"
        )));
    }
    Ok((input_shape[0], weight_shape[0], weight_shape[1]))
}

fn batch_rows(x: &Operand, batch: usize, len: usize, with_codes: bool) -> Result<VecSet> {
    let codes = match (&x.codes, with_codes) {
        (Some(c), true) => {
            check_batch_affine(c, batch)?;
            Some((c.codes.clone(), c.bits, repeat_affine(c, batch, |i| i)))
        }
        _ => None,
    };
    Ok(VecSet {
        count: batch,
        len,
        values: x.values.data().to_vec(),
        codes,
    })
}

/// Fully connected forward: `[B, D] x [O, D]^T + bias -> [B, O]`.
pub fn fc_forward(input: &Operand, weight: &Operand, bias: &Tensor) -> Result<Tensor> {
    let (batch, o, d) = check_fc(input.shape(), weight.shape())?;
    if bias.shape() != [o] {
        return Err(Error::ShapeMismatch(format!("fc bias {:?}", bias.shape())));
    }
    let a = weight_rows(weight, o, d);
    let b = batch_rows(input, batch, d, a.codes.is_some())?;
    let out = dot_all(&a, &b)?; // [o][batch]
    let mut y = transpose(&out, o, batch);
    for row in y.chunks_mut(o.max(1)) {
        for (v, bb) in row.iter_mut().zip(bias.data()) {
            *v += bb;
        }
    }
    Tensor::new(vec![batch, o], y)
}

pub fn fc_backward_input(grad: &Operand, weight: &Operand) -> Result<Tensor> {
    let ws = weight.shape();
    if ws.len() != 2 || grad.shape().len() != 2 || grad.shape()[1] != ws[0] {
        return Err(Error::ShapeMismatch(format!(
            "fc gradient {:?} vs weight {:?}",
            grad.shape(),
            ws
        )));
    }
    let (batch, o, d) = (grad.shape()[0], ws[0], ws[1]);
    let a = weight_cols(weight, o, d);
    let b = batch_rows(grad, batch, o, a.codes.is_some())?;
    let out = dot_all(&a, &b)?; // [d][batch]
    Tensor::new(vec![batch, d], transpose(&out, d, batch))
}

/// Weight gradient `sum_b g_b^T x_b`, one instance at a time.
pub fn fc_backward_weight(grad: &Operand, input: &Operand) -> Result<Tensor> {
    let (gs, xs) = (grad.shape(), input.shape());
    if gs.len() != 2 || xs.len() != 2 || gs[0] != xs[0] {
        return Err(Error::ShapeMismatch(format!("fc gradient {gs:?} vs input {xs:?}")));
    }
    let (batch, o, d) = (gs[0], gs[1], xs[1]);
    let bit_path = grad.codes.is_some() && input.codes.is_some();
    let mut acc = vec![0.0; o * d];
    for bi in 0..batch {
        let pick = |x: &Operand, n: usize| -> Result<VecSet> {
            let range = bi * n..(bi + 1) * n;
            let codes = match (&x.codes, bit_path) {
                (Some(c), true) => {
                    check_batch_affine(c, batch)?;
                    let aff = if c.affine.len() == 1 { c.affine[0] } else { c.affine[bi] };
                    Some((c.codes[range.clone()].to_vec(), c.bits, vec![aff; n]))
                }
                _ => None,
            };
            Ok(VecSet {
                count: n,
                len: 1,
                values: x.values.data()[range].to_vec(),
                codes,
            })
        };
        let part = dot_all(&pick(grad, o)?, &pick(input, d)?)?;
        for (s, v) in acc.iter_mut().zip(part) {
            *s += v;
        }
    }
    Tensor::new(vec![o, d], acc)
}

/// `clamp(x, 0, 1)`.
pub fn bounded_activation(x: &Tensor) -> Tensor {
    x.map(|v| v.clamp(0.0, 1.0))
}

/// Positions where the clamp passes gradient; the boundary points 0 and 1
/// count as interior.
pub(crate) fn bounded_activation_mask(x: &Tensor) -> Vec<bool> {
    x.data().iter().map(|v| (0.0..=1.0).contains(v)).collect()
}

pub fn bounded_activation_backward(x: &Tensor, grad: &Tensor) -> Result<Tensor> {
    x.same_shape(grad)?;
    let data = x
        .data()
        .iter()
        .zip(grad.data())
        .map(|(v, g)| if (0.0..=1.0).contains(v) { *g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Non-overlapping max pooling over `[B, C, H, W]`. With codes present the
/// comparison runs on the codes. Ties resolve to the first element in scan
/// order. Returns the pooled operand and the flat argmax of every output.
pub fn maxpool_forward(x: &Operand, window: usize) -> Result<(Operand, Vec<usize>)> {
    let shape = x.shape();
    if shape.len() != 4 || window == 0 || window > shape[2] || window > shape[3] {
        return Err(Error::ShapeMismatch(format!(
            "max pooling window {window} over {shape:?}"
        )));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = (h / window, w / window);
    let vals = x.values.data();
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + i * window * w + j * window;
                for di in 0..window {
                    for dj in 0..window {
                        let idx = base + (i * window + di) * w + j * window + dj;
                        let better = match &x.codes {
                            Some(cd) => cd.codes[idx] > cd.codes[best],
                            None => vals[idx] > vals[best],
                        };
                        if better {
                            best = idx;
                        }
                    }
                }
                argmax.push(best);
            }
        }
    }
    let values = Tensor::new(
        vec![b, c, oh, ow],
        argmax.iter().map(|&i| vals[i]).collect(),
    )?;
    let codes = x.codes.as_ref().map(|cd| Codes {
        codes: argmax.iter().map(|&i| cd.codes[i]).collect(),
        bits: cd.bits,
        affine: cd.affine.clone(),
        instance_len: c * oh * ow,
    });
    Ok((Operand { values, codes }, argmax))
}

pub fn maxpool_backward(grad: &Tensor, argmax: &[usize], input_shape: &[usize]) -> Result<Tensor> {
    if grad.len() != argmax.len() {
        return Err(Error::ShapeMismatch(format!(
            "pool gradient has {} entries, argmax {}",
            grad.len(),
            argmax.len()
        )));
    }
    let mut out = Tensor::zeros(input_shape);
    let d = out.data_mut();
    for (&i, &g) in argmax.iter().zip(grad.data()) {
        d[i] += g;
    }
    Ok(out)
}

/// Batch statistics cache for the batchnorm backward pass.
#[derive(Clone, Debug)]
pub(crate) struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub(crate) const BN_EPS: f64 = 1e-5;

fn bn_dims(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

pub(crate) fn bn_forward_train(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<(Tensor, BnCache)> {
    let (b, c, s) = bn_dims(x.shape());
    let m = (b * s) as f64;
    let d = x.data();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            mean[ch] += d[(bi * c + ch) * s..(bi * c + ch + 1) * s].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    for bi in 0..b {
        for ch in 0..c {
            var[ch] += d[(bi * c + ch) * s..(bi * c + ch + 1) * s]
                .iter()
                .map(|v| (v - mean[ch]).powi(2))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; d.len()];
    let mut y = vec![0.0; d.len()];
    for i in 0..d.len() {
        let ch = (i / s) % c;
        xhat[i] = (d[i] - mean[ch]) * inv_std[ch];
        y[i] = gamma.data()[ch] * xhat[i] + beta.data()[ch];
    }
    Ok((
        Tensor::new(x.shape().to_vec(), y)?,
        BnCache {
            xhat,
            inv_std,
            mean,
            var,
        },
    ))
}

pub(crate) fn bn_forward_eval(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &Tensor,
    var: &Tensor,
) -> Result<Tensor> {
    let (_, c, s) = bn_dims(x.shape());
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = (i / s) % c;
            gamma.data()[ch] * (v - mean.data()[ch]) / (var.data()[ch] + BN_EPS).sqrt()
                + beta.data()[ch]
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Per-channel `sum(dy)` and `sum(dy * xhat)`; these are also the beta and
/// gamma gradients.
pub(crate) fn bn_channel_sums(
    shape: &[usize],
    dy: impl Fn(usize) -> f64,
    xhat: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (b, c, s) = bn_dims(shape);
    let mut sum_dy = vec![0.0; c];
    let mut sum_dyx = vec![0.0; c];
    for bi in 0..b {
        for ch in 0..c {
            let base = (bi * c + ch) * s;
            for (i, &xh) in xhat[base..base + s].iter().enumerate() {
                let g = dy(base + i);
                sum_dy[ch] += g;
                sum_dyx[ch] += g * xh;
            }
        }
    }
    (sum_dy, sum_dyx)
}

#[inline]
pub(crate) fn bn_dx(dy: f64, xhat: f64, gamma: f64, inv_std: f64, sum_dy: f64, sum_dyx: f64, m: f64) -> f64 {
    gamma * inv_std / m * (m * dy - sum_dy - xhat * sum_dyx)
}

/// Mean softmax cross-entropy over the batch and its gradient.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} for {} labels",
            s,
            labels.len()
        )));
    }
    let (b, k) = (s[0], s[1]);
    let mut grad = vec![0.0; b * k];
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(Error::ShapeMismatch(format!("label {label} >= {k} classes")));
        }
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += z.ln() + max - row[label];
        for j in 0..k {
            let p = (row[j] - max).exp() / z;
            grad[i * k + j] = (p - (j == label) as u8 as f64) / b as f64;
        }
    }
    Ok((loss / b.max(1) as f64, Tensor::new(s.to_vec(), grad)?))
}
