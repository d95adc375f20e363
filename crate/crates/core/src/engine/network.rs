use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{
    bn_channel_sums, bn_dx, bn_forward_eval, bn_forward_train, bounded_activation,
    bounded_activation_mask, conv2d_backward_input, conv2d_backward_weight, conv2d_forward,
    fc_backward_input, fc_backward_weight, fc_forward, maxpool_backward, maxpool_forward, BnCache,
    Codes, ConvGeom, Operand,
};
use super::{LayerSpec, ModelSpec, QConfig};
use crate::bitkernel::AffineCode;
use crate::error::{Error, Result};
use crate::fusion::{build_threshold_table, BoundedFn};
use crate::quant::{
    activation_codes, gradient_codes_with, quantize_instance, weight_quantize,
    weight_quantize_backward, Bits, NoiseSource, Precision, QuantizedTensor,
};
use crate::tensor::Tensor;

/// Batch statistics (training) or running statistics (evaluation) for
/// batchnorm.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub enum NodeKind {
    Conv {
        geom: ConvGeom,
        weight: usize,
        precision: Precision,
    },
    Fc {
        in_features: usize,
        out_features: usize,
        weight: usize,
        bias: usize,
        precision: Precision,
    },
    /// Identity forward; quantizes the incoming gradient on the way back.
    GradQuant { precision: Precision, site: u32 },
    BatchNorm {
        channels: usize,
        gamma: usize,
        beta: usize,
        running_mean: usize,
        running_var: usize,
    },
    BoundedAct,
    ActQuant { bits: Bits },
    MaxPool { window: usize },
}

/// One step of the linear chain. `layer` names the conv/fc block the node
/// belongs to (`conv1`, ..., `fc`).
#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub layer: String,
    pub kind: NodeKind,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BackwardSchedule {
    /// Materialize every intermediate gradient.
    #[default]
    Unfused,
    /// Clamp mask, batchnorm backward and gradient quantization run one
    /// instance tile at a time, so the full-precision gradient of the conv
    /// output is never stored.
    Fused,
}

/// Noise addressing and scheduling for one backward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BackwardOptions {
    pub seed: u64,
    pub step: u64,
    pub schedule: BackwardSchedule,
    /// Keep a copy of every quantized conv/fc output gradient.
    pub record_quantized: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackwardOutput {
    /// Gradients aligned with [`Network::params`].
    pub grads: Vec<Tensor>,
    /// `(layer, quantized gradient)` in backward order, when requested.
    pub quantized_grads: Vec<(String, Tensor)>,
    /// Backward products that took the bit-plane path.
    pub bit_products: usize,
}

#[derive(Clone, Debug)]
enum NodeCache {
    Conv { input: Operand, weight: Operand },
    Fc { input: Operand, weight: Operand, input_shape: Vec<usize> },
    Pass,
    BatchNorm(Option<BnCache>),
    BoundedAct(Vec<bool>),
    MaxPool { argmax: Vec<usize>, input_shape: Vec<usize> },
}

/// Everything the backward pass needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub logits: Tensor,
    pub mode: Mode,
    entries: Vec<NodeCache>,
    /// `(layer, activation fed to the next layer)`; for `fc` the logits.
    pub activations: Vec<(String, Tensor)>,
    /// Products that took the bit-plane path.
    pub bit_products: usize,
}

impl ForwardCache {
    /// Per-channel batch `(mean, variance)` of each batchnorm node, in node
    /// order; empty in eval mode.
    pub(crate) fn batch_stats(&self) -> Vec<(&[f64], &[f64])> {
        self.entries
            .iter()
            .filter_map(|e| match e {
                NodeCache::BatchNorm(Some(c)) => Some((c.mean.as_slice(), c.var.as_slice())),
                _ => None,
            })
            .collect()
    }
}

/// A linear chain of nodes plus its parameters and batchnorm buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    spec: ModelSpec,
    qconfig: QConfig,
    input_shape: [usize; 3],
    classes: usize,
    nodes: Vec<Node>,
    params: Vec<(String, Tensor)>,
    buffers: Vec<(String, Tensor)>,
}

fn push_param(params: &mut Vec<(String, Tensor)>, name: String, t: Tensor) -> usize {
    params.push((name, t));
    params.len() - 1
}

fn uniform_init(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let bound = (3.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
    .expect("shape product")
}

impl Network {
    /// Builds the node chain for `spec` on `[C, H, W]` inputs with random
    /// master weights drawn from `seed`.
    pub fn new(
        spec: &ModelSpec,
        qconfig: QConfig,
        input_shape: [usize; 3],
        classes: usize,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        if input_shape.contains(&0) || classes == 0 {
            return Err(Error::InvalidModel(format!(
                "input shape {input_shape:?} with {classes} classes"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut nodes = Vec::new();
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        let [mut c, mut h, mut w] = input_shape;
        let mut conv_index = 0;
        let mut site = 0u32;
        for (li, layer) in spec.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                } => {
                    conv_index += 1;
                    let name = format!("conv{conv_index}");
                    let exempt = conv_index == 1 && !qconfig.quantize_first;
                    let geom = ConvGeom {
                        in_channels: c,
                        height: h,
                        width: w,
                        out_channels,
                        kernel,
                    };
                    let weight = push_param(
                        &mut params,
                        format!("{name}.weight"),
                        uniform_init(&geom.weight_shape(), geom.patch_len(), &mut rng),
                    );
                    let gamma = push_param(
                        &mut params,
                        format!("{name}.bn.gamma"),
                        Tensor::full(&[out_channels], 1.0),
                    );
                    let beta = push_param(
                        &mut params,
                        format!("{name}.bn.beta"),
                        Tensor::zeros(&[out_channels]),
                    );
                    let running_mean = push_param(
                        &mut buffers,
                        format!("{name}.bn.running_mean"),
                        Tensor::zeros(&[out_channels]),
                    );
                    let running_var = push_param(
                        &mut buffers,
                        format!("{name}.bn.running_var"),
                        Tensor::full(&[out_channels], 1.0),
                    );
                    let node = |kind| Node {
                        layer: name.clone(),
                        kind,
                    };
                    let precision = if exempt { Precision::Full } else { qconfig.weights };
                    nodes.push(node(NodeKind::Conv {
                        geom,
                        weight,
                        precision,
                    }));
                    nodes.push(node(NodeKind::GradQuant {
                        precision: if exempt { Precision::Full } else { qconfig.gradients },
                        site,
                    }));
                    site += 1;
                    nodes.push(node(NodeKind::BatchNorm {
                        channels: out_channels,
                        gamma,
                        beta,
                        running_mean,
                        running_var,
                    }));
                    nodes.push(node(NodeKind::BoundedAct));
                    let feeds_fc = spec.layers[li + 1..]
                        .iter()
                        .find(|l| !matches!(l, LayerSpec::Pool { .. }))
                        == Some(&LayerSpec::Fc);
                    if let Some(bits) = qconfig.activations.bits() {
                        if !feeds_fc || qconfig.quantize_last {
                            nodes.push(node(NodeKind::ActQuant { bits }));
                        }
                    }
                    c = out_channels;
                }
                LayerSpec::Pool { window } => {
                    if window > h || window > w {
                        return Err(Error::InvalidModel(format!(
                            "pool window {window} larger than {h}x{w} feature map"
                        )));
                    }
                    let layer = nodes.last().map(|n: &Node| n.layer.clone()).unwrap_or_default();
                    nodes.push(Node {
                        layer,
                        kind: NodeKind::MaxPool { window },
                    });
                    h /= window;
                    w /= window;
                }
                LayerSpec::Fc => {
                    let in_features = c * h * w;
                    let weight = push_param(
                        &mut params,
                        "fc.weight".into(),
                        uniform_init(&[classes, in_features], in_features, &mut rng),
                    );
                    let bias = push_param(&mut params, "fc.bias".into(), Tensor::zeros(&[classes]));
                    let precision = if qconfig.quantize_last {
                        qconfig.weights
                    } else {
                        Precision::Full
                    };
                    nodes.push(Node {
                        layer: "fc".into(),
                        kind: NodeKind::Fc {
                            in_features,
                            out_features: classes,
                            weight,
                            bias,
                            precision,
                        },
                    });
                    nodes.push(Node {
                        layer: "fc".into(),
                        kind: NodeKind::GradQuant {
                            precision: qconfig.gradients,
                            site,
                        },
                    });
                    site += 1;
                }
            }
        }
        Ok(Self {
            spec: spec.clone(),
            qconfig,
            input_shape,
            classes,
            nodes,
            params,
            buffers,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn qconfig(&self) -> QConfig {
        self.qconfig
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn buffers(&self) -> &[(String, Tensor)] {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn buffer(&self, name: &str) -> Option<&Tensor> {
        self.buffers.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Replaces a parameter or buffer by name, keeping its shape.
    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .iter_mut()
            .chain(self.buffers.iter_mut())
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::InvalidModel(format!("no tensor named {name}")))?;
        slot.same_shape(&value)?;
        *slot = value;
        Ok(())
    }

    /// Blends batch statistics into the running batchnorm buffers, one
    /// `(mean, var)` pair per batchnorm node in order.
    pub(crate) fn update_running_stats(&mut self, stats: &[(Vec<f64>, Vec<f64>)], momentum: f64) -> Result<()> {
        let slots: Vec<(usize, usize)> = self
            .nodes
            .iter()
            .filter_map(|n| match n.kind {
                NodeKind::BatchNorm { running_mean, running_var, .. } => Some((running_mean, running_var)),
                _ => None,
            })
            .collect();
        if slots.len() != stats.len() {
            return Err(Error::CacheMismatch(format!(
                "{} batch statistics for {} batchnorm nodes",
                stats.len(),
                slots.len()
            )));
        }
        for ((mi, vi), (mean, var)) in slots.into_iter().zip(stats) {
            for (r, b) in self.buffers[mi].1.data_mut().iter_mut().zip(mean) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
            for (r, b) in self.buffers[vi].1.data_mut().iter_mut().zip(var) {
                *r = momentum * *r + (1.0 - momentum) * b;
            }
        }
        Ok(())
    }

    /// Layer names in forward order: `conv1..convN`, `fc`.
    pub fn layer_names(&self) -> Vec<String> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.kind, NodeKind::Conv { .. } | NodeKind::Fc { .. }))
            .map(|n| n.layer.clone())
            .collect()
    }

    /// `spec;input=CxHxW;classes=K`, enough to rebuild the topology.
    pub fn describe(&self) -> String {
        let [c, h, w] = self.input_shape;
        format!("{};input={c}x{h}x{w};classes={}", self.spec, self.classes)
    }

    /// Inverse of [`describe`](Self::describe); parameters are freshly
    /// initialized.
    pub fn from_description(desc: &str, qconfig: QConfig) -> Result<Self> {
        let bad = || Error::InvalidModel(format!("bad model description '{desc}'"));
        let mut parts = desc.split(';');
        let spec: ModelSpec = parts.next().ok_or_else(bad)?.parse()?;
        let mut input = None;
        let mut classes = None;
        for p in parts {
            match p.split_once('=') {
                Some(("input", v)) => {
                    let dims: Vec<usize> = v
                        .split('x')
                        .map(|d| d.parse().map_err(|_| bad()))
                        .collect::<Result<_>>()?;
                    input = Some(<[usize; 3]>::try_from(dims).map_err(|_| bad())?);
                }
                Some(("classes", v)) => classes = Some(v.parse().map_err(|_| bad())?),
                _ => return Err(bad()),
            }
        }
        Network::new(
            &spec,
            qconfig,
            input.ok_or_else(bad)?,
            classes.ok_or_else(bad)?,
            0,
        )
    }

    /// Weights as the forward pass sees them, per conv/fc layer.
    pub fn effective_weights(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let NodeKind::Conv { weight, precision, .. } | NodeKind::Fc { weight, precision, .. } =
                node.kind
            {
                out.push((node.layer.clone(), self.weight_operand(weight, precision)?.values));
            }
        }
        Ok(out)
    }

    fn weight_operand(&self, index: usize, precision: Precision) -> Result<Operand> {
        let w = &self.params[index].1;
        Ok(match weight_quantize(w, precision)? {
            Some(q) => Operand::quantized(q),
            None => Operand::float(w.clone()),
        })
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[0] == 0 || s[1..] != self.input_shape {
            return Err(Error::ShapeMismatch(format!(
                "input {:?} vs expected [B, {}, {}, {}]",
                s, self.input_shape[0], self.input_shape[1], self.input_shape[2]
            )));
        }
        x.check_finite("network input")
    }

    /// Runs the chain and keeps what backward needs.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<ForwardCache> {
        self.run(x, mode, false)
    }

    /// Evaluation-mode logits with the clamp and activation quantizer fused
    /// into a threshold lookup. Equal to `forward(x, Mode::Eval).logits`.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, Mode::Eval, true).map(|c| c.logits)
    }

    fn run(&self, x: &Tensor, mode: Mode, fuse: bool) -> Result<ForwardCache> {
        self.check_input(x)?;
        let mut cur = Operand::float(x.clone());
        let mut entries = Vec::with_capacity(self.nodes.len());
        let mut activations = Vec::new();
        let mut bit_products = 0;
        let mut skip = false;
        for (i, node) in self.nodes.iter().enumerate() {
            if skip {
                skip = false;
                entries.push(NodeCache::Pass);
                continue;
            }
            let entry = match &node.kind {
                NodeKind::Conv {
                    geom,
                    weight,
                    precision,
                } => {
                    let w = self.weight_operand(*weight, *precision)?;
                    if w.is_quantized() && cur.is_quantized() {
                        bit_products += 1;
                    }
                    let y = conv2d_forward(&cur, &w, geom)?;
                    y.check_finite(&node.layer)?;
                    let input = std::mem::replace(&mut cur, Operand::float(y));
                    NodeCache::Conv { input, weight: w }
                }
                NodeKind::Fc {
                    in_features,
                    weight,
                    bias,
                    precision,
                    ..
                } => {
                    let w = self.weight_operand(*weight, *precision)?;
                    let input_shape = cur.shape().to_vec();
                    let batch = input_shape[0];
                    let mut input = std::mem::replace(&mut cur, Operand::float(Tensor::zeros(&[0])));
                    input.values = input.values.reshape(&[batch, *in_features])?;
                    if !w.is_quantized() {
                        input.codes = None;
                    }
                    if w.is_quantized() && input.is_quantized() {
                        bit_products += 1;
                    }
                    let y = fc_forward(&input, &w, &self.params[*bias].1)?;
                    y.check_finite(&node.layer)?;
                    activations.push((node.layer.clone(), y.clone()));
                    cur = Operand::float(y);
                    NodeCache::Fc {
                        input,
                        weight: w,
                        input_shape,
                    }
                }
                NodeKind::GradQuant { .. } => NodeCache::Pass,
                NodeKind::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    ..
                } => {
                    let (g, b) = (&self.params[*gamma].1, &self.params[*beta].1);
                    match mode {
                        Mode::Train => {
                            let (y, c) = bn_forward_train(&cur.values, g, b)?;
                            cur = Operand::float(y);
                            NodeCache::BatchNorm(Some(c))
                        }
                        Mode::Eval => {
                            let y = bn_forward_eval(
                                &cur.values,
                                g,
                                b,
                                &self.buffers[*running_mean].1,
                                &self.buffers[*running_var].1,
                            )?;
                            cur = Operand::float(y);
                            NodeCache::BatchNorm(None)
                        }
                    }
                }
                NodeKind::BoundedAct => {
                    let next = self.nodes.get(i + 1).map(|n| &n.kind);
                    if let (true, Some(NodeKind::ActQuant { bits })) = (fuse, next) {
                        cur = fused_quantize(&cur.values, *bits)?;
                        skip = true;
                        activations.push((node.layer.clone(), cur.values.clone()));
                        NodeCache::Pass
                    } else {
                        let mask = bounded_activation_mask(&cur.values);
                        cur = Operand::float(bounded_activation(&cur.values));
                        if !matches!(next, Some(NodeKind::ActQuant { .. })) {
                            activations.push((node.layer.clone(), cur.values.clone()));
                        }
                        NodeCache::BoundedAct(mask)
                    }
                }
                NodeKind::ActQuant { bits } => {
                    cur = Operand::quantized(activation_codes(&cur.values, *bits)?);
                    activations.push((node.layer.clone(), cur.values.clone()));
                    NodeCache::Pass
                }
                NodeKind::MaxPool { window } => {
                    let input_shape = cur.shape().to_vec();
                    let (y, argmax) = maxpool_forward(&cur, *window)?;
                    cur = y;
                    if let Some(last) = activations.last_mut() {
                        last.1 = cur.values.clone();
                    }
                    NodeCache::MaxPool {
                        argmax,
                        input_shape,
                    }
                }
            };
            entries.push(entry);
        }
        Ok(ForwardCache {
            logits: cur.values,
            mode,
            entries,
            activations,
            bit_products,
        })
    }

    /// Reverse pass from `dlogits`. Every conv/fc output gradient passes
    /// through its gradient quantizer once; that single draw feeds both the
    /// input-gradient and the weight-gradient products.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &Tensor,
        opts: &BackwardOptions,
    ) -> Result<BackwardOutput> {
        if cache.entries.len() != self.nodes.len() {
            return Err(Error::CacheMismatch(format!(
                "{} cache entries for {} nodes",
                cache.entries.len(),
                self.nodes.len()
            )));
        }
        if cache.mode != Mode::Train {
            return Err(Error::CacheMismatch("backward needs a training-mode forward".into()));
        }
        cache.logits.same_shape(dlogits)?;
        dlogits.check_finite("loss gradient")?;

        let mut grads: Vec<Tensor> = self.params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let mut recorded = Vec::new();
        let mut bit_products = 0;
        let mut g = Operand::float(dlogits.clone());
        let mut i = self.nodes.len();
        while i > 0 {
            i -= 1;
            let node = &self.nodes[i];
            match (&node.kind, &cache.entries[i]) {
                (NodeKind::Fc { weight, bias, precision, .. }, NodeCache::Fc { input, weight: wq, input_shape }) => {
                    if g.is_quantized() && input.is_quantized() {
                        bit_products += 1;
                    }
                    let dwq = fc_backward_weight(&g, input)?;
                    grads[*weight] = weight_quantize_backward(&self.params[*weight].1, &dwq, *precision)?;
                    let mut db = vec![0.0; self.params[*bias].1.len()];
                    for row in g.values.data().chunks(db.len().max(1)) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    grads[*bias] = Tensor::vector(db);
                    if i == 0 {
                        break;
                    }
                    if g.is_quantized() && wq.is_quantized() {
                        bit_products += 1;
                    }
                    let dx = fc_backward_input(&g, wq)?.reshape(input_shape)?;
                    g = Operand::float(dx);
                }
                (NodeKind::Conv { geom, weight, precision }, NodeCache::Conv { input, weight: wq }) => {
                    if g.is_quantized() && input.is_quantized() {
                        bit_products += 1;
                    }
                    let dwq = conv2d_backward_weight(&g, input, geom)?;
                    grads[*weight] = weight_quantize_backward(&self.params[*weight].1, &dwq, *precision)?;
                    if i == 0 {
                        break;
                    }
                    if g.is_quantized() && wq.is_quantized() {
                        bit_products += 1;
                    }
                    g = Operand::float(conv2d_backward_input(&g, wq, geom)?);
                }
                (NodeKind::GradQuant { precision, site }, NodeCache::Pass) => {
                    if let Some(bits) = precision.bits() {
                        let mut rng = NoiseSource::for_step(opts.seed, opts.step, *site);
                        let q = gradient_codes_with(&g.values, bits, || rng.uniform_centered())?;
                        if opts.record_quantized {
                            recorded.push((node.layer.clone(), q.values.clone()));
                        }
                        g = Operand::quantized(q);
                    } else if opts.record_quantized {
                        recorded.push((node.layer.clone(), g.values.clone()));
                    }
                }
                (
                    NodeKind::BatchNorm { gamma, beta, channels, .. },
                    NodeCache::BatchNorm(Some(bn)),
                ) => {
                    let shape = g.shape().to_vec();
                    let gd = g.values.data();
                    let (sum_dy, sum_dyx) = bn_channel_sums(&shape, |k| gd[k], &bn.xhat);
                    let m = (g.values.len() / channels) as f64;
                    let s = g.values.instance_len() / channels;
                    let gm = self.params[*gamma].1.data();
                    let dx = (0..gd.len())
                        .map(|k| {
                            let ch = (k / s) % channels;
                            bn_dx(gd[k], bn.xhat[k], gm[ch], bn.inv_std[ch], sum_dy[ch], sum_dyx[ch], m)
                        })
                        .collect();
                    grads[*gamma] = Tensor::vector(sum_dyx);
                    grads[*beta] = Tensor::vector(sum_dy);
                    g = Operand::float(Tensor::new(shape, dx)?);
                }
                (NodeKind::BoundedAct, NodeCache::BoundedAct(mask)) => {
                    let fused = opts.schedule == BackwardSchedule::Fused && i >= 2;
                    let fusable = fused
                        && matches!(
                            (&self.nodes[i - 1].kind, &self.nodes[i - 2].kind),
                            (NodeKind::BatchNorm { .. }, NodeKind::GradQuant { precision: Precision::Bits(_), .. })
                        );
                    if fusable {
                        let (q, gamma_grad, beta_grad) =
                            self.fused_backward(i, cache, &g.values, mask, opts)?;
                        if let NodeKind::BatchNorm { gamma, beta, .. } = self.nodes[i - 1].kind {
                            grads[gamma] = gamma_grad;
                            grads[beta] = beta_grad;
                        }
                        if opts.record_quantized {
                            recorded.push((node.layer.clone(), q.values.clone()));
                        }
                        g = Operand::quantized(q);
                        i -= 2;
                        continue;
                    }
                    let data = g
                        .values
                        .data()
                        .iter()
                        .zip(mask)
                        .map(|(v, &m)| if m { *v } else { 0.0 })
                        .collect();
                    g = Operand::float(Tensor::new(g.shape().to_vec(), data)?);
                }
                (NodeKind::ActQuant { .. }, NodeCache::Pass) => {
                    g = Operand::float(g.values);
                }
                (NodeKind::MaxPool { .. }, NodeCache::MaxPool { argmax, input_shape }) => {
                    g = Operand::float(maxpool_backward(&g.values, argmax, input_shape)?);
                }
                _ => {
                    return Err(Error::CacheMismatch(format!(
                        "node {i} ({}) has a cache of the wrong kind",
                        node.layer
                    )))
                }
            }
        }
        Ok(BackwardOutput {
            grads,
            quantized_grads: recorded,
            bit_products,
        })
    }

    /// Clamp backward, batchnorm backward and gradient quantization for the
    /// nodes `i`, `i - 1`, `i - 2`, one instance at a time. Channel sums are
    /// accumulated in the same order as the unfused path, and every instance
    /// runs through the same quantizer with the same noise stream, so the
    /// result is bit-identical.
    fn fused_backward(
        &self,
        i: usize,
        cache: &ForwardCache,
        upstream: &Tensor,
        mask: &[bool],
        opts: &BackwardOptions,
    ) -> Result<(QuantizedTensor, Tensor, Tensor)> {
        let (NodeKind::BatchNorm { gamma, channels, .. }, NodeCache::BatchNorm(Some(bn))) =
            (&self.nodes[i - 1].kind, &cache.entries[i - 1])
        else {
            return Err(Error::CacheMismatch("fused schedule without batchnorm".into()));
        };
        let NodeKind::GradQuant { precision: Precision::Bits(bits), site } = self.nodes[i - 2].kind else {
            return Err(Error::CacheMismatch("fused schedule without gradient quantizer".into()));
        };
        let shape = upstream.shape().to_vec();
        let up = upstream.data();
        let dy = |k: usize| if mask[k] { up[k] } else { 0.0 };
        let (sum_dy, sum_dyx) = bn_channel_sums(&shape, dy, &bn.xhat);
        let m = (upstream.len() / channels) as f64;
        let inst = upstream.instance_len();
        let s = inst / channels;
        let gm = self.params[*gamma].1.data();

        let mut rng = NoiseSource::for_step(opts.seed, opts.step, site);
        let mut sigma = || rng.uniform_centered();
        let mut codes = vec![0u32; upstream.len()];
        let mut values = vec![0.0; upstream.len()];
        let mut affine: Vec<AffineCode> = Vec::with_capacity(upstream.batch());
        let mut tile = vec![0.0; inst];
        for b in 0..upstream.batch() {
            for (j, t) in tile.iter_mut().enumerate() {
                let k = b * inst + j;
                let ch = j / s;
                *t = bn_dx(dy(k), bn.xhat[k], gm[ch], bn.inv_std[ch], sum_dy[ch], sum_dyx[ch], m);
            }
            let range = b * inst..(b + 1) * inst;
            affine.push(quantize_instance(
                &tile,
                bits,
                &mut sigma,
                &mut codes[range.clone()],
                &mut values[range],
            )?);
        }
        let values = Tensor::new(shape, values)?;
        values.check_finite("gradient")?;
        Ok((
            QuantizedTensor {
                values,
                codes,
                bits,
                affine,
                instance_len: inst,
            },
            Tensor::vector(sum_dyx),
            Tensor::vector(sum_dy),
        ))
    }
}

/// Threshold lookup standing in for clamp followed by activation
/// quantization.
fn fused_quantize(x: &Tensor, bits: Bits) -> Result<Operand> {
    let table = build_threshold_table(&BoundedFn::Clamp, bits)?;
    let n = bits.levels() as f64;
    let codes: Vec<u32> = x.data().iter().map(|&v| table.code(v)).collect();
    let values = Tensor::new(x.shape().to_vec(), codes.iter().map(|&c| c as f64 / n).collect())?;
    let instance_len = values.len().max(1);
    Ok(Operand {
        values,
        codes: Some(Codes {
            codes,
            bits,
            affine: vec![AffineCode::new(1.0 / n, 0.0)?],
            instance_len,
        }),
    })
}
