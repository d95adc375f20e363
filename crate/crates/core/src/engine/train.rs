use super::checkpoint::Checkpoint;
use super::network::{BackwardOptions, BackwardSchedule, Mode, Network};
use super::ops::softmax_cross_entropy;
use super::optim::{adam_update, AdamConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Running-statistics momentum: `running = m * running + (1 - m) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

/// Master weights, optimizer moments and the step counter of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub network: Network,
    pub adam: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Completed optimizer steps.
    pub step: u64,
    /// Seed of the gradient-quantization noise streams.
    pub seed: u64,
    pub schedule: BackwardSchedule,
}

impl TrainState {
    pub fn new(network: Network, adam: AdamConfig, seed: u64) -> Self {
        let zeros = |n: &Network| -> Vec<Tensor> {
            n.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect()
        };
        Self {
            m: zeros(&network),
            v: zeros(&network),
            network,
            adam,
            step: 0,
            seed,
            schedule: BackwardSchedule::Unfused,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            qconfig: self.network.qconfig(),
            step: self.step,
            seed: self.seed,
            lr: self.adam.lr,
            model: self.network.describe(),
            params: self.network.params().to_vec(),
            buffers: self.network.buffers().to_vec(),
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    /// Rebuilds a run from a checkpoint; Adam constants other than the
    /// learning rate take their defaults.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut network = Network::from_description(&ck.model, ck.qconfig)?;
        let expected: Vec<&str> = network
            .params()
            .iter()
            .chain(network.buffers())
            .map(|(n, _)| n.as_str())
            .collect();
        let found: Vec<&str> = ck.params.iter().chain(&ck.buffers).map(|(n, _)| n.as_str()).collect();
        if expected != found {
            return Err(Error::Checkpoint(format!(
                "tensor names {found:?} do not match model {expected:?}"
            )));
        }
        for (name, t) in ck.params.iter().chain(&ck.buffers) {
            network.set_tensor(name, t.clone())?;
        }
        if ck.m.len() != ck.params.len() || ck.v.len() != ck.params.len() {
            return Err(Error::Checkpoint("moment count differs from parameter count".into()));
        }
        for ((p, m), v) in ck.params.iter().zip(&ck.m).zip(&ck.v) {
            p.1.same_shape(m)?;
            p.1.same_shape(v)?;
        }
        Ok(Self {
            network,
            adam: AdamConfig {
                lr: ck.lr,
                ..AdamConfig::default()
            },
            m: ck.m.clone(),
            v: ck.v.clone(),
            step: ck.step,
            seed: ck.seed,
            schedule: BackwardSchedule::Unfused,
        })
    }
}

/// One forward pass, one backward pass and one Adam update. Returns the
/// mini-batch loss before the update.
pub fn train_step(state: &mut TrainState, x: &Tensor, labels: &[usize]) -> Result<f64> {
    let net = &state.network;
    let cache = net.forward(x, Mode::Train)?;
    let (loss, dlogits) = softmax_cross_entropy(&cache.logits, labels)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let opts = BackwardOptions {
        seed: state.seed,
        step: state.step,
        schedule: state.schedule,
        record_quantized: false,
    };
    let out = net.backward(&cache, &dlogits, &opts)?;
    let stats: Vec<(Vec<f64>, Vec<f64>)> = cache
        .batch_stats()
        .into_iter()
        .map(|(m, v)| (m.to_vec(), v.to_vec()))
        .collect();
    drop(cache);

    state.step += 1;
    let t = state.step;
    let adam = state.adam;
    for (((w, g), m), v) in state
        .network
        .params_mut()
        .zip(&out.grads)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        adam_update(w, g, m, v, t, &adam)?;
    }
    state.network.update_running_stats(&stats, BN_MOMENTUM)?;
    Ok(loss)
}

/// Index of the first maximal logit per row.
pub fn predictions(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape().get(1).copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of rows whose first maximal logit is the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Rows `start..end` of a batch-major tensor.
pub fn batch_slice(x: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let inst = x.instance_len();
    if start > end || end > x.batch() {
        return Err(Error::ShapeMismatch(format!(
            "rows {start}..{end} of a batch of {}",
            x.batch()
        )));
    }
    let mut shape = x.shape().to_vec();
    shape[0] = end - start;
    Tensor::new(shape, x.data()[start * inst..end * inst].to_vec())
}

/// Mean loss and accuracy in evaluation mode, `batch_size` rows at a time.
pub fn evaluate(net: &Network, x: &Tensor, labels: &[usize], batch_size: usize) -> Result<(f64, f64)> {
    if x.batch() != labels.len() || labels.is_empty() {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs for {} labels",
            x.batch(),
            labels.len()
        )));
    }
    let bs = batch_size.max(1);
    let (mut loss, mut hits) = (0.0, 0.0);
    for start in (0..labels.len()).step_by(bs) {
        let end = (start + bs).min(labels.len());
        let logits = net.infer(&batch_slice(x, start, end)?)?;
        let l = &labels[start..end];
        loss += softmax_cross_entropy(&logits, l)?.0 * l.len() as f64;
        hits += accuracy(&logits, l) * l.len() as f64;
    }
    let n = labels.len() as f64;
    Ok((loss / n, hits / n))
}
