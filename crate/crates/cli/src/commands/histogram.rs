//! `histogram`: value distribution of one layer's quantized weights,
//! activations or gradients, written as CSV `bin_low,bin_high,count`.
//!
//! Activations are the values a layer passes to the next one (after
//! pooling), evaluated on the first `batch` test samples. Gradients are the
//! quantized gradients of the layer output from one training-mode pass over
//! the first `batch` training samples, using the checkpoint's noise seed
//! and step.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use lobit_core::engine::{softmax_cross_entropy, BackwardOptions, Checkpoint, Mode, TrainState};

use crate::dataset::{load_dataset, DatasetSpec};
use crate::error::{CliError, Result};

pub const HISTOGRAM_HEADER: &str = "bin_low,bin_high,count";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Quantity {
    Weights,
    Activations,
    Gradients,
}

impl FromStr for Quantity {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weights" => Ok(Quantity::Weights),
            "activations" => Ok(Quantity::Activations),
            "gradients" => Ok(Quantity::Gradients),
            _ => Err(CliError::Config(format!(
                "unknown quantity '{s}' (weights, activations, gradients)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    /// `bins + 1` ascending edges; empty when there were no values.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Equal-width bins over `[min, max]`; the last bin is closed. A single
    /// distinct value gets one zero-width bin.
    pub fn from_values(values: &[f64], bins: usize) -> Self {
        if values.is_empty() || bins == 0 {
            return Self { edges: Vec::new(), counts: Vec::new() };
        }
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if lo == hi {
            return Self { edges: vec![lo, hi], counts: vec![values.len() as u64] };
        }
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins)
            .map(|i| if i == bins { hi } else { lo + width * i as f64 })
            .collect();
        let mut counts = vec![0u64; bins];
        for &v in values {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        Self { edges, counts }
    }

    pub fn nonzero_bins(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{HISTOGRAM_HEADER}\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", self.edges[i], self.edges[i + 1], c);
        }
        s
    }
}

/// Raw values for one layer and quantity.
pub fn layer_values(
    state: &TrainState,
    layer: &str,
    what: Quantity,
    data: &DatasetSpec,
    resize: Option<usize>,
    batch: usize,
) -> Result<Vec<f64>> {
    let net = &state.network;
    let names = net.layer_names();
    if !names.iter().any(|n| n == layer) {
        return Err(CliError::Config(format!(
            "unknown layer '{layer}' (available: {})",
            names.join(", ")
        )));
    }
    if what == Quantity::Weights {
        let weights = net.effective_weights()?;
        let (_, w) = weights.into_iter().find(|(n, _)| n == layer).expect("layer exists");
        return Ok(w.into_data());
    }
    if batch == 0 {
        return Ok(Vec::new());
    }
    let (train, test) = load_dataset(data, resize)?;
    if train.input_shape() != net.input_shape() {
        return Err(CliError::Config(format!(
            "checkpoint expects {:?} inputs, data has {:?}",
            net.input_shape(),
            train.input_shape()
        )));
    }
    match what {
        Quantity::Activations => {
            let sample = test.head(batch)?;
            let cache = net.forward(&sample.images, Mode::Eval)?;
            let (_, t) = cache
                .activations
                .into_iter()
                .find(|(n, _)| n == layer)
                .expect("every layer records activations");
            Ok(t.into_data())
        }
        _ => {
            let sample = train.head(batch)?;
            let cache = net.forward(&sample.images, Mode::Train)?;
            let (_, dlogits) = softmax_cross_entropy(&cache.logits, &sample.labels)?;
            let opts = BackwardOptions {
                seed: state.seed,
                step: state.step,
                record_quantized: true,
                ..Default::default()
            };
            let out = net.backward(&cache, &dlogits, &opts)?;
            let (_, g) = out
                .quantized_grads
                .into_iter()
                .find(|(n, _)| n == layer)
                .expect("every layer has a gradient site");
            Ok(g.into_data())
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_histogram(
    checkpoint: &Path,
    layer: &str,
    what: Quantity,
    data: &DatasetSpec,
    resize: Option<usize>,
    batch: usize,
    bins: usize,
    out: &Path,
) -> Result<Histogram> {
    if bins == 0 {
        return Err(CliError::Config("bins must be positive".into()));
    }
    let state = TrainState::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let values = layer_values(&state, layer, what, data, resize, batch)?;
    let hist = Histogram::from_values(&values, bins);
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| CliError::io(parent.display(), e))?;
    }
    fs::write(out, hist.to_csv()).map_err(|e| CliError::io(out.display(), e))?;
    Ok(hist)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_values_fill_the_outer_bins() {
        let h = Histogram::from_values(&[-0.5, 0.5, 0.5, -0.5, 0.5], 16);
        assert_eq!(h.nonzero_bins(), 2);
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[15], 3);
        assert_eq!(h.edges.len(), 17);
    }

    #[test]
    fn degenerate_inputs() {
        let h = Histogram::from_values(&[], 8);
        assert_eq!(h.to_csv(), format!("{HISTOGRAM_HEADER}\n"));
        let one = Histogram::from_values(&[0.25; 4], 8);
        assert_eq!(one.counts, vec![4]);
        assert_eq!(one.to_csv(), format!("{HISTOGRAM_HEADER}\n0.25,0.25,4\n"));
    }

    #[test]
    fn counts_sum_to_input_size() {
        let v: Vec<f64> = (0..1000).map(|i| ((i * 37) % 101) as f64 / 7.0).collect();
        let h = Histogram::from_values(&v, 13);
        assert_eq!(h.counts.iter().sum::<u64>(), 1000);
        assert!(h.edges.windows(2).all(|w| w[0] < w[1]));
    }
}
