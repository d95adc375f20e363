//! `eval`: accuracy of a checkpoint on the test split.

use std::path::Path;

use lobit_core::engine::{evaluate, Checkpoint, TrainState};

use crate::dataset::{load_dataset, DatasetSpec};
use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub loss: f64,
    pub accuracy: f64,
    pub samples: usize,
}

pub fn cmd_eval(
    checkpoint: &Path,
    data: &DatasetSpec,
    resize: Option<usize>,
    batch_size: usize,
) -> Result<EvalReport> {
    let state = TrainState::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let (_, test) = load_dataset(data, resize)?;
    let [c, h, w] = state.network.input_shape();
    if test.input_shape() != [c, h, w] {
        return Err(CliError::Config(format!(
            "checkpoint expects {c}x{h}x{w} inputs, data has {:?}",
            test.input_shape()
        )));
    }
    if test.classes > state.network.classes() {
        return Err(CliError::Config(format!(
            "data has {} classes, checkpoint {}",
            test.classes,
            state.network.classes()
        )));
    }
    let (loss, accuracy) = evaluate(&state.network, &test.images, &test.labels, batch_size)?;
    Ok(EvalReport {
        loss,
        accuracy,
        samples: test.len(),
    })
}
