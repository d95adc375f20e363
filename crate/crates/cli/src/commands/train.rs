//! `train`: Adam training with per-epoch evaluation.
//!
//! Output directory contents:
//!
//! - `config.txt`: the resolved configuration
//! - `metrics.csv`: `epoch,train_loss,eval_accuracy`, one row per epoch
//! - `timing.csv`: `epoch,wall_seconds`, kept apart so metrics stay
//!   byte-reproducible
//! - `best.ckpt`: checkpoint with the highest eval accuracy so far (the
//!   initial weights when `epochs = 0`)
//! - `last.ckpt`: checkpoint after the final epoch

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use lobit_core::engine::{
    evaluate, train_step, AdamConfig, BackwardSchedule, Network, TrainState,
};
use lobit_core::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::dataset::{load_dataset, Dataset};
use crate::error::{CliError, Result};

pub const METRICS_HEADER: &str = "epoch,train_loss,eval_accuracy";
pub const TIMING_HEADER: &str = "epoch,wall_seconds";

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_accuracy: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    /// Eval accuracy after the last epoch (of the initial weights when no
    /// epoch ran).
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub state: TrainState,
}

/// Fresh training state for `cfg` on data of the given shape.
pub fn initial_state(cfg: &RunConfig, input_shape: [usize; 3], classes: usize) -> Result<TrainState> {
    let network = Network::new(&cfg.model, cfg.qconfig()?, input_shape, classes, cfg.seed)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut state = TrainState::new(
        network,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        cfg.seed,
    );
    if cfg.fused_backward {
        state.schedule = BackwardSchedule::Fused;
    }
    Ok(state)
}

fn gather(x: &Tensor, labels: &[usize], idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let inst = x.instance_len();
    let mut data = Vec::with_capacity(idx.len() * inst);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * inst..(i + 1) * inst]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = idx.len();
    Ok((
        Tensor::new(shape, data).map_err(CliError::from)?,
        idx.iter().map(|&i| labels[i]).collect(),
    ))
}

struct Outputs<'a> {
    dir: &'a Path,
    metrics: fs::File,
    timing: fs::File,
}

impl<'a> Outputs<'a> {
    fn create(dir: &'a Path, cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
        let write = |name: &str, text: &str| -> Result<fs::File> {
            let path = dir.join(name);
            let mut f = fs::File::create(&path).map_err(|e| CliError::io(path.display(), e))?;
            f.write_all(text.as_bytes())
                .map_err(|e| CliError::io(path.display(), e))?;
            Ok(f)
        };
        write("config.txt", &cfg.to_text())?;
        Ok(Self {
            dir,
            metrics: write("metrics.csv", &format!("{METRICS_HEADER}\n"))?,
            timing: write("timing.csv", &format!("{TIMING_HEADER}\n"))?,
        })
    }

    fn record(&mut self, r: &EpochRecord) -> Result<()> {
        writeln!(self.metrics, "{},{:.6},{:.6}", r.epoch, r.train_loss, r.eval_accuracy)
            .and_then(|_| writeln!(self.timing, "{},{:.3}", r.epoch, r.wall_seconds))
            .map_err(|e| CliError::io(self.dir.display(), e))
    }

    fn checkpoint(&self, name: &str, state: &TrainState) -> Result<()> {
        state.to_checkpoint().save(&self.dir.join(name)).map_err(CliError::from)
    }
}

/// Trains on `train`, evaluating on `test` after every epoch. Writes the
/// run's files under `out` when given.
pub fn run_training(
    cfg: &RunConfig,
    train: &Dataset,
    test: &Dataset,
    out: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(CliError::Runtime("train and test splits must be nonempty".into()));
    }
    let classes = train.classes.max(test.classes);
    let mut state = initial_state(cfg, train.input_shape(), classes)?;
    let mut outputs = out.map(|d| Outputs::create(d, cfg)).transpose()?;
    let eval = |s: &TrainState| -> Result<f64> {
        Ok(evaluate(&s.network, &test.images, &test.labels, cfg.batch_size.max(64))?.1)
    };

    let mut best = eval(&state)?;
    let mut last = best;
    if let Some(o) = &outputs {
        o.checkpoint("best.ckpt", &state)?;
    }
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = gather(&train.images, &train.labels, chunk)?;
            let loss = train_step(&mut state, &x, &y)
                .map_err(|e| CliError::Runtime(format!("epoch {epoch}: {e}")))?;
            loss_sum += loss * chunk.len() as f64;
        }
        last = eval(&state)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            eval_accuracy: last,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(o) = &mut outputs {
            o.record(&record)?;
            if last > best {
                o.checkpoint("best.ckpt", &state)?;
            }
        }
        best = best.max(last);
        records.push(record);
    }
    if let Some(o) = &outputs {
        o.checkpoint("last.ckpt", &state)?;
    }
    Ok(TrainReport {
        records,
        final_accuracy: last,
        best_accuracy: best,
        state,
    })
}

pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let (train, test) = load_dataset(&cfg.data, cfg.resize)?;
    run_training(cfg, &train, &test, Some(&cfg.out))
}
