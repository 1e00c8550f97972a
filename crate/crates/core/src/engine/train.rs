use std::collections::VecDeque;
use std::time::{Duration, Instant};

use rand::Rng;

use super::checkpoint::Checkpoint;
use super::config::TrainConfig;
use super::Model;
use crate::datagen::{dataset_rng, to_labeled_set, Generator};
use crate::error::{Error, Result};
use crate::filtering::FilterKind;
use crate::tensor::{Adam, AdamConfig, Graph, ParamGrads};

/// Steps averaged into the running loss.
pub const LOSS_WINDOW: usize = 10;

/// Mixed into the seed for training data so it never coincides with evaluation streams.
const TRAIN_DATA_SALT: u64 = 0x7472_6169_6e00_0001;
/// Mixed into the seed for training-time anchor draws.
const ANCHOR_SALT: u64 = 0x616e_6368_6f72_0001;

/// Progress report handed to the training callback after every step.
#[derive(Clone, Debug)]
pub struct StepLog {
    /// 1-based step that just finished.
    pub step: usize,
    pub loss: f64,
    /// Mean loss over the last [`LOSS_WINDOW`] steps.
    pub running: f64,
    pub grad_norm: f64,
    pub elapsed: Duration,
}

/// Trains from scratch with the given configuration.
pub fn train(config: TrainConfig) -> Result<Checkpoint> {
    train_with(config, |_, _| Ok(()))
}

/// Trains from scratch, calling `on_step` after every optimizer update.
///
/// Each step draws a batch of datasets sharing one size, splits it into
/// micro-batches whose gradients are accumulated, and applies one Adam update.
pub fn train_with<F>(config: TrainConfig, mut on_step: F) -> Result<Checkpoint>
where
    F: FnMut(&StepLog, &Checkpoint) -> Result<()>,
{
    let mut ckpt = Checkpoint::init(config.clone())?;
    let generator = Generator::new(config.kind, config.n_max, config.k_max)?;
    let mut adam = Adam::new(AdamConfig { lr: config.lr, ..AdamConfig::default() }, &ckpt.store);
    let mut window = VecDeque::with_capacity(LOSS_WINDOW);
    let start = Instant::now();

    for step in 0..config.steps {
        let batch = generator.training_batch(config.seed ^ TRAIN_DATA_SALT, step as u64, config.batch);
        let mut anchor_rng = dataset_rng(config.seed ^ ANCHOR_SALT, step as u64);
        let mut grads = ParamGrads::zeros_like(&ckpt.store);
        let mut loss = 0.0;
        for chunk in batch.chunks(config.micro_batch) {
            let data = to_labeled_set::<f32>(chunk)?;
            let mut g = Graph::new(&ckpt.store);
            let value = match &ckpt.model {
                Model::Filter(m) if m.kind() == FilterKind::Af => {
                    let anchors: Vec<usize> = chunk.iter().map(|d| anchor_rng.random_range(0..d.len())).collect();
                    let out = m.forward(&mut g, &data.points, Some(&anchors))?;
                    m.af_loss(&mut g, out, &data, &anchors)?
                }
                Model::Filter(m) => {
                    let out = m.forward(&mut g, &data.points, None)?;
                    m.mlf_loss(&mut g, out, &data)?
                }
                Model::ActSt(m) => {
                    let steps = m.forward(&mut g, &data.points, config.k_max)?;
                    m.loss(&mut g, &steps, &data)?
                }
            };
            let weight = chunk.len() as f64 / batch.len() as f64;
            loss += weight * g.value(value).item() as f64;
            grads.add_scaled(&g.param_grads(value)?, weight as f32);
        }
        if !loss.is_finite() || !grads.all_finite() {
            return Err(non_finite(step + 1, loss, &config));
        }
        adam.step(&mut ckpt.store, &grads)?;
        ckpt.steps_completed = step + 1;

        if window.len() == LOSS_WINDOW {
            window.pop_front();
        }
        window.push_back(loss);
        let log = StepLog {
            step: step + 1,
            loss,
            running: window.iter().sum::<f64>() / window.len() as f64,
            grad_norm: grads.global_norm() as f64,
            elapsed: start.elapsed(),
        };
        on_step(&log, &ckpt)?;
    }
    Ok(ckpt)
}

fn non_finite(step: usize, loss: f64, config: &TrainConfig) -> Error {
    let dump = serde_json::to_string(config).unwrap_or_else(|_| format!("{config:?}"));
    Error::Numeric(format!("non-finite loss or gradient at step {step} (loss {loss}); config {dump}"))
}

