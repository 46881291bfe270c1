use std::io::Write;
use std::time::{Duration, Instant};

use ndarray::{Array2, Axis};
use rand::seq::index;
use serde::{Deserialize, Serialize};

use super::baselines::{lb_aux_loss, lb_aux_loss_grad, z_loss, z_loss_grad, Regularizer};
use super::{combine, moe_backward, moe_forward, score_grads_into, MoEBlock, SyntheticTask, TokenBatch};
use crate::analysis::{load_stats, LoadStats};
use crate::routing::{ssr_route, Branch, Mode, RouterConfig};
use crate::{seeded_rng, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub steps: usize,
    pub learning_rate: f64,
    pub regularizer: Regularizer,
    /// Weight of the regularizer in the total loss.
    pub coefficient: f64,
    /// Tokens sampled (without replacement) per step; the whole task when at
    /// least the task size.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 0.1,
            regularizer: Regularizer::None,
            coefficient: 0.0,
            batch_size: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRecord {
    pub step: usize,
    /// Mean squared error of the batch.
    pub loss: f64,
    /// Unweighted regularizer value (0 without one).
    pub aux_loss: f64,
    pub branch: Branch,
    pub load: LoadStats,
    #[serde(skip)]
    pub wall_time: Duration,
}

/// Mean squared error and its gradient with respect to the outputs.
fn mse(outputs: &Array2<f64>, targets: &Array2<f64>) -> (f64, Array2<f64>) {
    let diff = outputs - targets;
    let count = diff.len() as f64;
    let loss = diff.mapv(|v| v * v).sum() / count;
    (loss, diff * (2.0 / count))
}

fn sample_batch(task: &SyntheticTask, size: usize, rng: &mut crate::SeededRng) -> Result<TokenBatch> {
    let total = task.batch.len();
    if size >= total {
        return Ok(task.batch.clone());
    }
    let idx = index::sample(rng, total, size).into_vec();
    let targets = task.batch.targets.as_ref().map(|t| t.select(Axis(0), &idx));
    TokenBatch::new(task.batch.x.select(Axis(0), &idx), targets)
}

/// Plain SGD on MSE plus `coefficient * regularizer`. Calls `observer` after
/// every step. Fails on the first non-finite loss or parameter, or on a
/// router error.
pub fn train_observed(
    block: &mut MoEBlock,
    task: &SyntheticTask,
    options: &TrainOptions,
    mut observer: impl FnMut(&TrainRecord),
) -> Result<Vec<TrainRecord>> {
    if options.steps == 0 || !(options.learning_rate >= 0.0) || options.batch_size == 0 {
        return Err(Error::invalid("need steps >= 1, learning_rate >= 0, batch_size >= 1"));
    }
    if options.regularizer == Regularizer::NoisyGating && block.noise_gate.is_none() {
        block.noise_gate = Some(Array2::zeros(block.gate.raw_dim()));
    }
    let mut rng = seeded_rng(options.seed);
    let mut records = Vec::with_capacity(options.steps);
    let n = block.expert_count();

    for step in 0..options.steps {
        let start = Instant::now();
        let batch = sample_batch(task, options.batch_size, &mut rng)?;
        let targets = batch
            .targets
            .as_ref()
            .ok_or_else(|| Error::invalid("training batch has no targets"))?;
        let forward = moe_forward(block, &batch, &mut rng)?;
        let (loss, upstream) = mse(&forward.outputs, targets);
        let mut grads = moe_backward(block, &batch, &forward, &upstream)?;

        let aux_loss = match options.regularizer {
            Regularizer::None => 0.0,
            Regularizer::LbLoss | Regularizer::NoisyGating => {
                let g = lb_aux_loss_grad(&forward.decision, &forward.routed_scores) * options.coefficient;
                score_grads_into(block, &batch, &forward, &g, &mut grads)?;
                lb_aux_loss(&forward.decision, &forward.routed_scores)
            }
            Regularizer::ZLoss => {
                let g = z_loss_grad(&forward.routed_scores) * options.coefficient;
                score_grads_into(block, &batch, &forward, &g, &mut grads)?;
                z_loss(&forward.routed_scores)
            }
        };
        if !(loss.is_finite() && aux_loss.is_finite()) {
            return Err(Error::NonFiniteLoss { step });
        }

        for (p, g) in block.parameters_mut().zip(grads.slices()) {
            p.iter_mut().zip(g).for_each(|(p, g)| *p -= options.learning_rate * g);
        }
        if !block.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }

        let record = TrainRecord {
            step,
            loss,
            aux_loss,
            branch: forward.decision.branch,
            load: load_stats(&forward.decision, n),
            wall_time: start.elapsed(),
        };
        observer(&record);
        records.push(record);
    }
    Ok(records)
}

pub fn train(block: &mut MoEBlock, task: &SyntheticTask, options: &TrainOptions) -> Result<Vec<TrainRecord>> {
    train_observed(block, task, options, |_| {})
}

/// Inference-mode loss and expert load over a whole task.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub loss: f64,
    pub load: LoadStats,
}

/// Routes the full task with plain softmax gating (inference mode, no gating
/// noise) and reports MSE and load.
pub fn evaluate(block: &MoEBlock, task: &SyntheticTask) -> Result<Evaluation> {
    let config = RouterConfig {
        mode: Mode::Inference,
        branch_override: None,
        ..block.config.clone()
    };
    let scores = block.scores(&task.batch.x)?;
    let decision = ssr_route(&scores, &config, &mut seeded_rng(0))?;
    let outputs = combine(block, &task.batch.x, &decision)?;
    let targets = task
        .batch
        .targets
        .as_ref()
        .ok_or_else(|| Error::invalid("task has no targets"))?;
    Ok(Evaluation {
        loss: mse(&outputs, targets).0,
        load: load_stats(&decision, block.expert_count()),
    })
}

pub const RECORD_CSV_HEADER: [&str; 7] = [
    "step",
    "loss",
    "aux_loss",
    "branch",
    "load_entropy",
    "load_cv",
    "step_ms",
];

/// Streams records as CSV. Load columns use the top-k assignment.
pub struct RecordWriter<W: Write> {
    csv: csv::Writer<W>,
}

impl<W: Write> RecordWriter<W> {
    pub fn new(writer: W) -> Result<Self> {
        let mut csv = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(writer);
        csv.write_record(RECORD_CSV_HEADER)
            .map_err(|e| Error::Parse(e.to_string()))?;
        Ok(Self { csv })
    }

    pub fn write(&mut self, r: &TrainRecord) -> Result<()> {
        self.csv
            .write_record([
                r.step.to_string(),
                r.loss.to_string(),
                r.aux_loss.to_string(),
                r.branch.to_string(),
                r.load.topk_entropy.to_string(),
                r.load.topk_cv.to_string(),
                format!("{:.6}", r.wall_time.as_secs_f64() * 1e3),
            ])
            .map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn finish(mut self) -> Result<W> {
        self.csv.flush()?;
        self.csv.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}
