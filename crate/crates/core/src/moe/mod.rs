//! A desk-scale MoE layer: gating, MLP experts, sparse combination, a
//! hand-derived backward pass, baseline regularizers and SGD training on a
//! clustered regression task.

mod baselines;
mod block;
mod task;
mod train;

pub use baselines::{
    lb_aux_loss, lb_aux_loss_grad, noisy_gating_baseline, z_loss, z_loss_grad, NoisyScores, Regularizer,
};
pub use block::{
    combine, moe_backward, moe_forward, score_grads_into, Expert, ForwardPass, Gradients, MoEBlock, Tensor, TokenBatch,
};
pub use task::{make_synthetic_task, SyntheticTask, TaskSpec};
pub use train::{
    evaluate, train, train_observed, Evaluation, RecordWriter, TrainOptions, TrainRecord, RECORD_CSV_HEADER,
};
