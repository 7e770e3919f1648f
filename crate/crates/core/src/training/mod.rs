//! Objective, optimizer, regularization and the training loop.

mod adagrad;
mod dropout;
mod gradcheck;
mod loss;
mod trainer;

pub use adagrad::{adagrad_step, OptimizerState, ADAGRAD_EPS};
pub use dropout::{apply_dropout, dropout_mask};
pub use gradcheck::{
    check_params, gradient_check, objective, random_params, relative_error, GradCheckReport, FD_STEP,
    GRADCHECK_TOLERANCE, REL_ERR_FLOOR,
};
pub use loss::{add_l2_gradient, compute_loss, l2_penalty, negative_log_likelihood, DataLoss};
pub use trainer::{
    batch_gradient, evaluate, evaluation_points, flatten, sentence_gradient, train, BatchGradient, LogEntry, Metrics,
    TrainConfig, TrainOutcome, GRAD_NORM_WARNING,
};
