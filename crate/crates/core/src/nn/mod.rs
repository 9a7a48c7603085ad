//! Minimal numeric core: the layer set of the split model, exact reverse-mode
//! gradients, SGD and a finite-difference gradient checker.

mod gradcheck;
mod layers;
mod network;
mod ops;

pub use gradcheck::{grad_check, grad_check_with, relative_error, sample_coordinates, GradReport, FLOOR_GUARD};
pub use layers::{infer_shapes, param_dims, ActShape, Conv2dSpec, LayerSpec, Padding, NUM_CLASSES};
pub use network::{
    backward, backward_from_logit_grad, check_params, forward, init_params, loss_and_grad,
    loss_only, loss_softmax_ce, params_fingerprint, sgd_step, sgd_step_in_place,
    softmax_ce_with_grad, Batch, ForwardCache, Objective,
};
pub use ops::frame_diff;
