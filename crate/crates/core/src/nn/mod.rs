//! Dense numeric kernels for the two-layer GCN: parameters, forward and
//! reverse passes, losses and local training.

mod gcn;
mod loss;
mod params;
mod train;

pub use gcn::{
    add_weight_decay, backward_from_logits, gcn_backward, gcn_forward, gcn_logits, weight_penalty,
    Dropout, ForwardCache,
};
pub use loss::{
    cross_entropy_logit_grad, log_prob_of_label, log_softmax_row, masked_cross_entropy,
    per_node_cross_entropy, predictions, softmax,
};
pub use params::{read_params, write_params, GcnParams, GcnShape, ParamVector, PARAM_LAYOUT_VERSION};
pub use train::{local_train, LocalUpdate, OptimizerKind, TrainConfig};
