//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! Everything trains in 64-bit by default: desk scale makes that affordable
//! and it keeps finite-difference checks tight.

pub mod checking;
pub mod checkpoint;
pub mod graph;
pub mod optim;
pub mod tensor;

pub use checking::{grad_check, GradCheckReport};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError, CHECKPOINT_MAGIC};
pub use graph::{log_sum_exp, sigmoid, softmax_rows, GradientMap, Graph, GraphError, NodeId, Op, ParamSet};
pub use optim::{sgd_adamw_step, AdamWHyper, AdamWState};
pub use tensor::{Tensor, TensorError};

/// Scaled dot-product attention composed from primitive ops, so gradients
/// and attention probabilities are both first-class graph values.
///
/// `mask` (if any) is added to the raw scores; shape [heads*n x m].
/// Returns (context [n x d], probs [heads*n x m]).
pub fn scaled_dot_attention(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    heads: usize,
    mask: Option<NodeId>,
) -> Result<(NodeId, NodeId), GraphError> {
    let mut scores = g.apply(Op::AttnScores { q, k, heads })?;
    if let Some(m) = mask {
        scores = g.apply(Op::Add(scores, m))?;
    }
    let probs = g.apply(Op::SoftmaxRows(scores))?;
    let ctx = g.apply(Op::AttnContext { probs, v, heads })?;
    Ok((ctx, probs))
}
