//! Per-example gradient extraction.
//!
//! DP training clips each example's (or microbatch's) gradient before
//! aggregation, so gradients must be materialized one record at a time.
//! Records are processed in ascending index order and each contribution is
//! read out of freshly zeroed store slots, which fixes the floating-point
//! reduction order across runs.

use super::graph::{Graph, NodeId};
use super::store::ParamStore;
use super::TensorError;

/// Builds the forward pass for one record on the given graph, reading
/// parameters from the store, and returns the scalar loss node.
pub type LossBuilder<'a> =
    dyn FnMut(&mut Graph, &ParamStore, usize) -> Result<NodeId, TensorError> + 'a;

/// Flattened gradient and loss of each record, in canonical parameter order.
/// The store's gradient slots are used as scratch space and end up zeroed.
pub fn per_example_gradients(
    store: &mut ParamStore,
    batch_len: usize,
    graph_for: &mut dyn FnMut(usize) -> Graph,
    build: &mut LossBuilder,
) -> Result<Vec<(Vec<f64>, f64)>, TensorError> {
    if batch_len == 0 {
        return Err(TensorError::EmptyBatch);
    }
    let mut out = Vec::with_capacity(batch_len);
    for i in 0..batch_len {
        store.zero_grads();
        let mut graph = graph_for(i);
        let loss = build(&mut graph, store, i)?;
        let loss_value = graph.value(loss).item();
        graph.backward(loss, store)?;
        out.push((store.flatten_grads(), loss_value));
    }
    store.zero_grads();
    Ok(out)
}

/// Mean gradient over the batch, plus the mean loss, accumulated in ascending
/// record order. Summing per example and dividing once reproduces exactly the
/// arithmetic of averaging [`per_example_gradients`] output.
pub fn batch_mean_gradient(
    store: &mut ParamStore,
    batch_len: usize,
    graph_for: &mut dyn FnMut(usize) -> Graph,
    build: &mut LossBuilder,
) -> Result<(Vec<f64>, f64), TensorError> {
    if batch_len == 0 {
        return Err(TensorError::EmptyBatch);
    }
    store.zero_grads();
    let mut loss_sum = 0.0;
    for i in 0..batch_len {
        let mut graph = graph_for(i);
        let loss = build(&mut graph, store, i)?;
        loss_sum += graph.value(loss).item();
        graph.backward(loss, store)?;
    }
    // Divides rather than multiplying by a reciprocal so the result is
    // bit-identical to the microbatch path's sum-then-divide at any batch
    // size, not just powers of two.
    let mut mean = store.flatten_grads();
    for g in &mut mean {
        *g /= batch_len as f64;
    }
    store.zero_grads();
    Ok((mean, loss_sum / batch_len as f64))
}
