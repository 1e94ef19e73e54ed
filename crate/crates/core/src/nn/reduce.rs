//! Cross-replica reductions used by batch normalization.
//!
//! A single model instance reduces over its own batch only. Data-parallel
//! replicas pass a collective handle so that batch statistics are computed
//! over the global mini-batch, which keeps sharded training equivalent to
//! serial full-batch training.

/// Element-wise sum of a vector across every participant of a step.
///
/// Every participant must call `all_reduce` the same number of times with
/// equally sized vectors, and must receive bitwise-identical results.
pub trait BatchReduce: Sync {
    fn all_reduce(&self, local: Vec<f64>) -> Vec<f64>;
}

/// The single-participant reduction: returns its input.
#[derive(Debug, Clone, Copy, Default)]
pub struct LocalReduce;

impl BatchReduce for LocalReduce {
    fn all_reduce(&self, local: Vec<f64>) -> Vec<f64> {
        local
    }
}
