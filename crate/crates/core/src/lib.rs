//! Human language modeling with a recurrent user-state transformer.
//!
//! A causal decoder processes each user's temporally ordered messages in
//! fixed-size blocks. After every block a user state is updated from an
//! upper layer's outputs, and the state conditions the query transform of
//! an earlier layer while the next block is processed.

pub mod checkpoint;
pub mod corpus;
pub mod finetune;
pub mod hart;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use numerics::{NumericsError, Tensor};
