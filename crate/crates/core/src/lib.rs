pub mod analysis;
pub mod data;
pub mod delta;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod sparsity;
pub mod tensor;
pub mod training;
