pub mod autodiff;
pub mod data;
pub mod error;
pub mod instrument;
pub mod seed;
pub mod train;
pub mod multitask;
pub mod nn;
pub mod tensor;
