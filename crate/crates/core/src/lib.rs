//! Neural interpreter: a self-attention network factored into routable,
//! code-conditioned functions executed by a shared interpreter, together
//! with the tensor autodiff core, fuzzy Boolean regression tasks and the
//! training/experiment machinery around it.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod fuzzy;
pub mod gradcheck;
pub mod model;
pub mod tensor;
pub mod trace;
pub mod train;
