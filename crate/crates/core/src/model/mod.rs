//! The neural interpreter model: typed routing of set elements through
//! code-conditioned function streams executed by a shared interpreter.

mod layers;
mod net;
mod params;

pub use layers::{Linear, Loc, ModAttn, ModLin, ModMlp, PosBias, ROUTING_EPS};
pub use net::{
    EvalOptions, FunctionDef, Model, ModelConfig, PosMode, Role, Script, SetBatch, TraceRecord,
};
pub use params::{ParamId, ParamStore, Session};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("expected [batch, {expected}] scalar inputs, got shape {got:?}")]
    BadInputShape { expected: usize, got: Vec<usize> },
    #[error("input set is empty")]
    EmptyInput,
    #[error("iteration override must be >= 1")]
    BadIterationCount,
    #[error("keep mask has {got} entries for {expected} functions")]
    BadKeepMask { expected: usize, got: usize },
    #[error("keep mask drops every function")]
    EmptyKeepMask,
    #[error("relative positional bias needs a grid layout on input roles")]
    MissingGridLayout,
}

#[cfg(test)]
mod tests;
