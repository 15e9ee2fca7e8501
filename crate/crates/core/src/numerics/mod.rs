//! Dense tensors, reverse-mode differentiation, and the layer operations the
//! backbones and gates are built from.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod lstm;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use lstm::{lstm_cell, LstmState, LstmVars};
pub use ops::{BatchStats, BnMode};
pub use optim::Sgd;
pub use params::{Binder, ParamGroup, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
