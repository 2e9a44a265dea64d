//! Reverse-mode differentiation, the parameter registry and the optimiser.

mod complex;
mod graph;
mod optim;
mod params;

pub use complex::{BnVars, CVar};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adam_step, lr_schedule, AdamConfig, LR_FLOOR};
pub use params::{Bound, Param, ParamId, ParamStore, Plane};
