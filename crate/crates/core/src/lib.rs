pub mod data;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod node;
pub mod solvers;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
pub use node::{AugmentedState, DynamicBlock, FirstOrderBlock};
pub use solvers::{IntegrationConfig, SolverKind};
pub use tensor::{Activation, Graph, Tensor, Var};
