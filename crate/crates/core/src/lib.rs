//! Complex-valued neural networks trained with Wirtinger gradients, a
//! partial-transmission federated learning simulator, the convergence bound
//! that goes with it, and a synthetic indoor CSI generator.

pub mod container;
pub mod convergence;
pub mod csisim;
pub mod ctensor;
pub mod cvnn;
pub mod error;
pub mod federated;
pub mod losses;
pub mod precise;
pub mod training;

pub use ctensor::{ComplexTensor, Padding};
pub use cvnn::{Activation, ModelKind, NetConfig, NetParams};
pub use error::{Error, Result};
