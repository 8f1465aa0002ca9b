//! Synchronization of discrete-time linear arrays under relative actuation.
//!
//! Each input `u_ij` is shared by agents `i` and `j` and enters them with
//! opposite signs, so the agent average evolves independently of the inputs.
//! A distributed output-feedback algorithm, whose every discrete step solves
//! two short continuous-time problems, drives all agents to a common
//! trajectory once its integration horizons are long enough.
//!
//! * [`linalg`]: dense kernels (Kronecker, expm, spectra, rank, SPD solve).
//! * [`array`]: the array, its stacked form and relative controllability/observability.
//! * [`gains`]: closed-form gains `K`, `L`, the Kleinman matrices and horizon search.
//! * [`sim`]: stepping the algorithm numerically, in closed form, or as a closed loop.
//! * [`scenario`]: JSON configs, random array generation and the command workflows.

pub mod array;
pub mod error;
pub mod gains;
pub mod linalg;
pub mod scenario;
mod serde_ext;
pub mod sim;

pub use array::{ArrayModel, ArraySpec, BigSystem, Coupling, ProjectionBasis, ReducedSystem};
pub use error::{Error, Result};
pub use gains::{Designer, GainSet, Loop, SynthParams, ThresholdSearch};
pub use linalg::{Mat, SpectrumReport, Vector};
pub use sim::{AlgoState, Mode, SimOptions, SimTrace, Simulator};
