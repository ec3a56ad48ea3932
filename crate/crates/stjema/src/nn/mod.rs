//! Hand-rolled dense neural-network kernels with reverse-mode
//! differentiation.
//!
//! The model sizes in this crate are small (tens of nodes, embedding
//! widths in the tens), so every tensor is a dense `f64` matrix and the
//! whole forward pass is recorded on an explicit [`tape::Tape`]. This
//! keeps the numerics transparent and bitwise-reproducible, and makes
//! the stop-gradient boundary of the target network a structural
//! property (its outputs enter the tape as constants) rather than a
//! runtime flag.

pub mod gradcheck;
pub mod layers;
pub mod params;
pub mod tape;

pub use gradcheck::{check_gradients, GradCheckError, GradCheckReport};
pub use params::{ParamError, ParamStore, Role};
pub use tape::{Tape, Var};
