//! Dense arrays, a reverse-mode tape and an RMS-propagation optimizer.

mod array;
mod params;
mod tape;

pub use array::DenseArray;
pub use params::{ParameterSet, RmsProp};
pub use tape::{Bound, Gradients, Primitive, Tape, Var};
