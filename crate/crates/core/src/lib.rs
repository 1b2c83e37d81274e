pub mod basis;
pub mod cvsim6;
pub mod ode;
pub mod error;
pub mod harmonic;
pub mod lsq;
pub mod newton;
pub mod rng;
pub mod synth;
pub mod uq;
pub mod xtfc;

pub use error::{Error, Result};
