pub mod checkpoint;
pub mod data;
pub mod dualpath;
pub mod error;
pub mod eval;
pub mod numerics;
pub mod par;
pub mod selfcheck;
pub mod tasnet;
pub mod training;

pub use error::{Error, Result};
