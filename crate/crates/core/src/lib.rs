//! Cavity functionals, Parisi measures and RSB free-energy bounds for the
//! Ising 2-spin model on random regular graphs.

// negated comparisons are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::too_many_arguments, clippy::needless_range_loop)]

pub mod cavity;
pub mod checks;
pub mod cli;
pub mod error;
pub mod full_rsb;
pub mod nested;
pub mod optimizer;
pub mod oracle;
pub mod parisi_measure;
pub mod rsb_tree;
pub mod stats;
pub mod wiener;

pub use error::{Result, RsbError};
pub use stats::{EstimateWithError, SeedStream};
