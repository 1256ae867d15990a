// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod eval;
pub mod exec;
pub mod geo;
pub mod ingest;
pub mod models;
pub mod nn;
pub mod partition;
pub mod preprocess;
pub mod routing;
pub mod train;
