//! Statistics and reporting over trial and study outputs.

pub mod ranks;

pub use ranks::{midranks, percentile_nearest_rank, spearman};
