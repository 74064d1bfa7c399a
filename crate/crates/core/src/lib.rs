pub mod boxlattice;
pub mod carpet;
pub mod error;
pub mod gff;
pub mod goodness;
pub mod loewner;
pub mod pathgraph;
pub mod percolation;
pub mod render;
pub mod rng;
pub mod unionfind;

pub use error::{Error, Result};
