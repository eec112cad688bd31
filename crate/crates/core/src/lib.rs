pub mod bev;
pub mod checkpoint;
pub mod equivariant;
pub mod error;
mod gemm;
pub mod ingest;
pub mod model;
pub mod netvlad;
pub mod params;
pub mod position;
pub mod retrieval;
pub mod trainer;

pub use error::{Error, Result};
