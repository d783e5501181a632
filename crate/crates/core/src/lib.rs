//! Moving-object segmentation on bird's-eye-view LiDAR rasters.

pub mod augment;
pub mod autodiff;
pub mod container;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod ingest;
pub mod model;
pub mod preproc;
pub mod quantize;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
