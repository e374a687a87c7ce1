//! Multimodal survival prediction from pathology token bags and grouped
//! genomic profiles.

pub mod autodiff;
pub mod checkpoint;
pub mod cohort_io;
pub mod data;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod special;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Mat;
