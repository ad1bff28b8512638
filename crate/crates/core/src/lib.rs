//! Sarcomere organization scoring for single-cell cardiomyocyte images.

pub mod data;
pub mod explain;
pub mod features;
pub mod gradcheck;
pub mod imagecore;
pub mod model;
pub mod parallel;
pub mod tensor;
pub mod train;
