//! Everything around the core algorithm: synthetic inputs, end-to-end runs,
//! hyperparameter search, file formats and visualisation.

pub mod heatmap;
pub mod pipeline;
pub mod synthetic;
pub mod tensor_io;
pub mod tune;
