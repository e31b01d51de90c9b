//! The `HXLM` tensor container and the model and dataset layouts built on it.

mod model;
mod tensorfile;

pub use model::{dataset_from_file, dataset_to_file, head_from_file, head_to_file, read_dataset, read_head, write_dataset, write_head};
pub use tensorfile::{Tensor, TensorFile, MAGIC, VERSION};
