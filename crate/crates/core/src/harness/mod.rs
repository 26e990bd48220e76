//! Toy DiT-style denoiser for comparing full and sparse attention in
//! training and distillation.
//!
//! The model is deliberately small: a linear patch embedding with learned
//! positional and noise-level embeddings, `depth` pre-norm transformer
//! blocks (attention, then a GELU MLP), and a linear head. Inputs are
//! reordered into block order on entry and restored to raster order on
//! exit. Gradients are written out by hand; there is no autograd.

mod checkpoint;
mod config;
mod data;
mod linalg;
mod model;
mod optim;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CONFIG_FILE, MANIFEST_FILE};
pub use config::{parse_kv_text, AttentionMode, ToyDiTConfig};
pub use data::{synth_dataset, Dataset};
pub use model::{ForwardStats, ToyDiT};
pub use optim::Adam;
pub use train::{distill, train, write_csv, RunRecord, StepStats, TrainRun, CSV_HEADER};
