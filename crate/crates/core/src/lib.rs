//! Adaptive block-sparse attention for video diffusion transformers.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`io`]: a small dense f32 tensor and the `.ntsr` container.
//! - [`layout`]: patch-grouping token reorder between raster and block order.
//! - [`masks`]: adaptive CDF-thresholded block masks, sliding-tile masks,
//!   their union, sparsity accounting and `.nmsk`/PGM persistence.
//! - [`attention`]: dense, masked-dense and block-skipping attention kernels
//!   with analytic gradients.
//! - [`harness`]: a toy DiT-style denoiser used to compare full and sparse
//!   attention during training and distillation.

pub mod attention;
pub mod error;
pub mod harness;
pub mod io;
pub mod layout;
pub mod masks;
pub mod tensor;

pub use attention::{
    attention_backward, block_sparse_attention, block_sparse_attention_counted, dense_attention,
    masked_dense_attention, AttentionGrad, AttentionInputs, FlopCount,
};
pub use error::{NablaError, Result};
pub use io::{load_tensor, save_tensor};
pub use layout::{apply_reorder, build_permutation, Direction, Permutation, TokenGrid};
pub use masks::{
    count_dense_blocks_eq5, export_mask_image, join_masks, load_mask, nabla_mask, save_mask, sparsity,
    sta_mask, BlockMask, NablaParams, StaWindow,
};
pub use tensor::Tensor;
