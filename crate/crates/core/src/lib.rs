//! Core algorithms for segmenting infected lung regions in CT slices.
//!
//! This crate is `no_std` (with `alloc`) when built without the default
//! `std` feature. It contains everything that does not touch a filesystem:
//!
//! * [`nifti`]: NIfTI-1 byte codec and the [`nifti::Volume`] type
//! * [`preprocess`]: HU clipping, normalization, resizing, binarization
//! * [`augment`]: seeded, label-consistent augmentation
//! * [`autodiff`]: a small reverse-mode tape over 4D `f32` tensors
//! * [`model`]: the attention-gated U-Net
//! * [`losses`]: Dice, BCE and boundary losses plus signed distance maps
//! * [`trainer`]: Adam, cosine annealing, early stopping, checkpoints
//! * [`postprocess`]: threshold, opening/closing, small-component removal
//! * [`metrics`]: overlap, boundary, classification and ROC statistics
//! * [`phantom`]: synthetic CT volumes with known infection masks
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod augment;
pub mod autodiff;
pub mod edt;
pub mod image;
pub mod losses;
mod math;
pub mod metrics;
pub mod model;
pub mod nifti;
pub mod phantom;
pub mod postprocess;
pub mod preprocess;
pub mod trainer;

pub use image::{MaskSlice, Slice2D, SlicePair};
pub use nifti::{Volume, VolumeMeta};
