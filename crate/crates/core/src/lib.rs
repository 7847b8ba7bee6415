//! Adaptive 3D-LUT white-balance correction.
//!
//! A small scene classifier looks at a downsampled copy of the input and
//! predicts weights for a set of basis 3D LUTs. Their weighted sum is an
//! image-specific LUT that is then applied to the full-resolution image with
//! trilinear interpolation. Training adds a triplet objective on a projection
//! of the classifier features, with hard negatives taken from other white
//! balance renderings of the same scene and hard positives synthesized by
//! transferring the anchor's color cast to another scene through a
//! polynomial color mapping.

pub mod bench;
pub mod color_mapping;
pub mod image;
pub mod losses;
pub mod lut;
pub mod metrics;
pub mod model;
pub mod pipeline;
