//! Intensity and geometry operations on host-side images.
//!
//! The histogram-matching stage sits between diffusion sampling and
//! super-resolution and pulls the synthetic intensity distribution onto the
//! pooled distribution of the real scans.

mod histogram;
pub mod resample;

pub use histogram::{
    build_reference_pool, compute_cdf, histogram_match, ks_distance, quantize, IntensityCdf,
    LEVELS,
};

use crate::batch::ImageBatch;
use resample::PlaneSize;

/// Bilinear resize of every plane in a batch.
pub fn resize_batch(batch: &ImageBatch, height: usize, width: usize) -> ImageBatch {
    map_planes(batch, height, width, |p, s| {
        resample::resize_bilinear(p, s, PlaneSize::new(height, width))
    })
}

/// Bicubic ×½ downsample of every plane (used to make low-resolution
/// training inputs from real high-resolution images).
pub fn downsample2_bicubic(batch: &ImageBatch) -> ImageBatch {
    let (h, w) = (batch.height() / 2, batch.width() / 2);
    map_planes(batch, h, w, |p, s| {
        resample::resize_bicubic(p, s, PlaneSize::new(h, w))
    })
}

fn map_planes(
    batch: &ImageBatch,
    height: usize,
    width: usize,
    f: impl Fn(&[f32], PlaneSize) -> Vec<f32>,
) -> ImageBatch {
    let [n, c, h, w] = batch.shape();
    let size = PlaneSize::new(h, w);
    let mut data = Vec::with_capacity(n * c * height * width);
    for i in 0..n {
        for ch in 0..c {
            data.extend(f(batch.plane(i, ch), size));
        }
    }
    ImageBatch::new([n, c, height, width], data).expect("plane sizes are consistent")
}
