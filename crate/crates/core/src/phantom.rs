//! Synthetic sector-scan phantoms: a fan-shaped field of view with speckle,
//! an elliptical skull echo and a few internal structures. Used for tests
//! and desk-scale runs in place of clinical data.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::batch::ImageBatch;
use crate::dataset::save_png;
use crate::error::{Error, Result};
use crate::rng;

fn render(size: usize, seed: u64, index: u64) -> Vec<f32> {
    let mut r = rng::stream(seed, "phantom", index);
    let s = size as f64;
    // apex of the fan above the top edge, opening downwards
    let apex = (s * 0.5, -0.15 * s);
    let half_angle = r.random_range(0.55..0.7f64);
    let (r_in, r_out) = (0.2 * s, 1.12 * s);
    let cx = s * r.random_range(0.42..0.58);
    let cy = s * r.random_range(0.5..0.6);
    let ax = s * r.random_range(0.24..0.32);
    let ay = ax * r.random_range(0.72..0.88);
    let tilt = r.random_range(-0.5..0.5f64);
    let (ct, st) = (tilt.cos(), tilt.sin());
    let ring = r.random_range(0.08..0.12);
    let blob = (r.random_range(-0.25..0.25f64), r.random_range(0.2..0.45f64));
    let blob_r = r.random_range(0.18..0.26f64);
    let gain = r.random_range(0.8..1.0f64);
    let speckle = Normal::new(1.0f64, 0.25).expect("valid normal");
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (dx, dy) = (px - apex.0, py - apex.1);
            let rad = (dx * dx + dy * dy).sqrt();
            let ang = dx.atan2(dy);
            let inside = ang.abs() <= half_angle && rad >= r_in && rad <= r_out;
            if !inside {
                out.push(-1.0);
                continue;
            }
            // coordinates in the skull frame, unit ellipse at 1
            let (ex, ey) = (px - cx, py - cy);
            let u = (ex * ct + ey * st) / ax;
            let v = (-ex * st + ey * ct) / ay;
            let e = (u * u + v * v).sqrt();
            let mut level = 0.18 + 0.1 * (1.0 - rad / r_out);
            if (e - 1.0).abs() < ring {
                level = 0.9;
            } else if e < 1.0 {
                level = 0.3;
                // midline echo
                if u.abs() < 0.03 && e < 0.9 {
                    level = 0.7;
                }
                let (bu, bv) = (u - blob.0, v - blob.1);
                if (bu * bu + bv * bv).sqrt() < blob_r {
                    level = 0.12;
                }
            }
            let depth = 1.0 - 0.35 * (rad - r_in) / (r_out - r_in);
            let val = (level * gain * depth * speckle.sample(&mut r)).clamp(0.0, 1.0);
            out.push((2.0 * val - 1.0) as f32);
        }
    }
    out
}

/// `count` single-channel `size × size` phantoms, one random stream per
/// image.
pub fn phantom_batch(count: usize, size: usize, seed: u64) -> Result<ImageBatch> {
    if size < 8 {
        return Err(Error::InvalidArgument(format!("phantom size {size} below 8")));
    }
    let mut data = Vec::with_capacity(count * size * size);
    for i in 0..count {
        data.extend(render(size, seed, i as u64));
    }
    ImageBatch::new([count, 1, size, size], data)
}

/// Writes phantoms as `phantom_<i>.png` under `dir` and returns the paths.
pub fn write_phantoms(dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let batch = phantom_batch(count, size, seed)?;
    (0..count)
        .map(|i| {
            let p = dir.join(format!("phantom_{i:04}.png"));
            save_png(&batch, i, &p)?;
            Ok(p)
        })
        .collect()
}
