//! Resampling primitives on single channel planes (row-major `f32`).
//!
//! Interpolated values are formed as `v_ref + Σ wᵢ (vᵢ − v_ref)` around one of
//! the taps, so constant regions and unit-weight taps reproduce input values
//! exactly.

/// Pixel grid of one plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlaneSize {
    pub height: usize,
    pub width: usize,
}

impl PlaneSize {
    pub fn new(height: usize, width: usize) -> Self {
        Self { height, width }
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Largest centered square of a plane.
pub fn center_crop_square(src: &[f32], size: PlaneSize) -> (Vec<f32>, usize) {
    let side = size.height.min(size.width);
    let y0 = (size.height - side) / 2;
    let x0 = (size.width - side) / 2;
    let mut out = Vec::with_capacity(side * side);
    for y in 0..side {
        let row = (y0 + y) * size.width + x0;
        out.extend_from_slice(&src[row..row + side]);
    }
    (out, side)
}

fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f32)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, (s - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &[f32], size: PlaneSize, out: PlaneSize) -> Vec<f32> {
    let ys = bilinear_taps(out.height, size.height);
    let xs = bilinear_taps(out.width, size.width);
    let mut dst = Vec::with_capacity(out.len());
    for &(y0, y1, wy) in &ys {
        let r0 = &src[y0 * size.width..(y0 + 1) * size.width];
        let r1 = &src[y1 * size.width..(y1 + 1) * size.width];
        for &(x0, x1, wx) in &xs {
            let a = r0[x0] + wx * (r0[x1] - r0[x0]);
            let b = r1[x0] + wx * (r1[x1] - r1[x0]);
            dst.push(a + wy * (b - a));
        }
    }
    dst
}

fn cubic_weight(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        (A + 2.0) * x * x * x - (A + 3.0) * x * x + 1.0
    } else if x < 2.0 {
        A * x * x * x - 5.0 * A * x * x + 8.0 * A * x - 4.0 * A
    } else {
        0.0
    }
}

fn cubic_taps(out_len: usize, in_len: usize) -> Vec<([usize; 4], [f32; 4])> {
    let scale = in_len as f64 / out_len as f64;
    let last = in_len as isize - 1;
    (0..out_len)
        .map(|o| {
            let s = (o as f64 + 0.5) * scale - 0.5;
            let base = s.floor();
            let t = s - base;
            let mut idx = [0usize; 4];
            let mut w = [0f32; 4];
            for k in 0..4 {
                let i = base as isize + k as isize - 1;
                idx[k] = i.clamp(0, last) as usize;
                w[k] = cubic_weight(t - (k as f64 - 1.0)) as f32;
            }
            (idx, w)
        })
        .collect()
}

fn cubic_pass(src: &[f32], rows: usize, cols: usize, out_cols: usize) -> Vec<f32> {
    let taps = cubic_taps(out_cols, cols);
    let mut dst = Vec::with_capacity(rows * out_cols);
    for r in 0..rows {
        let row = &src[r * cols..(r + 1) * cols];
        for (idx, w) in &taps {
            let anchor = row[idx[1]];
            let mut acc = 0f32;
            for k in 0..4 {
                acc += w[k] * (row[idx[k]] - anchor);
            }
            dst.push(anchor + acc);
        }
    }
    dst
}

fn transpose(src: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut dst = vec![0f32; src.len()];
    for r in 0..rows {
        for c in 0..cols {
            dst[c * rows + r] = src[r * cols + c];
        }
    }
    dst
}

/// Separable bicubic (Keys, a = −0.5) resize with replicated edges.
pub fn resize_bicubic(src: &[f32], size: PlaneSize, out: PlaneSize) -> Vec<f32> {
    let horizontal = cubic_pass(src, size.height, size.width, out.width);
    let t = transpose(&horizontal, size.height, out.width);
    let vertical = cubic_pass(&t, out.width, size.height, out.height);
    transpose(&vertical, out.width, out.height)
}

pub fn flip_horizontal(plane: &mut [f32], size: PlaneSize) {
    for row in plane.chunks_mut(size.width) {
        row.reverse();
    }
}

/// Folds a continuous coordinate into `[0, len − 1]` by mirror reflection
/// about the edge pixel centers.
pub fn reflect_coord(x: f64, len: usize) -> f64 {
    if len <= 1 {
        return 0.0;
    }
    let max = (len - 1) as f64;
    let period = 2.0 * max;
    let r = x.rem_euclid(period);
    if r > max {
        period - r
    } else {
        r
    }
}

fn sample_bilinear(src: &[f32], size: PlaneSize, sx: f64, sy: f64) -> f32 {
    let x = reflect_coord(sx, size.width);
    let y = reflect_coord(sy, size.height);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(size.width - 1);
    let y1 = (y0 + 1).min(size.height - 1);
    let wx = (x - x0 as f64) as f32;
    let wy = (y - y0 as f64) as f32;
    let at = |yy: usize, xx: usize| src[yy * size.width + xx];
    let a = at(y0, x0) + wx * (at(y0, x1) - at(y0, x0));
    let b = at(y1, x0) + wx * (at(y1, x1) - at(y1, x0));
    a + wy * (b - a)
}

/// Scales a plane by `scale` about its center and rotates it by
/// `angle_deg` (counter-clockwise in image coordinates), resampling
/// bilinearly with reflect padding. Output has the input's size.
pub fn zoom_rotate(src: &[f32], size: PlaneSize, scale: f64, angle_deg: f64) -> Vec<f32> {
    let cx = (size.width as f64 - 1.0) / 2.0;
    let cy = (size.height as f64 - 1.0) / 2.0;
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let mut dst = Vec::with_capacity(size.len());
    for y in 0..size.height {
        for x in 0..size.width {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            // inverse map: rotate by −θ, then undo the zoom
            let sx = (cos * dx + sin * dy) / scale + cx;
            let sy = (-sin * dx + cos * dy) / scale + cy;
            dst.push(sample_bilinear(src, size, sx, sy));
        }
    }
    dst
}
