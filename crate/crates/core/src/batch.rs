//! Host-side image batches.

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Rank-4 image array (count × channels × height × width), row-major,
/// values nominally in [−1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    shape: [usize; 4],
    data: Vec<f32>,
}

/// Maps an 8-bit level to [−1, 1].
pub fn normalize_u8(v: u8) -> f32 {
    2.0 * (v as f32 / 255.0) - 1.0
}

/// Maps a value in [−1, 1] back to the nearest 8-bit level (clamped).
pub fn denormalize_u8(x: f32) -> u8 {
    if !x.is_finite() {
        return 0;
    }
    ((x + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0) as u8
}

impl ImageBatch {
    pub fn new(shape: [usize; 4], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "batch of shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: [usize; 4], value: f32) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn count(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    fn image_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    /// All channels of image `i`.
    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.image_len();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// One channel plane of image `i`.
    pub fn plane(&self, i: usize, c: usize) -> &[f32] {
        let hw = self.shape[2] * self.shape[3];
        let start = (i * self.shape[1] + c) * hw;
        &self.data[start..start + hw]
    }

    pub fn plane_mut(&mut self, i: usize, c: usize) -> &mut [f32] {
        let hw = self.shape[2] * self.shape[3];
        let start = (i * self.shape[1] + c) * hw;
        &mut self.data[start..start + hw]
    }

    /// Sub-batch containing the images at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Self {
            shape: [indices.len(), self.shape[1], self.shape[2], self.shape[3]],
            data,
        }
    }

    /// Stacks batches with equal per-image shape.
    pub fn concat(parts: &[ImageBatch]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot concatenate zero batches".into()))?;
        let mut count = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.shape[1..] != first.shape[1..] {
                return Err(Error::Shape(format!(
                    "cannot concatenate {:?} with {:?}",
                    p.shape, first.shape
                )));
            }
            count += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Ok(Self {
            shape: [count, first.shape[1], first.shape[2], first.shape[3]],
            data,
        })
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, self.shape.to_vec(), device)?)
    }

    pub fn to_tensor_dtype(&self, device: &Device, dtype: DType) -> Result<Tensor> {
        Ok(self.to_tensor(device)?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dims = t.dims();
        if dims.len() != 4 {
            return Err(Error::Shape(format!("expected a rank-4 tensor, got {dims:?}")));
        }
        let data = t
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Ok(Self {
            shape: [dims[0], dims[1], dims[2], dims[3]],
            data,
        })
    }

    /// Clamps every value into [−1, 1].
    pub fn clamped(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(-1.0, 1.0);
        }
        self
    }

    /// 8-bit levels of image `i` (all channels, row-major).
    pub fn to_levels(&self, i: usize) -> Vec<u8> {
        self.image(i).iter().map(|&v| denormalize_u8(v)).collect()
    }
}
