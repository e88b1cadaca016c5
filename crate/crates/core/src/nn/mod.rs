//! Minimal neural-network toolkit on top of `candle-core`: named parameter
//! stores with seeded initialisation, the layers the three generators need,
//! and an Adam optimiser whose state can be checkpointed.

mod adam;
mod conv;
mod layers;
mod norm;
mod params;

pub use adam::{Adam, AdamConfig};
pub use conv::conv2d;
pub use norm::group_norm;
pub use layers::{
    avg_pool2, gelu, group_norm_plain, leaky_relu, mse, pixel_shuffle, pixel_unshuffle,
    sigmoid, softmax_last, softplus, upsample_nearest2, Conv2d, GroupNorm, Linear, PRelu,
};
pub use params::{Init, NamedArray, ParamBuilder, ParamStore};

use candle_core::Tensor;

use crate::error::{Error, Result};

/// Reads a scalar tensor and rejects non-finite values.
pub fn finite_scalar(t: &Tensor, stage: &str) -> Result<f64> {
    let v = t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::numeric(stage, format!("loss evaluated to {v}")))
    }
}

/// True when every element is finite.
pub fn all_finite(t: &Tensor) -> Result<bool> {
    let v = t
        .to_dtype(candle_core::DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    Ok(v.iter().all(|x| x.is_finite()))
}
