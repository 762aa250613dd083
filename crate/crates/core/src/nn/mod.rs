//! Differentiable building blocks on top of candle tensors.

mod conv;
mod layers;
mod params;

use candle_core::{DType, Device, Tensor, D};

pub use conv::{conv2d, conv_transpose2d, PadMode};
pub use layers::{Conv2d, ConvSpec, Linear, Upsample2x, WeightInit};
pub use params::{Init, ParamStore};

use crate::error::Result;
use crate::imaging::{self, Taps};

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((((x * 0.5)?.tanh()? + 1.0)? * 0.5)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Per-sample, per-channel normalization over the spatial dimensions, no affine.
pub fn instance_norm(x: &Tensor) -> Result<Tensor> {
    const EPS: f64 = 1e-5;
    let mean = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
    Ok(centered.broadcast_div(&(var + EPS)?.sqrt()?)?)
}

/// Mean absolute difference.
pub fn l1(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(crate::error::Error::Argument(format!(
            "l1: shape mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

/// Clamps into `[-1, 1]`.
pub fn clamp_signed(x: &Tensor) -> Result<Tensor> {
    Ok(x.clamp(-1.0, 1.0)?)
}

/// Scalar value of a rank-0 tensor as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn matrix(taps: &Taps, in_len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let m = imaging::taps_to_matrix(taps, in_len);
    Ok(Tensor::from_vec(m, (taps.len(), in_len), device)?.to_dtype(dtype)?)
}

/// Applies `rows` (Ho, H) along height and `cols` (Wo, W) along width of a `(B, C, H, W)` tensor.
pub fn separable_map(x: &Tensor, rows: &Tensor, cols: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let ho = rows.dim(0)?;
    let wo = cols.dim(0)?;
    let y = x.contiguous()?.reshape((b * c * h, w))?.matmul(&cols.t()?)?;
    let y = y.reshape((b * c, h, wo))?.transpose(1, 2)?.contiguous()?;
    let y = y.reshape((b * c * wo, h))?.matmul(&rows.t()?)?;
    Ok(y.reshape((b * c, wo, ho))?.transpose(1, 2)?.contiguous()?.reshape((b, c, ho, wo))?)
}

/// Box-filter downsampling (exact area averaging).
pub fn area_resize(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let rows = matrix(&imaging::area_weights(h, height), h, x.dtype(), x.device())?;
    let cols = matrix(&imaging::area_weights(w, width), w, x.dtype(), x.device())?;
    separable_map(x, &rows, &cols)
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn bilinear_resize(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let rows = matrix(&imaging::bilinear_weights(h, height), h, x.dtype(), x.device())?;
    let cols = matrix(&imaging::bilinear_weights(w, width), w, x.dtype(), x.device())?;
    separable_map(x, &rows, &cols)
}

/// Tensor version of [`imaging::high_pass`]: identity minus a replicate-padded Gaussian blur.
pub fn high_pass_tensor(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let s = imaging::HIGH_PASS_SIGMA;
    let r = imaging::HIGH_PASS_RADIUS;
    let rows = matrix(&imaging::blur_weights(h, s, r), h, x.dtype(), x.device())?;
    let cols = matrix(&imaging::blur_weights(w, s, r), w, x.dtype(), x.device())?;
    Ok((x - separable_map(x, &rows, &cols)?)?)
}
