//! Convolution built from an explicit im2col/col2im pair plus a matmul.
//!
//! Candle's CPU convolution backward goes through a naive transposed
//! convolution; routing every convolution through matmul keeps both passes on
//! the gemm path. Padding is folded into the index mapping, so reflect and
//! replicate padding cost nothing extra.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Zeros,
    Reflect,
    Replicate,
}

/// Geometry of a strided, padded sliding window over a `(B, C, H, W)` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    mode: PadMode,
}

impl Geometry {
    fn out_dims(&self) -> Result<(usize, usize)> {
        let ph = self.height + 2 * self.pad;
        let pw = self.width + 2 * self.pad;
        if ph < self.kh || pw < self.kw || self.stride == 0 {
            return Err(Error::Argument(format!(
                "kernel {}x{} does not fit padded input {ph}x{pw}",
                self.kh, self.kw
            )));
        }
        if self.mode == PadMode::Reflect && (self.pad >= self.height || self.pad >= self.width) {
            return Err(Error::Argument(format!(
                "reflect pad {} needs input larger than {}x{}",
                self.pad, self.height, self.width
            )));
        }
        Ok(((ph - self.kh) / self.stride + 1, (pw - self.kw) / self.stride + 1))
    }

    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// Source index along an axis of length `len` for padded position `p`.
    fn source(&self, p: usize, len: usize) -> Option<usize> {
        let q = p as isize - self.pad as isize;
        if q >= 0 && (q as usize) < len {
            return Some(q as usize);
        }
        match self.mode {
            PadMode::Zeros => None,
            PadMode::Replicate => Some(q.clamp(0, len as isize - 1) as usize),
            PadMode::Reflect => {
                let n = len as isize;
                let r = if q < 0 { -q } else { 2 * (n - 1) - q };
                Some(r.clamp(0, n - 1) as usize)
            }
        }
    }

    /// For each kernel offset and output position, the source index (or padding).
    fn index_table(&self, k: usize, out: usize, len: usize) -> Vec<Option<usize>> {
        let mut table = Vec::with_capacity(k * out);
        for ki in 0..k {
            for o in 0..out {
                table.push(self.source(o * self.stride + ki, len));
            }
        }
        table
    }

    fn check_input(&self, shape: &Shape) -> candle_core::Result<()> {
        let want = [self.batch, self.channels, self.height, self.width];
        if shape.dims() != want {
            candle_core::bail!("window op expected shape {want:?}, got {:?}", shape.dims());
        }
        Ok(())
    }

    fn check_cols(&self, shape: &Shape) -> candle_core::Result<()> {
        let (ho, wo) = self.out_dims().map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        let want = [self.rows(), self.batch * ho * wo];
        if shape.dims() != want {
            candle_core::bail!("column op expected shape {want:?}, got {:?}", shape.dims());
        }
        Ok(())
    }
}

fn im2col<T: Copy + Default>(src: &[T], g: &Geometry) -> Vec<T> {
    let (ho, wo) = g.out_dims().expect("geometry validated by caller");
    let n = ho * wo;
    let cols = g.batch * n;
    let ys = g.index_table(g.kh, ho, g.height);
    let xs = g.index_table(g.kw, wo, g.width);
    let mut out = vec![T::default(); g.rows() * cols];
    let plane = g.height * g.width;
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let base = (b * g.channels + c) * plane;
                    for oy in 0..ho {
                        let Some(iy) = ys[ki * ho + oy] else { continue };
                        let src_row = &src[base + iy * g.width..base + (iy + 1) * g.width];
                        let dst = &mut dst_row[b * n + oy * wo..b * n + (oy + 1) * wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            if let Some(ix) = xs[kj * wo + ox] {
                                *d = src_row[ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Copy + Default + std::ops::AddAssign>(cols_data: &[T], g: &Geometry) -> Vec<T> {
    let (ho, wo) = g.out_dims().expect("geometry validated by caller");
    let n = ho * wo;
    let cols = g.batch * n;
    let ys = g.index_table(g.kh, ho, g.height);
    let xs = g.index_table(g.kw, wo, g.width);
    let plane = g.height * g.width;
    let mut out = vec![T::default(); g.batch * g.channels * plane];
    for c in 0..g.channels {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src_row = &cols_data[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let base = (b * g.channels + c) * plane;
                    for oy in 0..ho {
                        let Some(iy) = ys[ki * ho + oy] else { continue };
                        let src = &src_row[b * n + oy * wo..b * n + (oy + 1) * wo];
                        let dst = &mut out[base + iy * g.width..base + (iy + 1) * g.width];
                        for (ox, v) in src.iter().enumerate() {
                            if let Some(ix) = xs[kj * wo + ox] {
                                dst[ix] += *v;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

struct Im2Col(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        g.check_input(layout.shape())?;
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("im2col needs a contiguous input".into()))?;
        let (ho, wo) = g.out_dims().map_err(|e| candle_core::Error::Msg(e.to_string()))?;
        let shape = Shape::from((g.rows(), g.batch * ho * wo));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(&v[start..end], g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(&v[start..end], g)),
            other => candle_core::bail!("im2col: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

struct Col2Im(Geometry);

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0;
        g.check_cols(layout.shape())?;
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("col2im needs a contiguous input".into()))?;
        let shape = Shape::from((g.batch, g.channels, g.height, g.width));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(&v[start..end], g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(&v[start..end], g)),
            other => candle_core::bail!("col2im: unsupported dtype {:?}", other.dtype()),
        };
        Ok((out, shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// 2-D convolution. `weight` is `(out, in, kh, kw)`; `x` is `(B, in, H, W)`.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    mode: PadMode,
) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, ci, kh, kw) = weight.dims4()?;
    if ci != c {
        return Err(Error::Argument(format!(
            "conv2d: input has {c} channels, kernel expects {ci}"
        )));
    }
    let g = Geometry {
        batch: b,
        channels: c,
        height: h,
        width: w,
        kh,
        kw,
        stride,
        pad,
        mode,
    };
    let (ho, wo) = g.out_dims()?;
    let cols = if kh == 1 && kw == 1 && stride == 1 && pad == 0 && b == 1 {
        x.reshape((c, h * w))?
    } else {
        x.contiguous()?.apply_op1(Im2Col(g))?
    };
    let y = weight.reshape((o, g.rows()))?.matmul(&cols)?;
    let y = if b == 1 {
        y.reshape((1, o, ho, wo))?
    } else {
        y.reshape((o, b, ho, wo))?.transpose(0, 1)?.contiguous()?
    };
    add_channel_bias(y, bias)
}

/// Transposed convolution, the adjoint of a zero-padded [`conv2d`].
/// `weight` is `(in, out, kh, kw)`.
pub fn conv_transpose2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
    output_padding: usize,
) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (ci, o, kh, kw) = weight.dims4()?;
    if ci != c {
        return Err(Error::Argument(format!(
            "conv_transpose2d: input has {c} channels, kernel expects {ci}"
        )));
    }
    let out_h = ((h - 1) * stride + kh + output_padding)
        .checked_sub(2 * pad)
        .ok_or_else(|| Error::Argument("conv_transpose2d: padding too large".into()))?;
    let out_w = ((w - 1) * stride + kw + output_padding)
        .checked_sub(2 * pad)
        .ok_or_else(|| Error::Argument("conv_transpose2d: padding too large".into()))?;
    let g = Geometry {
        batch: b,
        channels: o,
        height: out_h,
        width: out_w,
        kh,
        kw,
        stride,
        pad,
        mode: PadMode::Zeros,
    };
    if g.out_dims()? != (h, w) {
        return Err(Error::Argument(format!(
            "conv_transpose2d: inconsistent geometry for {h}x{w} -> {out_h}x{out_w}"
        )));
    }
    let xm = if b == 1 {
        x.reshape((c, h * w))?
    } else {
        x.transpose(0, 1)?.contiguous()?.reshape((c, b * h * w))?
    };
    let wm = weight.reshape((ci, g.rows()))?.t()?;
    let cols = wm.matmul(&xm)?.contiguous()?;
    let y = cols.apply_op1(Col2Im(g))?;
    add_channel_bias(y, bias)
}

fn add_channel_bias(y: Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    match bias {
        Some(bias) => {
            let o = bias.dim(0)?;
            Ok(y.broadcast_add(&bias.reshape((1, o, 1, 1))?)?)
        }
        None => Ok(y),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    /// Direct nested-loop convolution used as the reference.
    fn naive_conv(
        x: &Tensor,
        w: &Tensor,
        stride: usize,
        pad: usize,
        mode: PadMode,
    ) -> Vec<f64> {
        let (b, c, h, wd) = x.dims4().unwrap();
        let (o, _, kh, kw) = w.dims4().unwrap();
        let xv = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let wv = w.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let fetch = |p: isize, len: usize| -> Option<usize> {
            let n = len as isize;
            if (0..n).contains(&p) {
                return Some(p as usize);
            }
            match mode {
                PadMode::Zeros => None,
                PadMode::Replicate => Some(p.clamp(0, n - 1) as usize),
                PadMode::Reflect => Some(if p < 0 { -p } else { 2 * (n - 1) - p } as usize),
            }
        };
        let mut out = vec![0.0; b * o * ho * wo];
        for bi in 0..b {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ic in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy = fetch((oy * stride + ki) as isize - pad as isize, h);
                                    let ix = fetch((ox * stride + kj) as isize - pad as isize, wd);
                                    if let (Some(iy), Some(ix)) = (iy, ix) {
                                        acc += wv[((oc * c + ic) * kh + ki) * kw + kj]
                                            * xv[((bi * c + ic) * h + iy) * wd + ix];
                                    }
                                }
                            }
                        }
                        out[((bi * o + oc) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_loops() {
        for (mode, stride, pad, k) in [
            (PadMode::Zeros, 1, 1, 3),
            (PadMode::Zeros, 2, 1, 4),
            (PadMode::Reflect, 1, 3, 7),
            (PadMode::Replicate, 2, 2, 3),
            (PadMode::Zeros, 1, 0, 1),
        ] {
            for batch in [1, 2] {
                let x = random(&[batch, 3, 9, 8], 1);
                let w = random(&[4, 3, k, k], 2);
                let y = conv2d(&x, &w, None, stride, pad, mode).unwrap();
                let got = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
                let want = naive_conv(&x, &w, stride, pad, mode);
                assert_eq!(got.len(), want.len());
                for (a, b) in got.iter().zip(&want) {
                    assert!((a - b).abs() < 1e-12, "{mode:?} s{stride} p{pad} k{k}");
                }
            }
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        for mode in [PadMode::Zeros, PadMode::Reflect, PadMode::Replicate] {
            let x = Var::from_tensor(&random(&[1, 2, 6, 5], 3)).unwrap();
            let w = Var::from_tensor(&random(&[3, 2, 3, 3], 4)).unwrap();
            let probe = random(&[1, 3, 3, 3], 5);
            let f = |x: &Tensor, w: &Tensor| -> f64 {
                let y = conv2d(x, w, None, 2, 1, mode).unwrap();
                (y * &probe).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap()
            };
            let y = conv2d(x.as_tensor(), w.as_tensor(), None, 2, 1, mode).unwrap();
            let loss = (y * &probe).unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            for (var, other, is_x) in [(&x, &w, true), (&w, &x, false)] {
                let g = grads.get(var.as_tensor()).unwrap();
                let gv = g.flatten_all().unwrap().to_vec1::<f64>().unwrap();
                let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
                for i in 0..base.len() {
                    let mut plus = base.clone();
                    plus[i] += 1e-6;
                    let mut minus = base.clone();
                    minus[i] -= 1e-6;
                    let shape = var.as_tensor().shape().clone();
                    let tp = Tensor::from_vec(plus, &shape, &Device::Cpu).unwrap();
                    let tm = Tensor::from_vec(minus, &shape, &Device::Cpu).unwrap();
                    let fd = if is_x {
                        (f(&tp, other.as_tensor()) - f(&tm, other.as_tensor())) / 2e-6
                    } else {
                        (f(other.as_tensor(), &tp) - f(other.as_tensor(), &tm)) / 2e-6
                    };
                    assert!((fd - gv[i]).abs() < 1e-6, "{mode:?} idx {i}: {fd} vs {}", gv[i]);
                }
            }
        }
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        // <conv(x), y> == <x, conv_t(y)> for matching geometry.
        let x = random(&[1, 3, 8, 8], 6);
        let w = random(&[5, 3, 3, 3], 7);
        let y = random(&[1, 5, 4, 4], 8);
        let cx = conv2d(&x, &w, None, 2, 1, PadMode::Zeros).unwrap();
        let lhs = (cx * &y).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        // A (out, in, k, k) conv kernel is already the (in, out, k, k) kernel of its transpose.
        let ty = conv_transpose2d(&y, &w, None, 2, 1, 1).unwrap();
        assert_eq!(ty.dims4().unwrap(), (1, 3, 8, 8));
        let rhs = (ty * &x).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn f32_path_works() {
        let x = random(&[1, 2, 5, 5], 9).to_dtype(DType::F32).unwrap();
        let w = random(&[2, 2, 3, 3], 10).to_dtype(DType::F32).unwrap();
        let y = conv2d(&x, &w, None, 1, 1, PadMode::Reflect).unwrap();
        assert_eq!(y.dims4().unwrap(), (1, 2, 5, 5));
        assert_eq!(y.dtype(), DType::F32);
    }

    #[test]
    fn oversized_reflect_pad_is_rejected() {
        let x = random(&[1, 1, 2, 2], 11);
        let w = random(&[1, 1, 7, 7], 12);
        assert!(conv2d(&x, &w, None, 1, 3, PadMode::Reflect).is_err());
    }
}
