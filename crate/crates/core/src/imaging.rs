//! Image representation shared by every stage of the pipeline.
//!
//! Images are stored channel-first as `f64` with an explicit value-range tag.
//! The models work in `[-1, 1]`; files and metrics work in `[0, 1]`. Moving
//! between the two is always an explicit call.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Luma weights (ITU-R BT.601).
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

pub const HIGH_PASS_SIGMA: f64 = 2.0;
pub const HIGH_PASS_RADIUS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValueRange {
    /// `[0, 1]`, used by files and metrics.
    Unit,
    /// `[-1, 1]`, used inside the networks.
    Signed,
    /// No bound, e.g. high-pass residuals.
    Unbounded,
}

impl ValueRange {
    pub fn bounds(self) -> (f64, f64) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Signed => (-1.0, 1.0),
            ValueRange::Unbounded => (f64::NEG_INFINITY, f64::INFINITY),
        }
    }

    fn contains(self, v: f64) -> bool {
        let (lo, hi) = self.bounds();
        v >= lo && v <= hi
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ColorSpace {
    Rgb,
    Luma,
}

impl ColorSpace {
    pub fn channels(self) -> usize {
        match self {
            ColorSpace::Rgb => 3,
            ColorSpace::Luma => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    data: Vec<f64>,
    height: usize,
    width: usize,
    range: ValueRange,
    color: ColorSpace,
}

impl ImageTensor {
    /// Builds an image from channel-first data. Fails if any value is NaN or
    /// falls outside `range`.
    pub fn new(
        data: Vec<f64>,
        color: ColorSpace,
        height: usize,
        width: usize,
        range: ValueRange,
    ) -> Result<Self> {
        let expected = color.channels() * height * width;
        if data.len() != expected {
            return Err(Error::Argument(format!(
                "image data has {} values, expected {expected} for {}x{}x{}",
                data.len(),
                color.channels(),
                height,
                width
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::Argument("image must be non-empty".into()));
        }
        if let Some(bad) = data.iter().find(|v| !range.contains(**v)) {
            return Err(Error::Argument(format!(
                "value {bad} outside declared range {range:?}"
            )));
        }
        Ok(Self {
            data,
            height,
            width,
            range,
            color,
        })
    }

    /// Builds an image, clamping every value into `range`. NaN is still an error.
    pub fn new_clamped(
        mut data: Vec<f64>,
        color: ColorSpace,
        height: usize,
        width: usize,
        range: ValueRange,
    ) -> Result<Self> {
        if data.iter().any(|v| v.is_nan()) {
            return Err(Error::NumericFault("image data".into()));
        }
        let (lo, hi) = range.bounds();
        for v in &mut data {
            *v = v.clamp(lo, hi);
        }
        Self::new(data, color, height, width, range)
    }

    pub fn from_fn(
        color: ColorSpace,
        height: usize,
        width: usize,
        range: ValueRange,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(color.channels() * height * width);
        for c in 0..color.channels() {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(data, color, height, width, range)
    }

    pub fn filled(
        color: ColorSpace,
        height: usize,
        width: usize,
        range: ValueRange,
        value: f64,
    ) -> Result<Self> {
        Self::from_fn(color, height, width, range, |_, _, _| value)
    }

    pub fn channels(&self) -> usize {
        self.color.channels()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(C, H, W)`.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels(), self.height, self.width)
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn color_space(&self) -> ColorSpace {
        self.color
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// `[0, 1]` to `[-1, 1]`.
    pub fn to_signed(&self) -> Result<Self> {
        match self.range {
            ValueRange::Signed => Ok(self.clone()),
            ValueRange::Unit => self.map_range(ValueRange::Signed, |v| 2.0 * v - 1.0),
            ValueRange::Unbounded => Err(Error::Argument(
                "cannot convert an unbounded image to [-1, 1]".into(),
            )),
        }
    }

    /// `[-1, 1]` to `[0, 1]`.
    pub fn to_unit(&self) -> Result<Self> {
        match self.range {
            ValueRange::Unit => Ok(self.clone()),
            ValueRange::Signed => self.map_range(ValueRange::Unit, |v| (v + 1.0) * 0.5),
            ValueRange::Unbounded => Err(Error::Argument(
                "cannot convert an unbounded image to [0, 1]".into(),
            )),
        }
    }

    fn map_range(&self, range: ValueRange, f: impl Fn(f64) -> f64) -> Result<Self> {
        let data = self.data.iter().map(|v| f(*v)).collect();
        Self::new(data, self.color, self.height, self.width, range)
    }

    /// Returns a `(1, C, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(
            &self.data,
            (1, self.channels(), self.height, self.width),
            device,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Reads a `(1, C, H, W)` or `(C, H, W)` tensor. Values must already lie in `range`.
    pub fn from_tensor(t: &Tensor, range: ValueRange) -> Result<Self> {
        let (data, color, h, w) = tensor_parts(t)?;
        Self::new(data, color, h, w, range)
    }

    /// Like [`ImageTensor::from_tensor`] but clamps into `range`.
    pub fn from_tensor_clamped(t: &Tensor, range: ValueRange) -> Result<Self> {
        let (data, color, h, w) = tensor_parts(t)?;
        Self::new_clamped(data, color, h, w, range)
    }

    /// Copies the `h` x `w` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Self> {
        if top + h > self.height || left + w > self.width {
            return Err(Error::Argument(format!(
                "crop {h}x{w} at ({top},{left}) exceeds {}x{}",
                self.height, self.width
            )));
        }
        Self::from_fn(self.color, h, w, self.range, |c, y, x| {
            self.get(c, top + y, left + x)
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.channels() {
            for y in 0..self.height {
                for x in (0..self.width).rev() {
                    data.push(self.get(c, y, x));
                }
            }
        }
        Self { data, ..self.clone() }
    }

    /// Extends the bottom and right edges by mirror reflection (edge pixel not repeated).
    pub fn pad_reflect(&self, bottom: usize, right: usize) -> Result<Self> {
        if (bottom > 0 && bottom >= self.height) || (right > 0 && right >= self.width) {
            return Err(Error::Argument(format!(
                "reflection pad ({bottom},{right}) too large for {}x{}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height, self.width);
        Self::from_fn(self.color, h + bottom, w + right, self.range, |c, y, x| {
            self.get(c, reflect_index(y, h), reflect_index(x, w))
        })
    }

    /// Bilinear resize (half-pixel centres, no antialiasing).
    pub fn resize_bilinear(&self, height: usize, width: usize) -> Result<Self> {
        let rows = bilinear_weights(self.height, height);
        let cols = bilinear_weights(self.width, width);
        let resampled = self.separable(&rows, &cols, height, width);
        let (lo, hi) = self.range.bounds();
        // Convex weights; the clamp only absorbs rounding.
        let data = resampled.into_iter().map(|v| v.clamp(lo, hi)).collect();
        Self::new(data, self.color, height, width, self.range)
    }

    fn separable(&self, rows: &[Vec<(usize, f64)>], cols: &[Vec<(usize, f64)>], out_h: usize, out_w: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.channels() * out_h * out_w);
        for c in 0..self.channels() {
            out.extend(filter_plane(self.plane(c), self.width, rows, cols));
        }
        out
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::Argument(format!(
                "shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

fn tensor_parts(t: &Tensor) -> Result<(Vec<f64>, ColorSpace, usize, usize)> {
    let t = match t.rank() {
        4 => {
            if t.dim(0)? != 1 {
                return Err(Error::Argument("expected batch size 1".into()));
            }
            t.squeeze(0)?
        }
        3 => t.clone(),
        r => return Err(Error::Argument(format!("expected rank 3 or 4, got {r}"))),
    };
    let (c, h, w) = t.dims3()?;
    let color = match c {
        1 => ColorSpace::Luma,
        3 => ColorSpace::Rgb,
        c => return Err(Error::Type(format!("unsupported channel count {c}"))),
    };
    let data = t
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;
    if data.iter().any(|v| v.is_nan()) {
        return Err(Error::NumericFault("image tensor".into()));
    }
    Ok((data, color, h, w))
}

/// Mirror index into `[0, len)` without repeating the edge sample.
pub(crate) fn reflect_index(i: usize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let decoded = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let raw = rgb.as_raw();
    ImageTensor::from_fn(ColorSpace::Rgb, h, w, ValueRange::Unit, |c, y, x| {
        f64::from(raw[(y * w + x) * 3 + c]) / 255.0
    })
}

/// Writes an 8-bit image; the format follows the file extension.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if img.range() != ValueRange::Unit {
        return Err(Error::Argument(format!(
            "save_image expects a [0,1] image, got {:?}",
            img.range()
        )));
    }
    let (h, w) = (img.height(), img.width());
    let quant = |v: f64| (v * 255.0).round().clamp(0.0, 255.0) as u8;
    let dynamic = match img.color_space() {
        ColorSpace::Rgb => {
            let mut buf = Vec::with_capacity(h * w * 3);
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        buf.push(quant(img.get(c, y, x)));
                    }
                }
            }
            image::DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(w as u32, h as u32, buf)
                    .expect("buffer sized from image dims"),
            )
        }
        ColorSpace::Luma => {
            let buf = img.data().iter().map(|v| quant(*v)).collect();
            image::DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(w as u32, h as u32, buf)
                    .expect("buffer sized from image dims"),
            )
        }
    };
    dynamic.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format {
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    })
}

pub fn to_luma(img: &ImageTensor) -> Result<ImageTensor> {
    if img.color_space() != ColorSpace::Rgb {
        return Err(Error::Type("to_luma expects an RGB image".into()));
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    let (lo, hi) = img.range().bounds();
    // Written relative to green so that gray pixels map to their level exactly.
    let data = (0..r.len())
        .map(|i| {
            let y = g[i] + LUMA_WEIGHTS[0] * (r[i] - g[i]) + LUMA_WEIGHTS[2] * (b[i] - g[i]);
            y.clamp(lo, hi)
        })
        .collect();
    ImageTensor::new(
        data,
        ColorSpace::Luma,
        img.height(),
        img.width(),
        img.range(),
    )
}

/// Normalized 1-D Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let taps: Vec<f64> = (-r..=r)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Separable Gaussian blur with replicate padding.
pub fn gaussian_blur(img: &ImageTensor, sigma: f64, radius: usize) -> Result<ImageTensor> {
    let taps = blur_weights(img.width(), sigma, radius);
    let rows = blur_weights(img.height(), sigma, radius);
    let data = img.separable(&rows, &taps, img.height(), img.width());
    ImageTensor::new(
        data,
        img.color_space(),
        img.height(),
        img.width(),
        ValueRange::Unbounded,
    )
}

/// `img - gaussian_blur(img, sigma = 2, 9x9)`. The result has no range bound.
pub fn high_pass(img: &ImageTensor) -> Result<ImageTensor> {
    let blurred = gaussian_blur(img, HIGH_PASS_SIGMA, HIGH_PASS_RADIUS)?;
    let data = img
        .data()
        .iter()
        .zip(blurred.data())
        .map(|(a, b)| a - b)
        .collect();
    ImageTensor::new(
        data,
        img.color_space(),
        img.height(),
        img.width(),
        ValueRange::Unbounded,
    )
}

pub(crate) type Taps = Vec<Vec<(usize, f64)>>;

/// Applies `cols` along each row, then `rows` along each column of a single plane.
pub(crate) fn filter_plane(plane: &[f64], width: usize, rows: &[Vec<(usize, f64)>], cols: &[Vec<(usize, f64)>]) -> Vec<f64> {
    let height = plane.len() / width;
    let out_w = cols.len();
    let mut tmp = vec![0.0; height * out_w];
    for y in 0..height {
        let src = &plane[y * width..(y + 1) * width];
        for (x, taps) in cols.iter().enumerate() {
            tmp[y * out_w + x] = taps.iter().map(|&(i, wt)| wt * src[i]).sum();
        }
    }
    let mut out = Vec::with_capacity(rows.len() * out_w);
    for taps in rows {
        for x in 0..out_w {
            out.push(taps.iter().map(|&(i, wt)| wt * tmp[i * out_w + x]).sum());
        }
    }
    out
}

/// Per-output-sample taps of a replicate-padded Gaussian blur.
pub(crate) fn blur_weights(len: usize, sigma: f64, radius: usize) -> Taps {
    let kernel = gaussian_kernel(sigma, radius);
    (0..len)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(k, w)| {
                    let src = i as isize + k as isize - radius as isize;
                    (src.clamp(0, len as isize - 1) as usize, *w)
                })
                .collect()
        })
        .collect()
}

/// Bilinear interpolation taps with half-pixel centres.
pub(crate) fn bilinear_weights(in_len: usize, out_len: usize) -> Taps {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(in_len - 1);
            let frac = src - i0 as f64;
            if i1 == i0 || frac == 0.0 {
                vec![(i0, 1.0)]
            } else {
                vec![(i0, 1.0 - frac), (i1, frac)]
            }
        })
        .collect()
}

/// Box-average taps: each output sample averages the input interval it covers.
pub(crate) fn area_weights(in_len: usize, out_len: usize) -> Taps {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|i| {
            let start = i as f64 * scale;
            let end = (i + 1) as f64 * scale;
            let mut taps = Vec::new();
            let mut j = start.floor() as usize;
            while (j as f64) < end && j < in_len {
                let overlap = (end.min((j + 1) as f64) - start.max(j as f64)).max(0.0);
                if overlap > 0.0 {
                    taps.push((j, overlap / scale));
                }
                j += 1;
            }
            taps
        })
        .collect()
}

/// Dense `(out, in)` matrix for a set of taps, row-major.
pub(crate) fn taps_to_matrix(taps: &Taps, in_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; taps.len() * in_len];
    for (row, t) in taps.iter().enumerate() {
        for &(col, w) in t {
            m[row * in_len + col] += w;
        }
    }
    m
}
