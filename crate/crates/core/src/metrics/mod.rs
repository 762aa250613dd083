//! Full-reference (PSNR, SSIM) and no-reference (LOE, NIQE) image quality
//! metrics, plus the prompt-based semantic score.

mod niqe;

use std::path::Path;

use candle_core::{DType, Device};
use serde::Serialize;

pub use niqe::{niqe, NiqeModel, BLOCK as NIQE_BLOCK};

use crate::error::{Error, Result};
use crate::imaging::{self, ColorSpace, ImageTensor, ValueRange};
use crate::nn;
use crate::tad::{self, PromptPair, VisionLanguage};

/// Logit scale applied to cosine similarities before the two-way softmax.
pub const SEMANTIC_TEMPERATURE: f64 = 100.0;
/// Side length both lightness maps are reduced to before counting order flips.
pub const LOE_SIZE: usize = 50;

fn same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Argument(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` in dB for images in `[0, 1]`; identical images give `+inf`.
pub fn psnr(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn luma_plane(img: &ImageTensor) -> Result<Vec<f64>> {
    match img.color_space() {
        ColorSpace::Rgb => Ok(imaging::to_luma(img)?.into_data()),
        ColorSpace::Luma => Ok(img.data().to_vec()),
    }
}

/// Mean structural similarity of the luma channels, 11×11 Gaussian window
/// (σ = 1.5), evaluated where the window fits entirely inside the image.
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    let k = 2 * SSIM_RADIUS + 1;
    if h < k || w < k {
        return Err(Error::Argument(format!("SSIM needs at least {k}x{k} pixels, got {h}x{w}")));
    }
    let x = luma_plane(a)?;
    let y = luma_plane(b)?;
    let kernel = imaging::gaussian_kernel(SSIM_SIGMA, SSIM_RADIUS);
    let valid = |len: usize| -> imaging::Taps {
        (0..=len - k)
            .map(|i| kernel.iter().enumerate().map(|(t, &wt)| (i + t, wt)).collect())
            .collect()
    };
    let (rows, cols) = (valid(h), valid(w));
    let blur = |p: &[f64]| imaging::filter_plane(p, w, &rows, &cols);
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let (mx, my) = (blur(&x), blur(&y));
    let (xx, yy, xy) = (blur(&prod(&x, &x)), blur(&prod(&y, &y)), blur(&prod(&x, &y)));
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (m1, m2) = (mx[i], my[i]);
        let s1 = xx[i] - m1 * m1;
        let s2 = yy[i] - m2 * m2;
        let s12 = xy[i] - m1 * m2;
        total += ((2.0 * m1 * m2 + SSIM_C1) * (2.0 * s12 + SSIM_C2))
            / ((m1 * m1 + m2 * m2 + SSIM_C1) * (s1 + s2 + SSIM_C2));
    }
    Ok(total / mx.len() as f64)
}

/// Lightness order error between equally long lightness sequences: for each
/// pixel, the fraction of other pixels whose `>=` relation to it differs
/// between the two, averaged and scaled by 1000.
pub fn loe_from_lightness(original: &[f64], enhanced: &[f64]) -> Result<f64> {
    if original.len() != enhanced.len() {
        return Err(Error::Argument("lightness maps differ in length".into()));
    }
    let n = original.len();
    if n < 2 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for i in 0..n {
        let mut flips = 0usize;
        for j in 0..n {
            if j != i && (original[i] >= original[j]) != (enhanced[i] >= enhanced[j]) {
                flips += 1;
            }
        }
        sum += flips as f64 / (n - 1) as f64;
    }
    Ok(1000.0 * sum / n as f64)
}

/// Per-pixel maximum over color channels, area-reduced to at most 50×50.
fn lightness(img: &ImageTensor) -> Vec<f64> {
    let (h, w) = (img.height(), img.width());
    let plane: Vec<f64> = (0..h * w)
        .map(|p| (0..img.channels()).map(|c| img.plane(c)[p]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let (th, tw) = (h.min(LOE_SIZE), w.min(LOE_SIZE));
    if (th, tw) == (h, w) {
        return plane;
    }
    imaging::filter_plane(&plane, w, &imaging::area_weights(h, th), &imaging::area_weights(w, tw))
}

pub fn loe(enhanced: &ImageTensor, original: &ImageTensor) -> Result<f64> {
    same_shape(enhanced, original)?;
    loe_from_lightness(&lightness(original), &lightness(enhanced))
}

/// Two-way softmax of the scaled cosine similarities, as the probability of the
/// high-light prompt.
pub fn semantic_score_from_cosines(cos_low: f64, cos_high: f64) -> f64 {
    1.0 / (1.0 + (SEMANTIC_TEMPERATURE * (cos_low - cos_high)).exp())
}

pub fn semantic_score(backend: &dyn VisionLanguage, img: &ImageTensor, prompts: &PromptPair) -> Result<f64> {
    let signed = match img.range() {
        ValueRange::Signed => img.clone(),
        _ => img.to_signed()?,
    };
    let t = signed.to_tensor(DType::F32, &Device::Cpu)?;
    let emb = backend.encode_image(&t)?;
    let cos_low = nn::scalar(&tad::cosine_with_embedding(&emb, prompts.emb_low())?)?;
    let cos_high = nn::scalar(&tad::cosine_with_embedding(&emb, prompts.emb_high())?)?;
    Ok(semantic_score_from_cosines(cos_low, cos_high))
}

/// Metric values for one image; absent metrics were not requested or not applicable.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricRow {
    pub name: String,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub loe: Option<f64>,
    pub niqe: Option<f64>,
    pub semantic_score: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
}

impl MetricReport {
    /// Unweighted arithmetic mean of each metric over the rows that have it.
    pub fn mean(&self) -> MetricRow {
        let avg = |f: fn(&MetricRow) -> Option<f64>| {
            let v: Vec<f64> = self.rows.iter().filter_map(f).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        MetricRow {
            name: "mean".into(),
            psnr: avg(|r| r.psnr),
            ssim: avg(|r| r.ssim),
            loe: avg(|r| r.loe),
            niqe: avg(|r| r.niqe),
            semantic_score: avg(|r| r.semantic_score),
        }
    }

    /// CSV with one row per image and a final `mean` row.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for row in self.rows.iter().chain(std::iter::once(&self.mean())) {
            w.serialize(row).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Data(format!("cannot write {}: {other:?}", path.display())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(h: usize, w: usize, f: impl FnMut(usize, usize, usize) -> f64) -> ImageTensor {
        ImageTensor::from_fn(ColorSpace::Rgb, h, w, ValueRange::Unit, f).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = img(8, 8, |_, _, _| 0.2);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = img(8, 8, |_, _, _| 0.3);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = img(8, 8, |_, _, _| 0.7);
        assert!((psnr(&a, &c).unwrap() - 6.020599913279624).abs() < 1e-9);
    }

    #[test]
    fn ssim_of_constants_is_luminance_term() {
        let a = img(16, 16, |_, _, _| 0.3);
        let b = img(16, 16, |_, _, _| 0.4);
        let (m1, m2) = (0.3f64, 0.4f64);
        let want = (2.0 * m1 * m2 + SSIM_C1) / (m1 * m1 + m2 * m2 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-12);
        assert!(ssim(&img(10, 20, |_, _, _| 0.0), &img(10, 20, |_, _, _| 0.0)).is_err());
    }

    #[test]
    fn loe_toy_case() {
        let v = loe_from_lightness(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap();
        assert!((v - 2000.0 / 3.0).abs() < 1e-9);
    }

    #[test]
    fn report_mean_and_csv() {
        let report = MetricReport {
            rows: vec![
                MetricRow { name: "a".into(), psnr: Some(10.0), niqe: Some(3.0), ..Default::default() },
                MetricRow { name: "b".into(), psnr: Some(20.0), ..Default::default() },
            ],
        };
        let m = report.mean();
        assert_eq!(m.psnr, Some(15.0));
        assert_eq!(m.niqe, Some(3.0));
        assert_eq!(m.ssim, None);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        report.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "name,psnr,ssim,loe,niqe,semantic_score");
        assert_eq!(lines[3], "mean,15.0,,,3.0,");
    }
}
