//! Natural Image Quality Evaluator: distance between the natural-scene
//! statistics of an image and a pristine multivariate Gaussian model.
//!
//! Follows the MATLAB reference release: 96×96 blocks without overlap, MSCN
//! coefficients from a 7×7 Gaussian (σ = 7/6), AGGD fits on the coefficients
//! and four paired products, two scales (the second by antialiased bicubic
//! halving), and a pseudo-inverse of the pooled covariance.

use std::path::Path;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::imaging::{self, ColorSpace, ImageTensor, Taps, ValueRange};

/// Block side for feature pooling; also the smallest image side NIQE accepts.
pub const BLOCK: usize = 96;
pub const N_FEATURES: usize = 36;

const BUNDLED: &str = include_str!("../../assets/niqe_pristine.json");

#[derive(Deserialize)]
struct ModelFile {
    mu: Vec<f64>,
    cov: Vec<Vec<f64>>,
}

/// Pristine model: feature mean and covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct NiqeModel {
    mu: DVector<f64>,
    cov: DMatrix<f64>,
}

impl NiqeModel {
    /// The model shipped with the crate.
    pub fn bundled() -> &'static NiqeModel {
        static MODEL: OnceLock<NiqeModel> = OnceLock::new();
        MODEL.get_or_init(|| Self::parse(BUNDLED).expect("bundled NIQE model is valid"))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Configuration(format!("cannot read NIQE model {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn parse(text: &str) -> Result<Self> {
        let f: ModelFile = serde_json::from_str(text)
            .map_err(|e| Error::Configuration(format!("malformed NIQE model: {e}")))?;
        Self::from_parts(f.mu, f.cov.concat())
    }

    /// `cov` is row-major `N_FEATURES × N_FEATURES`.
    pub fn from_parts(mu: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        if mu.len() != N_FEATURES || cov.len() != N_FEATURES * N_FEATURES {
            return Err(Error::Configuration(format!(
                "NIQE model needs {N_FEATURES} means and a {N_FEATURES}x{N_FEATURES} covariance"
            )));
        }
        Ok(Self {
            mu: DVector::from_vec(mu),
            cov: DMatrix::from_row_slice(N_FEATURES, N_FEATURES, &cov),
        })
    }

    pub fn mean(&self) -> &[f64] {
        self.mu.as_slice()
    }

    /// `sqrt(d^T pinv((Σ_model + Σ_sample) / 2) d)` with `d` the mean difference.
    pub fn distance(&self, sample_mean: &[f64], sample_cov: &DMatrix<f64>) -> Result<f64> {
        if sample_mean.len() != N_FEATURES || sample_cov.shape() != (N_FEATURES, N_FEATURES) {
            return Err(Error::Argument("NIQE sample statistics have the wrong size".into()));
        }
        let d = &self.mu - DVector::from_column_slice(sample_mean);
        let pooled = (&self.cov + sample_cov) * 0.5;
        let svd = pooled.svd(true, true);
        let tol = 1e-15 * svd.singular_values.max();
        let pinv = svd
            .pseudo_inverse(tol)
            .map_err(|e| Error::NumericFault(format!("NIQE pseudo-inverse: {e}")))?;
        let q = (d.transpose() * pinv * &d)[(0, 0)];
        Ok(q.abs().sqrt())
    }

    /// Score of a gray image with values on the 0–255 scale.
    pub fn score_gray255(&self, gray: &[f64], height: usize, width: usize) -> Result<f64> {
        if height < BLOCK || width < BLOCK {
            return Err(Error::Argument(format!(
                "NIQE needs at least {BLOCK}x{BLOCK} pixels, got {height}x{width}"
            )));
        }
        let (feats, n) = block_features(gray, height, width);
        let (mean, cov) = sample_statistics(&feats, n);
        self.distance(&mean, &cov)
    }
}

/// NIQE of an image in `[0, 1]` (RGB is reduced to luma first).
pub fn niqe(img: &ImageTensor, model: &NiqeModel) -> Result<f64> {
    let img = match img.range() {
        ValueRange::Signed => img.to_unit()?,
        _ => img.clone(),
    };
    let luma = match img.color_space() {
        ColorSpace::Rgb => imaging::to_luma(&img)?,
        ColorSpace::Luma => img,
    };
    let gray: Vec<f64> = luma.data().iter().map(|v| v * 255.0).collect();
    model.score_gray255(&gray, luma.height(), luma.width())
}

/// Row-major `n × 36` feature matrix for every block of the cropped image.
fn block_features(gray: &[f64], height: usize, width: usize) -> (Vec<f64>, usize) {
    let (bh, bw) = (height / BLOCK, width / BLOCK);
    let (h, w) = (bh * BLOCK, bw * BLOCK);
    let mut img: Vec<f64> = (0..h).flat_map(|y| gray[y * width..y * width + w].iter().copied()).collect();
    let n = bh * bw;
    let mut feats = vec![0.0; n * N_FEATURES];
    let (mut ch, mut cw) = (h, w);
    for scale in 0..2 {
        let mscn = mscn(&img, ch, cw);
        let size = BLOCK >> scale;
        for bx in 0..bw {
            for by in 0..bh {
                let mut block = Vec::with_capacity(size * size);
                for y in by * size..(by + 1) * size {
                    block.extend_from_slice(&mscn[y * cw + bx * size..y * cw + (bx + 1) * size]);
                }
                let f = block_feature(&block, size);
                let row = bx * bh + by;
                feats[row * N_FEATURES + scale * 18..row * N_FEATURES + scale * 18 + 18].copy_from_slice(&f);
            }
        }
        if scale == 0 {
            let (nh, nw) = (ch.div_ceil(2), cw.div_ceil(2));
            img = imaging::filter_plane(&img, cw, &bicubic_half_taps(ch, nh), &bicubic_half_taps(cw, nw));
            (ch, cw) = (nh, nw);
        }
    }
    (feats, n)
}

/// Mean-subtracted contrast-normalized coefficients.
fn mscn(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let sigma = 7.0 / 6.0;
    let rows = imaging::blur_weights(h, sigma, 3);
    let cols = imaging::blur_weights(w, sigma, 3);
    let mu = imaging::filter_plane(img, w, &rows, &cols);
    let sq: Vec<f64> = img.iter().map(|v| v * v).collect();
    let mu_sq = imaging::filter_plane(&sq, w, &rows, &cols);
    img.iter()
        .zip(&mu)
        .zip(&mu_sq)
        .map(|((&v, &m), &m2)| (v - m) / ((m2 - m * m).abs().sqrt() + 1.0))
        .collect()
}

fn block_feature(block: &[f64], size: usize) -> [f64; 18] {
    let mut f = [0.0; 18];
    let (alpha, bl, br) = aggd_fit(block);
    f[0] = alpha;
    f[1] = (bl + br) / 2.0;
    const SHIFTS: [(isize, isize); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];
    let n = size as isize;
    for (k, (dy, dx)) in SHIFTS.iter().enumerate() {
        // Circular shift: shifted[i][j] = block[(i - dy) mod n][(j - dx) mod n].
        let mut prod = Vec::with_capacity(block.len());
        for i in 0..n {
            for j in 0..n {
                let si = (i - dy).rem_euclid(n);
                let sj = (j - dx).rem_euclid(n);
                prod.push(block[(i * n + j) as usize] * block[(si * n + sj) as usize]);
            }
        }
        let (alpha, bl, br) = aggd_fit(&prod);
        let mean = (br - bl) * gamma(2.0 / alpha) / gamma(1.0 / alpha);
        f[2 + 4 * k..6 + 4 * k].copy_from_slice(&[alpha, mean, bl, br]);
    }
    f
}

/// Shape grid 0.2, 0.201, ..., 10.0 and its ratio function.
fn shape_table() -> &'static [(f64, f64)] {
    static TABLE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
    TABLE.get_or_init(|| {
        (0..9801)
            .map(|k| {
                let g = 0.2 + k as f64 * 0.001;
                let r = gamma(2.0 / g).powi(2) / (gamma(1.0 / g) * gamma(3.0 / g));
                (g, r)
            })
            .collect()
    })
}

/// Asymmetric generalized Gaussian fit by moment matching: `(alpha, beta_l, beta_r)`.
fn aggd_fit(x: &[f64]) -> (f64, f64, f64) {
    let (mut ls, mut ln, mut rs, mut rn, mut abs, mut sq) = (0.0, 0usize, 0.0, 0usize, 0.0, 0.0);
    for &v in x {
        if v < 0.0 {
            ls += v * v;
            ln += 1;
        } else if v > 0.0 {
            rs += v * v;
            rn += 1;
        }
        abs += v.abs();
        sq += v * v;
    }
    let n = x.len() as f64;
    let left = (ls / ln as f64).sqrt();
    let right = (rs / rn as f64).sqrt();
    let gh = left / right;
    let rhat = (abs / n).powi(2) / (sq / n);
    let rnorm = rhat * (gh.powi(3) + 1.0) * (gh + 1.0) / (gh * gh + 1.0).powi(2);
    let mut best = (f64::INFINITY, f64::NAN);
    for &(g, r) in shape_table() {
        let e = (r - rnorm).powi(2);
        if e < best.0 {
            best = (e, g);
        }
    }
    let alpha = best.1;
    let c = (gamma(1.0 / alpha) / gamma(3.0 / alpha)).sqrt();
    (alpha, left * c, right * c)
}

/// MATLAB `imresize(·, 0.5)` bicubic taps with antialiasing and symmetric borders.
fn bicubic_half_taps(in_len: usize, out_len: usize) -> Taps {
    let scale = 0.5;
    let kernel_width: f64 = 4.0 / scale;
    let cubic = |x: f64| {
        let a = x.abs();
        if a <= 1.0 {
            1.5 * a.powi(3) - 2.5 * a * a + 1.0
        } else if a <= 2.0 {
            -0.5 * a.powi(3) + 2.5 * a * a - 4.0 * a + 2.0
        } else {
            0.0
        }
    };
    let p = kernel_width.ceil() as isize + 2;
    let n = in_len as isize;
    (1..=out_len)
        .map(|x| {
            let u = x as f64 / scale + 0.5 * (1.0 - 1.0 / scale);
            let left = (u - kernel_width / 2.0).floor() as isize;
            let raw: Vec<(isize, f64)> = (0..p)
                .map(|k| {
                    let idx = left + k;
                    (idx, scale * cubic((u - idx as f64) * scale))
                })
                .collect();
            let sum: f64 = raw.iter().map(|(_, w)| w).sum();
            raw.into_iter()
                .filter(|(_, w)| *w != 0.0)
                .map(|(idx, w)| {
                    let i = idx - 1;
                    let i = if i < 0 { -i - 1 } else if i >= n { 2 * n - 1 - i } else { i };
                    (i as usize, w / sum)
                })
                .collect()
        })
        .collect()
}

/// Mean over blocks ignoring NaN entries, and the covariance of the NaN-free
/// rows (normalized by `n - 1`, or zero with fewer than two rows).
fn sample_statistics(feats: &[f64], n: usize) -> (Vec<f64>, DMatrix<f64>) {
    let mut mean = vec![0.0; N_FEATURES];
    for (j, m) in mean.iter_mut().enumerate() {
        let vals: Vec<f64> = (0..n).map(|i| feats[i * N_FEATURES + j]).filter(|v| !v.is_nan()).collect();
        *m = vals.iter().sum::<f64>() / vals.len() as f64;
    }
    let clean: Vec<&[f64]> = feats
        .chunks(N_FEATURES)
        .filter(|r| r.iter().all(|v| !v.is_nan()))
        .collect();
    let mut cov = DMatrix::zeros(N_FEATURES, N_FEATURES);
    if clean.len() >= 2 {
        let m = clean.len();
        let mut cm = vec![0.0; N_FEATURES];
        for r in &clean {
            for j in 0..N_FEATURES {
                cm[j] += r[j] / m as f64;
            }
        }
        for r in &clean {
            for a in 0..N_FEATURES {
                for b in 0..N_FEATURES {
                    cov[(a, b)] += (r[a] - cm[a]) * (r[b] - cm[b]) / (m - 1) as f64;
                }
            }
        }
    }
    (mean, cov)
}
