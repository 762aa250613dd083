//! Unpaired training corpora and evaluation directories.
//!
//! Training layout: `<root>/low/*.png|jpg` and `<root>/high/*.png|jpg`.
//! Evaluation: a flat directory of images.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{load_image, ImageTensor};

pub const DEFAULT_PATCH: usize = 256;
pub const MIN_SIDE: usize = 8;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if files.is_empty() {
        return Err(Error::Data(format!("no images in {}", dir.display())));
    }
    Ok(files)
}

/// Where a training patch was taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub size: usize,
    /// Source size after any upscaling.
    pub source_height: usize,
    pub source_width: usize,
    pub flipped: bool,
}

#[derive(Clone, Debug)]
pub struct PatchPair {
    pub low: ImageTensor,
    pub high: ImageTensor,
    pub low_index: usize,
    pub high_index: usize,
    pub low_crop: CropWindow,
    pub high_crop: CropWindow,
}

/// Two independent image pools with no pixel correspondence.
#[derive(Clone, Debug)]
pub struct UnpairedCorpus {
    low: Vec<PathBuf>,
    high: Vec<PathBuf>,
    patch: usize,
    flip: bool,
}

impl UnpairedCorpus {
    /// Opens `<root>/low` and `<root>/high`.
    pub fn open(root: impl AsRef<Path>, patch: usize) -> Result<Self> {
        let root = root.as_ref();
        Self::from_dirs(root.join("low"), root.join("high"), patch)
    }

    pub fn from_dirs(low_dir: impl AsRef<Path>, high_dir: impl AsRef<Path>, patch: usize) -> Result<Self> {
        if patch < MIN_SIDE {
            return Err(Error::Argument(format!("patch size must be at least {MIN_SIDE}")));
        }
        Ok(Self {
            low: list_images(low_dir.as_ref())?,
            high: list_images(high_dir.as_ref())?,
            patch,
            flip: true,
        })
    }

    /// Enables or disables random horizontal flips (on by default).
    pub fn with_flip(mut self, flip: bool) -> Self {
        self.flip = flip;
        self
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn low_paths(&self) -> &[PathBuf] {
        &self.low
    }

    pub fn high_paths(&self) -> &[PathBuf] {
        &self.high
    }

    /// Pairs per epoch: the larger pool is visited once, the smaller wraps around.
    pub fn epoch_length(&self) -> usize {
        self.low.len().max(self.high.len())
    }

    /// `(low, high)` index pairs for one epoch, from two independent permutations.
    pub fn epoch_schedule(&self, seed: u64, epoch: u64) -> Vec<(usize, usize)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut low: Vec<usize> = (0..self.low.len()).collect();
        let mut high: Vec<usize> = (0..self.high.len()).collect();
        low.shuffle(&mut rng);
        high.shuffle(&mut rng);
        (0..self.epoch_length())
            .map(|k| (low[k % low.len()], high[k % high.len()]))
            .collect()
    }

    /// A random (low, high) patch pair in `[-1, 1]`, deterministic in `seed`.
    pub fn sample_training_pair(&self, seed: u64) -> Result<(ImageTensor, ImageTensor)> {
        let p = self.sample_patches(seed)?;
        Ok((p.low, p.high))
    }

    pub fn sample_patches(&self, seed: u64) -> Result<PatchPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let li = rng.random_range(0..self.low.len());
        let hi = rng.random_range(0..self.high.len());
        self.patches_from(li, hi, &mut rng)
    }

    /// Patches from the given pool indices; crops and flips are drawn from `seed`.
    pub fn patches_at(&self, low_index: usize, high_index: usize, seed: u64) -> Result<PatchPair> {
        if low_index >= self.low.len() || high_index >= self.high.len() {
            return Err(Error::Argument("corpus index out of range".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.patches_from(low_index, high_index, &mut rng)
    }

    fn patches_from(&self, li: usize, hi: usize, rng: &mut ChaCha8Rng) -> Result<PatchPair> {
        let (low, low_crop) = self.patch(&self.low[li], rng)?;
        let (high, high_crop) = self.patch(&self.high[hi], rng)?;
        Ok(PatchPair { low, high, low_index: li, high_index: hi, low_crop, high_crop })
    }

    fn patch(&self, path: &Path, rng: &mut ChaCha8Rng) -> Result<(ImageTensor, CropWindow)> {
        let img = load_image(path)?;
        let (h, w) = (img.height(), img.width());
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(Error::Data(format!(
                "{} is {h}x{w}, smaller than {MIN_SIDE}x{MIN_SIDE}",
                path.display()
            )));
        }
        let p = self.patch;
        let img = if h < p || w < p {
            let s = (p as f64 / h as f64).max(p as f64 / w as f64);
            let nh = ((h as f64 * s).ceil() as usize).max(p);
            let nw = ((w as f64 * s).ceil() as usize).max(p);
            img.resize_bilinear(nh, nw)?
        } else {
            img
        };
        let (h, w) = (img.height(), img.width());
        let top = rng.random_range(0..=h - p);
        let left = rng.random_range(0..=w - p);
        let flipped = self.flip && rng.random_bool(0.5);
        let mut crop = img.crop(top, left, p, p)?;
        if flipped {
            crop = crop.flip_horizontal();
        }
        let window = CropWindow { top, left, size: p, source_height: h, source_width: w, flipped };
        Ok((crop.to_signed()?, window))
    }
}

/// One evaluation image, reflect-padded on the bottom and right.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub name: String,
    /// Padded image in `[-1, 1]`.
    pub image: ImageTensor,
    pub original_height: usize,
    pub original_width: usize,
    /// Rows added at the bottom and columns added at the right.
    pub pad: (usize, usize),
}

impl EvalItem {
    /// Removes the padding from a same-size output.
    pub fn crop_back(&self, padded: &ImageTensor) -> Result<ImageTensor> {
        padded.crop(0, 0, self.original_height, self.original_width)
    }
}

/// Lazily loaded evaluation images in file-name order.
pub struct EvalSet {
    files: std::vec::IntoIter<PathBuf>,
    multiple: usize,
}

impl Iterator for EvalSet {
    type Item = Result<EvalItem>;

    fn next(&mut self) -> Option<Self::Item> {
        let path = self.files.next()?;
        Some(load_eval_item(&path, self.multiple))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.files.size_hint()
    }
}

impl ExactSizeIterator for EvalSet {}

/// Padding needed to reach the next multiple.
pub fn pad_to_multiple(len: usize, multiple: usize) -> usize {
    (multiple - len % multiple) % multiple
}

fn load_eval_item(path: &Path, multiple: usize) -> Result<EvalItem> {
    let img = load_image(path)?;
    let (h, w) = (img.height(), img.width());
    let pad = (pad_to_multiple(h, multiple), pad_to_multiple(w, multiple));
    let image = img.pad_reflect(pad.0, pad.1)?.to_signed()?;
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(EvalItem { name, image, original_height: h, original_width: w, pad })
}

/// Evaluation images padded to a multiple of 4.
pub fn iterate_eval(dir: impl AsRef<Path>) -> Result<EvalSet> {
    iterate_eval_padded(dir, 4)
}

pub fn iterate_eval_padded(dir: impl AsRef<Path>, multiple: usize) -> Result<EvalSet> {
    if multiple == 0 {
        return Err(Error::Argument("padding multiple must be positive".into()));
    }
    Ok(EvalSet { files: list_images(dir.as_ref())?.into_iter(), multiple })
}
