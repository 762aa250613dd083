//! Neural representation normalization: a coordinate MLP conditioned on
//! coarse image features, whose positional-encoding bandwidth limits how
//! faithfully it can reproduce its input.

use std::f64::consts::PI;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvSpec, Linear, PadMode, ParamStore, WeightInit};

pub const MAX_PE_LEVELS: usize = 16;

/// Pixel positions normalized to `[-1, 1]`, row-major `(x, y)` pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct CoordinateGrid {
    height: usize,
    width: usize,
    coords: Vec<[f64; 2]>,
}

impl CoordinateGrid {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// `(x, y)` at row `i`, column `j`.
    pub fn get(&self, i: usize, j: usize) -> [f64; 2] {
        self.coords[i * self.width + j]
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }
}

pub fn make_grid(h: usize, w: usize) -> Result<CoordinateGrid> {
    if h < 2 || w < 2 {
        return Err(Error::Argument(format!("grid needs h, w >= 2, got {h}x{w}")));
    }
    let axis = |n: usize| -> Vec<f64> {
        (0..n).map(|k| -1.0 + 2.0 * k as f64 / (n - 1) as f64).collect()
    };
    let xs = axis(w);
    let ys = axis(h);
    let coords = ys.iter().flat_map(|&y| xs.iter().map(move |&x| [x, y])).collect();
    Ok(CoordinateGrid { height: h, width: w, coords })
}

/// Frequency embedding of every grid point: `4L` values per pixel, the
/// encoding of x followed by the encoding of y.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedCoordinates {
    height: usize,
    width: usize,
    levels: usize,
    values: Vec<f64>,
}

impl EncodedCoordinates {
    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn width_per_pixel(&self) -> usize {
        4 * self.levels
    }

    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let d = self.width_per_pixel();
        let k = (i * self.width + j) * d;
        &self.values[k..k + d]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.width_per_pixel())
    }
}

fn check_levels(levels: usize) -> Result<()> {
    if !(1..=MAX_PE_LEVELS).contains(&levels) {
        return Err(Error::Argument(format!(
            "positional encoding levels must be in 1..={MAX_PE_LEVELS}, got {levels}"
        )));
    }
    Ok(())
}

fn encode_into(out: &mut Vec<f64>, x: f64, levels: usize) {
    for i in 0..levels {
        let a = (1u64 << i) as f64 * PI * x;
        out.push(a.sin());
        out.push(a.cos());
    }
}

pub fn positional_encode(grid: &CoordinateGrid, levels: usize) -> Result<EncodedCoordinates> {
    check_levels(levels)?;
    let mut values = Vec::with_capacity(grid.coords.len() * 4 * levels);
    for &[x, y] in &grid.coords {
        encode_into(&mut values, x, levels);
        encode_into(&mut values, y, levels);
    }
    Ok(EncodedCoordinates {
        height: grid.height,
        width: grid.width,
        levels,
        values,
    })
}

/// Channel-first encoding `(4L, H*W)` ready to stack under feature columns.
pub fn encoding_tensor(h: usize, w: usize, levels: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let enc = positional_encode(&make_grid(h, w)?, levels)?;
    let t = Tensor::from_vec(enc.values, (h * w, 4 * levels), device)?;
    Ok(t.t()?.contiguous()?.to_dtype(dtype)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NrnConfig {
    pub pe_levels: usize,
    /// Channels of the feature map E.
    pub feat_channels: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    /// The encoder runs on the input area-downsampled by this factor; E is
    /// bilinearly upsampled back so it stays pixel-aligned with the grid.
    pub encoder_downsample: usize,
}

impl Default for NrnConfig {
    fn default() -> Self {
        Self {
            pe_levels: 8,
            feat_channels: 64,
            hidden: 256,
            hidden_layers: 3,
            encoder_downsample: 4,
        }
    }
}

impl NrnConfig {
    pub fn validate(&self) -> Result<()> {
        check_levels(self.pe_levels)?;
        if self.feat_channels == 0 || self.hidden == 0 || self.hidden_layers == 0 || self.encoder_downsample == 0 {
            return Err(Error::Configuration("nrn sizes must be positive".into()));
        }
        Ok(())
    }
}

pub struct Nrn {
    cfg: NrnConfig,
    store: ParamStore,
    encoder: [Conv2d; 3],
    decoder: Vec<Linear>,
    pe_cache: Mutex<Option<((usize, usize), Tensor)>>,
}

impl Nrn {
    pub fn new(cfg: NrnConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, dtype, device);
        let c = cfg.feat_channels;
        let init = WeightInit::FanIn;
        let spec = |cin, cout| ConvSpec::new(cin, cout, 3).pad(1, PadMode::Reflect);
        let encoder = [
            Conv2d::new(&mut store, "enc.0", spec(3, c), init)?,
            Conv2d::new(&mut store, "enc.1", spec(c, c), init)?,
            Conv2d::new(&mut store, "enc.2", spec(c, c), init)?,
        ];
        let mut decoder = Vec::with_capacity(cfg.hidden_layers + 1);
        let mut width = c + 4 * cfg.pe_levels;
        for i in 0..cfg.hidden_layers {
            decoder.push(Linear::new(&mut store, &format!("mlp.{i}"), width, cfg.hidden, init)?);
            width = cfg.hidden;
        }
        decoder.push(Linear::new(&mut store, &format!("mlp.{}", cfg.hidden_layers), width, 3, init)?);
        Ok(Self {
            cfg,
            store,
            encoder,
            decoder,
            pe_cache: Mutex::new(None),
        })
    }

    pub fn config(&self) -> &NrnConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// Feature map E with the input's spatial size, `(B, C_feat, H, W)`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let ds = self.cfg.encoder_downsample;
        let (hs, ws) = ((h / ds).clamp(2.min(h), h), (w / ds).clamp(2.min(w), w));
        let small = if (hs, ws) == (h, w) { x.clone() } else { nn::area_resize(x, hs, ws)? };
        let e = self.encoder[0].forward(&small)?;
        let e = nn::instance_norm(&e)?.relu()?;
        let e = self.encoder[1].forward(&e)?.relu()?;
        let e = self.encoder[2].forward(&e)?;
        if (hs, ws) == (h, w) {
            Ok(e)
        } else {
            nn::bilinear_resize(&e, h, w)
        }
    }

    fn encoding(&self, h: usize, w: usize, x: &Tensor) -> Result<Tensor> {
        let mut cache = self.pe_cache.lock().expect("encoding cache poisoned");
        if let Some((dims, t)) = cache.as_ref() {
            if *dims == (h, w) && t.dtype() == x.dtype() {
                return Ok(t.clone());
            }
        }
        let t = encoding_tensor(h, w, self.cfg.pe_levels, x.dtype(), x.device())?;
        *cache = Some(((h, w), t.clone()));
        Ok(t)
    }

    fn decode(&self, cols: &Tensor) -> Result<Tensor> {
        let (last, hidden) = self.decoder.split_last().expect("decoder has layers");
        let mut z = cols.clone();
        for layer in hidden {
            z = layer.forward(&z)?.relu()?;
        }
        Ok(last.forward(&z)?.tanh()?)
    }

    fn columns(&self, x: &Tensor) -> Result<(Tensor, (usize, usize, usize))> {
        let (b, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Argument(format!("nrn expects 3 channels, got {c}")));
        }
        if h < 2 || w < 2 {
            return Err(Error::Argument(format!("nrn input too small: {h}x{w}")));
        }
        let e = self.features(x)?;
        let (_, ce, he, we) = e.dims4()?;
        if (he, we) != (h, w) {
            return Err(Error::Data(format!("feature map {he}x{we} does not match grid {h}x{w}")));
        }
        let e = if b == 1 {
            e.reshape((ce, h * w))?
        } else {
            e.transpose(0, 1)?.contiguous()?.reshape((ce, b * h * w))?
        };
        let pe = self.encoding(h, w, x)?;
        let pe = if b == 1 { pe } else { Tensor::cat(&vec![pe; b], 1)? };
        Ok((Tensor::cat(&[e, pe], 0)?, (b, h, w)))
    }

    fn to_image(y: Tensor, (b, h, w): (usize, usize, usize)) -> Result<Tensor> {
        if b == 1 {
            Ok(y.reshape((1, 3, h, w))?)
        } else {
            Ok(y.reshape((3, b, h, w))?.transpose(0, 1)?.contiguous()?)
        }
    }

    /// Differentiable forward pass on a `(B, 3, H, W)` tensor in `[-1, 1]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (cols, dims) = self.columns(x)?;
        Self::to_image(self.decode(&cols)?, dims)
    }

    /// Gradient-free forward pass that decodes pixels in bounded chunks.
    pub fn forward_inference(&self, x: &Tensor) -> Result<Tensor> {
        const CHUNK: usize = 16384;
        let (cols, dims) = self.columns(&x.detach())?;
        let n = cols.dim(1)?;
        let mut parts = Vec::with_capacity(n.div_ceil(CHUNK));
        let mut start = 0;
        while start < n {
            let len = CHUNK.min(n - start);
            parts.push(self.decode(&cols.narrow(1, start, len)?)?.detach());
            start += len;
        }
        Self::to_image(Tensor::cat(&parts, 1)?, dims)
    }
}

impl std::fmt::Debug for Nrn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Nrn").field("cfg", &self.cfg).field("params", &self.store).finish()
    }
}

/// Mean absolute difference between the representation and its target.
pub fn nrn_loss(i_nr: &Tensor, i_l: &Tensor) -> Result<Tensor> {
    nn::l1(i_nr, i_l)
}
