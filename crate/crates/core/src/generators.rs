//! Enhancement and degradation generators, the mask extractor, and the two
//! closed generation loops that tie them together.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvSpec, Linear, PadMode, ParamStore, Upsample2x, WeightInit};
use crate::nrn::Nrn;

/// An image-to-image network on `(B, 3, H, W)` tensors in `[-1, 1]`.
pub trait ImageMap: Send + Sync {
    fn map(&self, x: &Tensor) -> Result<Tensor>;

    /// Trainable parameters, if any.
    fn params(&self) -> Option<&ParamStore> {
        None
    }
}

/// Produces the attention map `(B, 1, H, W)` and lightness mask `(B, 3, H, W)`.
pub trait MaskSource: Send + Sync {
    fn extract(&self, x: &Tensor) -> Result<(Tensor, Tensor)>;

    fn params(&self) -> Option<&ParamStore> {
        None
    }
}

/// Returns its input unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl ImageMap for Identity {
    fn map(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }
}

/// Spatially constant attention and mask, e.g. unit attention with a zero mask.
#[derive(Clone, Copy, Debug)]
pub struct ConstantMasks {
    pub attention: f64,
    pub mask: f64,
}

impl MaskSource for ConstantMasks {
    fn extract(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, _, h, w) = x.dims4()?;
        let a = Tensor::full(self.attention, (b, 1, h, w), x.device())?.to_dtype(x.dtype())?;
        let m = Tensor::full(self.mask, (b, 3, h, w), x.device())?.to_dtype(x.dtype())?;
        Ok((a, m))
    }
}

impl ImageMap for Nrn {
    fn map(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }

    fn params(&self) -> Option<&ParamStore> {
        Some(Nrn::params(self))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    /// Width of the first layer; doubles at each downsampling step.
    pub ngf: usize,
    pub n_down: usize,
    pub n_blocks: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { ngf: 32, n_down: 2, n_blocks: 6 }
    }
}

impl GeneratorConfig {
    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.n_down
    }
}

struct ResBlock {
    a: Conv2d,
    b: Conv2d,
}

impl ResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = nn::instance_norm(&self.a.forward(x)?)?.relu()?;
        let y = nn::instance_norm(&self.b.forward(&y)?)?;
        Ok((x + y)?)
    }
}

/// Residual encoder/decoder generator with a tanh output.
pub struct Generator {
    cfg: GeneratorConfig,
    store: ParamStore,
    stem: Conv2d,
    down: Vec<Conv2d>,
    blocks: Vec<ResBlock>,
    up: Vec<Upsample2x>,
    head: Conv2d,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if cfg.ngf == 0 {
            return Err(Error::Configuration("generator width must be positive".into()));
        }
        let mut store = ParamStore::new(seed, dtype, device);
        let init = WeightInit::Normal(0.02);
        let ngf = cfg.ngf;
        let stem = Conv2d::new(&mut store, "stem", ConvSpec::new(3, ngf, 7).pad(3, PadMode::Reflect), init)?;
        let mut down = Vec::new();
        let mut c = ngf;
        for i in 0..cfg.n_down {
            down.push(Conv2d::new(&mut store, &format!("down.{i}"), ConvSpec::new(c, 2 * c, 3).stride(2), init)?);
            c *= 2;
        }
        let mut blocks = Vec::new();
        for i in 0..cfg.n_blocks {
            let spec = ConvSpec::new(c, c, 3).pad(1, PadMode::Reflect);
            blocks.push(ResBlock {
                a: Conv2d::new(&mut store, &format!("block.{i}.a"), spec, init)?,
                b: Conv2d::new(&mut store, &format!("block.{i}.b"), spec, init)?,
            });
        }
        let mut up = Vec::new();
        for i in 0..cfg.n_down {
            up.push(Upsample2x::new(&mut store, &format!("up.{i}"), c, c / 2, init)?);
            c /= 2;
        }
        let head = Conv2d::new(&mut store, "head", ConvSpec::new(c, 3, 7).pad(3, PadMode::Reflect), init)?;
        Ok(Self { cfg, store, stem, down, blocks, up, head })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        let m = self.cfg.size_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Argument(format!("generator input {h}x{w} is not a multiple of {m}")));
        }
        let mut y = nn::instance_norm(&self.stem.forward(x)?)?.relu()?;
        for d in &self.down {
            y = nn::instance_norm(&d.forward(&y)?)?.relu()?;
        }
        for b in &self.blocks {
            y = b.forward(&y)?;
        }
        for u in &self.up {
            y = nn::instance_norm(&u.forward(&y)?)?.relu()?;
        }
        Ok(self.head.forward(&y)?.tanh()?)
    }
}

impl ImageMap for Generator {
    fn map(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)
    }

    fn params(&self) -> Option<&ParamStore> {
        Some(&self.store)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskExtractorConfig {
    pub width: usize,
    pub trunk_layers: usize,
    /// Channel-attention bottleneck reduction.
    pub reduction: usize,
}

impl Default for MaskExtractorConfig {
    fn default() -> Self {
        Self { width: 64, trunk_layers: 4, reduction: 4 }
    }
}

/// Convolutional trunk with a channel-gated attention head and a mask head.
pub struct MaskExtractor {
    store: ParamStore,
    trunk: Vec<Conv2d>,
    squeeze: Linear,
    excite: Linear,
    attention: Conv2d,
    mask: Conv2d,
}

impl MaskExtractor {
    pub fn new(cfg: &MaskExtractorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if cfg.width < cfg.reduction || cfg.reduction == 0 || cfg.trunk_layers == 0 {
            return Err(Error::Configuration("invalid mask extractor sizes".into()));
        }
        let mut store = ParamStore::new(seed, dtype, device);
        let init = WeightInit::FanIn;
        let w = cfg.width;
        let mut trunk = Vec::new();
        for i in 0..cfg.trunk_layers {
            let cin = if i == 0 { 3 } else { w };
            trunk.push(Conv2d::new(&mut store, &format!("trunk.{i}"), ConvSpec::new(cin, w, 3), init)?);
        }
        let squeeze = Linear::new(&mut store, "cam.squeeze", w, w / cfg.reduction, init)?;
        let excite = Linear::new(&mut store, "cam.excite", w / cfg.reduction, w, init)?;
        let attention = Conv2d::new(&mut store, "attention", ConvSpec::new(w, 1, 3), init)?;
        let mask = Conv2d::new(&mut store, "mask", ConvSpec::new(w, 3, 3), init)?;
        Ok(Self { store, trunk, squeeze, excite, attention, mask })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    fn trunk(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        for c in &self.trunk {
            y = c.forward(&y)?.relu()?;
        }
        Ok(y)
    }

    /// Per-channel gates in `(0, 1)`, shape `(B, C, 1, 1)`.
    fn channel_gates(&self, f: &Tensor) -> Result<Tensor> {
        let (b, c, _, _) = f.dims4()?;
        let pooled = f.mean(3)?.mean(2)?.t()?; // (C, B)
        let z = self.squeeze.forward(&pooled)?.relu()?;
        let g = nn::sigmoid(&self.excite.forward(&z)?)?;
        Ok(g.t()?.reshape((b, c, 1, 1))?)
    }
}

impl MaskSource for MaskExtractor {
    fn extract(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let f = self.trunk(x)?;
        let gated = f.broadcast_mul(&self.channel_gates(&f)?)?;
        let i_a = nn::sigmoid(&self.attention.forward(&gated)?)?;
        let i_m = nn::sigmoid(&self.mask.forward(&f)?)?;
        Ok((i_a, i_m))
    }

    fn params(&self) -> Option<&ParamStore> {
        Some(&self.store)
    }
}

fn gate(img: &Tensor, i_a: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = img.dims4()?;
    let (ba, ca, ha, wa) = i_a.dims4()?;
    if (ba, ca, ha, wa) != (b, 1, h, w) {
        return Err(Error::Argument(format!(
            "attention map {:?} does not match image {:?}",
            i_a.dims(),
            img.dims()
        )));
    }
    Ok(img.broadcast_mul(i_a)?)
}

/// `G_H(i_a ⊗ img)`.
pub fn enhance(g_h: &dyn ImageMap, img: &Tensor, i_a: &Tensor) -> Result<Tensor> {
    g_h.map(&gate(img, i_a)?)
}

/// `G_L(i_a ⊗ img)`.
pub fn degrade(g_l: &dyn ImageMap, img: &Tensor, i_a: &Tensor) -> Result<Tensor> {
    g_l.map(&gate(img, i_a)?)
}

/// Borrowed view of the generator-side networks.
#[derive(Clone, Copy)]
pub struct LoopNets<'a> {
    pub nrn: &'a dyn ImageMap,
    pub g_h: &'a dyn ImageMap,
    pub g_l: &'a dyn ImageMap,
    pub me: &'a dyn MaskSource,
}

/// Every intermediate of one pass through both loops.
#[derive(Clone, Debug)]
pub struct LoopOutputs {
    pub i_a: Tensor,
    pub i_m: Tensor,
    pub i_nrn: Tensor,
    /// Enhanced low-light input.
    pub pred_high: Tensor,
    /// Enhanced then degraded low-light input.
    pub cyc_low: Tensor,
    /// Degraded high-light input.
    pub pred_low: Tensor,
    /// Degraded then enhanced high-light input.
    pub cyc_high: Tensor,
    /// `clamp(i_l + i_m)`.
    pub pseudo_high: Tensor,
    /// `pred_high - i_l`.
    pub pseudo_mask: Tensor,
    /// Mask re-extracted from `pred_low`.
    pub pred_mask: Tensor,
    /// `clamp(pred_low + pred_mask)`.
    pub recon_high: Tensor,
    /// `clamp(i_h - i_m)`.
    pub pseudo_low: Tensor,
}

impl LoopOutputs {
    pub const NAMES: [&'static str; 12] = [
        "i_a",
        "i_m",
        "i_nrn",
        "pred_high",
        "cyc_low",
        "pred_low",
        "cyc_high",
        "pseudo_high",
        "pseudo_mask",
        "pred_mask",
        "recon_high",
        "pseudo_low",
    ];

    pub fn named(&self) -> [(&'static str, &Tensor); 12] {
        let t = [
            &self.i_a,
            &self.i_m,
            &self.i_nrn,
            &self.pred_high,
            &self.cyc_low,
            &self.pred_low,
            &self.cyc_high,
            &self.pseudo_high,
            &self.pseudo_mask,
            &self.pred_mask,
            &self.recon_high,
            &self.pseudo_low,
        ];
        std::array::from_fn(|i| (Self::NAMES[i], t[i]))
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, t) in self.named() {
            ensure_finite(name, t)?;
        }
        Ok(())
    }
}

/// Fails with a numeric fault naming `name` if `t` holds a NaN or infinity.
pub fn ensure_finite(name: &str, t: &Tensor) -> Result<()> {
    let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NumericFault(name.to_string()))
    }
}

pub fn run_dual_loops(nets: LoopNets<'_>, i_l: &Tensor, i_h: &Tensor) -> Result<LoopOutputs> {
    if i_l.dims() != i_h.dims() {
        return Err(Error::Argument(format!(
            "low {:?} and high {:?} inputs differ in shape",
            i_l.dims(),
            i_h.dims()
        )));
    }
    let (i_a, i_m) = nets.me.extract(i_l)?;
    let i_nrn = nets.nrn.map(i_l)?;
    let pred_high = enhance(nets.g_h, &i_nrn, &i_a)?;
    let cyc_low = nets.g_l.map(&pred_high)?;
    let pred_low = degrade(nets.g_l, i_h, &i_a)?;
    let cyc_high = nets.g_h.map(&pred_low)?;
    let pseudo_high = nn::clamp_signed(&(i_l + &i_m)?)?;
    let pseudo_mask = (&pred_high - i_l)?;
    let (_, pred_mask) = nets.me.extract(&pred_low)?;
    let recon_high = nn::clamp_signed(&(&pred_low + &pred_mask)?)?;
    let pseudo_low = nn::clamp_signed(&(i_h - &i_m)?)?;
    let out = LoopOutputs {
        i_a,
        i_m,
        i_nrn,
        pred_high,
        cyc_low,
        pred_low,
        cyc_high,
        pseudo_high,
        pseudo_mask,
        pred_mask,
        recon_high,
        pseudo_low,
    };
    out.check_finite()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GeneratorConfig {
        GeneratorConfig { ngf: 4, n_down: 2, n_blocks: 1 }
    }

    #[test]
    fn generator_shape_and_range() {
        let g = Generator::new(small(), 1, DType::F32, &Device::Cpu).unwrap();
        for (h, w) in [(16, 16), (24, 20)] {
            let x = Tensor::rand(-1.0f32, 1.0, (1, 3, h, w), &Device::Cpu).unwrap();
            let y = g.forward(&x).unwrap();
            assert_eq!(y.dims(), x.dims());
            let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(v.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
        let x = Tensor::zeros((1, 3, 18, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(g.forward(&x).is_err());
    }

    #[test]
    fn twin_generators_have_equal_size() {
        let a = Generator::new(GeneratorConfig::default(), 1, DType::F32, &Device::Cpu).unwrap();
        let b = Generator::new(GeneratorConfig::default(), 2, DType::F32, &Device::Cpu).unwrap();
        assert_eq!(a.store.num_elements(), b.store.num_elements());
    }

    #[test]
    fn masks_in_unit_range_and_input_dependent() {
        let cfg = MaskExtractorConfig { width: 8, ..Default::default() };
        let me = MaskExtractor::new(&cfg, 5, DType::F64, &Device::Cpu).unwrap();
        let x1 = Tensor::rand(-1.0f64, 1.0, (1, 3, 8, 8), &Device::Cpu).unwrap();
        let x2 = Tensor::rand(-1.0f64, 1.0, (1, 3, 8, 8), &Device::Cpu).unwrap();
        let (a1, m1) = me.extract(&x1).unwrap();
        let (a2, _) = me.extract(&x2).unwrap();
        assert_eq!(a1.dims(), &[1, 1, 8, 8]);
        assert_eq!(m1.dims(), &[1, 3, 8, 8]);
        for t in [&a1, &m1] {
            let v = t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
            assert!(v.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let d = (a1 - a2).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(d > 0.0);
    }

    #[test]
    fn gating_identities() {
        let g = Generator::new(small(), 1, DType::F64, &Device::Cpu).unwrap();
        let x = Tensor::rand(-1.0f64, 1.0, (1, 3, 8, 8), &Device::Cpu).unwrap();
        let ones = Tensor::ones((1, 1, 8, 8), DType::F64, &Device::Cpu).unwrap();
        let a = enhance(&g, &x, &ones).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = g.forward(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
        let zeros = ones.zeros_like().unwrap();
        let a = enhance(&g, &x, &zeros).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let b = g.forward(&x.zeros_like().unwrap()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(a, b);
        let bad = Tensor::ones((1, 1, 4, 8), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(degrade(&g, &x, &bad), Err(Error::Argument(_))));
    }

    #[test]
    fn nan_input_is_reported_by_name() {
        let x = Tensor::new(&[[[[f64::NAN, 0.0], [0.0, 0.0]]]], &Device::Cpu).unwrap();
        let x = x.repeat((1, 3, 1, 1)).unwrap();
        let nets = LoopNets {
            nrn: &Identity,
            g_h: &Identity,
            g_l: &Identity,
            me: &ConstantMasks { attention: 1.0, mask: 0.0 },
        };
        let clean = x.zeros_like().unwrap();
        match run_dual_loops(nets, &x, &clean) {
            Err(Error::NumericFault(name)) => assert_eq!(name, "i_nrn"),
            other => panic!("expected numeric fault, got {other:?}"),
        }
    }
}
