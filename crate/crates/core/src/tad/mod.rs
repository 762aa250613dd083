//! Text-driven appearance discrimination: cosine alignment with prompt
//! embeddings from a frozen vision-language encoder, plus color and edge
//! patch critics.

#[cfg(feature = "clip")]
mod clip;
mod stub;

use std::path::PathBuf;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

#[cfg(feature = "clip")]
pub use clip::ClipBackend;
pub use stub::StubBackend;

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, ConvSpec, ParamStore, WeightInit};

pub const EMBED_DIM: usize = 512;

/// Frozen image and text encoders sharing one embedding space.
pub trait VisionLanguage: Send + Sync {
    /// Differentiable image embedding, `(B, 3, H, W)` in `[-1, 1]` to `(B, 512)`.
    fn encode_image(&self, x: &Tensor) -> Result<Tensor>;

    fn encode_text(&self, text: &str) -> Result<Vec<f64>>;
}

/// Which backend to build, as written in config files: `stub:<seed>` or `pretrained:<dir>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackendSpec {
    Stub(u64),
    Pretrained(PathBuf),
}

impl FromStr for BackendSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("stub", seed)) => seed
                .trim()
                .parse()
                .map(BackendSpec::Stub)
                .map_err(|_| Error::Configuration(format!("bad stub seed in `{s}`"))),
            Some(("pretrained", path)) if !path.is_empty() => Ok(BackendSpec::Pretrained(path.into())),
            _ => Err(Error::Configuration(format!(
                "vl_backend must be `stub:<seed>` or `pretrained:<path>`, got `{s}`"
            ))),
        }
    }
}

impl std::fmt::Display for BackendSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BackendSpec::Stub(seed) => write!(f, "stub:{seed}"),
            BackendSpec::Pretrained(p) => write!(f, "pretrained:{}", p.display()),
        }
    }
}

impl Serialize for BackendSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BackendSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl BackendSpec {
    pub fn build(&self, device: &Device) -> Result<Box<dyn VisionLanguage>> {
        match self {
            BackendSpec::Stub(seed) => Ok(Box::new(StubBackend::new(*seed, device)?)),
            #[cfg(feature = "clip")]
            BackendSpec::Pretrained(dir) => Ok(Box::new(ClipBackend::load(dir, device)?)),
            #[cfg(not(feature = "clip"))]
            BackendSpec::Pretrained(_) => Err(Error::Configuration(
                "pretrained backend requires the `clip` feature".into(),
            )),
        }
    }
}

fn normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 0.0 && n.is_finite()) {
        return Err(Error::NumericFault("embedding norm".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// The two prompts and their frozen unit-norm embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPair {
    pub t_low: String,
    pub t_high: String,
    emb_low: Vec<f64>,
    emb_high: Vec<f64>,
}

pub const DEFAULT_LOW_PROMPT: &str = "low-light image";
pub const DEFAULT_HIGH_PROMPT: &str = "high-light image";

impl PromptPair {
    pub fn new(backend: &dyn VisionLanguage, t_low: &str, t_high: &str) -> Result<Self> {
        Ok(Self {
            t_low: t_low.to_string(),
            t_high: t_high.to_string(),
            emb_low: normalize(&backend.encode_text(t_low)?)?,
            emb_high: normalize(&backend.encode_text(t_high)?)?,
        })
    }

    /// A pair with explicitly given embeddings (normalized here).
    pub fn from_embeddings(t_low: &str, t_high: &str, emb_low: &[f64], emb_high: &[f64]) -> Result<Self> {
        if emb_low.len() != emb_high.len() {
            return Err(Error::Argument("prompt embeddings differ in length".into()));
        }
        Ok(Self {
            t_low: t_low.to_string(),
            t_high: t_high.to_string(),
            emb_low: normalize(emb_low)?,
            emb_high: normalize(emb_high)?,
        })
    }

    pub fn emb_low(&self) -> &[f64] {
        &self.emb_low
    }

    pub fn emb_high(&self) -> &[f64] {
        &self.emb_high
    }

    /// The same pair with the roles of the two prompts exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            t_low: self.t_high.clone(),
            t_high: self.t_low.clone(),
            emb_low: self.emb_high.clone(),
            emb_high: self.emb_low.clone(),
        }
    }
}

/// Batch-mean cosine similarity between image embeddings `(B, D)` and a text vector.
pub fn cosine_with_embedding(emb: &Tensor, text: &[f64]) -> Result<Tensor> {
    let (_, d) = emb.dims2()?;
    if d != text.len() {
        return Err(Error::Argument(format!("embedding width {d} vs text width {}", text.len())));
    }
    let tn = text.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(tn > 0.0) {
        return Err(Error::NumericFault("text embedding has zero norm".into()));
    }
    let t = Tensor::from_vec(text.to_vec(), (d, 1), emb.device())?.to_dtype(emb.dtype())?;
    let norms = emb.sqr()?.sum_keepdim(1)?.sqrt()?;
    if nn::scalar(&norms.min_all()?)? <= 0.0 {
        return Err(Error::NumericFault("image embedding has zero norm".into()));
    }
    let cos = (emb.matmul(&t)? / tn)?.div(&norms)?;
    Ok(cos.mean_all()?)
}

pub fn cosine_discrepancy(backend: &dyn VisionLanguage, img: &Tensor, text: &[f64]) -> Result<Tensor> {
    cosine_with_embedding(&backend.encode_image(img)?, text)
}

/// `D(img, T_L) - D(img, T_H)`: low when the image embeds near the high-light prompt.
pub fn cosine_loss_high(backend: &dyn VisionLanguage, img: &Tensor, prompts: &PromptPair) -> Result<Tensor> {
    let e = backend.encode_image(img)?;
    Ok((cosine_with_embedding(&e, &prompts.emb_low)? - cosine_with_embedding(&e, &prompts.emb_high)?)?)
}

/// `D(img, T_H) - D(img, T_L)`.
pub fn cosine_loss_low(backend: &dyn VisionLanguage, img: &Tensor, prompts: &PromptPair) -> Result<Tensor> {
    let e = backend.encode_image(img)?;
    Ok((cosine_with_embedding(&e, &prompts.emb_high)? - cosine_with_embedding(&e, &prompts.emb_low)?)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub ndf: usize,
    /// Number of stride-2 layers.
    pub n_strided: usize,
    pub kernel: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { ndf: 64, n_strided: 3, kernel: 4 }
    }
}

struct PatchNet {
    layers: Vec<(Conv2d, bool)>,
}

impl PatchNet {
    fn new(store: &mut ParamStore, prefix: &str, cfg: &DiscriminatorConfig) -> Result<Self> {
        let init = WeightInit::Normal(0.02);
        let k = cfg.kernel;
        let p = 1;
        let mut layers = Vec::new();
        let mut c = cfg.ndf;
        let spec = |cin, cout, stride| ConvSpec::new(cin, cout, k).stride(stride).pad(p, nn::PadMode::Zeros);
        layers.push((Conv2d::new(store, &format!("{prefix}.0"), spec(3, c, 2), init)?, false));
        for i in 1..cfg.n_strided {
            let next = cfg.ndf * (1 << i).min(8);
            layers.push((Conv2d::new(store, &format!("{prefix}.{i}"), spec(c, next, 2), init)?, true));
            c = next;
        }
        let next = cfg.ndf * (1 << cfg.n_strided).min(8);
        let n = cfg.n_strided;
        layers.push((Conv2d::new(store, &format!("{prefix}.{n}"), spec(c, next, 1), init)?, true));
        layers.push((Conv2d::new(store, &format!("{prefix}.{}", n + 1), spec(next, 1, 1), init)?, false));
        Ok(Self { layers })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = self.layers.len() - 1;
        let mut y = x.clone();
        for (i, (conv, norm)) in self.layers.iter().enumerate() {
            y = conv.forward(&y)?;
            if i < last {
                if *norm {
                    y = nn::instance_norm(&y)?;
                }
                y = nn::leaky_relu(&y, 0.2)?;
            }
        }
        Ok(y)
    }
}

/// Logit maps from both paths, plus the exact tensor the edge path saw.
#[derive(Clone, Debug)]
pub struct PatchLogits {
    pub color: Tensor,
    pub edge: Tensor,
    pub edge_input: Tensor,
}

/// Color and edge patch critics with identical architecture.
pub struct AppearanceDiscriminator {
    store: ParamStore,
    color: PatchNet,
    edge: PatchNet,
}

impl AppearanceDiscriminator {
    pub fn new(cfg: &DiscriminatorConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if cfg.ndf == 0 || cfg.n_strided == 0 || cfg.kernel < 2 {
            return Err(Error::Configuration("invalid discriminator sizes".into()));
        }
        let mut store = ParamStore::new(seed, dtype, device);
        let color = PatchNet::new(&mut store, "color", cfg)?;
        let edge = PatchNet::new(&mut store, "edge", cfg)?;
        Ok(Self { store, color, edge })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn discriminate(&self, img: &Tensor) -> Result<PatchLogits> {
        let edge_input = nn::high_pass_tensor(img)?;
        Ok(PatchLogits {
            color: self.color.forward(img)?,
            edge: self.edge.forward(&edge_input)?,
            edge_input,
        })
    }

    /// Runs only the edge critic on a caller-supplied input.
    pub fn edge_path(&self, x: &Tensor) -> Result<Tensor> {
        self.edge.forward(x)
    }
}

/// Mean binary cross-entropy of logits against a constant target, in the
/// overflow-free form `max(x, 0) - x t + log(1 + exp(-|x|))`.
pub fn bce_with_logits(logits: &Tensor, target: f64) -> Result<Tensor> {
    let pos = logits.relu()?;
    let soft = (logits.abs()?.neg()?.exp()? + 1.0)?.log()?;
    let loss = ((pos - (logits * target)?)? + soft)?;
    let loss = loss.mean_all()?;
    if !nn::scalar(&loss)?.is_finite() {
        return Err(Error::NumericFault("discriminator logits".into()));
    }
    Ok(loss)
}

fn both_paths(d: &AppearanceDiscriminator, img: &Tensor, target: f64) -> Result<Tensor> {
    let out = d.discriminate(img)?;
    Ok(((bce_with_logits(&out.color, target)? + bce_with_logits(&out.edge, target)?)? * 0.5)?)
}

/// Non-saturating generator term: both paths pushed towards "real".
pub fn gan_generator_loss(d: &AppearanceDiscriminator, fake: &Tensor) -> Result<Tensor> {
    both_paths(d, fake, 1.0)
}

/// Critic term: real towards 1, detached fake towards 0, averaged over paths.
pub fn gan_discriminator_loss(d: &AppearanceDiscriminator, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
    let r = both_paths(d, real, 1.0)?;
    let f = both_paths(d, &fake.detach(), 0.0)?;
    Ok(((r + f)? * 0.5)?)
}

/// Critic term rejecting a detached pseudo image.
pub fn pseudo_rejection_loss(d: &AppearanceDiscriminator, pseudo: &Tensor) -> Result<Tensor> {
    both_paths(d, &pseudo.detach(), 0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    ToHigh,
    ToLow,
}

/// Generator- and discriminator-side adversarial losses for one direction.
/// The generator side carries the matching cosine prompt term.
pub fn adversarial_loss(
    real: &Tensor,
    fake: &Tensor,
    d: &AppearanceDiscriminator,
    backend: &dyn VisionLanguage,
    prompts: &PromptPair,
    direction: Direction,
) -> Result<(Tensor, Tensor)> {
    let cos = match direction {
        Direction::ToHigh => cosine_loss_high(backend, fake, prompts)?,
        Direction::ToLow => cosine_loss_low(backend, fake, prompts)?,
    };
    let loss_g = (gan_generator_loss(d, fake)? + cos)?;
    let loss_d = gan_discriminator_loss(d, real, fake)?;
    Ok((loss_g, loss_d))
}
