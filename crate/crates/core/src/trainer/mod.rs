//! Dual-loop training: configuration, learning-rate schedule, alternating
//! generator/critic updates, inference and checkpoints.

mod checkpoint;

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{pad_to_multiple, UnpairedCorpus};
use crate::error::{Error, Result};
use crate::generators::{
    self, Generator, GeneratorConfig, LoopNets, LoopOutputs, MaskExtractor, MaskExtractorConfig, MaskSource,
};
use crate::imaging::{ImageTensor, ValueRange};
use crate::losses::{self, Critics, LossParts, LossReport, LossWeights};
use crate::nn::{self, ParamStore};
use crate::nrn::{Nrn, NrnConfig};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::tad::{
    AppearanceDiscriminator, BackendSpec, DiscriminatorConfig, PromptPair, VisionLanguage, DEFAULT_HIGH_PROMPT,
    DEFAULT_LOW_PROMPT,
};

pub use checkpoint::{read_checkpoint_info, CheckpointInfo, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> DType {
        match self {
            Precision::F32 => DType::F32,
            Precision::F64 => DType::F64,
        }
    }
}

/// Architecture of every network in the system.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub nrn: NrnConfig,
    pub generator: GeneratorConfig,
    pub mask: MaskExtractorConfig,
    pub discriminator: DiscriminatorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: u64,
    pub lr: f64,
    /// Length of the final stretch over which the rate falls linearly to zero.
    pub decay_epochs: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch: usize,
    pub patch: usize,
    /// Positional-encoding levels. Takes precedence over `model.nrn.pe_levels`.
    pub pe_levels: usize,
    pub seed: u64,
    pub prompt_low: String,
    pub prompt_high: String,
    pub weights: LossWeights,
    /// Epochs between checkpoints.
    pub checkpoint_every: u64,
    /// Global gradient-norm ceiling applied to each optimizer step.
    pub grad_clip: f64,
    pub vl_backend: BackendSpec,
    /// Random horizontal flips of training patches.
    pub flip: bool,
    pub precision: Precision,
    /// Caps the number of steps in each epoch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps_per_epoch: Option<usize>,
    /// Stops training after this many steps in total.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    pub model: ModelConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 2e-4,
            decay_epochs: 200,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            batch: 1,
            patch: 256,
            pe_levels: 8,
            seed: 0,
            prompt_low: DEFAULT_LOW_PROMPT.into(),
            prompt_high: DEFAULT_HIGH_PROMPT.into(),
            weights: LossWeights::default(),
            checkpoint_every: 1,
            grad_clip: 10.0,
            vl_backend: BackendSpec::Stub(0),
            flip: true,
            precision: Precision::F32,
            steps_per_epoch: None,
            max_steps: None,
            model: ModelConfig::default(),
        }
    }
}

impl TrainingConfig {
    /// Narrow networks and 32-pixel patches for quick CPU runs.
    pub fn toy() -> Self {
        Self {
            patch: 32,
            flip: false,
            model: ModelConfig {
                nrn: NrnConfig { feat_channels: 8, hidden: 32, ..NrnConfig::default() },
                generator: GeneratorConfig { ngf: 4, n_down: 2, n_blocks: 1 },
                mask: MaskExtractorConfig { width: 8, ..MaskExtractorConfig::default() },
                discriminator: DiscriminatorConfig { ndf: 8, n_strided: 2, kernel: 4 },
            },
            ..Self::default()
        }
    }

    /// Double precision and networks small enough for 4x4 inputs, for
    /// finite-difference checks.
    pub fn grad_check() -> Self {
        Self {
            patch: 4,
            flip: false,
            precision: Precision::F64,
            pe_levels: 2,
            model: ModelConfig {
                nrn: NrnConfig { feat_channels: 3, hidden: 6, hidden_layers: 1, ..NrnConfig::default() },
                generator: GeneratorConfig { ngf: 2, n_down: 1, n_blocks: 1 },
                mask: MaskExtractorConfig { width: 4, trunk_layers: 2, reduction: 2 },
                discriminator: DiscriminatorConfig { ndf: 2, n_strided: 1, kernel: 3 },
            },
            ..Self::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Configuration(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Configuration(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Configuration(m));
        if self.epochs == 0 || self.decay_epochs > self.epochs {
            return bad(format!("need 0 < epochs and decay_epochs <= epochs, got {} and {}", self.epochs, self.decay_epochs));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("learning rate {} must be finite and nonnegative", self.lr));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.batch == 0 || self.checkpoint_every == 0 || self.steps_per_epoch == Some(0) {
            return bad("batch, checkpoint_every and steps_per_epoch must be positive".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip {} must be positive", self.grad_clip));
        }
        let m = self.model.generator.size_multiple();
        if self.patch < 4 || self.patch % m != 0 {
            return bad(format!("patch {} must be at least 4 and a multiple of {m}", self.patch));
        }
        self.effective_model().nrn.validate()
    }

    /// The model configuration with the top-level `pe_levels` applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.nrn.pe_levels = self.pe_levels;
        m
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    /// Digest of the whole configuration.
    pub fn hash(&self) -> Result<String> {
        digest_json(self)
    }

    /// Digest of everything that determines parameter shapes and dtypes.
    pub fn architecture_hash(&self) -> Result<String> {
        digest_json(&(self.effective_model(), self.precision))
    }

    /// Opens `<root>/low` and `<root>/high` with this configuration's patch size and flip setting.
    pub fn open_corpus(&self, root: impl AsRef<Path>) -> Result<UnpairedCorpus> {
        Ok(UnpairedCorpus::open(root, self.patch)?.with_flip(self.flip))
    }
}

fn digest_json<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_string(value).map_err(|e| Error::Configuration(e.to_string()))?;
    Ok(hex::encode(Sha256::digest(json.as_bytes())))
}

/// Learning rate for `epoch`: constant, then linear to zero over the last
/// `decay_epochs` epochs.
pub fn lr_at(cfg: &TrainingConfig, epoch: u64) -> Result<f64> {
    if epoch > cfg.epochs {
        return Err(Error::Argument(format!("epoch {epoch} outside 0..={}", cfg.epochs)));
    }
    let start = cfg.epochs - cfg.decay_epochs;
    if epoch < start || cfg.decay_epochs == 0 {
        Ok(cfg.lr)
    } else {
        Ok(cfg.lr * (cfg.epochs - epoch) as f64 / cfg.decay_epochs as f64)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    splitmix64(seed ^ splitmix64(tag))
}

/// All networks, both optimizers and the training position.
pub struct Trainer {
    cfg: TrainingConfig,
    device: Device,
    nrn: Nrn,
    g_h: Generator,
    g_l: Generator,
    me: MaskExtractor,
    d_h: AppearanceDiscriminator,
    d_l: AppearanceDiscriminator,
    backend: Box<dyn VisionLanguage>,
    prompts: PromptPair,
    opt_g: Adam,
    opt_d: Adam,
    epoch: u64,
    step: u64,
}

impl Trainer {
    /// Builds fresh networks and the configured vision-language backend.
    pub fn new(cfg: TrainingConfig) -> Result<Self> {
        let backend = cfg.vl_backend.build(&Device::Cpu)?;
        Self::with_backend(cfg, backend)
    }

    pub fn with_backend(cfg: TrainingConfig, backend: Box<dyn VisionLanguage>) -> Result<Self> {
        cfg.validate()?;
        let device = Device::Cpu;
        let dtype = cfg.precision.dtype();
        let model = cfg.effective_model();
        let seed = |tag| derive_seed(cfg.seed, tag);
        let nrn = Nrn::new(model.nrn.clone(), seed(1), dtype, &device)?;
        let g_h = Generator::new(model.generator.clone(), seed(2), dtype, &device)?;
        let g_l = Generator::new(model.generator.clone(), seed(3), dtype, &device)?;
        let me = MaskExtractor::new(&model.mask, seed(4), dtype, &device)?;
        let d_h = AppearanceDiscriminator::new(&model.discriminator, seed(5), dtype, &device)?;
        let d_l = AppearanceDiscriminator::new(&model.discriminator, seed(6), dtype, &device)?;
        let prompts = PromptPair::new(backend.as_ref(), &cfg.prompt_low, &cfg.prompt_high)?;
        let collect = |stores: &[&ParamStore]| -> Vec<Var> {
            stores.iter().flat_map(|s| s.vars().cloned()).collect()
        };
        let opt_g = Adam::new(collect(&[nrn.params(), g_h.params(), g_l.params(), me.params()]), cfg.adam())?;
        let opt_d = Adam::new(collect(&[d_h.params(), d_l.params()]), cfg.adam())?;
        let mut trainer = Self {
            cfg,
            device,
            nrn,
            g_h,
            g_l,
            me,
            d_h,
            d_l,
            backend,
            prompts,
            opt_g,
            opt_d,
            epoch: 0,
            step: 0,
        };
        trainer.set_epoch(0)?;
        Ok(trainer)
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.cfg
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.cfg.precision.dtype()
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Completed training steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn nrn(&self) -> &Nrn {
        &self.nrn
    }

    pub fn backend(&self) -> &dyn VisionLanguage {
        self.backend.as_ref()
    }

    pub fn prompts(&self) -> &PromptPair {
        &self.prompts
    }

    /// Moves to `epoch` and applies its learning rate to both optimizers.
    pub fn set_epoch(&mut self, epoch: u64) -> Result<()> {
        let lr = lr_at(&self.cfg, epoch)?;
        self.opt_g.set_lr(lr);
        self.opt_d.set_lr(lr);
        self.epoch = epoch;
        Ok(())
    }

    pub fn current_lr(&self) -> f64 {
        self.opt_g.lr()
    }

    /// Generator-side stores in checkpoint order.
    pub fn generator_stores(&self) -> [(&'static str, &ParamStore); 4] {
        [
            ("nrn", self.nrn.params()),
            ("g_h", self.g_h.params()),
            ("g_l", self.g_l.params()),
            ("me", self.me.params()),
        ]
    }

    pub fn discriminator_stores(&self) -> [(&'static str, &ParamStore); 2] {
        [("d_h", self.d_h.params()), ("d_l", self.d_l.params())]
    }

    pub fn generator_vars(&self) -> &[Var] {
        self.opt_g.vars()
    }

    pub fn discriminator_vars(&self) -> &[Var] {
        self.opt_d.vars()
    }

    pub fn generator_fingerprint(&self) -> Result<String> {
        combined_fingerprint(self.generator_stores().iter().map(|(_, s)| *s))
    }

    pub fn discriminator_fingerprint(&self) -> Result<String> {
        combined_fingerprint(self.discriminator_stores().iter().map(|(_, s)| *s))
    }

    pub fn loop_nets(&self) -> LoopNets<'_> {
        LoopNets {
            nrn: &self.nrn,
            g_h: &self.g_h,
            g_l: &self.g_l,
            me: &self.me,
        }
    }

    pub fn critics(&self) -> Critics<'_> {
        Critics {
            d_h: &self.d_h,
            d_l: &self.d_l,
            backend: self.backend.as_ref(),
            prompts: &self.prompts,
        }
    }

    /// Runs both loops and returns the weighted generator-side objective, its
    /// scalar parts and the loop tensors. Every term is checked for finiteness.
    pub fn generator_objective(&self, i_l: &Tensor, i_h: &Tensor) -> Result<(Tensor, LossParts, LoopOutputs)> {
        let out = generators::run_dual_loops(self.loop_nets(), i_l, i_h)?;
        let terms = losses::generator_terms(&out, i_l, i_h, self.critics())?;
        let parts = terms.parts()?;
        losses::total_loss(&parts, &self.cfg.weights, self.step)?;
        let total = terms.weighted_total(&self.cfg.weights)?;
        Ok((total, parts, out))
    }

    /// One generator-side update. Nothing is modified if a loss or gradient is not finite.
    pub fn generator_half_step(&mut self, i_l: &Tensor, i_h: &Tensor) -> Result<(LossParts, LoopOutputs)> {
        let (total, parts, out) = self.generator_objective(i_l, i_h)?;
        let mut grads = total.backward()?;
        clip_grad_norm(&mut grads, self.opt_g.vars(), self.cfg.grad_clip)?;
        self.opt_g.step(&grads)?;
        Ok((parts, out))
    }

    /// One critic update against the given loop outputs; returns the critic loss.
    pub fn discriminator_half_step(&mut self, out: &LoopOutputs, i_l: &Tensor, i_h: &Tensor) -> Result<f64> {
        let loss = losses::discriminator_objective(out, i_l, i_h, &self.d_h, &self.d_l)?;
        let value = nn::scalar(&loss)?;
        if !value.is_finite() {
            return Err(Error::NumericFault("adv_d".into()));
        }
        let mut grads = loss.backward()?;
        clip_grad_norm(&mut grads, self.opt_d.vars(), self.cfg.grad_clip)?;
        self.opt_d.step(&grads)?;
        Ok(value)
    }

    /// Generator update then critic update on `(B, 3, H, W)` batches in `[-1, 1]`.
    pub fn train_step_tensors(&mut self, i_l: &Tensor, i_h: &Tensor) -> Result<LossReport> {
        let (mut parts, out) = self.generator_half_step(i_l, i_h)?;
        parts.adv_d = self.discriminator_half_step(&out, i_l, i_h)?;
        self.step += 1;
        losses::total_loss(&parts, &self.cfg.weights, self.step)
    }

    pub fn train_step(&mut self, i_l: &ImageTensor, i_h: &ImageTensor) -> Result<LossReport> {
        let l = self.image_tensor(i_l)?;
        let h = self.image_tensor(i_h)?;
        self.train_step_tensors(&l, &h)
    }

    fn image_tensor(&self, img: &ImageTensor) -> Result<Tensor> {
        img.to_signed()?.to_tensor(self.dtype(), &self.device)
    }

    /// Enhances a full image: reflect-pad, gate the normalized input by the
    /// attention map, run the enhancement generator, crop back to `[0, 1]`.
    pub fn infer(&self, img: &ImageTensor) -> Result<ImageTensor> {
        let (h, w) = (img.height(), img.width());
        // Both factors are powers of two, so the larger is their common multiple.
        let m = self.g_h.config().size_multiple().max(4);
        let padded = img.pad_reflect(pad_to_multiple(h, m), pad_to_multiple(w, m))?;
        let x = self.image_tensor(&padded)?.detach();
        let (i_a, _) = self.me.extract(&x)?;
        let normalized = self.nrn.forward_inference(&x)?;
        let y = generators::enhance(&self.g_h, &normalized, &i_a.detach())?.detach();
        ImageTensor::from_tensor_clamped(&y, ValueRange::Signed)?.crop(0, 0, h, w)?.to_unit()
    }

    /// Trains until `epochs` (or `max_steps`) is reached, starting from the
    /// current epoch. Appends one JSON line per step to `<out>/train_log.jsonl`
    /// and writes `ckpt_epoch_<e>.safetensors` plus `latest.safetensors`.
    pub fn fit(&mut self, corpus: &UnpairedCorpus, out_dir: &Path, mut on_step: impl FnMut(&LossReport)) -> Result<()> {
        if corpus.patch_size() != self.cfg.patch {
            return Err(Error::Configuration(format!(
                "corpus patch {} differs from configured patch {}",
                corpus.patch_size(),
                self.cfg.patch
            )));
        }
        fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let log_path = out_dir.join("train_log.jsonl");
        let mut log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        while self.epoch < self.cfg.epochs {
            let epoch = self.epoch;
            self.set_epoch(epoch)?;
            let schedule = corpus.epoch_schedule(self.cfg.seed, epoch);
            let mut steps = schedule.len().div_ceil(self.cfg.batch);
            if let Some(cap) = self.cfg.steps_per_epoch {
                steps = steps.min(cap);
            }
            for (k, chunk) in schedule.chunks(self.cfg.batch).take(steps).enumerate() {
                if self.cfg.max_steps.is_some_and(|max| self.step >= max) {
                    return self.save_checkpoint(out_dir.join("latest.safetensors"));
                }
                let (i_l, i_h) = self.batch_tensors(corpus, chunk, epoch, k)?;
                let report = self.train_step_tensors(&i_l, &i_h)?;
                let line = serde_json::to_string(&report).map_err(|e| Error::Data(e.to_string()))?;
                writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
                on_step(&report);
            }
            self.set_epoch(epoch + 1)?;
            if self.epoch % self.cfg.checkpoint_every == 0 || self.epoch == self.cfg.epochs {
                self.save_checkpoint(out_dir.join(format!("ckpt_epoch_{}.safetensors", self.epoch)))?;
                self.save_checkpoint(out_dir.join("latest.safetensors"))?;
            }
        }
        Ok(())
    }

    fn batch_tensors(&self, corpus: &UnpairedCorpus, pairs: &[(usize, usize)], epoch: u64, k: usize) -> Result<(Tensor, Tensor)> {
        let mut lows = Vec::with_capacity(pairs.len());
        let mut highs = Vec::with_capacity(pairs.len());
        for (j, &(li, hi)) in pairs.iter().enumerate() {
            let tag = (epoch << 32) ^ ((k as u64) << 8) ^ j as u64;
            let p = corpus.patches_at(li, hi, derive_seed(self.cfg.seed, tag ^ 0x5eed_0000_0000_0000))?;
            lows.push(self.image_tensor(&p.low)?);
            highs.push(self.image_tensor(&p.high)?);
        }
        Ok((Tensor::cat(&lows, 0)?, Tensor::cat(&highs, 0)?))
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::write(self, path.as_ref())
    }

    /// Rebuilds a trainer from a checkpoint, using the backend named in its configuration.
    pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        checkpoint::load(path.as_ref(), None)
    }

    /// Like [`Trainer::load_checkpoint`] with an explicit backend, e.g. a stub
    /// for inference where text guidance is not used.
    pub fn load_checkpoint_with_backend(path: impl AsRef<Path>, backend: Box<dyn VisionLanguage>) -> Result<Self> {
        checkpoint::load(path.as_ref(), Some(backend))
    }

    /// Loads weights, optimizer state and position into this trainer, keeping
    /// its own configuration. Fails if the architectures differ.
    pub fn restore_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<()> {
        checkpoint::restore(self, path.as_ref())
    }
}

fn combined_fingerprint<'a>(stores: impl Iterator<Item = &'a ParamStore>) -> Result<String> {
    let mut h = Sha256::new();
    for s in stores {
        h.update(s.fingerprint()?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}
