use std::path::Path;

use candle_core::{DType, Device, Tensor};
use candle_transformers::models::clip::{ClipConfig, ClipModel};
use tokenizers::Tokenizer;

use super::{VisionLanguage, EMBED_DIM};
use crate::error::{Error, Result};
use crate::nn;

const MEAN: [f64; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
const STD: [f64; 3] = [0.268_629_54, 0.261_302_58, 0.275_777_11];

/// Frozen ViT-B/32 CLIP loaded from a directory holding `model.safetensors`
/// and `tokenizer.json`.
pub struct ClipBackend {
    model: ClipModel,
    tokenizer: Tokenizer,
    image_size: usize,
    device: Device,
}

impl ClipBackend {
    pub fn load(dir: &Path, device: &Device) -> Result<Self> {
        let weights = dir.join("model.safetensors");
        let tok = dir.join("tokenizer.json");
        for p in [&weights, &tok] {
            if !p.exists() {
                return Err(Error::Configuration(format!("missing CLIP asset {}", p.display())));
            }
        }
        let cfg = ClipConfig::vit_base_patch32();
        // SAFETY: the file is memory-mapped read-only and not modified while loaded.
        let vb = unsafe { candle_nn::VarBuilder::from_mmaped_safetensors(&[weights], DType::F32, device)? };
        let model = ClipModel::new(vb, &cfg)?;
        let tokenizer = Tokenizer::from_file(&tok)
            .map_err(|e| Error::Configuration(format!("cannot read {}: {e}", tok.display())))?;
        Ok(Self {
            model,
            tokenizer,
            image_size: cfg.image_size,
            device: device.clone(),
        })
    }
}

impl VisionLanguage for ClipBackend {
    fn encode_image(&self, x: &Tensor) -> Result<Tensor> {
        let dtype = x.dtype();
        let x = nn::bilinear_resize(&x.to_dtype(DType::F32)?, self.image_size, self.image_size)?;
        let u = ((x + 1.0)? * 0.5)?;
        let mean = Tensor::new(&MEAN.map(|v| v as f32), &self.device)?.reshape((1, 3, 1, 1))?;
        let std = Tensor::new(&STD.map(|v| v as f32), &self.device)?.reshape((1, 3, 1, 1))?;
        let pixels = u.broadcast_sub(&mean)?.broadcast_div(&std)?;
        Ok(self.model.get_image_features(&pixels)?.to_dtype(dtype)?)
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
        let enc = self
            .tokenizer
            .encode(text, true)
            .map_err(|e| Error::Argument(format!("cannot tokenize `{text}`: {e}")))?;
        let ids = Tensor::new(enc.get_ids(), &self.device)?.unsqueeze(0)?;
        let v = self.model.get_text_features(&ids)?.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if v.len() != EMBED_DIM {
            return Err(Error::Configuration(format!("text embedding width {} != {EMBED_DIM}", v.len())));
        }
        Ok(v)
    }
}
