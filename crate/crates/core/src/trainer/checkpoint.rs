//! Single-file safetensors checkpoints with the configuration embedded as metadata.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use candle_core::{DType, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use super::{Trainer, TrainingConfig};
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::tad::VisionLanguage;

pub const CHECKPOINT_FORMAT: &str = "lowlight-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Header fields of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointInfo {
    pub version: u32,
    pub config: TrainingConfig,
    pub config_hash: String,
    pub architecture_hash: String,
    pub epoch: u64,
    pub step: u64,
}

struct Encoded {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    bytes: Vec<u8>,
}

fn encode(name: String, t: &Tensor) -> Result<Encoded> {
    let shape = t.dims().to_vec();
    let flat = t.flatten_all()?;
    let (dtype, bytes) = match t.dtype() {
        DType::F32 => (Dtype::F32, flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        DType::F64 => (Dtype::F64, flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect()),
        other => return Err(Error::Compatibility(format!("cannot store {other:?} tensor `{name}`"))),
    };
    Ok(Encoded { name, dtype, shape, bytes })
}

fn decode(name: &str, view: &TensorView<'_>, device: &candle_core::Device) -> Result<Tensor> {
    let data = view.data();
    let t = match view.dtype() {
        Dtype::F32 => {
            let v: Vec<f32> = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            Tensor::from_vec(v, view.shape(), device)?
        }
        Dtype::F64 => {
            let v: Vec<f64> = data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            Tensor::from_vec(v, view.shape(), device)?
        }
        other => return Err(Error::Compatibility(format!("tensor `{name}` has unsupported dtype {other:?}"))),
    };
    Ok(t)
}

fn optimizer_tensors(prefix: &str, opt: &Adam, out: &mut Vec<Encoded>) -> Result<()> {
    let (m, v) = opt.moments();
    for (i, t) in m.iter().enumerate() {
        out.push(encode(format!("{prefix}/m/{i}"), t)?);
    }
    for (i, t) in v.iter().enumerate() {
        out.push(encode(format!("{prefix}/v/{i}"), t)?);
    }
    Ok(())
}

pub(super) fn write(trainer: &Trainer, path: &Path) -> Result<()> {
    let mut tensors = Vec::new();
    let stores = trainer.generator_stores().into_iter().chain(trainer.discriminator_stores());
    for (prefix, store) in stores {
        for (name, var) in store.entries() {
            tensors.push(encode(format!("{prefix}/{name}"), var.as_tensor())?);
        }
    }
    optimizer_tensors("opt_g", &trainer.opt_g, &mut tensors)?;
    optimizer_tensors("opt_d", &trainer.opt_d, &mut tensors)?;

    let cfg = &trainer.cfg;
    let config_json = serde_json::to_string(cfg).map_err(|e| Error::Configuration(e.to_string()))?;
    let metadata = HashMap::from([
        ("format".to_string(), CHECKPOINT_FORMAT.to_string()),
        ("version".to_string(), CHECKPOINT_VERSION.to_string()),
        ("config".to_string(), config_json),
        ("config_hash".to_string(), cfg.hash()?),
        ("architecture_hash".to_string(), cfg.architecture_hash()?),
        ("epoch".to_string(), trainer.epoch.to_string()),
        ("step".to_string(), trainer.step.to_string()),
        ("opt_g_t".to_string(), trainer.opt_g.steps_taken().to_string()),
        ("opt_d_t".to_string(), trainer.opt_d.steps_taken().to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
    ]);

    let views = tensors
        .iter()
        .map(|e| {
            TensorView::new(e.dtype, e.shape.clone(), &e.bytes)
                .map(|v| (e.name.clone(), v))
                .map_err(|err| Error::Data(format!("tensor `{}`: {err}", e.name)))
        })
        .collect::<Result<Vec<_>>>()?;

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write beside the target and rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("safetensors.partial");
    safetensors::serialize_to_file(views, Some(metadata), &tmp)
        .map_err(|e| Error::io(&tmp, std::io::Error::other(e.to_string())))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Loaded {
    info: CheckpointInfo,
    opt_g_t: u64,
    opt_d_t: u64,
    bytes: Vec<u8>,
}

fn unreadable(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Compatibility(format!("{}: {what}", path.display()))
}

fn read(path: &Path) -> Result<Loaded> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| unreadable(path, e))?;
    let meta = header.metadata().clone().unwrap_or_default();
    let field = |key: &str| meta.get(key).ok_or_else(|| unreadable(path, format!("missing `{key}` metadata")));
    let number = |key: &str| -> Result<u64> {
        field(key)?.parse().map_err(|_| unreadable(path, format!("bad `{key}` metadata")))
    };
    if field("format")? != CHECKPOINT_FORMAT {
        return Err(unreadable(path, "not a checkpoint file"));
    }
    let version = number("version")? as u32;
    if version != CHECKPOINT_VERSION {
        return Err(unreadable(path, format!("version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let config: TrainingConfig = serde_json::from_str(field("config")?).map_err(|e| unreadable(path, e))?;
    let config_hash = field("config_hash")?.clone();
    if config.hash()? != config_hash {
        return Err(unreadable(path, "embedded configuration does not match its hash"));
    }
    let info = CheckpointInfo {
        version,
        architecture_hash: config.architecture_hash()?,
        config,
        config_hash,
        epoch: number("epoch")?,
        step: number("step")?,
    };
    Ok(Loaded {
        info,
        opt_g_t: number("opt_g_t")?,
        opt_d_t: number("opt_d_t")?,
        bytes,
    })
}

pub fn read_checkpoint_info(path: impl AsRef<Path>) -> Result<CheckpointInfo> {
    read(path.as_ref()).map(|l| l.info)
}

fn restore_optimizer(prefix: &str, opt: &mut Adam, t: u64, tensors: &HashMap<String, Tensor>) -> Result<()> {
    let n = opt.vars().len();
    let take = |kind: &str| -> Result<Vec<Tensor>> {
        (0..n)
            .map(|i| {
                let key = format!("{prefix}/{kind}/{i}");
                tensors
                    .get(&key)
                    .cloned()
                    .ok_or_else(|| Error::Compatibility(format!("missing optimizer tensor `{key}`")))
            })
            .collect()
    };
    let dtype = opt.vars().first().map(|v| v.dtype());
    let cast = |ts: Vec<Tensor>| -> Result<Vec<Tensor>> {
        match dtype {
            Some(d) => ts.into_iter().map(|t| Ok(t.to_dtype(d)?)).collect(),
            None => Ok(ts),
        }
    };
    opt.restore(t, cast(take("m")?)?, cast(take("v")?)?)
}

fn apply(trainer: &mut Trainer, path: &Path, loaded: &Loaded) -> Result<()> {
    let st = SafeTensors::deserialize(&loaded.bytes).map_err(|e| unreadable(path, e))?;
    let mut tensors = HashMap::new();
    for (name, view) in st.tensors() {
        let t = decode(&name, &view, &trainer.device)?;
        tensors.insert(name, t);
    }
    let stores = trainer.generator_stores().into_iter().chain(trainer.discriminator_stores());
    for (prefix, store) in stores {
        store.load_with(|name| tensors.get(&format!("{prefix}/{name}")).cloned())?;
    }
    restore_optimizer("opt_g", &mut trainer.opt_g, loaded.opt_g_t, &tensors)?;
    restore_optimizer("opt_d", &mut trainer.opt_d, loaded.opt_d_t, &tensors)?;
    trainer.step = loaded.info.step;
    trainer.set_epoch(loaded.info.epoch)
}

pub(super) fn load(path: &Path, backend: Option<Box<dyn VisionLanguage>>) -> Result<Trainer> {
    let loaded = read(path)?;
    let cfg = loaded.info.config.clone();
    let mut trainer = match backend {
        Some(b) => Trainer::with_backend(cfg, b)?,
        None => Trainer::new(cfg)?,
    };
    apply(&mut trainer, path, &loaded)?;
    Ok(trainer)
}

pub(super) fn restore(trainer: &mut Trainer, path: &Path) -> Result<()> {
    let loaded = read(path)?;
    let ours = trainer.cfg.effective_model();
    let theirs = loaded.info.config.effective_model();
    if loaded.info.architecture_hash != trainer.cfg.architecture_hash()? {
        let detail = if ours.nrn.pe_levels != theirs.nrn.pe_levels {
            format!("pe_levels {} in checkpoint, {} configured", theirs.nrn.pe_levels, ours.nrn.pe_levels)
        } else {
            "model architecture or precision differs from the configuration".to_string()
        };
        return Err(Error::Compatibility(format!("{}: {detail}", path.display())));
    }
    apply(trainer, path, &loaded)
}
