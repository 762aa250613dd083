use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Initial value distribution for a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    /// Uniform on `[-b, b]`.
    Uniform(f64),
}

/// Named, seeded collection of trainable variables belonging to one network.
///
/// Candle's CPU random generator cannot be seeded, so initial values are
/// drawn here from a ChaCha stream in registration order.
pub struct ParamStore {
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
    entries: Vec<(String, Var)>,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            dtype,
            device: device.clone(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            entries: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers a new variable and returns a handle sharing its storage.
    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::Argument(format!("duplicate parameter name `{name}`")));
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => {
                let d = Normal::new(0.0, std).map_err(|e| Error::Argument(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut self.rng)).collect()
            }
            Init::Uniform(b) => {
                let d = Uniform::new_inclusive(-b, b).map_err(|e| Error::Argument(e.to_string()))?;
                (0..n).map(|_| d.sample(&mut self.rng)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let handle = var.as_tensor().clone();
        self.entries.push((name.to_string(), var));
        Ok(handle)
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }

    pub fn vars(&self) -> impl Iterator<Item = &Var> {
        self.entries.iter().map(|(_, v)| v)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn num_elements(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and values; changes whenever any parameter does.
    pub fn fingerprint(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.entries {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let values = var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Overwrites every parameter from `lookup`, which must supply a tensor of
    /// the same shape for each name.
    pub fn load_with(&self, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<()> {
        for (name, var) in &self.entries {
            let t = lookup(name)
                .ok_or_else(|| Error::Compatibility(format!("missing parameter `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::Compatibility(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?.to_device(&self.device)?)?;
        }
        Ok(())
    }
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.entries.len())
            .field("elements", &self.num_elements())
            .finish()
    }
}
