use candle_core::Tensor;

use super::conv::{conv2d, conv_transpose2d, PadMode};
use super::params::{Init, ParamStore};
use crate::error::Result;

/// How a layer's weights are drawn.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum WeightInit {
    /// Uniform on `±1/sqrt(fan_in)` for weights and biases.
    FanIn,
    /// Normal with the given standard deviation, zero bias.
    Normal(f64),
}

impl WeightInit {
    fn split(self, fan_in: usize) -> (Init, Init) {
        match self {
            WeightInit::FanIn => {
                let b = 1.0 / (fan_in as f64).sqrt();
                (Init::Uniform(b), Init::Uniform(b))
            }
            WeightInit::Normal(std) => (Init::Normal(std), Init::Zeros),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub mode: PadMode,
    pub bias: bool,
}

impl ConvSpec {
    /// Stride 1, "same" padding with zeros, with bias.
    pub fn new(cin: usize, cout: usize, kernel: usize) -> Self {
        Self {
            cin,
            cout,
            kernel,
            stride: 1,
            pad: kernel / 2,
            mode: PadMode::Zeros,
            bias: true,
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn pad(mut self, pad: usize, mode: PadMode) -> Self {
        self.pad = pad;
        self.mode = mode;
        self
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    spec: ConvSpec,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, spec: ConvSpec, init: WeightInit) -> Result<Self> {
        let fan_in = spec.cin * spec.kernel * spec.kernel;
        let (wi, bi) = init.split(fan_in);
        let weight = store.param(
            &format!("{name}.weight"),
            &[spec.cout, spec.cin, spec.kernel, spec.kernel],
            wi,
        )?;
        let bias = if spec.bias {
            Some(store.param(&format!("{name}.bias"), &[spec.cout], bi)?)
        } else {
            None
        };
        Ok(Self { weight, bias, spec })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(
            x,
            &self.weight,
            self.bias.as_ref(),
            self.spec.stride,
            self.spec.pad,
            self.spec.mode,
        )
    }
}

/// Stride-2 upsampling by transposed convolution: kernel 3, padding 1, output padding 1.
#[derive(Clone, Debug)]
pub struct Upsample2x {
    weight: Tensor,
    bias: Tensor,
}

impl Upsample2x {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, init: WeightInit) -> Result<Self> {
        let (wi, bi) = init.split(cout * 9);
        let weight = store.param(&format!("{name}.weight"), &[cin, cout, 3, 3], wi)?;
        let bias = store.param(&format!("{name}.bias"), &[cout], bi)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv_transpose2d(x, &self.weight, Some(&self.bias), 2, 1, 1)
    }
}

/// Fully connected layer acting on column vectors: `(in, N) -> (out, N)`.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, init: WeightInit) -> Result<Self> {
        let (wi, bi) = init.split(cin);
        let weight = store.param(&format!("{name}.weight"), &[cout, cin], wi)?;
        let bias = store.param(&format!("{name}.bias"), &[cout, 1], bi)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.weight.matmul(x)?.broadcast_add(&self.bias)?)
    }
}
