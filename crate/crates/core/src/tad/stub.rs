use candle_core::{Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{VisionLanguage, EMBED_DIM};
use crate::error::Result;
use crate::imaging::LUMA_WEIGHTS;

const N_STATS: usize = 7;

/// Deterministic stand-in for a pretrained encoder pair.
///
/// Images embed as a fixed random projection of simple brightness statistics
/// `[1, mean Y, mean Y², std Y, mean R, mean G, mean B]` (all in `[0, 1]`
/// units); text embeds as a Gaussian vector seeded by the text's hash.
pub struct StubBackend {
    seed: u64,
    projection: Vec<f64>,
    device: Device,
}

impl StubBackend {
    pub fn new(seed: u64, device: &Device) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let projection = (0..N_STATS * EMBED_DIM)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(Self { seed, projection, device: device.clone() })
    }

    fn stats(x: &Tensor) -> Result<Tensor> {
        let (b, _, _, _) = x.dims4()?;
        let u = ((x + 1.0)? * 0.5)?;
        let ch = |c: usize| u.narrow(1, c, 1);
        let luma = ((ch(0)? * LUMA_WEIGHTS[0])? + (ch(1)? * LUMA_WEIGHTS[1])? + (ch(2)? * LUMA_WEIGHTS[2])?)?;
        let luma = luma.flatten_from(1)?;
        let mean = luma.mean_keepdim(1)?;
        let mean_sq = luma.sqr()?.mean_keepdim(1)?;
        let std = ((&mean_sq - mean.sqr()?)?.relu()? + 1e-6)?.sqrt()?;
        let rgb = u.flatten_from(2)?.mean(2)?;
        let one = Tensor::ones((b, 1), x.dtype(), x.device())?;
        Ok(Tensor::cat(&[one, mean, mean_sq, std, rgb], 1)?)
    }
}

/// 64-bit FNV-1a.
fn fnv1a(text: &str) -> u64 {
    text.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl VisionLanguage for StubBackend {
    fn encode_image(&self, x: &Tensor) -> Result<Tensor> {
        let p = Tensor::from_slice(&self.projection, (N_STATS, EMBED_DIM), &self.device)?.to_dtype(x.dtype())?;
        Ok(Self::stats(x)?.matmul(&p)?)
    }

    fn encode_text(&self, text: &str) -> Result<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(text));
        Ok((0..EMBED_DIM).map(|_| StandardNormal.sample(&mut rng)).collect())
    }
}
