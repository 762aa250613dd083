//! The complete training objective, assembled from the loop outputs.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generators::LoopOutputs;
use crate::nn::{self, l1};
use crate::nrn::nrn_loss;
use crate::tad::{self, AppearanceDiscriminator, PromptPair, VisionLanguage};

/// Per-term multipliers of the generator-side objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub nr: f64,
    pub adv: f64,
    pub con: f64,
    pub rec1: f64,
    pub rec2: f64,
    pub insp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { nr: 1.0, adv: 1.0, con: 1.0, rec1: 1.0, rec2: 1.0, insp: 1.0 }
    }
}

/// Cycle consistency of both loops.
pub fn consistency_loss(i_l: &Tensor, cyc_l: &Tensor, i_h: &Tensor, cyc_h: &Tensor) -> Result<Tensor> {
    Ok((l1(cyc_l, i_l)? + l1(cyc_h, i_h)?)?)
}

/// Ties the extracted mask to the enhancement the generator actually made.
pub fn cooperative_rec1(pseudo_mask: &Tensor, mask: &Tensor, pseudo_high: &Tensor, pred_high: &Tensor) -> Result<Tensor> {
    Ok((l1(pseudo_mask, mask)? + l1(pseudo_high, pred_high)?)?)
}

/// Reconstruction of the high-light input from the degraded image plus its mask;
/// the second term is taken before clamping.
pub fn cooperative_rec2(recon_high: &Tensor, i_h: &Tensor, pred_low: &Tensor, pred_mask: &Tensor) -> Result<Tensor> {
    let residual = ((i_h - pred_low)? - pred_mask)?;
    Ok((l1(recon_high, i_h)? + residual.abs()?.mean_all()?)?)
}

/// Both pseudo images should look real to their critics.
pub fn inspection_loss(
    pseudo_high: &Tensor,
    pseudo_low: &Tensor,
    d_h: &AppearanceDiscriminator,
    d_l: &AppearanceDiscriminator,
) -> Result<Tensor> {
    Ok((tad::gan_generator_loss(d_h, pseudo_high)? + tad::gan_generator_loss(d_l, pseudo_low)?)?)
}

/// Scalar loss values for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub nr: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub con: f64,
    pub rec1: f64,
    pub rec2: f64,
    pub insp: f64,
}

/// Named record of every term of one training step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: u64,
    pub nr: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub con: f64,
    pub rec1: f64,
    pub rec2: f64,
    pub insp: f64,
    pub cl: f64,
    /// Weighted generator-side objective.
    pub total: f64,
}

pub fn total_loss(parts: &LossParts, weights: &LossWeights, step: u64) -> Result<LossReport> {
    let named = [
        ("nr", parts.nr),
        ("adv_g", parts.adv_g),
        ("adv_d", parts.adv_d),
        ("con", parts.con),
        ("rec1", parts.rec1),
        ("rec2", parts.rec2),
        ("insp", parts.insp),
    ];
    if let Some((name, _)) = named.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NumericFault((*name).to_string()));
    }
    let w = weights;
    Ok(LossReport {
        step,
        nr: parts.nr,
        adv_g: parts.adv_g,
        adv_d: parts.adv_d,
        con: parts.con,
        rec1: parts.rec1,
        rec2: parts.rec2,
        insp: parts.insp,
        cl: parts.rec1 + parts.rec2 + parts.insp,
        total: w.nr * parts.nr
            + w.adv * parts.adv_g
            + w.con * parts.con
            + w.rec1 * parts.rec1
            + w.rec2 * parts.rec2
            + w.insp * parts.insp,
    })
}

/// Generator-side terms as differentiable tensors.
#[derive(Clone, Debug)]
pub struct GeneratorTerms {
    pub nr: Tensor,
    pub adv_g: Tensor,
    pub con: Tensor,
    pub rec1: Tensor,
    pub rec2: Tensor,
    pub insp: Tensor,
}

impl GeneratorTerms {
    pub fn weighted_total(&self, w: &LossWeights) -> Result<Tensor> {
        let t = ((&self.nr * w.nr)? + (&self.adv_g * w.adv)?)?;
        let t = (t + (&self.con * w.con)?)?;
        let t = (t + (&self.rec1 * w.rec1)?)?;
        let t = (t + (&self.rec2 * w.rec2)?)?;
        Ok((t + (&self.insp * w.insp)?)?)
    }

    /// Scalar values; `adv_d` is left at zero for the caller to fill in.
    pub fn parts(&self) -> Result<LossParts> {
        Ok(LossParts {
            nr: nn::scalar(&self.nr)?,
            adv_g: nn::scalar(&self.adv_g)?,
            adv_d: 0.0,
            con: nn::scalar(&self.con)?,
            rec1: nn::scalar(&self.rec1)?,
            rec2: nn::scalar(&self.rec2)?,
            insp: nn::scalar(&self.insp)?,
        })
    }
}

/// Critics and the text-guidance backend consulted by the objective.
#[derive(Clone, Copy)]
pub struct Critics<'a> {
    pub d_h: &'a AppearanceDiscriminator,
    pub d_l: &'a AppearanceDiscriminator,
    pub backend: &'a dyn VisionLanguage,
    pub prompts: &'a PromptPair,
}

pub fn generator_terms(out: &LoopOutputs, i_l: &Tensor, i_h: &Tensor, critics: Critics<'_>) -> Result<GeneratorTerms> {
    let Critics { d_h, d_l, backend, prompts } = critics;
    let nr = nrn_loss(&out.i_nrn, i_l)?;
    let to_high = (tad::gan_generator_loss(d_h, &out.pred_high)? + tad::cosine_loss_high(backend, &out.pred_high, prompts)?)?;
    let to_low = (tad::gan_generator_loss(d_l, &out.pred_low)? + tad::cosine_loss_low(backend, &out.pred_low, prompts)?)?;
    Ok(GeneratorTerms {
        nr,
        adv_g: (to_high + to_low)?,
        con: consistency_loss(i_l, &out.cyc_low, i_h, &out.cyc_high)?,
        rec1: cooperative_rec1(&out.pseudo_mask, &out.i_m, &out.pseudo_high, &out.pred_high)?,
        rec2: cooperative_rec2(&out.recon_high, i_h, &out.pred_low, &out.pred_mask)?,
        insp: inspection_loss(&out.pseudo_high, &out.pseudo_low, d_h, d_l)?,
    })
}

/// Weight of the pseudo-image rejection terms in the critic objective.
pub const PSEUDO_REJECTION_WEIGHT: f64 = 0.5;

/// Critic objective: real vs. detached fake for both directions, plus rejection
/// of the detached pseudo images.
pub fn discriminator_objective(
    out: &LoopOutputs,
    i_l: &Tensor,
    i_h: &Tensor,
    d_h: &AppearanceDiscriminator,
    d_l: &AppearanceDiscriminator,
) -> Result<Tensor> {
    let adv = (tad::gan_discriminator_loss(d_h, i_h, &out.pred_high)? + tad::gan_discriminator_loss(d_l, i_l, &out.pred_low)?)?;
    let pseudo = (tad::pseudo_rejection_loss(d_h, &out.pseudo_high)? + tad::pseudo_rejection_loss(d_l, &out.pseudo_low)?)?;
    Ok((adv + (pseudo * PSEUDO_REJECTION_WEIGHT)?)?)
}
