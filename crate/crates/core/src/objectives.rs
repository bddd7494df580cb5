//! Supervised fine-tuning and direct preference optimization losses.
//!
//! ```text
//! L_SFT = −E[ log π(y_c | I, q) / |y_c| ]
//! L_DPO = −E[ log σ( β·((log π(y_c) − log π_ref(y_c)) − (log π(y_r) − log π_ref(y_r))) ) ]
//! ```
//!
//! SFT log-probabilities are normalized per sample by the chosen-response
//! length; DPO uses raw sums. Reference terms enter as constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, GradCheckReport};
use crate::graph::{Graph, Var};
use crate::image::Image;
use crate::model::{ModelBinding, MultimodalModel};
use crate::tensor::Tensor;

/// One post-training example: an image, a query, and a chosen/rejected pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceSample {
    pub id: u64,
    pub image: Image,
    pub query: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
    pub template_id: String,
    pub shifted: bool,
}

impl PreferenceSample {
    pub fn validate(&self, vocab_size: usize, image_size: usize) -> Result<()> {
        if self.chosen == self.rejected {
            return Err(Error::InvalidArgument(format!(
                "sample {}: chosen and rejected responses are identical",
                self.id
            )));
        }
        let all = self.query.iter().chain(&self.chosen).chain(&self.rejected);
        if let Some(&id) = all.into_iter().find(|&&t| t >= vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: vocab_size,
            });
        }
        if self.image.width() != image_size || self.image.height() != image_size {
            return Err(Error::Dimension(format!(
                "sample {}: image is {}x{}, expected {image_size}",
                self.id,
                self.image.width(),
                self.image.height()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DpoConfig {
    pub beta: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self { beta: 0.1 }
    }
}

impl DpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "beta must be finite and >= 0, got {}",
                self.beta
            )));
        }
        Ok(())
    }
}

fn nonempty(batch: &[&PreferenceSample]) -> Result<()> {
    if batch.is_empty() {
        Err(Error::InvalidArgument("empty batch".into()))
    } else {
        Ok(())
    }
}

/// Mean over samples of the negated, length-normalized chosen log-probability.
/// Rejected responses are never read.
pub fn sft_loss(
    g: &mut Graph,
    policy: &MultimodalModel,
    mb: &ModelBinding,
    batch: &[&PreferenceSample],
) -> Result<Var> {
    nonempty(batch)?;
    let mut terms = Vec::with_capacity(batch.len());
    for s in batch {
        if s.chosen.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "sample {}: empty chosen response",
                s.id
            )));
        }
        let lp = policy.response_logprob(g, mb, &s.image, &s.query, &s.chosen)?;
        terms.push(g.scale(lp, -1.0 / s.chosen.len() as f64)?);
    }
    let total = g.add_n(&terms)?;
    g.scale(total, 1.0 / batch.len() as f64)
}

/// `−log σ(β·((lp_c − ref_c) − (lp_r − ref_r)))` for one sample.
pub fn dpo_term(
    g: &mut Graph,
    lp_chosen: Var,
    lp_rejected: Var,
    ref_chosen: f64,
    ref_rejected: f64,
    beta: f64,
) -> Result<Var> {
    let diff = g.sub(lp_chosen, lp_rejected)?;
    let offset = g.constant(Tensor::scalar(-(ref_chosen - ref_rejected)));
    let delta = g.add(diff, offset)?;
    let z = g.scale(delta, beta)?;
    let ls = g.log_sigmoid(z)?;
    g.scale(ls, -1.0)
}

/// Reference log-probabilities `(log π_ref(y_c), log π_ref(y_r))` of a sample.
pub fn reference_logprobs(reference: &MultimodalModel, s: &PreferenceSample) -> Result<(f64, f64)> {
    let mut g = Graph::new();
    let mb = reference.bind(&mut g, true);
    let feats = reference.encode_image(&mut g, &mb, &s.image)?;
    let visual = reference.project(&mut g, &mb, feats)?;
    let c = reference.response_logprob_from_visual(&mut g, &mb, visual, &s.query, &s.chosen)?;
    let r = reference.response_logprob_from_visual(&mut g, &mb, visual, &s.query, &s.rejected)?;
    Ok((g.value(c).item(), g.value(r).item()))
}

/// The DPO loss node plus the per-sample log-ratio terms it was built from.
pub struct DpoTerms {
    pub loss: Var,
    /// `log π(y_c) − log π_ref(y_c)` per sample.
    pub delta_chosen: Vec<f64>,
    /// `log π(y_r) − log π_ref(y_r)` per sample.
    pub delta_rejected: Vec<f64>,
}

/// DPO loss against precomputed reference log-probabilities, one
/// `(chosen, rejected)` pair per sample.
pub fn dpo_loss_with_reference(
    g: &mut Graph,
    policy: &MultimodalModel,
    mb: &ModelBinding,
    batch: &[&PreferenceSample],
    reference: &[(f64, f64)],
    cfg: &DpoConfig,
) -> Result<DpoTerms> {
    nonempty(batch)?;
    cfg.validate()?;
    if reference.len() != batch.len() {
        return Err(Error::InvalidArgument(
            "one reference pair per sample required".into(),
        ));
    }
    let mut terms = Vec::with_capacity(batch.len());
    let mut delta_chosen = Vec::with_capacity(batch.len());
    let mut delta_rejected = Vec::with_capacity(batch.len());
    for (s, &(ref_c, ref_r)) in batch.iter().zip(reference) {
        let feats = policy.encode_image(g, mb, &s.image)?;
        let visual = policy.project(g, mb, feats)?;
        let lp_c = policy.response_logprob_from_visual(g, mb, visual, &s.query, &s.chosen)?;
        let lp_r = policy.response_logprob_from_visual(g, mb, visual, &s.query, &s.rejected)?;
        delta_chosen.push(g.value(lp_c).item() - ref_c);
        delta_rejected.push(g.value(lp_r).item() - ref_r);
        terms.push(dpo_term(g, lp_c, lp_r, ref_c, ref_r, cfg.beta)?);
    }
    let total = g.add_n(&terms)?;
    let loss = g.scale(total, 1.0 / batch.len() as f64)?;
    Ok(DpoTerms {
        loss,
        delta_chosen,
        delta_rejected,
    })
}

pub fn check_compatible(policy: &MultimodalModel, reference: &MultimodalModel) -> Result<()> {
    if policy.lm.config.vocab_size != reference.lm.config.vocab_size {
        return Err(Error::InvalidArgument(format!(
            "reference vocabulary {} differs from policy vocabulary {}",
            reference.lm.config.vocab_size, policy.lm.config.vocab_size
        )));
    }
    Ok(())
}

/// DPO loss with the reference evaluated on the fly.
pub fn dpo_loss(
    g: &mut Graph,
    policy: &MultimodalModel,
    mb: &ModelBinding,
    reference: &MultimodalModel,
    batch: &[&PreferenceSample],
    cfg: &DpoConfig,
) -> Result<DpoTerms> {
    check_compatible(policy, reference)?;
    let refs = batch
        .iter()
        .map(|s| reference_logprobs(reference, s))
        .collect::<Result<Vec<_>>>()?;
    dpo_loss_with_reference(g, policy, mb, batch, &refs, cfg)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpoStats {
    /// Mean of `β(Δ_c − Δ_r)`.
    pub margin: f64,
    /// Fraction of samples with `Δ_c > Δ_r`; exact ties count one half.
    pub accuracy: f64,
}

impl DpoStats {
    pub fn from_deltas(delta_chosen: &[f64], delta_rejected: &[f64], beta: f64) -> Self {
        let n = delta_chosen.len().max(1) as f64;
        let mut margin = 0.0;
        let mut wins = 0.0;
        for (c, r) in delta_chosen.iter().zip(delta_rejected) {
            margin += beta * (c - r);
            wins += match c.partial_cmp(r) {
                Some(std::cmp::Ordering::Greater) => 1.0,
                Some(std::cmp::Ordering::Equal) => 0.5,
                _ => 0.0,
            };
        }
        Self {
            margin: margin / n,
            accuracy: wins / n,
        }
    }
}

pub fn dpo_stats(
    policy: &MultimodalModel,
    reference: &MultimodalModel,
    batch: &[&PreferenceSample],
    cfg: &DpoConfig,
) -> Result<DpoStats> {
    let mut g = Graph::new();
    let mb = policy.bind(&mut g, true);
    let terms = dpo_loss(&mut g, policy, &mb, reference, batch, cfg)?;
    Ok(DpoStats::from_deltas(
        &terms.delta_chosen,
        &terms.delta_rejected,
        cfg.beta,
    ))
}

/// Finite-difference check of the SFT loss (`dpo = None`) or the DPO loss
/// over every parameter tensor of `policy`, sampling `samples`
/// coordinates per tensor.
pub fn check_loss_gradients(
    policy: &MultimodalModel,
    reference: &MultimodalModel,
    batch: &[&PreferenceSample],
    dpo: Option<&DpoConfig>,
    samples: usize,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let refs = match dpo {
        Some(_) => batch
            .iter()
            .map(|s| reference_logprobs(reference, s))
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    grad_check(
        |g, vars| {
            let mb = policy.bind_vars(vars);
            match dpo {
                None => sft_loss(g, policy, &mb, batch),
                Some(cfg) => Ok(dpo_loss_with_reference(g, policy, &mb, batch, &refs, cfg)?.loss),
            }
        },
        &policy.param_tensors(),
        samples,
        tol,
        seed,
    )
}
