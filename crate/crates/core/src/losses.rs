//! Deep-supervised Dice + cross-entropy, the target-representation (TR) and
//! region-localisation (RL) decoupling losses, and their weighted total.

use autograd::{Element, Tape, Tensor, Var, DEFAULT_COSINE_EPS};
use serde::{Deserialize, Serialize};

use crate::data::LabelBatch;
use crate::error::{Error, Result};

pub const DICE_SMOOTH: f64 = 1e-5;

/// How the RL binary cross-entropy reduces over the voxels of one level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Finest-first supervision weights; `None` means `2^-level`, normalized.
    pub supervision_weights: Option<Vec<f64>>,
    pub rl_reduction: Reduction,
    pub dice_smooth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            supervision_weights: None,
            rl_reduction: Reduction::Mean,
            dice_smooth: DICE_SMOOTH,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config(format!(
                "alpha {} and beta {} must be non-negative",
                self.alpha, self.beta
            )));
        }
        if let Some(w) = &self.supervision_weights {
            if w.is_empty() || w.iter().any(|&v| !(v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Config(format!("bad supervision weights {w:?}")));
            }
        }
        Ok(())
    }

    /// Normalized weights for `levels` supervision outputs, finest first.
    pub fn weights(&self, levels: usize) -> Result<Vec<f64>> {
        let raw: Vec<f64> = match &self.supervision_weights {
            Some(w) if w.len() == levels => w.clone(),
            Some(w) => {
                return Err(Error::Config(format!(
                    "{} supervision weights for {levels} levels",
                    w.len()
                )))
            }
            None => (0..levels).map(|k| 0.5f64.powi(k as i32)).collect(),
        };
        let s: f64 = raw.iter().sum();
        Ok(raw.iter().map(|v| v / s).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_seg: f64,
    pub l_tr: f64,
    pub l_rl: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    /// Decoupling loss tracked by the pruning controller.
    pub fn fd(&self) -> f64 {
        self.l_tr + self.l_rl
    }
}

/// `L = L_seg + α·L_tr + β·L_rl`, rejecting non-finite components by name.
pub fn total_loss(l_seg: f64, l_tr: f64, l_rl: f64, cfg: &LossConfig) -> Result<LossBreakdown> {
    for (name, v) in [("l_seg", l_seg), ("l_tr", l_tr), ("l_rl", l_rl)] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("{name} = {v}")));
        }
    }
    Ok(LossBreakdown {
        l_seg,
        l_tr,
        l_rl,
        l_total: l_seg + cfg.alpha * l_tr + cfg.beta * l_rl,
    })
}

/// Tape version of [`total_loss`]'s weighted sum.
pub fn combine<E: Element>(tape: &mut Tape<E>, seg: Var, tr: Var, rl: Var, cfg: &LossConfig) -> Result<Var> {
    let tr = tape.scale(tr, E::lit(cfg.alpha));
    let rl = tape.scale(rl, E::lit(cfg.beta));
    let s = tape.add(seg, tr)?;
    Ok(tape.add(s, rl)?)
}

/// Mean over the batch of `1 − cos(enc_x_b, sg(enc_target_b))`.
pub fn tr_loss<E: Element>(tape: &mut Tape<E>, enc_x: Var, enc_target: Var) -> Result<Var> {
    let shape = tape.shape(enc_x).to_vec();
    if shape != tape.shape(enc_target) || shape.is_empty() {
        return Err(autograd::TensorError::Shape(format!(
            "tr_loss shape mismatch {shape:?} vs {:?}",
            tape.shape(enc_target)
        ))
        .into());
    }
    let target = tape.stop_gradient(enc_target);
    let n = shape[0];
    let mut acc: Option<Var> = None;
    for b in 0..n {
        let (xa, xb) = if n == 1 {
            (enc_x, target)
        } else {
            (tape.slice_batch(enc_x, b)?, tape.slice_batch(target, b)?)
        };
        let cos = tape.cosine_similarity(xa, xb, DEFAULT_COSINE_EPS)?;
        acc = Some(match acc {
            None => cos,
            Some(a) => tape.add(a, cos)?,
        });
    }
    let mean_cos = tape.scale(acc.expect("batch ≥ 1"), E::lit(-1.0 / n as f64));
    Ok(tape.add_scalar(mean_cos, E::one()))
}

/// `Σ_levels BCE(sigmoid(channel_mean(F_i)), bin(y_i))`.
pub fn rl_loss<E: Element>(tape: &mut Tape<E>, feats: &[Var], labels: &[LabelBatch], cfg: &LossConfig) -> Result<Var> {
    if feats.len() != labels.len() || feats.is_empty() {
        return Err(Error::Data(format!(
            "rl_loss got {} feature levels and {} label levels",
            feats.len(),
            labels.len()
        )));
    }
    let mut acc: Option<Var> = None;
    for (&f, y) in feats.iter().zip(labels) {
        let att = tape.channel_mean(f)?;
        let target = y.binary_tensor::<E>();
        let mut l = tape.bce_with_logits(att, &target)?;
        if cfg.rl_reduction == Reduction::Sum {
            l = tape.scale(l, E::lit(target.numel() as f64));
        }
        acc = Some(match acc {
            None => l,
            Some(a) => tape.add(a, l)?,
        });
    }
    Ok(acc.expect("nonempty"))
}

/// Mean voxel cross-entropy of `softmax(logits)` against class labels.
pub fn cross_entropy<E: Element>(tape: &mut Tape<E>, logits: Var, labels: &LabelBatch) -> Result<Var> {
    let c = tape.shape(logits)[1];
    let onehot = labels.one_hot::<E>(c)?;
    let logp = tape.log_softmax_channels(logits)?;
    ce_from_logp(tape, logp, onehot, labels)
}

fn ce_from_logp<E: Element>(tape: &mut Tape<E>, logp: Var, onehot: Tensor<E>, labels: &LabelBatch) -> Result<Var> {
    check_aligned(tape, logp, labels)?;
    let oh = tape.constant(onehot);
    let picked = tape.mul(logp, oh)?;
    let s = tape.sum(picked);
    let n = (labels.shape[0] * labels.voxels()) as f64;
    Ok(tape.scale(s, E::lit(-1.0 / n)))
}

fn check_aligned<E: Element>(tape: &Tape<E>, logits: Var, labels: &LabelBatch) -> Result<()> {
    let s = tape.shape(logits);
    if s.len() != 5 || s[0] != labels.shape[0] || s[2..] != labels.shape[1..] {
        return Err(Error::Data(format!(
            "logits {s:?} do not align with labels {:?}",
            labels.shape
        )));
    }
    Ok(())
}

/// `1 −` mean soft Dice over samples and foreground classes.
pub fn soft_dice_loss<E: Element>(tape: &mut Tape<E>, logits: Var, labels: &LabelBatch, smooth: f64) -> Result<Var> {
    let c = tape.shape(logits)[1];
    let onehot = labels.one_hot::<E>(c)?;
    let logp = tape.log_softmax_channels(logits)?;
    dice_from_logp(tape, logp, &onehot, labels, smooth)
}

fn dice_from_logp<E: Element>(
    tape: &mut Tape<E>,
    logp: Var,
    onehot: &Tensor<E>,
    labels: &LabelBatch,
    smooth: f64,
) -> Result<Var> {
    check_aligned(tape, logp, labels)?;
    let n = labels.shape[0];
    let c = onehot.shape()[1];
    if c < 2 {
        return Err(Error::Data("soft Dice needs a foreground class".into()));
    }
    let probs = tape.exp(logp);
    let oh = tape.constant(onehot.clone());
    let inter = tape.mul(probs, oh)?;
    let inter = tape.sum_spatial(inter)?;
    let psum = tape.sum_spatial(probs)?;
    let gsum = {
        let g = tape.constant(onehot.clone());
        tape.sum_spatial(g)?
    };
    let num = tape.scale(inter, E::lit(2.0));
    let num = tape.add_scalar(num, E::lit(smooth));
    let den = tape.add(psum, gsum)?;
    let den = tape.add_scalar(den, E::lit(smooth));
    let dice = tape.div(num, den)?;
    // weight 1/(N·(C−1)) on foreground entries, 0 on background
    let inv = 1.0 / (n * (c - 1)) as f64;
    let fg = Tensor::from_fn(&[n, c], |i| if i % c == 0 { E::zero() } else { E::lit(inv) });
    let fg = tape.constant(fg);
    let wd = tape.mul(dice, fg)?;
    let mean_dice = tape.sum(wd);
    let neg = tape.scale(mean_dice, E::lit(-1.0));
    Ok(tape.add_scalar(neg, E::one()))
}

/// Soft Dice + cross-entropy on one level.
pub fn dice_ce<E: Element>(tape: &mut Tape<E>, logits: Var, labels: &LabelBatch, smooth: f64) -> Result<Var> {
    check_aligned(tape, logits, labels)?;
    let c = tape.shape(logits)[1];
    let onehot = labels.one_hot::<E>(c)?;
    let logp = tape.log_softmax_channels(logits)?;
    let dice = dice_from_logp(tape, logp, &onehot, labels, smooth)?;
    let ce = ce_from_logp(tape, logp, onehot, labels)?;
    Ok(tape.add(dice, ce)?)
}

/// Weighted sum of per-level Dice + CE over a finest-first pyramid.
pub fn dice_ce_deep_supervision<E: Element>(
    tape: &mut Tape<E>,
    logits: &[Var],
    labels: &[LabelBatch],
    cfg: &LossConfig,
) -> Result<Var> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Data(format!(
            "{} logit levels vs {} label levels",
            logits.len(),
            labels.len()
        )));
    }
    let weights = cfg.weights(logits.len())?;
    let mut acc: Option<Var> = None;
    for ((&z, y), &w) in logits.iter().zip(labels).zip(&weights) {
        let l = dice_ce(tape, z, y, cfg.dice_smooth)?;
        let l = tape.scale(l, E::lit(w));
        acc = Some(match acc {
            None => l,
            Some(a) => tape.add(a, l)?,
        });
    }
    Ok(acc.expect("nonempty"))
}

/// Plain weighted mean of per-level scalars with `cfg`'s supervision weights.
pub fn combine_levels(per_level: &[f64], cfg: &LossConfig) -> Result<f64> {
    let w = cfg.weights(per_level.len())?;
    Ok(per_level.iter().zip(&w).map(|(l, w)| l * w).sum())
}
