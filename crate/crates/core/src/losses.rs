//! Mask BCE, Dice and class cross-entropy with click-anchored targets.

use serde::{Deserialize, Serialize};

use crate::decoder::StageOutput;
use crate::error::{Error, Result};
use crate::numerics::Tensor2;
use crate::sampling::ClickSet;

const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BceReduction {
    /// Mean over all N×K entries.
    #[default]
    AllEntries,
    /// Mean over points per query, then mean over queries.
    PerQuery,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub bce: f64,
    pub dice: f64,
    pub ce: f64,
    pub epsilon: f64,
    pub bce_reduction: BceReduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            bce: 1.0,
            dice: 1.0,
            ce: 1.0,
            epsilon: 1e-6,
            bce_reduction: BceReduction::AllEntries,
        }
    }
}

impl LossWeights {
    pub fn scaled(&self, s: f64) -> Self {
        Self {
            bce: self.bce * s,
            dice: self.dice * s,
            ce: self.ce * s,
            ..*self
        }
    }
}

/// Per-query supervision: the full mask and class of the instance that
/// generated each click.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisionTargets {
    /// N×K binary matrix.
    pub masks: Tensor2,
    pub classes: Vec<usize>,
}

impl SupervisionTargets {
    /// Binds each click to its source instance (falling back to its group tag).
    pub fn from_clicks(clicks: &ClickSet, instance_ids: &[i64], class_ids: &[i64]) -> Result<Self> {
        if instance_ids.len() != class_ids.len() {
            return Err(Error::InvalidInput(
                "instance and class labels differ in length".into(),
            ));
        }
        let n = instance_ids.len();
        let k = clicks.len();
        let mut masks = Tensor2::zeros(n, k);
        let mut classes = Vec::with_capacity(k);
        for (col, c) in clicks.clicks.iter().enumerate() {
            let inst = c.source_instance.unwrap_or(c.group);
            let mut class = None;
            for j in 0..n {
                if instance_ids[j] == inst {
                    masks.set(j, col, 1.0);
                    class.get_or_insert(class_ids[j]);
                }
            }
            let class = class.ok_or_else(|| {
                Error::InvalidInput(format!("click {col} refers to unknown instance {inst}"))
            })?;
            if class < 0 {
                return Err(Error::InvalidInput(format!("instance {inst} has no class")));
            }
            if let Some(j) = c.point_index {
                if instance_ids.get(j) != Some(&inst) {
                    return Err(Error::InvalidInput(format!(
                        "click {col} does not lie on instance {inst}"
                    )));
                }
            }
            classes.push(class as usize);
        }
        Ok(Self { masks, classes })
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_same_shape(a: &Tensor2, b: &Tensor2) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "logits {:?} vs targets {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Binary cross-entropy on sigmoid probabilities clamped to `[1e-7, 1 - 1e-7]`.
/// Returns the loss and its gradient w.r.t. the logits.
pub fn bce_loss(
    logits: &Tensor2,
    targets: &Tensor2,
    reduction: BceReduction,
) -> Result<(f64, Tensor2)> {
    check_same_shape(logits, targets)?;
    let (n, k) = logits.shape();
    let mut grad = Tensor2::zeros(n, k);
    if n == 0 || k == 0 {
        return Ok((0.0, grad));
    }
    // both reductions give every entry the same weight when all queries share N
    let norm = match reduction {
        BceReduction::AllEntries | BceReduction::PerQuery => 1.0 / (n * k) as f64,
    };
    let mut total = 0.0;
    for (i, (&x, &m)) in logits.data().iter().zip(targets.data()).enumerate() {
        let p = sigmoid(x);
        let clamped = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total -= m * clamped.ln() + (1.0 - m) * (1.0 - clamped).ln();
        if clamped == p {
            grad.data_mut()[i] = (p - m) * norm;
        }
    }
    Ok((total * norm, grad))
}

/// Dice loss per query on probabilities, before averaging.
pub fn dice_from_probs(probs: &[f64], targets: &[f64], epsilon: f64) -> f64 {
    let inter: f64 = probs.iter().zip(targets).map(|(p, m)| p * m).sum();
    let sp: f64 = probs.iter().sum();
    let sm: f64 = targets.iter().sum();
    1.0 - (2.0 * inter + epsilon) / (sp + sm + epsilon)
}

/// Mean over queries of `1 - (2Σp·m + ε) / (Σp + Σm + ε)` with `p = σ(logit)`.
pub fn dice_loss(logits: &Tensor2, targets: &Tensor2, epsilon: f64) -> Result<(f64, Tensor2)> {
    check_same_shape(logits, targets)?;
    let (n, k) = logits.shape();
    let mut grad = Tensor2::zeros(n, k);
    if k == 0 {
        return Ok((0.0, grad));
    }
    let probs = logits.map(sigmoid);
    let mut total = 0.0;
    for col in 0..k {
        let (mut inter, mut sp, mut sm) = (0.0, 0.0, 0.0);
        for j in 0..n {
            let p = probs.get(j, col);
            let m = targets.get(j, col);
            inter += p * m;
            sp += p;
            sm += m;
        }
        let num = 2.0 * inter + epsilon;
        let den = sp + sm + epsilon;
        total += 1.0 - num / den;
        for j in 0..n {
            let p = probs.get(j, col);
            let m = targets.get(j, col);
            let dp = -(2.0 * m * den - num) / (den * den);
            grad.set(j, col, dp * p * (1.0 - p) / k as f64);
        }
    }
    Ok((total / k as f64, grad))
}

/// Mean over queries of `-log softmax(column)[target]`.
pub fn ce_loss(class_logits: &Tensor2, targets: &[usize]) -> Result<(f64, Tensor2)> {
    let (c, k) = class_logits.shape();
    if targets.len() != k {
        return Err(Error::Shape(format!(
            "{} class targets for {k} queries",
            targets.len()
        )));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::InvalidInput(format!(
            "class target {t} out of range 0..{c}"
        )));
    }
    let mut grad = Tensor2::zeros(c, k);
    if k == 0 {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    for (col, &t) in targets.iter().enumerate() {
        let max = (0..c)
            .map(|r| class_logits.get(r, col))
            .fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c).map(|r| (class_logits.get(r, col) - max).exp()).sum();
        let log_z = z.ln() + max;
        total += log_z - class_logits.get(t, col);
        for r in 0..c {
            let p = (class_logits.get(r, col) - log_z).exp();
            let onehot = if r == t { 1.0 } else { 0.0 };
            grad.set(r, col, (p - onehot) / k as f64);
        }
    }
    Ok((total / k as f64, grad))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLoss {
    pub bce: f64,
    pub dice: f64,
    pub ce: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub bce: f64,
    pub dice: f64,
    pub ce: f64,
    pub per_stage: Vec<StageLoss>,
}

/// Stage-averaged weighted loss plus gradients on every stage's logits.
pub struct LossWithGrads {
    pub breakdown: LossBreakdown,
    pub d_masks: Vec<Tensor2>,
    pub d_classes: Vec<Tensor2>,
}

pub fn total_loss(
    outputs: &[StageOutput],
    targets: &SupervisionTargets,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    total_loss_with_grads(outputs, targets, weights).map(|l| l.breakdown)
}

pub fn total_loss_with_grads(
    outputs: &[StageOutput],
    targets: &SupervisionTargets,
    weights: &LossWeights,
) -> Result<LossWithGrads> {
    if outputs.is_empty() {
        return Err(Error::InvalidInput("no stage outputs".into()));
    }
    let inv = 1.0 / outputs.len() as f64;
    let mut breakdown = LossBreakdown::default();
    let mut d_masks = Vec::with_capacity(outputs.len());
    let mut d_classes = Vec::with_capacity(outputs.len());
    for out in outputs {
        let (bce, mut dm) = bce_loss(&out.mask_logits, &targets.masks, weights.bce_reduction)?;
        let (dice, dd) = dice_loss(&out.mask_logits, &targets.masks, weights.epsilon)?;
        let (ce, mut dz) = ce_loss(&out.class_logits, &targets.classes)?;
        dm.scale(weights.bce * inv);
        for (a, b) in dm.data_mut().iter_mut().zip(dd.data()) {
            *a += weights.dice * inv * b;
        }
        dz.scale(weights.ce * inv);
        d_masks.push(dm);
        d_classes.push(dz);
        breakdown.per_stage.push(StageLoss { bce, dice, ce });
        breakdown.bce += bce * inv;
        breakdown.dice += dice * inv;
        breakdown.ce += ce * inv;
    }
    breakdown.total =
        weights.bce * breakdown.bce + weights.dice * breakdown.dice + weights.ce * breakdown.ce;
    Ok(LossWithGrads {
        breakdown,
        d_masks,
        d_classes,
    })
}
