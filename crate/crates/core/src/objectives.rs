//! Tag and caption losses at image and region granularity, and their weighted total.

use serde::{Deserialize, Serialize};

use crate::encoders::EmbeddingSet;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// How tag embeddings are matched against visual embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TagLossKind {
    /// Elementwise smooth-L1 regression onto the tag target.
    #[default]
    SmoothL1,
    /// The caption contrastive loss applied to tag targets.
    Contrastive,
}

/// Weights and switches of the four loss terms.
///
/// The contrastive temperature is not stored here: it is the learnable
/// `exp(-logit_scale)` parameter of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub image_tag: bool,
    pub image_caption: bool,
    pub region_tag: bool,
    pub region_caption: bool,
    pub tag_loss: TagLossKind,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 1.0,
            image_tag: true,
            image_caption: true,
            region_tag: true,
            region_caption: true,
            tag_loss: TagLossKind::SmoothL1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0 && self.alpha.is_finite() && self.beta.is_finite()) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0, got alpha {} beta {}",
                self.alpha, self.beta
            )));
        }
        let image = self.alpha > 0.0 && (self.image_tag || self.image_caption);
        let region = self.beta > 0.0 && (self.region_tag || self.region_caption);
        if !image && !region {
            return Err(Error::Config("every loss term is disabled or has zero weight".into()));
        }
        Ok(())
    }
}

/// Values of the four terms and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub image_tag: f64,
    pub image_caption: f64,
    pub region_tag: f64,
    pub region_caption: f64,
    pub total: f64,
}

/// A [`LossReport`] together with the differentiable total.
#[derive(Debug, Clone, Copy)]
pub struct Loss {
    pub report: LossReport,
    pub total: Var,
}

fn require_normalized(e: &EmbeddingSet, what: &str) -> Result<()> {
    if e.normalized {
        Ok(())
    } else {
        Err(Error::contract(format!("{what} embeddings must be l2-normalized")))
    }
}

fn rows<T: Scalar>(tape: &Tape<T>, e: &EmbeddingSet) -> usize {
    tape.shape(e.vectors)[0]
}

/// Mean elementwise smooth-L1 of `visual - target`.
pub fn tag_loss<T: Scalar>(tape: &mut Tape<T>, visual: &EmbeddingSet, target: &EmbeddingSet) -> Result<Var> {
    require_normalized(visual, "visual")?;
    require_normalized(target, "tag target")?;
    let (a, b) = (tape.shape(visual.vectors).to_vec(), tape.shape(target.vectors).to_vec());
    if a[0] != b[0] {
        return Err(Error::contract(format!("tag loss row counts differ: {} vs {}", a[0], b[0])));
    }
    if a != b {
        return Err(Error::dim("tag_loss", format!("{a:?} vs {b:?}")));
    }
    let diff = tape.sub(visual.vectors, target.vectors)?;
    let l = tape.smooth_l1(diff)?;
    tape.mean(l)
}

/// Symmetric InfoNCE with logits `visual · textᵀ · exp(logit_scale)`.
///
/// `logit_scale` is a one-element var, so the temperature `exp(-logit_scale)`
/// can be learned.
pub fn contrastive_with_logit_scale<T: Scalar>(
    tape: &mut Tape<T>,
    visual: &EmbeddingSet,
    text: &EmbeddingSet,
    logit_scale: Var,
) -> Result<Var> {
    require_normalized(visual, "visual")?;
    require_normalized(text, "text")?;
    let m = rows(tape, visual);
    if m != rows(tape, text) {
        return Err(Error::contract(format!(
            "contrastive loss needs matched rows, got {m} and {}",
            rows(tape, text)
        )));
    }
    if m < 2 {
        return Err(Error::contract("contrastive loss needs at least two pairs"));
    }
    let sim = tape.matmul_nt(visual.vectors, text.vectors)?;
    let scale = tape.exp(logit_scale)?;
    let logits = tape.mul(sim, scale)?;
    let eye = tape.constant(Tensor::eye(m));
    let i2t = tape.log_softmax(logits)?;
    let i2t = tape.mul(i2t, eye)?;
    let i2t = tape.sum(i2t)?;
    let logits_t = tape.transpose(logits)?;
    let t2i = tape.log_softmax(logits_t)?;
    let t2i = tape.mul(t2i, eye)?;
    let t2i = tape.sum(t2i)?;
    let both = tape.add(i2t, t2i)?;
    tape.scale(both, -0.5 / m as f64)
}

/// Symmetric InfoNCE at a fixed temperature.
pub fn caption_contrastive_loss<T: Scalar>(
    tape: &mut Tape<T>,
    visual: &EmbeddingSet,
    text: &EmbeddingSet,
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::contract(format!("temperature {temperature} must be > 0")));
    }
    let scale = tape.constant(Tensor::scalar(T::from_f64(-temperature.ln())));
    contrastive_with_logit_scale(tape, visual, text, scale)
}

/// Per-instance tag targets: the l2-normalized mean of each instance's tag embeddings.
///
/// `tags` holds one normalized embedding per distinct tag string and
/// `groups[i]` lists the rows of `tags` belonging to instance `i`. Callers
/// order the distinct tags lexicographically, which makes the target of an
/// instance independent of the order its tags were listed in.
pub fn aggregate_tag_targets<T: Scalar>(tape: &mut Tape<T>, tags: &EmbeddingSet, groups: &[Vec<usize>]) -> Result<EmbeddingSet> {
    require_normalized(tags, "tag")?;
    let u = rows(tape, tags);
    let mut w = vec![T::zero(); groups.len() * u];
    for (i, g) in groups.iter().enumerate() {
        let mut members = g.clone();
        members.sort_unstable();
        members.dedup();
        if members.is_empty() {
            return Err(Error::contract(format!("instance {i} has no tags")));
        }
        if let Some(&bad) = members.iter().find(|&&j| j >= u) {
            return Err(Error::contract(format!("tag row {bad} out of range {u}")));
        }
        let share = T::from_f64(1.0 / members.len() as f64);
        for j in members {
            w[i * u + j] = share;
        }
    }
    let avg = tape.constant(Tensor::new(&[groups.len(), u], w)?);
    let mean = tape.matmul(avg, tags.vectors)?;
    let vectors = tape.l2_normalize(mean)?;
    Ok(EmbeddingSet {
        vectors,
        normalized: true,
    })
}

/// The embeddings that enter the loss, all already projected and normalized.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs {
    pub image: EmbeddingSet,
    pub image_tag: EmbeddingSet,
    pub image_caption: EmbeddingSet,
    /// `None` when the batch holds no regions.
    pub region: Option<RegionInputs>,
    pub logit_scale: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct RegionInputs {
    pub region: EmbeddingSet,
    pub tag: EmbeddingSet,
    pub caption: EmbeddingSet,
}

fn tag_term<T: Scalar>(
    tape: &mut Tape<T>,
    kind: TagLossKind,
    visual: &EmbeddingSet,
    target: &EmbeddingSet,
    logit_scale: Var,
) -> Result<Var> {
    match kind {
        TagLossKind::SmoothL1 => tag_loss(tape, visual, target),
        TagLossKind::Contrastive => contrastive_with_logit_scale(tape, visual, target, logit_scale),
    }
}

/// `alpha * (image_tag + image_caption) + beta * (region_tag + region_caption)`.
///
/// Terms that are switched off, carry zero weight or have no regions to act
/// on are not evaluated and report 0.
pub fn total_loss<T: Scalar>(tape: &mut Tape<T>, inputs: &LossInputs, weights: &LossWeights) -> Result<Loss> {
    weights.validate()?;
    let mut report = LossReport::default();
    let mut parts: Vec<(Var, f64)> = Vec::new();
    let ls = inputs.logit_scale;
    if weights.alpha > 0.0 {
        if weights.image_tag {
            let v = tag_term(tape, weights.tag_loss, &inputs.image, &inputs.image_tag, ls)?;
            report.image_tag = tape.value(v).data()[0].as_f64();
            parts.push((v, weights.alpha));
        }
        if weights.image_caption {
            let v = contrastive_with_logit_scale(tape, &inputs.image, &inputs.image_caption, ls)?;
            report.image_caption = tape.value(v).data()[0].as_f64();
            parts.push((v, weights.alpha));
        }
    }
    if let (true, Some(r)) = (weights.beta > 0.0, &inputs.region) {
        if weights.region_tag {
            let v = tag_term(tape, weights.tag_loss, &r.region, &r.tag, ls)?;
            report.region_tag = tape.value(v).data()[0].as_f64();
            parts.push((v, weights.beta));
        }
        if weights.region_caption {
            let v = contrastive_with_logit_scale(tape, &r.region, &r.caption, ls)?;
            report.region_caption = tape.value(v).data()[0].as_f64();
            parts.push((v, weights.beta));
        }
    }
    let mut total: Option<Var> = None;
    for (v, w) in parts {
        let term = tape.scale(v, w)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(T::zero())),
    };
    report.total = tape.value(total).data()[0].as_f64();
    Ok(Loss { report, total })
}
