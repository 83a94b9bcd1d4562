//! Deterministic post-processing of detector and captioner output: confidence
//! filtering, class-agnostic NMS, caption dedup, jitter-stability filtering
//! of box-prompted masks, and corpus statistics.
//!
//! Neural annotators are represented by the [`MaskOracle`] and
//! [`CaptionScorer`] interfaces.

mod dedup;
mod filter;
mod records;
mod stability;
mod stats;

pub use dedup::{dedup_captions, normalize_caption};
pub use filter::{box_iou, filter_by_confidence, nms_merge, DEFAULT_CONFIDENCE, DEFAULT_NMS_IOU};
pub use records::{box_area, read_jsonl, write_jsonl, AnnotationRecord, Caption, Region};
pub use stability::{
    jitter_offsets, jitter_stability, mask_iou, BoxInteriorOracle, Mask, MaskOracle, DEFAULT_JITTERS,
    DEFAULT_MAGNITUDE, DEFAULT_STABILITY,
};
pub use stats::{compute_stats, AreaBucket, CorpusStats, StatsAccumulator};

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores how well a caption fits an image's tags.
pub trait CaptionScorer {
    fn score(&self, caption: &str, tags: &[String]) -> f64;
}

/// Fraction of a caption's tokens that occur in some tag.
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenOverlapScorer;

impl CaptionScorer for TokenOverlapScorer {
    fn score(&self, caption: &str, tags: &[String]) -> f64 {
        let vocab: HashSet<String> = tags
            .iter()
            .flat_map(|t| t.split_whitespace().map(str::to_lowercase))
            .collect();
        let norm = normalize_caption(caption);
        let words: Vec<&str> = norm.split_whitespace().collect();
        if words.is_empty() {
            return 0.0;
        }
        words.iter().filter(|w| vocab.contains(**w)).count() as f64 / words.len() as f64
    }
}

/// Thresholds of the annotation pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnotateConfig {
    pub confidence: f64,
    pub nms_iou: f64,
    /// Regions whose mask stability falls below this are dropped.
    pub stability: f64,
    pub jitters: usize,
    pub magnitude: f64,
}

impl Default for AnnotateConfig {
    fn default() -> Self {
        AnnotateConfig {
            confidence: DEFAULT_CONFIDENCE,
            nms_iou: DEFAULT_NMS_IOU,
            stability: DEFAULT_STABILITY,
            jitters: DEFAULT_JITTERS,
            magnitude: DEFAULT_MAGNITUDE,
        }
    }
}

impl AnnotateConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.confidence) || !unit(self.stability) {
            return Err(Error::Config("confidence and stability thresholds must lie in [0, 1]".into()));
        }
        if !(self.nms_iou > 0.0 && self.nms_iou < 1.0) {
            return Err(Error::Config(format!("nms_iou {} must lie in (0, 1)", self.nms_iou)));
        }
        if self.jitters == 0 || !(self.magnitude > 0.0) {
            return Err(Error::Config("jitters must be >= 1 and magnitude > 0".into()));
        }
        Ok(())
    }
}

/// Per-stage region counts of one pipeline run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotateSummary {
    pub input: usize,
    pub after_confidence: usize,
    pub after_nms: usize,
    pub after_stability: usize,
}

impl AnnotateSummary {
    pub fn merge(&mut self, o: &AnnotateSummary) {
        self.input += o.input;
        self.after_confidence += o.after_confidence;
        self.after_nms += o.after_nms;
        self.after_stability += o.after_stability;
    }
}

/// Runs confidence filtering, NMS, stability scoring (when an oracle is
/// given) and caption dedup on one record.
pub fn annotate_record(
    record: &AnnotationRecord,
    config: &AnnotateConfig,
    oracle: Option<&dyn MaskOracle>,
) -> Result<(AnnotationRecord, AnnotateSummary)> {
    config.validate()?;
    record.validate()?;
    let mut summary = AnnotateSummary {
        input: record.regions.len(),
        ..Default::default()
    };
    let kept = filter_by_confidence(&record.regions, config.confidence);
    summary.after_confidence = kept.len();
    let mut kept = nms_merge(&kept, config.nms_iou);
    summary.after_nms = kept.len();
    if let Some(oracle) = oracle {
        let (w, h) = (record.width as usize, record.height as usize);
        for r in &mut kept {
            r.stability = Some(jitter_stability(r.bbox, oracle, w, h, config.jitters, config.magnitude)?);
        }
        kept.retain(|r| r.stability.is_some_and(|s| s >= config.stability));
    }
    summary.after_stability = kept.len();
    for r in &mut kept {
        r.captions = dedup_captions(&r.captions);
    }
    let mut seen = HashSet::new();
    let image_captions = record
        .image_captions
        .iter()
        .filter(|c| seen.insert(normalize_caption(&c.text)))
        .cloned()
        .collect();
    let out = AnnotationRecord {
        regions: kept,
        image_captions,
        ..record.clone()
    };
    Ok((out, summary))
}

/// Replaces every image caption score with `scorer`'s value against the image tags.
pub fn rescore_captions(record: &mut AnnotationRecord, scorer: &dyn CaptionScorer) {
    for c in &mut record.image_captions {
        c.score = scorer.score(&c.text, &record.image_tags);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlap_scorer_is_length_normalized() {
        let tags = vec!["red circle".to_string()];
        assert_eq!(TokenOverlapScorer.score("A red circle.", &tags), 2.0 / 3.0);
        assert_eq!(TokenOverlapScorer.score("", &tags), 0.0);
    }

    #[test]
    fn pipeline_counts() {
        let region = |bbox, confidence| Region {
            bbox,
            tag: "x".into(),
            confidence,
            captions: vec!["a x".into(), "A x.".into()],
            stability: None,
        };
        let rec = AnnotationRecord {
            image_id: "i".into(),
            width: 64,
            height: 64,
            image_tags: vec!["x".into()],
            image_captions: vec![],
            regions: vec![
                region([0.0, 0.0, 20.0, 20.0], 0.9),
                region([1.0, 1.0, 20.0, 20.0], 0.8),
                region([30.0, 30.0, 60.0, 60.0], 0.2),
            ],
        };
        let (out, s) = annotate_record(&rec, &AnnotateConfig::default(), Some(&BoxInteriorOracle)).unwrap();
        assert_eq!((s.input, s.after_confidence, s.after_nms, s.after_stability), (3, 2, 1, 1));
        assert_eq!(out.regions[0].captions, vec!["a x".to_string()]);
        assert!(out.regions[0].stability.unwrap() > 0.7);
    }
}
