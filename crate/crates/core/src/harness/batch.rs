//! Batch assembly from scenes and the four-term loss of one batch.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::DataConfig;
use super::synth::{gen_corpus, tag_prompt, Split, SyntheticScene, CHANNELS, IMAGE_SIZE};
use super::vocab::Vocab;
use crate::encoders::{EmbeddingSet, Head, Model};
use crate::error::Result;
use crate::granularity::{roi_align, RegionBoxSet};
use crate::objectives::{aggregate_tag_targets, total_loss, Loss, LossInputs, LossWeights, RegionInputs};
use crate::params::Bound;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Pixel normalization applied before patch embedding.
const PIXEL_MEAN: f32 = 0.5;
const PIXEL_STD: f32 = 0.25;

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `[b, C, side, side]` raw pixels in `[0, 1]`.
    pub pixels: Vec<f32>,
    pub side: usize,
    pub image_captions: Vec<String>,
    /// Sorted tags of each image.
    pub image_tags: Vec<Vec<String>>,
    pub boxes: RegionBoxSet,
    pub region_captions: Vec<String>,
    pub region_tags: Vec<String>,
}

impl Batch {
    /// With `rng`, one caption per image and region is drawn uniformly; without, the canonical first caption is used.
    pub fn from_scenes(scenes: &[SyntheticScene], mut rng: Option<&mut ChaCha8Rng>) -> Batch {
        let mut pick = |options: Vec<String>| match rng.as_deref_mut() {
            Some(r) => {
                let i = r.random_range(0..options.len());
                options.into_iter().nth(i).unwrap()
            }
            None => options.into_iter().next().unwrap(),
        };
        let mut batch = Batch {
            pixels: Vec::with_capacity(scenes.len() * CHANNELS * IMAGE_SIZE * IMAGE_SIZE),
            side: IMAGE_SIZE,
            image_captions: Vec::new(),
            image_tags: Vec::new(),
            boxes: RegionBoxSet::default(),
            region_captions: Vec::new(),
            region_tags: Vec::new(),
        };
        let side = IMAGE_SIZE as f64;
        for (i, scene) in scenes.iter().enumerate() {
            batch.pixels.extend_from_slice(&scene.image);
            batch.image_captions.push(pick(scene.captions()));
            batch.image_tags.push(scene.tags());
            for o in &scene.objects {
                batch.boxes.push(o.bbox.map(|v| v as f64 / side), i);
                batch.region_captions.push(pick(o.captions()));
                batch.region_tags.push(o.tag());
            }
        }
        batch
    }

    pub fn len(&self) -> usize {
        self.image_captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_captions.is_empty()
    }

    pub fn image_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self
            .pixels
            .iter()
            .map(|&p| T::from_f64(((p - PIXEL_MEAN) / PIXEL_STD) as f64))
            .collect();
        Tensor::new(&[self.len(), CHANNELS, self.side, self.side], data).expect("pixel count")
    }
}

/// Training batch for 0-based `step`: scenes `step * b ..` of the train stream and seeded caption choices.
pub fn training_batch(seed: u64, step: usize, batch: usize, data: &DataConfig) -> Result<Batch> {
    let stream = gen_corpus(seed, data.train_images, data.max_regions, Split::Train)?.with_domain(data.domain);
    let scenes: Vec<SyntheticScene> = (0..batch)
        .map(|j| stream.scene_at((step * batch + j) % data.train_images))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_ca97);
    rng.set_stream(step as u64);
    Ok(Batch::from_scenes(&scenes, Some(&mut rng)))
}

/// Distinct strings in first-seen order.
#[derive(Debug, Default)]
pub(crate) struct TextTable {
    pub texts: Vec<String>,
    index: HashMap<String, usize>,
}

impl TextTable {
    pub fn id(&mut self, s: &str) -> usize {
        if let Some(&i) = self.index.get(s) {
            return i;
        }
        self.texts.push(s.to_string());
        self.index.insert(s.to_string(), self.texts.len() - 1);
        self.texts.len() - 1
    }
}

/// Encodes and projects every string of `texts` once: normalized rows `[len, embed_dim]`.
pub(crate) fn embed_texts<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    vocab: &Vocab,
    texts: &[String],
) -> Result<Var> {
    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let tb = vocab.batch(&refs, model.config.text_len)?;
    let raw = model.encode_text(tape, bound, &tb)?;
    Ok(model.project_embed(tape, bound, raw.vectors, Head::Text)?.vectors)
}

fn select<T: Scalar>(tape: &mut Tape<T>, rows: Var, index: &[usize]) -> Result<EmbeddingSet> {
    Ok(EmbeddingSet {
        vectors: tape.gather(rows, 0, index)?,
        normalized: true,
    })
}

/// Forward pass and total loss of one batch.
///
/// Every distinct string (tag prompts, image and region captions) goes through
/// the text encoder once.
pub fn batch_loss<T: Scalar>(
    model: &Model<T>,
    tape: &mut Tape<T>,
    bound: &Bound,
    vocab: &Vocab,
    batch: &Batch,
    weights: &LossWeights,
) -> Result<Loss> {
    let use_regions = weights.beta > 0.0 && (weights.region_tag || weights.region_caption) && !batch.boxes.is_empty();
    let images = batch.image_tensor::<T>();
    let tokens = model.encode_image(tape, bound, &images)?;
    let image = model.project_embed(tape, bound, tokens.cls, Head::Image)?;

    // Tag prompts come first, sorted, so tag rows are contiguous and ordered.
    let mut tags: Vec<&String> = batch.image_tags.iter().flatten().collect();
    if use_regions {
        tags.extend(&batch.region_tags);
    }
    tags.sort();
    tags.dedup();
    let mut table = TextTable::default();
    let tag_row: HashMap<&str, usize> = tags.iter().map(|t| (t.as_str(), table.id(&tag_prompt(t)))).collect();
    let image_caption_rows: Vec<usize> = batch.image_captions.iter().map(|c| table.id(c)).collect();
    let region_caption_rows: Vec<usize> = if use_regions {
        batch.region_captions.iter().map(|c| table.id(c)).collect()
    } else {
        Vec::new()
    };
    let text = embed_texts(model, tape, bound, vocab, &table.texts)?;

    let tag_rows = tape.slice(text, 0, 0, tags.len())?;
    let tag_set = EmbeddingSet {
        vectors: tag_rows,
        normalized: true,
    };
    let groups: Vec<Vec<usize>> = batch
        .image_tags
        .iter()
        .map(|ts| ts.iter().map(|t| tag_row[t.as_str()]).collect())
        .collect();
    let image_tag = aggregate_tag_targets(tape, &tag_set, &groups)?;
    let image_caption = select(tape, text, &image_caption_rows)?;

    let region = if use_regions {
        let pooled = roi_align(tape, tokens.grid, &batch.boxes)?;
        let region = model.project_embed(tape, bound, pooled, Head::Region)?;
        let tag_idx: Vec<usize> = batch.region_tags.iter().map(|t| tag_row[t.as_str()]).collect();
        Some(RegionInputs {
            region,
            tag: select(tape, text, &tag_idx)?,
            caption: select(tape, text, &region_caption_rows)?,
        })
    } else {
        None
    };
    let inputs = LossInputs {
        image,
        image_tag,
        image_caption,
        region,
        logit_scale: bound.var(model.logit_scale_id()),
    };
    total_loss(tape, &inputs, weights)
}
