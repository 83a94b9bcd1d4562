//! Retrieval and classification metrics on held-out scenes.

use serde::{Deserialize, Serialize};

use super::batch::{embed_texts, Batch, TextTable};
use super::synth::{all_tags, tag_prompt, SyntheticScene};
use super::vocab::Vocab;
use crate::encoders::{Head, Model};
use crate::error::{Error, Result};
use crate::granularity::roi_align;
use crate::tape::Tape;
use crate::tensor::Scalar;

const CHUNK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub images: usize,
    pub regions: usize,
    pub i2t_r1: f64,
    pub i2t_r5: f64,
    pub t2i_r1: f64,
    pub t2i_r5: f64,
    pub region_r1: f64,
    pub tag_accuracy: f64,
}

/// Normalized embedding rows, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl Embeddings {
    pub fn rows(&self) -> usize {
        self.data.len() / self.dim.max(1)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Indices of `gallery` rows by descending similarity to `query`; ties keep the lower index first.
fn ranking(query: &[f64], gallery: &Embeddings) -> Vec<usize> {
    let sims: Vec<f64> = (0..gallery.rows()).map(|j| dot(query, gallery.row(j))).collect();
    let mut order: Vec<usize> = (0..sims.len()).collect();
    order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
    order
}

/// Fraction of queries whose top `k` gallery items include one with the query's label.
pub fn recall_at_k<L: PartialEq>(queries: &Embeddings, query_labels: &[L], gallery: &Embeddings, gallery_labels: &[L], k: usize) -> f64 {
    if queries.rows() == 0 {
        return 0.0;
    }
    let hits = (0..queries.rows())
        .filter(|&i| {
            ranking(queries.row(i), gallery)
                .iter()
                .take(k)
                .any(|&j| gallery_labels[j] == query_labels[i])
        })
        .count();
    hits as f64 / queries.rows() as f64
}

fn to_embeddings<T: Scalar>(tape: &Tape<T>, v: crate::tape::Var) -> Embeddings {
    let t = tape.value(v);
    Embeddings {
        dim: *t.shape().last().unwrap(),
        data: t.to_f64_vec(),
    }
}

/// Image and region embeddings of canonical-caption batches, in scene order.
pub fn embed_scenes<T: Scalar>(model: &Model<T>, scenes: &[SyntheticScene]) -> Result<(Embeddings, Embeddings)> {
    let mut images = Embeddings {
        dim: model.config.embed_dim,
        data: Vec::new(),
    };
    let mut regions = images.clone();
    for chunk in scenes.chunks(CHUNK) {
        let batch = Batch::from_scenes(chunk, None);
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, |_, _| false);
        let tokens = model.encode_image(&mut tape, &bound, &batch.image_tensor())?;
        let img = model.project_embed(&mut tape, &bound, tokens.cls, Head::Image)?;
        images.data.extend(to_embeddings(&tape, img.vectors).data);
        if !batch.boxes.is_empty() {
            let pooled = roi_align(&mut tape, tokens.grid, &batch.boxes)?;
            let reg = model.project_embed(&mut tape, &bound, pooled, Head::Region)?;
            regions.data.extend(to_embeddings(&tape, reg.vectors).data);
        }
    }
    Ok((images, regions))
}

pub fn embed_strings<T: Scalar>(model: &Model<T>, texts: &[String]) -> Result<Embeddings> {
    let mut out = Embeddings {
        dim: model.config.embed_dim,
        data: Vec::new(),
    };
    let vocab = Vocab::new();
    for chunk in texts.chunks(4 * CHUNK) {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, |_, _| false);
        let v = embed_texts(model, &mut tape, &bound, &vocab, chunk)?;
        out.data.extend(to_embeddings(&tape, v).data);
    }
    Ok(out)
}

/// Embeddings of `texts` with each distinct string encoded once.
fn embed_labels<T: Scalar>(model: &Model<T>, texts: &[String]) -> Result<Embeddings> {
    let mut table = TextTable::default();
    let ids: Vec<usize> = texts.iter().map(|t| table.id(t)).collect();
    let unique = embed_strings(model, &table.texts)?;
    Ok(Embeddings {
        dim: unique.dim,
        data: ids.iter().flat_map(|&i| unique.row(i).iter().copied()).collect(),
    })
}

/// Image-text and region-text retrieval plus region tag classification.
///
/// A retrieved caption counts as a hit when its text equals the query's own
/// canonical caption, so duplicate captions in the gallery are interchangeable.
pub fn evaluate<T: Scalar>(model: &Model<T>, scenes: &[SyntheticScene]) -> Result<EvalMetrics> {
    if scenes.is_empty() {
        return Err(Error::contract("evaluate needs at least one scene"));
    }
    let (images, regions) = embed_scenes(model, scenes)?;
    let captions: Vec<String> = scenes.iter().map(|s| s.captions().swap_remove(0)).collect();
    let objects: Vec<_> = scenes.iter().flat_map(|s| s.objects.iter()).collect();
    let region_captions: Vec<String> = objects.iter().map(|o| o.captions().swap_remove(0)).collect();
    let region_tags: Vec<String> = objects.iter().map(|o| o.tag()).collect();

    let caption_emb = embed_labels(model, &captions)?;
    let mut m = EvalMetrics {
        images: scenes.len(),
        regions: objects.len(),
        i2t_r1: recall_at_k(&images, &captions, &caption_emb, &captions, 1),
        i2t_r5: recall_at_k(&images, &captions, &caption_emb, &captions, 5),
        t2i_r1: recall_at_k(&caption_emb, &captions, &images, &captions, 1),
        t2i_r5: recall_at_k(&caption_emb, &captions, &images, &captions, 5),
        ..Default::default()
    };
    if !objects.is_empty() {
        let region_caption_emb = embed_labels(model, &region_captions)?;
        m.region_r1 = recall_at_k(&regions, &region_captions, &region_caption_emb, &region_captions, 1);
        let tags = all_tags();
        let prompts: Vec<String> = tags.iter().map(|t| tag_prompt(t)).collect();
        let prompt_emb = embed_strings(model, &prompts)?;
        m.tag_accuracy = recall_at_k(&regions, &region_tags, &prompt_emb, &tags, 1);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn emb(rows: &[[f64; 2]]) -> Embeddings {
        Embeddings {
            dim: 2,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    #[test]
    fn identical_embeddings_give_perfect_recall() {
        let e = emb(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]);
        let labels = ["a", "b", "c"];
        assert_eq!(recall_at_k(&e, &labels, &e, &labels, 1), 1.0);
    }

    #[test]
    fn duplicate_label_counts_as_hit() {
        let q = emb(&[[1.0, 0.0]]);
        let g = emb(&[[0.0, 1.0], [1.0, 0.0]]);
        assert_eq!(recall_at_k(&q, &["x"], &g, &["x", "x"], 1), 1.0);
        assert_eq!(recall_at_k(&q, &["x"], &g, &["x", "y"], 1), 0.0);
        assert_eq!(recall_at_k(&q, &["x"], &g, &["x", "y"], 2), 1.0);
    }
}
