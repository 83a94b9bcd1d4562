use super::{block, EmbeddingSet, Model};
use crate::adapters::adapted_block_forward;
use crate::error::{Error, Result};
use crate::params::Bound;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

/// Padded token ids, `m` rows of `width` ids each, with true lengths.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextBatch {
    pub token_ids: Vec<u32>,
    pub lengths: Vec<usize>,
    pub width: usize,
}

impl TextBatch {
    /// Pads each sequence with `pad` up to `width`.
    pub fn from_sequences(seqs: &[Vec<u32>], width: usize, pad: u32) -> Result<Self> {
        let mut token_ids = Vec::with_capacity(seqs.len() * width);
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.len() > width {
                return Err(Error::contract(format!("sequence of {} tokens exceeds width {width}", s.len())));
            }
            token_ids.extend_from_slice(s);
            token_ids.extend(std::iter::repeat_n(pad, width - s.len()));
            lengths.push(s.len());
        }
        Ok(TextBatch {
            token_ids,
            lengths,
            width,
        })
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn validate(&self, vocab: usize, max_len: usize) -> Result<()> {
        if self.width == 0 || self.width > max_len {
            return Err(Error::contract(format!("batch width {} outside 1..={max_len}", self.width)));
        }
        if self.token_ids.len() != self.lengths.len() * self.width {
            return Err(Error::contract("token_ids length is not rows * width"));
        }
        if let Some(id) = self.token_ids.iter().find(|&&t| t as usize >= vocab) {
            return Err(Error::contract(format!("token id {id} >= vocab {vocab}")));
        }
        for (i, &l) in self.lengths.iter().enumerate() {
            if l == 0 {
                return Err(Error::contract(format!("text {i} is empty")));
            }
            if l > self.width {
                return Err(Error::contract(format!("text {i} length {l} > width {}", self.width)));
            }
        }
        Ok(())
    }
}

fn causal_bias<T: Scalar>(n: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            data[i * n + j] = T::from_f64(-1e9);
        }
    }
    Tensor::new(&[n, n], data).expect("square mask")
}

impl<T: Scalar> Model<T> {
    /// Final-position states `[m, text_dim]` of the causal text transformer.
    ///
    /// Rows are unnormalized; [`Model::project_embed`] with the text head maps
    /// them into the shared space.
    pub fn encode_text(&self, tape: &mut Tape<T>, bound: &Bound, batch: &TextBatch) -> Result<EmbeddingSet> {
        let cfg = &self.config;
        batch.validate(cfg.text_vocab, cfg.text_len)?;
        if batch.is_empty() {
            return Err(Error::contract("encode_text needs at least one string"));
        }
        let (m, w, td) = (batch.len(), batch.width, cfg.text_dim);
        let t = &self.text;
        let ids: Vec<usize> = batch.token_ids.iter().map(|&i| i as usize).collect();
        let emb = tape.gather(bound.var(t.tok), 0, &ids)?;
        let emb = tape.reshape(emb, &[m, w, td])?;
        let pos = tape.slice(bound.var(t.pos), 0, 0, w)?;
        let mut x = tape.add(emb, pos)?;
        let mask = tape.constant(causal_bias(w));
        for blk in &t.blocks {
            x = adapted_block_forward(tape, bound, blk, x, cfg.text_heads, Some(mask), None, 0)?;
        }
        let x = tape.layer_norm(x, bound.var(t.ln_g), bound.var(t.ln_b), block::LN_EPS)?;
        let flat = tape.reshape(x, &[m * w, td])?;
        let last: Vec<usize> = batch.lengths.iter().enumerate().map(|(i, &l)| i * w + l - 1).collect();
        let vectors = tape.gather(flat, 0, &last)?;
        Ok(EmbeddingSet {
            vectors,
            normalized: false,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::EncoderConfig;

    fn encode(model: &Model<f64>, batch: &TextBatch) -> Tensor<f64> {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, |_, _| false);
        let e = model.encode_text(&mut tape, &bound, batch).unwrap();
        tape.value(e.vectors).clone()
    }

    #[test]
    fn identical_strings_identical_rows() {
        let model = Model::<f64>::new(EncoderConfig::tiny(), 2).unwrap();
        let batch = TextBatch::from_sequences(&[vec![3, 4, 5], vec![3, 4, 5], vec![7]], 6, 0).unwrap();
        let out = encode(&model, &batch);
        assert_eq!(out.shape(), &[3, 8]);
        let rows: Vec<&[f64]> = out.rows().collect();
        assert_eq!(rows[0], rows[1]);
        assert_ne!(rows[0], rows[2]);
    }

    #[test]
    fn padding_ids_do_not_matter() {
        let model = Model::<f64>::new(EncoderConfig::tiny(), 2).unwrap();
        let a = TextBatch::from_sequences(&[vec![3, 4], vec![9, 9, 9]], 6, 0).unwrap();
        let b = TextBatch::from_sequences(&[vec![3, 4], vec![9, 9, 9]], 6, 41).unwrap();
        assert_eq!(encode(&model, &a), encode(&model, &b));
    }

    #[test]
    fn empty_string_rejected() {
        let model = Model::<f64>::new(EncoderConfig::tiny(), 2).unwrap();
        let batch = TextBatch::from_sequences(&[vec![3], vec![]], 6, 0).unwrap();
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape, |_, _| false);
        assert!(matches!(model.encode_text(&mut tape, &bound, &batch), Err(Error::Contract(_))));
    }
}
