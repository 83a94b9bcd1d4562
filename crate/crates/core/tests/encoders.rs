use mgclip::encoders::{EncoderConfig, Head, Model, TextBatch};
use mgclip::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn config(cluster_after: Option<usize>) -> EncoderConfig {
    EncoderConfig {
        dim: 16,
        heads: 2,
        depth: 3,
        cluster_after,
        ..EncoderConfig::default()
    }
}

/// Images whose 8x8 patch grid holds 16 distinct patches, each tiled over a 2x2 block.
fn blocky_images(rng: &mut ChaCha8Rng, b: usize) -> Tensor<f64> {
    let (side, patch) = (32, 4);
    let mut data = vec![0.0; b * 3 * side * side];
    for img in 0..b {
        let patterns: Vec<f64> = (0..16 * 3 * patch * patch).map(|_| rng.random_range(-1.0..1.0)).collect();
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    let group = (y / (2 * patch)) * 4 + x / (2 * patch);
                    let within = (c * patch + y % patch) * patch + x % patch;
                    data[((img * 3 + c) * side + y) * side + x] = patterns[group * 3 * patch * patch + within];
                }
            }
        }
    }
    Tensor::from_f64(&[b, 3, side, side], &data).unwrap()
}

fn encode(model: &Model<f64>, images: &Tensor<f64>) -> (Vec<f64>, Vec<f64>) {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, |_, _| false);
    let t = model.encode_image(&mut tape, &bound, images).unwrap();
    (tape.value(t.cls).to_f64_vec(), tape.value(t.grid).to_f64_vec())
}

#[test]
fn clustering_is_lossless_on_homogeneous_clusters() {
    let mut full = Model::<f64>::new(config(None), 7).unwrap();
    // Without position embeddings, equal patches stay equal through every block.
    let pos = full.params.find("vision.pos").unwrap();
    let shape = full.params.get(pos).value.shape().to_vec();
    full.params.set(pos, Tensor::zeros(&shape)).unwrap();
    let mut clustered = full.clone();
    clustered.config.cluster_after = Some(1);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let images = blocky_images(&mut rng, 3);
    let (cls_a, grid_a) = encode(&full, &images);
    let (cls_b, grid_b) = encode(&clustered, &images);
    assert_eq!(grid_a.len(), 3 * 64 * 16);
    for (a, b) in cls_a.iter().zip(&cls_b).chain(grid_a.iter().zip(&grid_b)) {
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn clustering_changes_output_on_varied_images() {
    let full = Model::<f64>::new(config(None), 7).unwrap();
    let mut clustered = full.clone();
    clustered.config.cluster_after = Some(1);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let data: Vec<f64> = (0..3 * 32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
    let images = Tensor::from_f64(&[1, 3, 32, 32], &data).unwrap();
    assert_ne!(encode(&full, &images).1, encode(&clustered, &images).1);
}

#[test]
fn text_rows_project_to_unit_embeddings() {
    let cfg = config(None);
    let model = Model::<f64>::new(cfg.clone(), 1).unwrap();
    let seqs = vec![vec![3, 4, 5, 1], vec![7, 1], vec![9, 10, 11, 12, 1]];
    let batch = TextBatch::from_sequences(&seqs, 8, 0).unwrap();
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape, |_, _| false);
    let raw = model.encode_text(&mut tape, &bound, &batch).unwrap();
    let e = model.project_embed(&mut tape, &bound, raw.vectors, Head::Text).unwrap();
    assert!(e.normalized);
    assert_eq!(tape.shape(e.vectors), &[3, cfg.embed_dim]);
    for row in tape.value(e.vectors).to_f64_vec().chunks(cfg.embed_dim) {
        let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-6);
    }
}
