use mgclip::encoders::EmbeddingSet;
use mgclip::objectives::{LossInputs, RegionInputs};
use mgclip::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn unit_rows(rng: &mut ChaCha8Rng, m: usize, d: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(m * d);
    for _ in 0..m {
        let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.extend(v.iter().map(|x| x / n));
    }
    out
}

pub fn set(tape: &mut Tape<f64>, m: usize, d: usize, data: &[f64]) -> EmbeddingSet {
    EmbeddingSet {
        vectors: tape.constant(Tensor::from_f64(&[m, d], data).unwrap()),
        normalized: true,
    }
}

pub struct Fixture {
    pub tape: Tape<f64>,
    pub inputs: LossInputs,
}

pub fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, r, d) = (4, 6, 8);
    let mut tape = Tape::new();
    let mut s = |n: usize| {
        let rows = unit_rows(&mut rng, n, d);
        set(&mut tape, n, d, &rows)
    };
    let (image, image_tag, image_caption) = (s(m), s(m), s(m));
    let (region, tag, caption) = (s(r), s(r), s(r));
    let logit_scale = tape.constant(Tensor::scalar(-(0.07f64).ln()));
    Fixture {
        tape,
        inputs: LossInputs {
            image,
            image_tag,
            image_caption,
            region: Some(RegionInputs { region, tag, caption }),
            logit_scale,
        },
    }
}
