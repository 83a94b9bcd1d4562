//! Finite-difference checks of every differentiable op and of the full toy-model loss.

use mgclip::adapters::AdapterConfig;
use mgclip::encoders::{EncoderConfig, Model};
use mgclip::gradcheck::{check_gradients, check_gradients_multi};
use mgclip::granularity::RegionBoxSet;
use mgclip::harness::{batch_loss, Batch, Vocab};
use mgclip::objectives::LossWeights;
use mgclip::tape::SamplePoint;
use mgclip::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-5;
pub const TRIALS: u64 = 20;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &data).unwrap()
}

/// `sum(y * r)` with fixed random `r`, so every output coordinate carries a distinct weight.
pub fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    let r = rand_tensor(&mut rng, tape.shape(y), -1.0, 1.0);
    let r = tape.constant(r);
    let p = tape.mul(y, r)?;
    tape.sum(p)
}

pub fn check_unary(name: &str, shape: &[usize], lo: f64, hi: f64, f: impl Fn(&mut Tape<f64>, Var) -> Result<Var>) {
    let mut worst = 0.0f64;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let x = rand_tensor(&mut rng, shape, lo, hi);
        let err = check_gradients(
            |t, v| {
                let y = f(t, v)?;
                probe(t, y, trial)
            },
            &x,
            EPS,
        )
        .unwrap_or_else(|e| panic!("{name}: {e}"));
        worst = worst.max(err);
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

pub fn check_multi(name: &str, shapes: &[&[usize]], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let mut worst = 0.0f64;
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + trial);
        let xs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s, -1.5, 1.5)).collect();
        let err = check_gradients_multi(
            |t, v| {
                let y = f(t, v)?;
                probe(t, y, trial)
            },
            &xs,
            EPS,
        )
        .unwrap_or_else(|e| panic!("{name}: {e}"));
        worst = worst.max(err);
    }
    assert!(worst < TOL, "{name}: max relative error {worst:e}");
}

pub fn matmul_variants() {
    check_multi("matmul", &[&[3, 4], &[4, 5]], |t, v| t.matmul(v[0], v[1]));
    check_multi("matmul shared rhs", &[&[2, 3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]));
    check_multi("batched matmul", &[&[2, 3, 4], &[2, 4, 3]], |t, v| t.matmul(v[0], v[1]));
    check_multi("matmul_nt", &[&[2, 3, 4], &[2, 5, 4]], |t, v| t.matmul_nt(v[0], v[1]));
}

pub fn elementwise_binary() {
    check_multi("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1]));
    check_multi("add suffix", &[&[2, 3, 4], &[4]], |t, v| t.add(v[0], v[1]));
    check_multi("add scalar", &[&[2, 3], &[1]], |t, v| t.add(v[0], v[1]));
    check_multi("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1]));
    check_multi("mul suffix", &[&[2, 3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1]));
    check_multi("mul scalar", &[&[5], &[1]], |t, v| t.mul(v[0], v[1]));
    check_multi("sub", &[&[3, 2], &[2]], |t, v| t.sub(v[0], v[1]));
}

pub fn shape_ops() {
    check_unary("scale", &[3, 4], -2.0, 2.0, |t, x| t.scale(x, -0.75));
    check_unary("permute", &[2, 3, 4], -1.0, 1.0, |t, x| t.permute(x, &[2, 0, 1]));
    check_unary("transpose", &[3, 5], -1.0, 1.0, |t, x| t.transpose(x));
    check_unary("reshape", &[2, 6], -1.0, 1.0, |t, x| t.reshape(x, &[3, 4]));
    check_unary("slice", &[4, 3, 2], -1.0, 1.0, |t, x| t.slice(x, 1, 1, 2));
    check_unary("gather", &[5, 3], -1.0, 1.0, |t, x| t.gather(x, 0, &[4, 0, 4, 2]));
    check_unary("segment_mean", &[6, 3], -1.0, 1.0, |t, x| t.segment_mean(x, &[vec![0, 2, 5], vec![1], vec![3, 4]]));
    check_multi("concat", &[&[2, 3], &[2, 1], &[2, 2]], |t, v| t.concat(v, 1));
}

pub fn reductions() {
    check_unary("sum", &[3, 4], -1.0, 1.0, |t, x| t.sum(x));
    check_unary("mean", &[3, 4], -1.0, 1.0, |t, x| t.mean(x));
    check_unary("sum_axis", &[2, 3, 4], -1.0, 1.0, |t, x| t.sum_axis(x, 1));
    check_unary("mean_axis", &[2, 3, 4], -1.0, 1.0, |t, x| t.mean_axis(x, 2));
}

pub fn nonlinearities() {
    check_unary("softmax", &[3, 5], -3.0, 3.0, |t, x| t.softmax(x));
    check_unary("log_softmax", &[3, 5], -3.0, 3.0, |t, x| t.log_softmax(x));
    check_unary("gelu", &[4, 6], -3.0, 3.0, |t, x| t.gelu(x));
    check_unary("l2_normalize", &[3, 4], 0.2, 1.0, |t, x| t.l2_normalize(x));
    check_unary("log", &[7], 0.5, 3.0, |t, x| t.log(x));
    check_unary("exp", &[7], -2.0, 2.0, |t, x| t.exp(x));
    // Keep every coordinate away from the |x| = 1 seam.
    check_unary("smooth_l1 inner", &[8], -0.9, 0.9, |t, x| t.smooth_l1(x));
    check_unary("smooth_l1 outer", &[8], 1.1, 3.0, |t, x| t.smooth_l1(x));
    check_multi("layer_norm", &[&[3, 6], &[6], &[6]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-6));
}

pub fn convolutions() {
    check_multi("conv2d 1x1", &[&[2, 3, 3, 3], &[4, 3, 1, 1], &[4]], |t, v| t.conv2d(v[0], v[1], v[2]));
    check_multi("conv2d 3x3", &[&[2, 2, 4, 3], &[3, 2, 3, 3], &[3]], |t, v| t.conv2d(v[0], v[1], v[2]));
}

pub fn bilinear_sampling() {
    // Interior points with fractional coordinates; grid values are the only inputs.
    let points = [
        SamplePoint { batch: 0, x: 0.3, y: 1.7 },
        SamplePoint { batch: 1, x: 2.25, y: 0.5 },
        SamplePoint { batch: 1, x: 1.0, y: 2.0 },
    ];
    check_unary("bilinear_sample", &[2, 4, 4, 3], -1.0, 1.0, |t, g| t.bilinear_sample(g, &points));
}

pub fn toy_batch(model: &Model<f64>, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = model.config.image_size;
    let pixels: Vec<f32> = (0..2 * 3 * side * side).map(|_| rng.random()).collect();
    Batch {
        pixels,
        side,
        image_captions: vec!["a red circle".into(), "the blue ring".into()],
        image_tags: vec![vec!["blue square".into(), "red circle".into()], vec!["blue ring".into()]],
        boxes: RegionBoxSet::new(vec![[0.1, 0.2, 0.7, 0.9], [0.0, 0.0, 0.5, 0.5], [0.3, 0.25, 1.0, 0.8]], vec![0, 0, 1])
            .unwrap(),
        region_captions: vec!["a red circle".into(), "a blue square".into(), "a blue ring".into()],
        region_tags: vec!["red circle".into(), "blue square".into(), "blue ring".into()],
    }
}

pub fn check_model(mut config: EncoderConfig, adapters: bool) {
    config.text_len = 8;
    let mut model = Model::<f64>::new(config, 11).unwrap();
    if adapters {
        // Unit scale and nonzero up-projections so the adapter path carries gradient.
        let adapter = AdapterConfig { s: 1.0, ..Default::default() };
        model.attach_adapters(adapter, 5).unwrap();
        let ids = model.adapters().unwrap().param_ids();
        // Smooth L1 is only C1; this draw keeps every tag residual clear of the kink.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for id in ids {
            let shape = model.params.get(id).value.shape().to_vec();
            model.params.set(id, rand_tensor(&mut rng, &shape, -0.5, 0.5)).unwrap();
        }
    }
    let batch = toy_batch(&model, 3);
    let vocab = Vocab::new();
    let weights = LossWeights::default();
    let ids: Vec<_> = model.params.ids().collect();
    let points: Vec<Tensor<f64>> = ids.iter().map(|&id| model.params.get(id).value.clone()).collect();
    let err = check_gradients_multi(
        |tape, vars| {
            let overrides: Vec<_> = ids.iter().copied().zip(vars.iter().copied()).collect();
            let bound = model.params.bind(tape, |_, _| false).with_overrides(&overrides);
            Ok(batch_loss(&model, tape, &bound, &vocab, &batch, &weights)?.total)
        },
        &points,
        EPS,
    )
    .unwrap();
    assert!(err < TOL, "total_loss max relative error {err:e}");
}

pub fn full_toy_model_total_loss() {
    check_model(EncoderConfig::tiny(), false);
}

pub fn full_toy_model_with_adapters() {
    check_model(EncoderConfig::tiny(), true);
}

pub fn three_layer_composition() {
    check_multi("matmul -> gelu -> layer_norm -> mean", &[&[3, 4], &[4, 5], &[5], &[5]], |t, v| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.gelu(h)?;
        let h = t.layer_norm(h, v[2], v[3], 1e-5)?;
        t.mean(h)
    });
}
