use std::collections::BTreeSet;

use mgclip::encoders::{EncoderConfig, Model};
use mgclip::harness::{
    embed_scenes, evaluate, gen_corpus, held_out, load_checkpoint, optimizer_step, recall_at_k, save_checkpoint,
    train, DataConfig, ModelSpec, OptimizerConfig, OptimizerKind, OptimizerState, RunConfig, Split, COLORS, SHAPES,
};
use mgclip::params::{ParamGroup, ParamStore};
use mgclip::{Error, Tensor};

/// A small encoder over the full 32-pixel scenes.
fn small_encoder() -> EncoderConfig {
    EncoderConfig {
        patch_size: 8,
        depth: 2,
        dim: 16,
        heads: 2,
        text_depth: 1,
        text_dim: 16,
        text_heads: 2,
        embed_dim: 16,
        cluster_after: None,
        ..EncoderConfig::default()
    }
}

fn small_run(steps: usize) -> RunConfig {
    RunConfig {
        encoder: small_encoder(),
        steps,
        batch: 4,
        cluster: false,
        schedule: mgclip::harness::ScheduleConfig {
            warmup_steps: 2,
            ..Default::default()
        },
        data: DataConfig {
            train_images: 256,
            ..DataConfig::default()
        },
        ..RunConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_corpora() {
    let a: Vec<_> = gen_corpus(4, 50, 3, Split::Train).unwrap().collect();
    let b: Vec<_> = gen_corpus(4, 50, 3, Split::Train).unwrap().collect();
    for ((sa, ra), (sb, rb)) in a.iter().zip(&b) {
        let bits = |s: &mgclip::harness::SyntheticScene| s.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(sa), bits(sb));
        assert_eq!(serde_json::to_string(ra).unwrap(), serde_json::to_string(rb).unwrap());
    }
    let c: Vec<_> = gen_corpus(5, 50, 3, Split::Train).unwrap().collect();
    assert_ne!(a[0].0.image, c[0].0.image);
}

#[test]
fn records_hold_one_to_max_regions() {
    for max in 1..=3 {
        let mut seen = BTreeSet::new();
        for (_, rec) in gen_corpus(6, 300, max, Split::Train).unwrap() {
            assert!((1..=max).contains(&rec.regions.len()));
            seen.insert(rec.regions.len());
            rec.validate().unwrap();
        }
        assert_eq!(seen.len(), max);
    }
}

#[test]
fn held_out_pairs_never_reach_the_train_split() {
    let held: BTreeSet<String> = (0..COLORS.len())
        .flat_map(|c| (0..SHAPES.len()).map(move |s| (c, s)))
        .filter(|&(c, s)| held_out(c, s))
        .map(|(c, s)| format!("{} {}", COLORS[c], SHAPES[s]))
        .collect();
    assert!(!held.is_empty());
    let mut train_tags = BTreeSet::new();
    for (_, rec) in gen_corpus(7, 3000, 3, Split::Train).unwrap() {
        train_tags.extend(rec.regions.iter().map(|r| r.tag.clone()));
        train_tags.extend(rec.image_tags.iter().cloned());
    }
    assert!(train_tags.is_disjoint(&held));
    assert_eq!(train_tags.len(), COLORS.len() * SHAPES.len() - held.len());
    for (_, rec) in gen_corpus(7, 200, 3, Split::Eval).unwrap() {
        assert!(rec.regions.iter().any(|r| held.contains(&r.tag)));
    }
}

/// Straight-line update equations for one weight vector.
fn reference_step(w: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], t: i32, cfg: &OptimizerConfig, lr: f64) {
    let [b1, b2] = cfg.betas;
    let mut u = vec![0.0; w.len()];
    for i in 0..w.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mhat = m[i] / (1.0 - b1.powi(t));
        let vhat = v[i] / (1.0 - b2.powi(t));
        u[i] = mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * w[i];
    }
    let step = match cfg.kind {
        OptimizerKind::Adamw => lr,
        OptimizerKind::Lamb => {
            let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            lr * (wn / un).clamp(0.0, 10.0)
        }
    };
    for i in 0..w.len() {
        w[i] -= step * u[i];
    }
}

#[test]
fn quadratic_bowl_trajectory_matches_reference() {
    // f(w) = 0.5 * sum a_i (w_i - c_i)^2
    let a = [1.0, 4.0, 0.25, 2.0];
    let c = [0.5, -1.0, 2.0, 0.0];
    let start = [1.5, 0.3, -0.7, 2.2];
    for cfg in [
        OptimizerConfig { lr: 0.05, ..OptimizerConfig::default() },
        OptimizerConfig { lr: 0.05, ..OptimizerConfig::adamw() },
    ] {
        let mut store = ParamStore::<f64>::new();
        let id = store.insert("w", Tensor::from_f64(&[4], &start).unwrap(), ParamGroup::Head, true);
        let mut state = OptimizerState::default();
        let (mut w, mut m, mut v) = (start.to_vec(), vec![0.0; 4], vec![0.0; 4]);
        for t in 1..=5 {
            let grad = |w: &[f64]| (0..4).map(|i| a[i] * (w[i] - c[i])).collect::<Vec<f64>>();
            let g_lib = grad(store.get(id).value.data());
            optimizer_step(&mut store, &[(id, Tensor::from_f64(&[4], &g_lib).unwrap())], &mut state, &cfg, cfg.lr).unwrap();
            let g_ref = grad(&w);
            reference_step(&mut w, &mut m, &mut v, &g_ref, t, &cfg, cfg.lr);
            for (x, y) in store.get(id).value.data().iter().zip(&w) {
                assert!((x - y).abs() < 1e-10, "{:?} step {t}: {x} vs {y}", cfg.kind);
            }
        }
    }
}

#[test]
fn logged_total_is_the_sum_of_components() {
    let out = train(&small_run(6), None).unwrap();
    assert_eq!(out.metrics.len(), 6);
    for m in &out.metrics {
        let sum = m.loss_image_tag + m.loss_image_caption + m.loss_region_tag + m.loss_region_caption;
        assert!((m.loss_total - sum).abs() < 1e-5 * sum.abs().max(1.0), "{m:?}");
        assert!(m.loss_region_tag > 0.0 && m.loss_region_caption > 0.0);
    }
}

#[test]
fn zero_beta_run_has_no_region_loss() {
    let mut cfg = small_run(5);
    cfg.loss.beta = 0.0;
    let out = train(&cfg, None).unwrap();
    for m in &out.metrics {
        assert_eq!((m.loss_region_tag, m.loss_region_caption), (0.0, 0.0));
        assert!((m.loss_total - m.loss_image_tag - m.loss_image_caption).abs() < 1e-5);
    }
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for run in ["a", "b"] {
        let mut cfg = small_run(4);
        cfg.out_dir = Some(dir.path().join(run));
        train(&cfg, None).unwrap();
        bytes.push(std::fs::read(dir.path().join(run).join(mgclip::harness::CHECKPOINT_FILE)).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn checkpoint_file_round_trip_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    let out = train(&small_run(3), None).unwrap();
    let path = dir.path().join("m.umgm");
    save_checkpoint(&out.model, &out.optimizer, &path).unwrap();
    let (model, opt) = load_checkpoint::<f32>(&path, Some(&ModelSpec::of(&out.model))).unwrap();
    for ((_, a), (_, b)) in model.params.iter().zip(out.model.params.iter()) {
        assert_eq!(a.name, b.name);
        let bits = |p: &mgclip::params::Param<f32>| p.value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
    assert_eq!(opt, out.optimizer);

    let full = std::fs::read(&path).unwrap();
    let cut = dir.path().join("cut.umgm");
    std::fs::write(&cut, &full[..full.len() / 2]).unwrap();
    assert!(matches!(load_checkpoint::<f32>(&cut, None), Err(Error::Format { .. })));

    let mut other = ModelSpec::of(&out.model);
    other.encoder.heads = 1;
    assert!(matches!(load_checkpoint::<f32>(&path, Some(&other)), Err(Error::Contract(_))));
}

#[test]
fn random_model_retrieval_is_near_chance() {
    let model = Model::<f32>::new(small_encoder(), 0).unwrap();
    let scenes: Vec<_> = gen_corpus(0, 100, 3, Split::Eval).unwrap().map(|(s, _)| s).collect();
    let m = evaluate(&model, &scenes).unwrap();
    assert!(m.i2t_r1 < 0.1 && m.t2i_r1 < 0.1, "{m:?}");
}

#[test]
fn text_set_to_image_embeddings_is_perfect() {
    let model = Model::<f32>::new(small_encoder(), 0).unwrap();
    let scenes: Vec<_> = gen_corpus(1, 40, 3, Split::Eval).unwrap().map(|(s, _)| s).collect();
    let (images, _) = embed_scenes(&model, &scenes).unwrap();
    let labels: Vec<usize> = (0..scenes.len()).collect();
    assert_eq!(recall_at_k(&images, &labels, &images, &labels, 1), 1.0);
}
