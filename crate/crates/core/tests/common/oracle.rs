//! Independent reference implementations compared against the library.

use mgclip::annotator::{box_iou, nms_merge, Region};
use mgclip::granularity::{cluster_tokens, density_peaks, roi_align, unfold_tokens, RegionBoxSet};
use mgclip::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Bilinear value of a `[side, side, d]` grid at continuous (x, y), clamped to the grid.
pub fn bilinear_ref(grid: &[f64], side: usize, d: usize, x: f64, y: f64, c: usize) -> f64 {
    let max = (side - 1) as f64;
    let (x, y) = (x.clamp(0.0, max), y.clamp(0.0, max));
    let at = |r: usize, col: usize| grid[(r * side + col) * d + c];
    let (x0, y0) = (x.floor(), y.floor());
    let (x1, y1) = ((x0 + 1.0).min(max), (y0 + 1.0).min(max));
    let (fx, fy) = (x - x0, y - y0);
    let (x0, y0, x1, y1) = (x0 as usize, y0 as usize, x1 as usize, y1 as usize);
    at(y0, x0) * (1.0 - fx) * (1.0 - fy) + at(y0, x1) * fx * (1.0 - fy) + at(y1, x0) * (1.0 - fx) * fy + at(y1, x1) * fx * fy
}

pub fn roi_align_matches_bilinear_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let side = rng.random_range(2..9);
        let d = rng.random_range(1..5);
        let grid: Vec<f64> = (0..side * side * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (a, b) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let (c, e) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let bbox = [f64::min(a, b), f64::min(c, e), f64::max(a, b) + 1e-3, f64::max(c, e) + 1e-3];
        let bbox = bbox.map(|v: f64| v.min(1.0));
        let mut tape = Tape::<f64>::new();
        let g = tape.constant(Tensor::from_f64(&[1, side * side, d], &grid).unwrap());
        let boxes = RegionBoxSet::new(vec![bbox], vec![0]).unwrap();
        let out = roi_align(&mut tape, g, &boxes).unwrap();
        let got = tape.value(out).to_f64_vec();
        let s = side as f64;
        for (ch, &value) in got.iter().enumerate() {
            let mut acc = 0.0;
            for (tx, ty) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                let x = (bbox[0] + (bbox[2] - bbox[0]) * tx) * s - 0.5;
                let y = (bbox[1] + (bbox[3] - bbox[1]) * ty) * s - 0.5;
                acc += bilinear_ref(&grid, side, d, x, y, ch);
            }
            assert!((value - acc / 4.0).abs() < 1e-6, "{value} vs {}", acc / 4.0);
        }
    }
}

pub fn random_region(rng: &mut ChaCha8Rng) -> Region {
    let x0 = rng.random_range(0.0..80.0);
    let y0 = rng.random_range(0.0..80.0);
    Region {
        bbox: [x0, y0, x0 + rng.random_range(1.0..40.0), y0 + rng.random_range(1.0..40.0)],
        tag: "red circle".into(),
        // A coarse grid of confidences so ties occur.
        confidence: rng.random_range(0..20) as f64 / 20.0,
        captions: vec![],
        stability: None,
    }
}

/// Kept set by definition: a box survives iff no surviving box ranked above it overlaps beyond the threshold.
pub fn nms_brute_force(regions: &[Region], thr: f64) -> Vec<usize> {
    let n = regions.len();
    let rank_above = |j: usize, i: usize| {
        regions[j].confidence > regions[i].confidence || (regions[j].confidence == regions[i].confidence && j < i)
    };
    let mut kept = vec![None::<bool>; n];
    // Resolve in rank order; each decision depends only on higher-ranked boxes.
    for _ in 0..n {
        for i in 0..n {
            if kept[i].is_some() {
                continue;
            }
            let higher: Vec<usize> = (0..n).filter(|&j| rank_above(j, i)).collect();
            if higher.iter().all(|&j| kept[j].is_some()) {
                let suppressed = higher.iter().any(|&j| kept[j] == Some(true) && box_iou(regions[i].bbox, regions[j].bbox) > thr);
                kept[i] = Some(!suppressed);
            }
        }
    }
    (0..n).filter(|&i| kept[i] == Some(true)).collect()
}

pub fn nms_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n = rng.random_range(0..=50);
        let regions: Vec<Region> = (0..n).map(|_| random_region(&mut rng)).collect();
        let thr = [0.3, 0.5, 0.7][rng.random_range(0..3)];
        let mut want: Vec<[u64; 4]> = nms_brute_force(&regions, thr)
            .into_iter()
            .map(|i| regions[i].bbox.map(f64::to_bits))
            .collect();
        let mut got: Vec<[u64; 4]> = nms_merge(&regions, thr).iter().map(|r| r.bbox.map(f64::to_bits)).collect();
        want.sort();
        got.sort();
        assert_eq!(got, want);
    }
}

/// `k` unit directions with pairwise cosine in [0, 0.1), each repeated at two or more of `n` positions.
pub fn separated_groups(rng: &mut ChaCha8Rng, n: usize, k: usize, d: usize) -> (Vec<f64>, Vec<usize>) {
    let mut axes: Vec<usize> = (0..d).collect();
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    while dirs.len() < k {
        let at = rng.random_range(0..axes.len());
        let axis = axes.swap_remove(at);
        let v: Vec<f64> = (0..d)
            .map(|j| if j == axis { 1.0 } else { 0.0 } + rng.random_range(0.0..0.04))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        dirs.push(v.iter().map(|x| x / norm).collect());
    }
    for (a, u) in dirs.iter().enumerate() {
        for v in &dirs[a + 1..] {
            assert!(cosine(u, v) < 0.1);
        }
    }
    let mut label: Vec<usize> = (0..n).map(|i| if i < 2 * k { i % k } else { rng.random_range(0..k) }).collect();
    for i in (1..n).rev() {
        label.swap(i, rng.random_range(0..=i));
    }
    let tokens = label.iter().flat_map(|&g| dirs[g].iter().map(|x| x * 2.0)).collect();
    (tokens, label)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

pub fn cluster_assignment_matches_exhaustive_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..30 {
        let (n, k, d) = [(16, 4, 16), (64, 16, 32), (36, 9, 24)][trial % 3];
        let (tokens, label) = separated_groups(&mut rng, n, k, d);
        let map = density_peaks(&tokens, n, d, k);
        let row = |i: usize| &tokens[i * d..(i + 1) * d];
        // Exhaustive nearest representative over all pairs.
        for i in 0..n {
            let best = (0..k)
                .max_by(|&a, &b| {
                    cosine(row(i), row(map.representative_ids[a]))
                        .total_cmp(&cosine(row(i), row(map.representative_ids[b])))
                        .then(b.cmp(&a))
                })
                .unwrap();
            assert_eq!(map.assignment[i], best);
        }
        // One representative per group, so the clustering recovers the groups.
        let mut rep_groups: Vec<usize> = map.representative_ids.iter().map(|&r| label[r]).collect();
        rep_groups.sort();
        assert_eq!(rep_groups, (0..k).collect::<Vec<_>>());
        for i in 0..n {
            assert_eq!(label[map.representative_ids[map.assignment[i]]], label[i]);
        }

        // Reconstruction through the tape is exact on homogeneous clusters.
        let mut tape = Tape::<f64>::new();
        let grid = tape.constant(Tensor::from_f64(&[1, n, d], &tokens).unwrap());
        let (reps, maps) = cluster_tokens(&mut tape, grid, k as f64 / n as f64).unwrap();
        let back = unfold_tokens(&mut tape, reps, &maps).unwrap();
        for (a, b) in tape.value(back).data().iter().zip(&tokens) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

/// erf from the all-positive series `2/sqrt(pi) e^{-z^2} sum 2^n z^{2n+1} / (2n+1)!!`.
pub fn series_erf(z: f64) -> f64 {
    let (mut term, mut sum) = (z, z);
    for n in 1..200 {
        term *= 2.0 * z * z / (2 * n + 1) as f64;
        sum += term;
        if term.abs() < 1e-18 * sum.abs() {
            break;
        }
    }
    2.0 / std::f64::consts::PI.sqrt() * (-z * z).exp() * sum
}

pub fn gelu_matches_erf_reference() {
    let mut tape = Tape::<f64>::new();
    let xs: Vec<f64> = (-60..=60).map(|i| i as f64 / 10.0).collect();
    let x = tape.constant(Tensor::from_f64(&[xs.len()], &xs).unwrap());
    let y = tape.gelu(x).unwrap();
    for (&xi, &yi) in xs.iter().zip(tape.value(y).data()) {
        let want = 0.5 * xi * (1.0 + series_erf(xi / std::f64::consts::SQRT_2));
        assert!((yi - want).abs() < 1e-12, "gelu({xi}) = {yi}, want {want}");
    }
}

pub fn layer_norm_matches_two_pass_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (rows, d) = (5, 7);
    let x: Vec<f64> = (0..rows * d).map(|_| rng.random_range(-3.0..3.0)).collect();
    let g: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();
    let b: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(Tensor::from_f64(&[rows, d], &x).unwrap());
    let gv = tape.constant(Tensor::from_f64(&[d], &g).unwrap());
    let bv = tape.constant(Tensor::from_f64(&[d], &b).unwrap());
    let y = tape.layer_norm(xv, gv, bv, 1e-5).unwrap();
    for (r, out) in tape.value(y).rows().enumerate() {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for c in 0..d {
            let want = (row[c] - mean) / (var + 1e-5).sqrt() * g[c] + b[c];
            assert!((out[c] - want).abs() < 1e-12);
        }
    }
}

pub fn softmax_is_shift_stable() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(&[2, 3], &[1000.0, 1001.0, 1002.0, -1000.0, -1001.0, -1002.0]).unwrap());
    let s = tape.softmax(x).unwrap();
    let l = tape.log_softmax(x).unwrap();
    let z = 1.0 + (-1.0f64).exp() + (-2.0f64).exp();
    let want = [(-2.0f64).exp() / z, (-1.0f64).exp() / z, 1.0 / z];
    for (i, &v) in tape.value(s).data()[..3].iter().enumerate() {
        assert!((v - want[i]).abs() < 1e-15);
    }
    assert!(tape.value(l).data().iter().all(|v| v.is_finite()));
    assert!((tape.value(l).data()[3] + z.ln()).abs() < 1e-12);
}
