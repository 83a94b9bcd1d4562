use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Neighbours averaged into the local density of a token.
pub const DENSITY_NEIGHBOURS: usize = 5;

/// `ceil(keep_ratio * n)`, at least one.
pub fn representative_count(n: usize, keep_ratio: f64) -> usize {
    // Round away float noise such as 0.25 * 196 = 49.00000000000001.
    let raw = keep_ratio * n as f64;
    let k = if (raw - raw.round()).abs() < 1e-9 { raw.round() } else { raw.ceil() };
    (k as usize).clamp(1, n)
}

/// Grouping of `n` grid positions onto `k` representative tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterMap {
    /// Grid position of each representative, in selection order.
    pub representative_ids: Vec<usize>,
    /// For every grid position, the index of its representative in `[0, k)`.
    pub assignment: Vec<usize>,
}

impl ClusterMap {
    pub fn k(&self) -> usize {
        self.representative_ids.len()
    }

    pub fn n(&self) -> usize {
        self.assignment.len()
    }

    pub fn identity(n: usize) -> Self {
        ClusterMap {
            representative_ids: (0..n).collect(),
            assignment: (0..n).collect(),
        }
    }

    /// Member count per representative.
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if let Some(bad) = self.assignment.iter().find(|&&a| a >= k) {
            return Err(Error::contract(format!("assignment index {bad} >= k = {k}")));
        }
        for (a, &pos) in self.representative_ids.iter().enumerate() {
            if pos >= self.n() || self.assignment[pos] != a {
                return Err(Error::contract(format!("representative {a} at {pos} not assigned to itself")));
            }
        }
        Ok(())
    }
}

/// Cosine similarity matrix of `n` row vectors of width `d`; zero rows have similarity 0.
pub fn cosine_matrix(tokens: &[f64], n: usize, d: usize) -> Vec<f64> {
    let norms: Vec<f64> = tokens.chunks_exact(d).map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let denom = norms[i] * norms[j];
            let s = if denom > 0.0 {
                let dot: f64 = tokens[i * d..(i + 1) * d]
                    .iter()
                    .zip(&tokens[j * d..(j + 1) * d])
                    .map(|(a, b)| a * b)
                    .sum();
                dot / denom
            } else {
                0.0
            };
            sim[i * n + j] = s;
            sim[j * n + i] = s;
        }
    }
    sim
}

/// Density-peaks selection of `k` representatives among `n` tokens.
///
/// Density is the mean of a token's [`DENSITY_NEIGHBOURS`] largest cosine
/// similarities to other tokens; separation is one minus its largest
/// similarity to any denser token (1 for the densest). The `k` highest
/// `density * separation` scores win, ties going to the lower index, and every
/// other token joins its most similar representative (earliest on ties).
pub fn density_peaks(tokens: &[f64], n: usize, d: usize, k: usize) -> ClusterMap {
    assert!(k >= 1 && k <= n && tokens.len() == n * d);
    let sim = cosine_matrix(tokens, n, d);
    let density: Vec<f64> = (0..n)
        .map(|i| {
            let mut others: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sim[i * n + j]).collect();
            if others.is_empty() {
                return 0.0;
            }
            others.sort_by(|a, b| b.total_cmp(a));
            let take = others.len().min(DENSITY_NEIGHBOURS);
            others[..take].iter().sum::<f64>() / take as f64
        })
        .collect();
    let denser = |j: usize, i: usize| density[j] > density[i] || (density[j] == density[i] && j < i);
    let score: Vec<f64> = (0..n)
        .map(|i| {
            let nearest_denser = (0..n)
                .filter(|&j| denser(j, i))
                .map(|j| sim[i * n + j])
                .fold(f64::NEG_INFINITY, f64::max);
            let separation = if nearest_denser.is_finite() { 1.0 - nearest_denser } else { 1.0 };
            density[i] * separation
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    let representative_ids: Vec<usize> = order[..k].to_vec();
    let mut assignment = vec![usize::MAX; n];
    for (a, &pos) in representative_ids.iter().enumerate() {
        assignment[pos] = a;
    }
    for i in 0..n {
        if assignment[i] != usize::MAX {
            continue;
        }
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (a, &pos) in representative_ids.iter().enumerate() {
            let s = sim[i * n + pos];
            if s > best_sim {
                best_sim = s;
                best = a;
            }
        }
        assignment[i] = best;
    }
    ClusterMap {
        representative_ids,
        assignment,
    }
}

/// Clusters the `[B, n, D]` grid per batch item into `[B, k, D]` representatives.
///
/// A representative's feature is the mean of its members, computed as the
/// representative's own token plus the mean member offset, so homogeneous
/// clusters reproduce their value exactly.
pub fn cluster_tokens<T: Scalar>(tape: &mut Tape<T>, grid: Var, keep_ratio: f64) -> Result<(Var, Vec<ClusterMap>)> {
    cluster_with_prefix(tape, grid, keep_ratio, 0)
}

/// [`cluster_tokens`] on `[B, prefix + n, D]` where the first `prefix` tokens
/// per item pass through untouched.
pub(crate) fn cluster_with_prefix<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    keep_ratio: f64,
    prefix: usize,
) -> Result<(Var, Vec<ClusterMap>)> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 3 || shape[1] <= prefix {
        return Err(Error::dim("cluster_tokens", format!("grid must be [b, n, d], got {shape:?}")));
    }
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(Error::contract(format!("keep_ratio {keep_ratio} outside (0, 1]")));
    }
    let (b, len, d) = (shape[0], shape[1], shape[2]);
    let n = len - prefix;
    let k = representative_count(n, keep_ratio);
    let values = tape.value(x).to_f64_vec();
    let maps: Vec<ClusterMap> = (0..b)
        .map(|bi| {
            let start = (bi * len + prefix) * d;
            density_peaks(&values[start..start + n * d], n, d, k)
        })
        .collect();
    let mut groups = Vec::with_capacity(b * (prefix + k));
    for (bi, m) in maps.iter().enumerate() {
        let base = bi * len;
        groups.extend((0..prefix).map(|p| vec![base + p]));
        let mut members: Vec<Vec<usize>> = m.representative_ids.iter().map(|&r| vec![base + prefix + r]).collect();
        for (j, &a) in m.assignment.iter().enumerate() {
            if m.representative_ids[a] != j {
                members[a].push(base + prefix + j);
            }
        }
        groups.extend(members);
    }
    let flat = tape.reshape(x, &[b * len, d])?;
    let pooled = tape.segment_mean(flat, &groups)?;
    let out = tape.reshape(pooled, &[b, prefix + k, d])?;
    Ok((out, maps))
}

fn spread_index(maps: &[ClusterMap], k: usize) -> Vec<usize> {
    maps.iter()
        .enumerate()
        .flat_map(|(bi, m)| m.assignment.iter().map(move |&a| bi * k + a))
        .collect()
}

/// Copies each representative back to every grid position it absorbed.
pub fn unfold_tokens<T: Scalar>(tape: &mut Tape<T>, reps: Var, maps: &[ClusterMap]) -> Result<Var> {
    let shape = tape.shape(reps).to_vec();
    if shape.len() != 3 || shape[0] != maps.len() {
        return Err(Error::dim(
            "unfold_tokens",
            format!("representatives {shape:?} for {} maps", maps.len()),
        ));
    }
    let (b, k, d) = (shape[0], shape[1], shape[2]);
    let n = maps.first().map_or(0, ClusterMap::n);
    for m in maps {
        if m.n() != n {
            return Err(Error::contract("cluster maps disagree on grid size"));
        }
        if m.k() != k {
            return Err(Error::contract(format!("map has k = {} but {k} representatives given", m.k())));
        }
        m.validate()?;
    }
    let flat = tape.reshape(reps, &[b * k, d])?;
    let out = tape.gather(flat, 0, &spread_index(maps, k))?;
    tape.reshape(out, &[b, n, d])
}

/// `[B, H, 1 + k, 1 + k]` logit bias of `ln(cluster size)` per key, class token first.
///
/// Attention over representatives with this bias equals attention over the
/// unfolded sequence when clusters are homogeneous.
pub(crate) fn size_bias<T: Scalar>(maps: &[ClusterMap], heads: usize) -> Result<Tensor<T>> {
    let k = maps[0].k();
    let len = k + 1;
    let mut data = Vec::with_capacity(maps.len() * heads * len * len);
    for m in maps {
        let mut row = vec![T::zero(); len];
        for (a, &s) in m.sizes().iter().enumerate() {
            row[a + 1] = T::from_f64((s.max(1) as f64).ln());
        }
        for _ in 0..heads * len {
            data.extend_from_slice(&row);
        }
    }
    Tensor::new(&[maps.len(), heads, len, len], data)
}
