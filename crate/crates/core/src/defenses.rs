//! Server-side robust aggregation and detection baselines.
//!
//! Aggregators work on update deltas (`w_i - w*`) so they can be combined
//! with any base model by the caller.

use serde::{Deserialize, Serialize};

use crate::error::{FsslError, Result};
use crate::linalg::{axpy, cosine_raw, norm, sq_dist};
use crate::rng::RngStream;
use crate::scalar::Real;

fn check_same_len<T>(updates: &[Vec<T>]) -> Result<usize> {
    let dim = updates
        .first()
        .map(|u| u.len())
        .ok_or(FsslError::EmptyUpdateSet)?;
    if updates.iter().any(|u| u.len() != dim) {
        return Err(FsslError::LayoutMismatch);
    }
    Ok(dim)
}

/// Krum score of every update: sum of squared distances to its
/// `n - f - 2` nearest neighbours.
pub fn krum_scores<T: Real>(updates: &[Vec<T>], f: usize) -> Result<Vec<T>> {
    let n = updates.len();
    if n < f + 3 {
        return Err(FsslError::TooFewClients {
            need: f + 3,
            have: n,
        });
    }
    check_same_len(updates)?;
    let m = n - f - 2;
    let mut d = vec![vec![T::zero(); n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = sq_dist(&updates[i], &updates[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut row: Vec<T> = (0..n).filter(|&j| j != i).map(|j| d[i][j]).collect();
            row.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            row[..m].iter().copied().sum()
        })
        .collect())
}

/// Index of the update with the lowest Krum score; ties go to the lowest
/// index.
pub fn krum<T: Real>(updates: &[Vec<T>], f: usize) -> Result<usize> {
    let scores = krum_scores(updates, f)?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// FoolsGold learning-rate weights from per-client cumulative updates.
///
/// Pairwise cosine similarity with pardoning, `1 - max similarity`, rescaled
/// by the maximum, then logit-sharpened (`ln(w / (1 - w)) + 0.5`) and
/// clipped to `[0, 1]`.
pub fn foolsgold<T: Real>(history: &[Vec<T>]) -> Result<Vec<T>> {
    let n = history.len();
    if n < 2 {
        return Err(FsslError::TooFewClients { need: 2, have: n });
    }
    check_same_len(history)?;
    let mut cs = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                cs[i][j] = cosine_raw(&history[i], &history[j]).as_f64();
            }
        }
    }
    let maxcs: Vec<f64> = cs
        .iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    for i in 0..n {
        for j in 0..n {
            if i != j && maxcs[i] < maxcs[j] && maxcs[j] > 0.0 {
                cs[i][j] *= maxcs[i] / maxcs[j];
            }
        }
    }
    let mut wv: Vec<f64> = cs
        .iter()
        .map(|r| (1.0 - r.iter().copied().fold(f64::NEG_INFINITY, f64::max)).clamp(0.0, 1.0))
        .collect();
    let top = wv.iter().copied().fold(0.0, f64::max);
    if top <= 0.0 {
        return Ok(vec![T::zero(); n]);
    }
    for w in &mut wv {
        *w /= top;
        if *w >= 1.0 {
            *w = 0.99;
        }
        *w = if *w <= 0.0 {
            0.0
        } else {
            ((*w / (1.0 - *w)).ln() + 0.5).clamp(0.0, 1.0)
        };
    }
    Ok(wv.into_iter().map(T::lit).collect())
}

/// Outcome of a filtering aggregator.
#[derive(Clone, Debug, PartialEq)]
pub struct Filtered<T> {
    pub aggregate: Vec<T>,
    pub kept: Vec<usize>,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

const MAJORITY_ABSORB_DIST: f64 = 1.0;

/// Single-linkage agglomeration on cosine distance until one cluster holds
/// a strict majority; that cluster then keeps absorbing single-linkage
/// neighbours up to cosine distance `max(d*, 1)`, where `d*` is the merge
/// that formed the majority. Returns the cluster's members.
pub fn majority_cluster<T: Real>(updates: &[Vec<T>]) -> Vec<usize> {
    let n = updates.len();
    let need = n / 2 + 1;
    let mut edges = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            edges.push((1.0 - cosine_raw(&updates[i], &updates[j]).as_f64(), i, j));
        }
    }
    edges.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then((a.1, a.2).cmp(&(b.1, b.2)))
    });
    let mut parent: Vec<usize> = (0..n).collect();
    let mut size = vec![1usize; n];
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut root = if need <= 1 { Some(0) } else { None };
    let mut cut = MAJORITY_ABSORB_DIST;
    for (d, i, j) in edges {
        let (a, b) = (find(&mut parent, i), find(&mut parent, j));
        if a == b {
            continue;
        }
        match root {
            None => {
                let (big, small) = if size[a] >= size[b] { (a, b) } else { (b, a) };
                parent[small] = big;
                size[big] += size[small];
                if size[big] >= need {
                    root = Some(big);
                    cut = cut.max(d);
                }
            }
            Some(r) => {
                if d > cut {
                    break;
                }
                let r = find(&mut parent, r);
                if a == r || b == r {
                    let other = if a == r { b } else { a };
                    parent[other] = r;
                    size[r] += size[other];
                }
            }
        }
    }
    let root = root.unwrap_or(0);
    (0..n)
        .filter(|&i| find(&mut parent, i) == find(&mut parent, root))
        .collect()
}

/// FLAME-style aggregation: keep the majority cosine cluster, clip each
/// survivor to the median update norm, average, add Gaussian noise with
/// standard deviation `noise_factor * median_norm`.
pub fn flame_lite<T: Real>(
    updates: &[Vec<T>],
    noise_factor: f64,
    rng: &mut RngStream,
) -> Result<Filtered<T>> {
    if updates.len() < 3 {
        return Err(FsslError::TooFewClients {
            need: 3,
            have: updates.len(),
        });
    }
    let dim = check_same_len(updates)?;
    let kept = majority_cluster(updates);
    let med = median(updates.iter().map(|u| norm(u).as_f64()).collect());
    let mut agg = vec![T::zero(); dim];
    let inv = T::one() / T::lit(kept.len() as f64);
    for &i in &kept {
        let n = norm(&updates[i]).as_f64();
        let s = if n > med && n > 0.0 { med / n } else { 1.0 };
        axpy(&mut agg, T::lit(s) * inv, &updates[i]);
    }
    if noise_factor > 0.0 {
        let sigma = noise_factor * med;
        for a in &mut agg {
            *a += T::lit(sigma * rng.normal());
        }
    }
    Ok(Filtered {
        aggregate: agg,
        kept,
    })
}

/// FLTrust: trust is the clipped cosine to the server's own update; every
/// update is rescaled to the server update's norm before the trust-weighted
/// average.
pub fn fltrust<T: Real>(updates: &[Vec<T>], server_update: &[T]) -> Result<(Vec<T>, Vec<T>)> {
    let dim = check_same_len(updates)?;
    crate::linalg::check_dims(dim, server_update.len())?;
    let s_norm = norm(server_update);
    let trust: Vec<T> = updates
        .iter()
        .map(|u| cosine_raw(u, server_update).max(T::zero()))
        .collect();
    let total: T = trust.iter().copied().sum();
    if !(total > T::zero()) {
        return Err(FsslError::AllZeroTrust);
    }
    let mut agg = vec![T::zero(); dim];
    for (u, &t) in updates.iter().zip(&trust) {
        if t == T::zero() {
            continue;
        }
        let n = norm(u);
        axpy(&mut agg, t * s_norm / (n * total), u);
    }
    Ok((agg, trust))
}

/// Rescales each update `u` to `s * u` with `s = min(1, bound / |u|)`.
pub fn norm_clip<T: Real>(updates: &[Vec<T>], bound: T) -> Vec<Vec<T>> {
    updates
        .iter()
        .map(|u| {
            let n = norm(u);
            if n > bound && n > T::zero() {
                let s = bound / n;
                u.iter().map(|&x| x * s).collect()
            } else {
                u.clone()
            }
        })
        .collect()
}

/// Mean silhouette coefficient of a 2-means split of each class's
/// embeddings. Degenerate splits (all points identical) score 0.
pub fn activation_clustering_score<T: Real>(per_class: &[Vec<Vec<T>>]) -> Result<Vec<f64>> {
    per_class
        .iter()
        .enumerate()
        .map(|(c, pts)| {
            if pts.len() < 2 {
                return Err(FsslError::ClassTooSmall {
                    class: c,
                    have: pts.len(),
                });
            }
            let pts: Vec<Vec<f64>> = pts
                .iter()
                .map(|p| p.iter().map(|v| v.as_f64()).collect())
                .collect();
            Ok(silhouette(&pts, &two_means(&pts)))
        })
        .collect()
}

/// Deterministic 2-means: seeds at the point farthest from the centroid
/// and the point farthest from that one.
fn two_means(pts: &[Vec<f64>]) -> Vec<usize> {
    let dim = pts[0].len();
    let mut mean = vec![0.0; dim];
    for p in pts {
        axpy(&mut mean, 1.0 / pts.len() as f64, p);
    }
    let far = |from: &[f64]| {
        (0..pts.len()).fold(0, |b, i| {
            if sq_dist(&pts[i], from) > sq_dist(&pts[b], from) {
                i
            } else {
                b
            }
        })
    };
    let a = far(&mean);
    let b = far(&pts[a]);
    let mut cents = [pts[a].clone(), pts[b].clone()];
    let mut assign = vec![0usize; pts.len()];
    for _ in 0..100 {
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let j = usize::from(sq_dist(p, &cents[1]) < sq_dist(p, &cents[0]));
            if assign[i] != j {
                assign[i] = j;
                changed = true;
            }
        }
        for (k, c) in cents.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = pts
                .iter()
                .zip(&assign)
                .filter(|(_, &j)| j == k)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            let mut m = vec![0.0; dim];
            for p in &members {
                axpy(&mut m, 1.0 / members.len() as f64, p);
            }
            *c = m;
        }
        if !changed {
            break;
        }
    }
    assign
}

fn silhouette(pts: &[Vec<f64>], assign: &[usize]) -> f64 {
    let sizes = [
        assign.iter().filter(|&&a| a == 0).count(),
        assign.iter().filter(|&&a| a == 1).count(),
    ];
    if sizes[0] == 0 || sizes[1] == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for (i, p) in pts.iter().enumerate() {
        let own = assign[i];
        let mut sums = [0.0; 2];
        for (j, q) in pts.iter().enumerate() {
            if i != j {
                sums[assign[j]] += sq_dist(p, q).sqrt();
            }
        }
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = sums[1 - own] / sizes[1 - own] as f64;
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    total / pts.len() as f64
}

/// Server-side defense applied before aggregation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DefenseConfig {
    None,
    Krum {
        #[serde(default = "default_krum_f")]
        f: usize,
    },
    Foolsgold,
    Flame {
        #[serde(default = "default_noise_factor")]
        noise_factor: f64,
    },
    Fltrust {
        #[serde(default = "default_root_size")]
        root_samples: usize,
    },
    NormClip {
        bound: f64,
    },
}

fn default_krum_f() -> usize {
    1
}

fn default_noise_factor() -> f64 {
    0.01
}

fn default_root_size() -> usize {
    64
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig::None
    }
}

impl DefenseConfig {
    pub fn name(&self) -> &'static str {
        match self {
            DefenseConfig::None => "none",
            DefenseConfig::Krum { .. } => "krum",
            DefenseConfig::Foolsgold => "foolsgold",
            DefenseConfig::Flame { .. } => "flame",
            DefenseConfig::Fltrust { .. } => "fltrust",
            DefenseConfig::NormClip { .. } => "norm_clip",
        }
    }
}
