//! Spherical k-means on the unit hypersphere.

use crate::error::{FsslError, Result};
use crate::linalg::{dot, normalize_slice, UnitVector};
use crate::rng::RngStream;
use crate::scalar::Real;

/// Result of a spherical k-means run.
#[derive(Clone, Debug)]
pub struct SphericalKMeans<T> {
    pub centroids: Vec<UnitVector<T>>,
    pub assignment: Vec<usize>,
    /// Total within-cluster cosine similarity after each iteration.
    pub objective: Vec<T>,
    pub iterations: usize,
}

/// Index of the centroid with the largest dot product with `x`; ties go to
/// the lowest index.
pub fn nearest<T: Real>(x: &[T], centroids: &[UnitVector<T>]) -> (usize, T) {
    let mut best = 0;
    let mut best_sim = T::neg_infinity();
    for (j, c) in centroids.iter().enumerate() {
        let s = dot(x, c);
        if s > best_sim {
            best = j;
            best_sim = s;
        }
    }
    (best, best_sim)
}

/// Clusters `points` into `l` unit-norm centroids by maximum cosine
/// similarity.
pub fn spherical_kmeans<T: Real>(
    points: &[UnitVector<T>],
    l: usize,
    rng: &mut RngStream,
    max_iter: usize,
) -> Result<Vec<UnitVector<T>>> {
    Ok(spherical_kmeans_full(points, l, rng, max_iter)?.centroids)
}

pub fn spherical_kmeans_full<T: Real>(
    points: &[UnitVector<T>],
    l: usize,
    rng: &mut RngStream,
    max_iter: usize,
) -> Result<SphericalKMeans<T>> {
    if l == 0 || points.len() < l {
        return Err(FsslError::TooFewPoints {
            needed: l.max(1),
            got: points.len(),
        });
    }
    let dim = points[0].len();
    let mut centroids: Vec<UnitVector<T>> = rng
        .choose_distinct(points.len(), l)
        .into_iter()
        .map(|i| points[i].clone())
        .collect();
    let mut assignment = vec![usize::MAX; points.len()];
    let mut objective = Vec::new();
    let mut iterations = 0;

    for _ in 0..max_iter.max(1) {
        iterations += 1;
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let (j, _) = nearest(p, &centroids);
            if assignment[i] != j {
                assignment[i] = j;
                changed = true;
            }
        }
        if !changed && iterations > 1 {
            iterations -= 1;
            break;
        }

        let mut sums = vec![vec![T::zero(); dim]; l];
        for (p, &j) in points.iter().zip(&assignment) {
            for (s, &x) in sums[j].iter_mut().zip(p.iter()) {
                *s += x;
            }
        }
        let mut empty = Vec::new();
        for (j, s) in sums.iter().enumerate() {
            match normalize_slice(s) {
                Ok(c) => centroids[j] = c,
                Err(_) => empty.push(j),
            }
        }
        // Re-seed empty clusters at the point least covered by the
        // current centroid set.
        for j in empty {
            let far = points
                .iter()
                .enumerate()
                .map(|(i, p)| (i, nearest(p, &centroids).1))
                .fold(
                    (0, T::infinity()),
                    |acc, (i, s)| if s < acc.1 { (i, s) } else { acc },
                );
            centroids[j] = points[far.0].clone();
            assignment[far.0] = j;
        }
        let total: T = points.iter().map(|p| nearest(p, &centroids).1).sum();
        objective.push(total);
    }

    for (i, p) in points.iter().enumerate() {
        assignment[i] = nearest(p, &centroids).0;
    }
    Ok(SphericalKMeans {
        centroids,
        assignment,
        objective,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::norm;

    fn e(dim: usize, i: usize) -> UnitVector<f64> {
        UnitVector::basis(dim, i)
    }

    #[test]
    fn single_cluster_of_identical_points() {
        let pts = vec![e(3, 0); 5];
        let c = spherical_kmeans(&pts, 1, &mut RngStream::new(0, 0), 20).unwrap();
        assert_eq!(c, vec![e(3, 0)]);
    }

    /// Brute force over all 2-partitions of `{e1, e1, e2, e2}`: the best
    /// partition by within-cluster similarity is `{e1,e1} | {e2,e2}`.
    #[test]
    fn two_clusters_match_brute_force() {
        let pts = vec![e(3, 0), e(3, 0), e(3, 1), e(3, 1)];
        let mut best = (f64::NEG_INFINITY, 0u32);
        for mask in 1u32..(1 << 4) - 1 {
            let mut score = 0.0;
            for side in [true, false] {
                let mut s = [0.0; 3];
                for (i, p) in pts.iter().enumerate() {
                    if ((mask >> i) & 1 == 1) == side {
                        for k in 0..3 {
                            s[k] += p[k];
                        }
                    }
                }
                // sum of cosines to the normalized mean equals the norm of the sum
                score += norm(&s);
            }
            if score > best.0 + 1e-12 {
                best = (score, mask);
            }
        }
        assert!(best.1 == 0b0011 || best.1 == 0b1100);

        for seed in 0..10 {
            let mut c = spherical_kmeans(&pts, 2, &mut RngStream::new(seed, 0), 20).unwrap();
            c.sort_by(|a, b| b[0].partial_cmp(&a[0]).unwrap());
            assert_eq!(c, vec![e(3, 0), e(3, 1)], "seed {seed}");
        }
    }

    #[test]
    fn too_few_points() {
        let pts = vec![e(3, 0), e(3, 1), e(3, 2)];
        assert!(matches!(
            spherical_kmeans(&pts, 5, &mut RngStream::new(0, 0), 10),
            Err(FsslError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn objective_non_decreasing_and_unit_centroids() {
        let mut rng = RngStream::new(3, 1);
        let pts: Vec<UnitVector<f64>> = (0..200)
            .map(|_| {
                let v: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
                normalize_slice(&v).unwrap()
            })
            .collect();
        for seed in 0..5 {
            let r = spherical_kmeans_full(&pts, 6, &mut RngStream::new(seed, 2), 50).unwrap();
            for w in r.objective.windows(2) {
                assert!(w[1] >= w[0] - 1e-9, "{:?}", r.objective);
            }
            for c in &r.centroids {
                assert!((norm(c) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let mut rng = RngStream::new(4, 4);
        let pts: Vec<UnitVector<f64>> = (0..50)
            .map(|_| normalize_slice(&(0..4).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap())
            .collect();
        let a = spherical_kmeans(&pts, 4, &mut RngStream::new(1, 1), 30).unwrap();
        let b = spherical_kmeans(&pts, 4, &mut RngStream::new(1, 1), 30).unwrap();
        assert_eq!(a, b);
    }
}
