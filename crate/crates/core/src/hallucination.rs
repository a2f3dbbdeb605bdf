//! Hallucinated hard positives.
//!
//! Prototypes are spherical k-means centroids of recent queue keys. For an
//! anchor key `v_k`, candidates are drawn along the great circle from `v_k`
//! toward a random prototype, no farther than the point where the anchor's
//! closest prototype would stop being closest. Only candidates that keep
//! the anchor's closest prototype survive.

use serde::{Deserialize, Serialize};

use crate::error::{FsslError, Result};
use crate::kmeans::{nearest, spherical_kmeans};
use crate::linalg::{clamp_unit, dot, normalize_slice, UnitVector, Vector};
use crate::losses::MemoryQueue;
use crate::rng::RngStream;
use crate::scalar::Real;

/// Geodesics with `|cos| >= 1 - DEGENERATE_EPS` are rejected.
pub const DEGENERATE_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HallucinationConfig {
    /// Hardness cap on the sampled step, in `(0, 1]`.
    pub lambda: f64,
    /// Candidates drawn per anchor.
    pub candidates: usize,
    /// Most recent queue entries clustered into prototypes.
    pub top_k: usize,
    /// Number of prototypes.
    pub prototypes: usize,
    pub grid_step: f64,
    pub refine_tol: f64,
    pub kmeans_iters: usize,
}

impl Default for HallucinationConfig {
    fn default() -> Self {
        HallucinationConfig {
            lambda: 0.8,
            candidates: 4,
            top_k: 256,
            prototypes: 10,
            grid_step: 0.02,
            refine_tol: 1e-4,
            kmeans_iters: 20,
        }
    }
}

impl HallucinationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(FsslError::config(format!("hallucination.{f}"), m));
        if !(self.lambda > 0.0 && self.lambda <= 1.0) {
            return bad("lambda", "must lie in (0, 1]");
        }
        if self.candidates == 0 {
            return bad("candidates", "must be >= 1");
        }
        if self.prototypes < 2 {
            return bad("prototypes", "must be >= 2");
        }
        if self.top_k < self.prototypes {
            return bad("top_k", "must be >= prototypes");
        }
        if !(self.grid_step > 0.0 && self.grid_step <= 1.0) {
            return bad("grid_step", "must lie in (0, 1]");
        }
        if !(self.refine_tol > 0.0) {
            return bad("refine_tol", "must be positive");
        }
        Ok(())
    }
}

/// Prototype centroids on the sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet<T> {
    prototypes: Vec<UnitVector<T>>,
}

impl<T: Real> PrototypeSet<T> {
    pub fn new(prototypes: Vec<UnitVector<T>>) -> Result<Self> {
        if prototypes.len() < 2 {
            return Err(FsslError::InvalidArgument(
                "a prototype set needs at least two prototypes".into(),
            ));
        }
        Ok(PrototypeSet { prototypes })
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn get(&self, i: usize) -> &UnitVector<T> {
        &self.prototypes[i]
    }

    pub fn as_slice(&self) -> &[UnitVector<T>] {
        &self.prototypes
    }
}

/// Clusters the `top_k` most recent queue entries into prototypes.
pub fn build_prototypes<T: Real>(
    q: &MemoryQueue<T>,
    cfg: &HallucinationConfig,
    rng: &mut RngStream,
) -> Result<PrototypeSet<T>> {
    let need = cfg.top_k.max(cfg.prototypes);
    if q.len() < need {
        return Err(FsslError::InsufficientQueue {
            have: q.len(),
            need,
        });
    }
    let pts = q.most_recent(cfg.top_k);
    PrototypeSet::new(spherical_kmeans(
        &pts,
        cfg.prototypes,
        rng,
        cfg.kmeans_iters,
    )?)
}

/// Closest prototype by cosine similarity; ties go to the lowest index.
pub fn closest_prototype<'a, T: Real>(
    v: &[T],
    ps: &'a PrototypeSet<T>,
) -> (usize, &'a UnitVector<T>) {
    let (i, _) = nearest(v, &ps.prototypes);
    (i, &ps.prototypes[i])
}

/// Slerp coefficients `(a, b)` so that `a * v_k + b * p_base` is the point
/// at fraction `t` of the arc.
fn slerp_coeffs<T: Real>(t: T, p_base: &[T], v_k: &[T]) -> Result<(T, T)> {
    let c = clamp_unit(dot(p_base, v_k));
    if c.abs().as_f64() >= 1.0 - DEGENERATE_EPS {
        return Err(FsslError::DegenerateGeodesic(c.as_f64()));
    }
    let phi = c.acos();
    let s = phi.sin();
    Ok((((T::one() - t) * phi).sin() / s, (t * phi).sin() / s))
}

/// Offset from `v_k` to the point at fraction `t` of the great-circle arc
/// toward `p_base`.
pub fn geodesic_offset<T: Real>(
    t: T,
    p_base: &UnitVector<T>,
    v_k: &UnitVector<T>,
) -> Result<Vector<T>> {
    crate::linalg::check_dims(v_k.len(), p_base.len())?;
    let (a, b) = slerp_coeffs(t, p_base, v_k)?;
    Ok(Vector::new(
        v_k.iter()
            .zip(p_base.iter())
            .map(|(&v, &p)| a * v + b * p - v)
            .collect(),
    ))
}

/// Point on the arc, `v_k + d(t)`.
fn arc_point<T: Real>(t: T, p_base: &[T], v_k: &[T]) -> Result<Vec<T>> {
    let (a, b) = slerp_coeffs(t, p_base, v_k)?;
    Ok(v_k
        .iter()
        .zip(p_base)
        .map(|(&v, &p)| v + (a * v + b * p - v))
        .collect())
}

/// Largest step along the arc toward `p_base` for which the anchor's
/// closest prototype stays closest: grid scan, then bisection on the first
/// infeasible grid cell after the last feasible grid point.
pub fn search_t_star<T: Real>(
    v_k: &UnitVector<T>,
    p_base: &UnitVector<T>,
    ps: &PrototypeSet<T>,
    cfg: &HallucinationConfig,
) -> Result<T> {
    let (star, _) = closest_prototype(v_k, ps);
    let feasible = |t: f64| -> Result<bool> {
        let v = arc_point(T::lit(t), p_base, v_k)?;
        Ok(closest_prototype(&v, ps).0 == star)
    };
    let steps = (1.0 / cfg.grid_step).ceil() as usize;
    let grid = |i: usize| (i as f64 * cfg.grid_step).min(1.0);
    let mut last = 0;
    for i in 1..=steps {
        if feasible(grid(i))? {
            last = i;
        }
    }
    if last == steps {
        return Ok(T::one());
    }
    let (mut lo, mut hi) = (grid(last), grid(last + 1));
    while hi - lo > cfg.refine_tol {
        let mid = 0.5 * (lo + hi);
        if feasible(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(T::lit(lo))
}

/// Hallucinated positives for one anchor, with the number retained.
#[derive(Clone, Debug, PartialEq)]
pub struct Hallucinated<T> {
    pub positives: Vec<UnitVector<T>>,
    /// Step fraction used for each retained positive.
    pub steps: Vec<T>,
    /// Prototype each retained positive stepped toward.
    pub bases: Vec<usize>,
}

impl<T> Hallucinated<T> {
    pub fn selected(&self) -> usize {
        self.positives.len()
    }
}

/// Draws `cfg.candidates` positives along geodesics toward randomly chosen
/// prototypes with `t_c ~ U(0, lambda * t*)`, keeping those whose closest
/// prototype matches the anchor's.
pub fn generate_positives<T: Real>(
    v_k: &UnitVector<T>,
    ps: &PrototypeSet<T>,
    cfg: &HallucinationConfig,
    rng: &mut RngStream,
) -> Result<Hallucinated<T>> {
    let (star, _) = closest_prototype(v_k, ps);
    let mut out = Hallucinated {
        positives: Vec::new(),
        steps: Vec::new(),
        bases: Vec::new(),
    };
    for _ in 0..cfg.candidates {
        let mut chosen = None;
        for _ in 0..ps.len() {
            let b = rng.below(ps.len());
            match search_t_star(v_k, ps.get(b), ps, cfg) {
                Ok(t) => {
                    chosen = Some((b, t));
                    break;
                }
                Err(FsslError::DegenerateGeodesic(_)) => continue,
                Err(e) => return Err(e),
            }
        }
        let Some((b, t_star)) = chosen else { continue };
        let t_c = T::lit(rng.uniform_in(0.0, cfg.lambda * t_star.as_f64()));
        let v = normalize_slice(&arc_point(t_c, ps.get(b), v_k)?)?;
        if closest_prototype(&v, ps).0 == star {
            out.positives.push(v);
            out.steps.push(t_c);
            out.bases.push(b);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{cosine_sim, norm};
    use crate::losses::enqueue;

    fn e(dim: usize, i: usize) -> UnitVector<f64> {
        UnitVector::basis(dim, i)
    }

    fn rand_unit(rng: &mut RngStream, dim: usize) -> UnitVector<f64> {
        normalize_slice(&(0..dim).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn prototypes_from_queue() {
        let cfg = HallucinationConfig {
            top_k: 4,
            prototypes: 2,
            ..Default::default()
        };
        let q = enqueue(MemoryQueue::new(8), [e(3, 0), e(3, 0), e(3, 1), e(3, 1)]);
        let ps = build_prototypes(&q, &cfg, &mut RngStream::new(0, 0)).unwrap();
        let mut got = ps.as_slice().to_vec();
        got.sort_by(|a, b| b[0].partial_cmp(&a[0]).unwrap());
        assert_eq!(got, vec![e(3, 0), e(3, 1)]);

        let cfg3 = HallucinationConfig {
            top_k: 3,
            prototypes: 3,
            ..Default::default()
        };
        let q3 = enqueue(MemoryQueue::new(3), [e(3, 0), e(3, 1), e(3, 2)]);
        let ps = build_prototypes(&q3, &cfg3, &mut RngStream::new(0, 0)).unwrap();
        for i in 0..3 {
            assert!(ps.as_slice().contains(&e(3, i)));
        }

        let short = enqueue(MemoryQueue::new(8), [e(3, 0)]);
        assert!(matches!(
            build_prototypes(&short, &cfg, &mut RngStream::new(0, 0)),
            Err(FsslError::InsufficientQueue { .. })
        ));
    }

    #[test]
    fn closest_prototype_ties() {
        let ps = PrototypeSet::new(vec![e(3, 0), e(3, 1), e(3, 2)]).unwrap();
        assert_eq!(closest_prototype(&e(3, 0), &ps).0, 0);
        let v = normalize_slice(&[1.0, 1.0, 0.0]).unwrap();
        assert_eq!(closest_prototype(&v, &ps).0, 0);
        let v = normalize_slice(&[0.0, 1.0, 1.0]).unwrap();
        assert_eq!(closest_prototype(&v, &ps).0, 1);
    }

    #[test]
    fn geodesic_endpoints_and_quarter_arc() {
        let (vk, pb) = (e(3, 0), e(3, 1));
        let d0 = geodesic_offset(0.0, &pb, &vk).unwrap();
        assert!(d0.iter().all(|x| x.abs() < 1e-15));
        let d1 = geodesic_offset(1.0, &pb, &vk).unwrap();
        for i in 0..3 {
            assert!((vk[i] + d1[i] - pb[i]).abs() < 1e-9);
        }
        let dh = geodesic_offset(0.5, &pb, &vk).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let expect = [h, h, 0.0];
        for i in 0..3 {
            assert!((vk[i] + dh[i] - expect[i]).abs() < 1e-12);
        }
        assert!(matches!(
            geodesic_offset(0.3, &vk, &vk),
            Err(FsslError::DegenerateGeodesic(_))
        ));
        assert!(matches!(
            geodesic_offset(0.3, &vk.neg(), &vk),
            Err(FsslError::DegenerateGeodesic(_))
        ));
    }

    #[test]
    fn t_star_examples() {
        let cfg = HallucinationConfig::default();
        let ps = PrototypeSet::new(vec![e(2, 0), e(2, 1)]).unwrap();
        let t = search_t_star(&e(2, 0), &e(2, 1), &ps, &cfg).unwrap();
        // sin((1-t)phi) = sin(t phi) at t = 1/2; ties resolve to index 0, so
        // the midpoint itself is feasible.
        assert!((t - 0.5).abs() <= cfg.refine_tol, "{t}");

        let v = normalize_slice(&[1.0, 0.3, 0.0]).unwrap();
        let ps3 = PrototypeSet::new(vec![e(3, 0), e(3, 2)]).unwrap();
        let t = search_t_star(&v, &e(3, 0), &ps3, &cfg).unwrap();
        assert_eq!(t, 1.0);
    }

    #[test]
    fn positives_satisfy_selector_and_are_unit() {
        let mut rng = RngStream::new(21, 0);
        let cfg = HallucinationConfig {
            candidates: 16,
            ..Default::default()
        };
        for _ in 0..50 {
            let ps = PrototypeSet::new((0..5).map(|_| rand_unit(&mut rng, 6)).collect()).unwrap();
            let vk = rand_unit(&mut rng, 6);
            let star = closest_prototype(&vk, &ps).0;
            let h = generate_positives(&vk, &ps, &cfg, &mut rng).unwrap();
            for p in &h.positives {
                assert_eq!(closest_prototype(p, &ps).0, star);
                assert!((norm(p) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_hardness_keeps_all_candidates_near_anchor() {
        let mut rng = RngStream::new(22, 0);
        let cfg = HallucinationConfig {
            lambda: 1e-9,
            candidates: 8,
            ..Default::default()
        };
        let ps = PrototypeSet::new((0..4).map(|_| rand_unit(&mut rng, 5)).collect()).unwrap();
        let vk = rand_unit(&mut rng, 5);
        let h = generate_positives(&vk, &ps, &cfg, &mut rng).unwrap();
        assert_eq!(h.selected(), 8);
        for p in &h.positives {
            assert!(cosine_sim(p, &vk).unwrap() > 1.0 - 1e-9);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let mut rng = RngStream::new(23, 0);
        let ps = PrototypeSet::new((0..4).map(|_| rand_unit(&mut rng, 5)).collect()).unwrap();
        let vk = rand_unit(&mut rng, 5);
        let cfg = HallucinationConfig::default();
        let a = generate_positives(&vk, &ps, &cfg, &mut RngStream::new(1, 2)).unwrap();
        let b = generate_positives(&vk, &ps, &cfg, &mut RngStream::new(1, 2)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn hardness_monotone_along_geodesic() {
        let mut rng = RngStream::new(24, 0);
        for _ in 0..20 {
            let vk = rand_unit(&mut rng, 4);
            let pb = rand_unit(&mut rng, 4);
            let mut ts: Vec<f64> = (0..10).map(|_| rng.uniform()).collect();
            ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let sims: Vec<f64> = ts
                .iter()
                .map(|&t| {
                    let v = normalize_slice(&arc_point(t, &pb, &vk).unwrap()).unwrap();
                    cosine_sim(&vk, &v).unwrap()
                })
                .collect();
            for w in sims.windows(2) {
                assert!(w[1] <= w[0] + 1e-12);
            }
        }
    }
}
