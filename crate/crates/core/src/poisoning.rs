//! Triggers, poison-set selection and the constraint machinery applied to a
//! malicious client's model: epsilon-ball projection, model replacement and
//! bottom-k gradient masking driven by an EWMA of clean-gradient magnitudes.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::ModelParams;
use crate::error::{FsslError, Result};
use crate::linalg::{check_dims, norm, Vector};
use crate::rng::RngStream;
use crate::scalar::Real;

/// Fixed input pattern overwriting `coords` with `values`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TriggerSpec {
    pub coords: Vec<usize>,
    pub values: Vec<f64>,
    pub target_class: usize,
}

impl TriggerSpec {
    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if self.coords.len() != self.values.len() {
            return Err(FsslError::config(
                "attack.trigger.values",
                "length must match coords",
            ));
        }
        let mut seen = self.coords.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != self.coords.len() {
            return Err(FsslError::config(
                "attack.trigger.coords",
                "coordinates must be distinct",
            ));
        }
        if let Some(&c) = self.coords.iter().find(|&&c| c >= input_dim) {
            return Err(FsslError::config(
                "attack.trigger.coords",
                format!("coordinate {c} outside input dimension {input_dim}"),
            ));
        }
        Ok(())
    }

    /// The last `width` coordinates of a `dim`-wide input set to `value`.
    pub fn tail_patch(dim: usize, width: usize, value: f64, target_class: usize) -> Self {
        let width = width.min(dim);
        TriggerSpec {
            coords: (dim - width..dim).collect(),
            values: vec![value; width],
            target_class,
        }
    }
}

/// Copy of `x` with the trigger pattern written over its coordinates.
pub fn embed_trigger<T: Real>(x: &[T], trig: &TriggerSpec) -> Result<Vector<T>> {
    let mut out = x.to_vec();
    for (&c, &v) in trig.coords.iter().zip(&trig.values) {
        if c >= out.len() {
            return Err(FsslError::IndexOutOfRange {
                index: c,
                dim: out.len(),
            });
        }
        out[c] = T::lit(v);
    }
    Ok(Vector::new(out))
}

/// Selected poison indices (into the source dataset) and their triggered
/// inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct PoisonSet {
    pub indices: Vec<usize>,
    pub samples: Vec<Vector<f64>>,
}

impl PoisonSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Picks `ceil(ratio * |subset|)` target-class samples from `subset` (indices
/// into `data`) and embeds the trigger.
pub fn make_poison_set(
    data: &Dataset,
    subset: &[usize],
    ratio: f64,
    trig: &TriggerSpec,
    rng: &mut RngStream,
) -> Result<PoisonSet> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(FsslError::config(
            "attack.poison_ratio",
            "must lie in [0, 1]",
        ));
    }
    // Exact multiples such as 0.01 * 100 must not round up to 2.
    let want = ((ratio * subset.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let pool: Vec<usize> = subset
        .iter()
        .copied()
        .filter(|&i| data.labels[i] == trig.target_class)
        .collect();
    if pool.len() < want {
        return Err(FsslError::InsufficientTargetSamples {
            class: trig.target_class,
            have: pool.len(),
            need: want,
        });
    }
    let mut indices: Vec<usize> = rng
        .choose_distinct(pool.len(), want)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    indices.sort_unstable();
    let samples = indices
        .iter()
        .map(|&i| embed_trigger(&data.samples[i], trig))
        .collect::<Result<_>>()?;
    Ok(PoisonSet { indices, samples })
}

/// Projects `w` onto the ball of radius `eps` around `w_star`.
pub fn project_eps_ball<T: Real>(
    w: &ModelParams<T>,
    w_star: &ModelParams<T>,
    eps: T,
) -> Result<ModelParams<T>> {
    let mut out = w.clone();
    project_eps_ball_in_place(&mut out, w_star, eps)?;
    Ok(out)
}

pub fn project_eps_ball_in_place<T: Real>(
    w: &mut ModelParams<T>,
    w_star: &ModelParams<T>,
    eps: T,
) -> Result<bool> {
    w.same_layout(w_star)?;
    if !(eps > T::zero()) {
        return Err(FsslError::InvalidArgument(format!(
            "epsilon must be positive, got {eps}"
        )));
    }
    let dist = w.distance(w_star)?;
    if dist <= eps {
        return Ok(false);
    }
    let s = eps / dist;
    for (wi, &ci) in w.as_mut_slice().iter_mut().zip(w_star.as_slice()) {
        *wi = ci + s * (*wi - ci);
    }
    Ok(true)
}

/// Upload-time model replacement:
/// `w_k + sum_{j != k} n_j / n_{C\k} * (w_k - w*)`. The weights sum to one,
/// so the result is `2 w_k - w*` for any client sizes.
pub fn model_replace<T: Real>(
    w_k: &ModelParams<T>,
    w_star: &ModelParams<T>,
    sizes: &[usize],
    k: usize,
) -> Result<ModelParams<T>> {
    w_k.same_layout(w_star)?;
    if sizes.len() < 2 {
        return Err(FsslError::SingleClient);
    }
    if k >= sizes.len() {
        return Err(FsslError::IndexOutOfRange {
            index: k,
            dim: sizes.len(),
        });
    }
    // sum_{j != k} n_j / n_{C\k} is identically 1 unless every other client
    // is empty, in which case there is nothing to offset.
    let others: usize = sizes
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != k)
        .map(|(_, &n)| n)
        .sum();
    let s = if others == 0 { T::zero() } else { T::one() };
    let one_s = T::one() + s;
    let flat = w_k
        .as_slice()
        .iter()
        .zip(w_star.as_slice())
        .map(|(&w, &c)| one_s * w - s * c)
        .collect();
    w_k.with_flat(flat)
}

/// How `bottom_k` reports selected coordinates inside the EWMA.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BottomKMode {
    /// `|g_i|` on selected coordinates.
    #[default]
    Magnitude,
    /// `1` on selected coordinates.
    Indicator,
}

/// Per-coordinate update statistics kept by the malicious client.
#[derive(Clone, Debug, PartialEq)]
pub struct GradStats<T> {
    pub zeta: Vec<T>,
    /// Rounds the adversary has participated in.
    pub rounds: usize,
    /// Fraction of coordinates the attack gradient is restricted to.
    pub k_frac: f64,
    /// Fraction of coordinates `bottom_k` keeps when folding a clean
    /// gradient into `zeta`.
    pub track_frac: f64,
    pub mode: BottomKMode,
}

impl<T: Real> GradStats<T> {
    pub fn new(dim: usize, k_frac: f64) -> Self {
        GradStats {
            zeta: vec![T::zero(); dim],
            rounds: 0,
            k_frac,
            track_frac: k_frac,
            mode: BottomKMode::Magnitude,
        }
    }

    pub fn with_tracking(mut self, track_frac: f64, mode: BottomKMode) -> Self {
        self.track_frac = track_frac;
        self.mode = mode;
        self
    }
}

/// Indices of the `ceil(frac * len)` smallest values; ties by lowest index.
pub fn smallest_indices<T: Real>(values: &[T], frac: f64) -> Vec<usize> {
    let k = ((frac * values.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let k = k.min(values.len());
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[a]
            .partial_cmp(&values[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// `bottom_k(g)`: selected coordinates carry `|g|` (or 1), the rest 0.
pub fn bottom_k<T: Real>(g: &[T], frac: f64, mode: BottomKMode) -> Vec<T> {
    let mags: Vec<T> = g.iter().map(|v| v.abs()).collect();
    let mut out = vec![T::zero(); g.len()];
    for i in smallest_indices(&mags, frac) {
        out[i] = match mode {
            BottomKMode::Magnitude => mags[i],
            BottomKMode::Indicator => T::one(),
        };
    }
    out
}

/// One participation round: `p += 1`, then
/// `zeta <- (1 - 1/p) zeta + (1/p) bottom_k(g_clean)`.
pub fn update_zeta<T: Real>(mut gs: GradStats<T>, g_clean: &[T]) -> Result<GradStats<T>> {
    check_dims(gs.zeta.len(), g_clean.len())?;
    gs.rounds += 1;
    let w = T::one() / T::lit(gs.rounds as f64);
    let keep = T::one() - w;
    let b = bottom_k(g_clean, gs.track_frac, gs.mode);
    for (z, &bv) in gs.zeta.iter_mut().zip(&b) {
        *z = keep * *z + w * bv;
    }
    Ok(gs)
}

/// Coordinates the attack gradient may touch.
pub fn selection_set<T: Real>(gs: &GradStats<T>) -> Vec<usize> {
    smallest_indices(&gs.zeta, gs.k_frac)
}

/// Zeroes `g_attack` outside the `k_frac` coordinates with smallest `zeta`.
pub fn mask_to_bottom_k<T: Real>(g_attack: &[T], gs: &GradStats<T>) -> Result<Vec<T>> {
    check_dims(gs.zeta.len(), g_attack.len())?;
    let mut out = vec![T::zero(); g_attack.len()];
    for i in selection_set(gs) {
        out[i] = g_attack[i];
    }
    Ok(out)
}

/// Mask form of [`selection_set`].
pub fn selection_mask<T: Real>(gs: &GradStats<T>) -> Vec<bool> {
    let mut m = vec![false; gs.zeta.len()];
    for i in selection_set(gs) {
        m[i] = true;
    }
    m
}

/// Euclidean norm of an update delta; shorthand used by callers.
pub fn update_norm<T: Real>(delta: &[T]) -> T {
    norm(delta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Activation, LayerLayout};
    use proptest::prelude::*;

    fn params(v: &[f64]) -> ModelParams<f64> {
        // A layout whose parameter count is len(v) is not always possible;
        // tests use a 2-wide layout padded with zeros where needed.
        let layout = LayerLayout::uniform(1, &[1], 2, Activation::Tanh).unwrap();
        let mut flat = vec![0.0; layout.param_count()];
        flat[..v.len()].copy_from_slice(v);
        ModelParams::new(Vector::new(flat), layout).unwrap()
    }

    #[test]
    fn trigger_examples() {
        let t = TriggerSpec {
            coords: vec![3],
            values: vec![9.0],
            target_class: 0,
        };
        let x = [0.0f64; 4];
        assert_eq!(
            embed_trigger(&x, &t).unwrap().as_slice(),
            &[0.0, 0.0, 0.0, 9.0]
        );
        let empty = TriggerSpec {
            coords: vec![],
            values: vec![],
            target_class: 0,
        };
        assert_eq!(
            embed_trigger(&[1.0, 2.0], &empty).unwrap().as_slice(),
            &[1.0, 2.0]
        );
        let once = embed_trigger(&[1.0, 2.0, 3.0, 4.0], &t).unwrap();
        assert_eq!(embed_trigger(&once, &t).unwrap(), once);
        assert!(matches!(
            embed_trigger(&[1.0f64], &t),
            Err(FsslError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn trigger_validation() {
        let t = TriggerSpec {
            coords: vec![1, 1],
            values: vec![1.0, 1.0],
            target_class: 0,
        };
        assert!(t.validate(4).is_err());
        let t = TriggerSpec {
            coords: vec![7],
            values: vec![1.0],
            target_class: 0,
        };
        assert!(t.validate(4).is_err());
        assert!(TriggerSpec::tail_patch(8, 3, 1.0, 2).validate(8).is_ok());
    }

    fn toy_dataset() -> Dataset {
        let samples = (0..100).map(|i| Vector::new(vec![i as f64; 4])).collect();
        let labels = (0..100).map(|i| i % 10).collect();
        Dataset::new(samples, labels, 10).unwrap()
    }

    #[test]
    fn poison_set_examples() {
        let d = toy_dataset();
        let all: Vec<usize> = (0..100).collect();
        let t = TriggerSpec {
            coords: vec![0],
            values: vec![-1.0],
            target_class: 3,
        };
        let mut rng = RngStream::new(0, 0);
        assert!(make_poison_set(&d, &all, 0.0, &t, &mut rng)
            .unwrap()
            .is_empty());
        let p = make_poison_set(&d, &all, 0.01, &t, &mut rng).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(d.labels[p.indices[0]], 3);
        assert_eq!(p.samples[0][0], -1.0);
        let p = make_poison_set(&d, &all, 0.1, &t, &mut rng).unwrap();
        assert!(p.indices.iter().all(|&i| d.labels[i] == 3));
        assert!(matches!(
            make_poison_set(&d, &all, 0.2, &t, &mut rng),
            Err(FsslError::InsufficientTargetSamples { .. })
        ));
    }

    #[test]
    fn projection_examples() {
        let w = params(&[3.0, 4.0]);
        let c = params(&[]);
        let p = project_eps_ball(&w, &c, 1.0).unwrap();
        assert!((p.as_slice()[0] - 0.6).abs() < 1e-15 && (p.as_slice()[1] - 0.8).abs() < 1e-15);
        assert_eq!(project_eps_ball(&c, &c, 1.0).unwrap(), c);
    }

    #[test]
    fn model_replacement_examples() {
        let wk = params(&[1.0, 0.0]);
        let ws = params(&[]);
        let r = model_replace(&wk, &ws, &[10, 10], 0).unwrap();
        assert_eq!(&r.as_slice()[..2], &[2.0, 0.0]);
        assert_eq!(model_replace(&ws, &ws, &[3, 4, 5], 1).unwrap(), ws);
        assert!(matches!(
            model_replace(&wk, &ws, &[3], 0),
            Err(FsslError::SingleClient)
        ));
    }

    #[test]
    fn zeta_examples() {
        let gs = GradStats::<f64>::new(2, 1.0);
        let gs = update_zeta(gs, &[-3.0, 5.0]).unwrap();
        assert_eq!(gs.zeta, vec![3.0, 5.0]);
        assert_eq!(gs.rounds, 1);

        let mut gs = GradStats::<f64>::new(2, 1.0);
        gs.zeta = vec![1.0, 1.0];
        gs.rounds = 1;
        let gs = update_zeta(gs, &[3.0, 5.0]).unwrap();
        assert_eq!(gs.zeta, vec![2.0, 3.0]);

        // p=3 with zeta_prev=[2,3] and bottom_k=[6,0]: (2/3)*[2,3] + (1/3)*[6,0]
        let gs = update_zeta(gs, &[6.0, 0.0]).unwrap();
        assert!((gs.zeta[0] - (2.0 / 3.0 * 2.0 + 2.0)).abs() < 1e-15);
        assert!((gs.zeta[1] - 2.0).abs() < 1e-15);

        // track_frac 0.5 keeps only the smaller-magnitude coordinate
        let gs = GradStats::<f64>::new(2, 0.5);
        let gs = update_zeta(gs, &[1.0, 10.0]).unwrap();
        assert_eq!(gs.zeta, vec![1.0, 0.0]);
        let gs = update_zeta(gs, &[2.0, 20.0]).unwrap();
        assert_eq!(gs.zeta[1], 0.0);
        assert!(update_zeta(gs, &[1.0]).is_err());
    }

    #[test]
    fn mask_examples() {
        let mut gs = GradStats::<f64>::new(4, 1.0);
        let g = vec![1.0, -2.0, 3.0, 4.0];
        assert_eq!(mask_to_bottom_k(&g, &gs).unwrap(), g);
        gs.zeta = vec![0.0, 9.0, 9.0, 9.0];
        gs.k_frac = 0.25;
        assert_eq!(mask_to_bottom_k(&g, &gs).unwrap(), vec![1.0, 0.0, 0.0, 0.0]);
        gs.zeta = vec![5.0, 5.0, 5.0, 5.0];
        gs.k_frac = 0.5;
        assert_eq!(
            mask_to_bottom_k(&g, &gs).unwrap(),
            vec![1.0, -2.0, 0.0, 0.0]
        );
    }

    proptest! {
        #[test]
        fn projection_idempotent_and_bounded(
            w in prop::collection::vec(-5.0f64..5.0, 2),
            c in prop::collection::vec(-5.0f64..5.0, 2),
            eps in 0.01f64..4.0,
        ) {
            let (w, c) = (params(&w), params(&c));
            let p1 = project_eps_ball(&w, &c, eps).unwrap();
            let p2 = project_eps_ball(&p1, &c, eps).unwrap();
            let d0 = w.distance(&c).unwrap();
            let d1 = p1.distance(&c).unwrap();
            prop_assert!((d1 - d0.min(eps)).abs() <= 1e-9);
            for (a, b) in p1.as_slice().iter().zip(p2.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }

        #[test]
        fn model_replace_is_two_wk_minus_wstar(
            wk in prop::collection::vec(-5.0f64..5.0, 2),
            ws in prop::collection::vec(-5.0f64..5.0, 2),
            sizes in prop::collection::vec(1usize..500, 2..8),
        ) {
            let (wk, ws) = (params(&wk), params(&ws));
            let k = sizes.len() - 1;
            let r = model_replace(&wk, &ws, &sizes, k).unwrap();
            for ((&a, &w), &c) in r.as_slice().iter().zip(wk.as_slice()).zip(ws.as_slice()) {
                prop_assert_eq!(a, 2.0 * w - c);
            }
        }

        #[test]
        fn zeta_bounded(prev in prop::collection::vec(0.0f64..10.0, 6),
                        g in prop::collection::vec(-10.0f64..10.0, 6),
                        rounds in 1usize..10, frac in 0.1f64..1.0) {
            let mut gs = GradStats::<f64>::new(6, frac);
            gs.zeta = prev.clone();
            gs.rounds = rounds;
            let gs = update_zeta(gs, &g).unwrap();
            let bound = prev.iter().chain(g.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
            prop_assert!(gs.zeta.iter().all(|&z| z >= 0.0 && z <= bound + 1e-12));
        }
    }
}
