//! Central finite-difference checks of every analytic gradient.
//!
//! The finite-difference side only ever evaluates loss values (or encoder
//! outputs), never the analytic gradient path it is checking.

use serde::Serialize;

use crate::encoder::{backward, embed, forward, init, Activation, LayerLayout, ModelParams};
use crate::error::Result;
use crate::linalg::{dot, normalize_slice, UnitVector};
use crate::losses::{enqueue, info_nce, loss_bfe, loss_he, LossGrad, MemoryQueue};
use crate::rng::RngStream;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// `|fd - analytic| / max(1, |analytic|_inf)`, maximized over coordinates.
pub fn rel_err(fd: &[f64], analytic: &[f64]) -> f64 {
    let scale = analytic.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    fd.iter()
        .zip(analytic)
        .map(|(a, b)| (a - b).abs() / scale)
        .fold(0.0, f64::max)
}

/// Everything a query-embedding loss may read.
#[derive(Clone, Debug)]
pub struct LossInstance {
    pub v_q: Vec<f64>,
    pub positive: UnitVector<f64>,
    pub extra_positives: Vec<UnitVector<f64>>,
    pub queue: MemoryQueue<f64>,
    pub tau: f64,
}

pub type LossFn = fn(&[f64], &LossInstance) -> Result<LossGrad<f64>>;

fn rand_unit(rng: &mut RngStream, dim: usize) -> UnitVector<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        if let Ok(u) = normalize_slice(&v) {
            return u;
        }
    }
}

pub fn random_instance(rng: &mut RngStream) -> LossInstance {
    let dim = 2 + rng.below(7);
    let m = 1 + rng.below(12);
    let b = 1 + rng.below(5);
    let keys: Vec<_> = (0..m).map(|_| rand_unit(rng, dim)).collect();
    LossInstance {
        v_q: rand_unit(rng, dim).into_vector().into_inner(),
        positive: rand_unit(rng, dim),
        extra_positives: (0..b).map(|_| rand_unit(rng, dim)).collect(),
        queue: enqueue(MemoryQueue::new(m), keys),
        tau: rng.uniform_in(0.1, 1.0),
    }
}

pub fn info_nce_fn(v: &[f64], c: &LossInstance) -> Result<LossGrad<f64>> {
    info_nce(v, &c.positive, &c.queue, c.tau)
}

pub fn loss_he_fn(v: &[f64], c: &LossInstance) -> Result<LossGrad<f64>> {
    loss_he(v, &c.extra_positives, c.tau)
}

pub fn loss_bfe_fn(v: &[f64], c: &LossInstance) -> Result<LossGrad<f64>> {
    loss_bfe(v, &c.extra_positives, &c.queue, c.tau)
}

/// Central differences of `f`'s loss against its reported gradient.
pub fn check_loss(name: &str, f: LossFn, instances: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = RngStream::new(seed, 0x6c6f7373);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let inst = random_instance(&mut rng);
        let analytic = f(&inst.v_q, &inst)?.grad.into_inner();
        let mut fd = vec![0.0; inst.v_q.len()];
        for i in 0..fd.len() {
            let mut plus = inst.v_q.clone();
            plus[i] += FD_STEP;
            let mut minus = inst.v_q.clone();
            minus[i] -= FD_STEP;
            fd[i] = (f(&plus, &inst)?.loss - f(&minus, &inst)?.loss) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&fd, &analytic));
    }
    Ok(CheckReport {
        name: name.into(),
        instances,
        max_rel_err: worst,
        passed: worst <= TOLERANCE,
    })
}

pub type BackwardFn = fn(&ModelParams<f64>, &[f64], &[f64]) -> Result<Vec<f64>>;

pub fn encoder_backward_fn(p: &ModelParams<f64>, x: &[f64], d: &[f64]) -> Result<Vec<f64>> {
    let (_, cache) = forward(p, x)?;
    Ok(backward(p, &cache, d)?.into_inner())
}

/// Central differences of `d . forward(p, x)` with respect to every
/// parameter, on small random tanh networks.
pub fn check_encoder(grad: BackwardFn, instances: usize, seed: u64) -> Result<CheckReport> {
    let mut rng = RngStream::new(seed, 0x656e63);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let layout = LayerLayout::uniform(
            2 + rng.below(4),
            &[2 + rng.below(4), 2 + rng.below(3)][..1 + rng.below(2)],
            2 + rng.below(3),
            Activation::Tanh,
        )?;
        let p = init::<f64>(&layout, &mut rng);
        let x: Vec<f64> = (0..layout.input_dim()).map(|_| rng.normal()).collect();
        let d: Vec<f64> = (0..layout.emb_dim()).map(|_| rng.normal()).collect();
        let analytic = grad(&p, &x, &d)?;
        let mut fd = vec![0.0; p.len()];
        let mut q = p.clone();
        for i in 0..p.len() {
            let orig = q.as_slice()[i];
            q.as_mut_slice()[i] = orig + FD_STEP;
            let fp = dot(&embed(&q, &x)?, &d);
            q.as_mut_slice()[i] = orig - FD_STEP;
            let fm = dot(&embed(&q, &x)?, &d);
            q.as_mut_slice()[i] = orig;
            fd[i] = (fp - fm) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&fd, &analytic));
    }
    Ok(CheckReport {
        name: "encoder_backward".into(),
        instances,
        max_rel_err: worst,
        passed: worst <= TOLERANCE,
    })
}

/// The four check groups with the real gradients.
pub fn run_all(instances: usize, seed: u64) -> Result<Vec<CheckReport>> {
    Ok(vec![
        check_encoder(encoder_backward_fn, instances, seed)?,
        check_loss("info_nce", info_nce_fn, instances, seed)?,
        check_loss("loss_he", loss_he_fn, instances, seed)?,
        check_loss("loss_bfe", loss_bfe_fn, instances, seed)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corrupted(v: &[f64], c: &LossInstance) -> Result<LossGrad<f64>> {
        let mut r = info_nce(v, &c.positive, &c.queue, c.tau)?;
        r.grad.as_mut_slice()[0] += 1e-2;
        Ok(r)
    }

    #[test]
    fn all_groups_pass() {
        let reports = run_all(100, 0).unwrap();
        assert_eq!(reports.len(), 4);
        for r in &reports {
            assert!(r.passed, "{r:?}");
        }
    }

    #[test]
    fn corrupted_gradient_fails() {
        let r = check_loss("corrupt", corrupted, 10, 0).unwrap();
        assert!(!r.passed);
    }
}
