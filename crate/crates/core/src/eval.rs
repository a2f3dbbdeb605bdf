//! Downstream evaluation of frozen encoders.

use serde::{Deserialize, Serialize};

use crate::data::{augment_pair, Dataset};
use crate::encoder::{embed, ModelParams};
use crate::error::{FsslError, Result};
use crate::linalg::{softmax_lse, UnitVector};
use crate::losses::{enqueue, info_nce, MemoryQueue};
use crate::poisoning::{embed_trigger, TriggerSpec};
use crate::rng::RngStream;

/// Multinomial logistic regression on embeddings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub classes: usize,
    pub dim: usize,
    /// Row-major `classes x dim`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 200,
            lr: 0.1,
        }
    }
}

impl LinearProbe {
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.dim)
            .zip(&self.bias)
            .map(|(w, &b)| crate::linalg::dot(w, x) + b)
            .collect()
    }

    /// Arg-max class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let l = self.logits(x);
        (0..l.len()).fold(0, |b, i| if l[i] > l[b] { i } else { b })
    }
}

/// Embeds every sample with the frozen encoder.
pub fn embed_all(
    encoder: &ModelParams<f64>,
    samples: &[impl AsRef<[f64]>],
) -> Result<Vec<UnitVector<f64>>> {
    samples.iter().map(|s| embed(encoder, s.as_ref())).collect()
}

/// Full-batch gradient descent on softmax cross-entropy from zero weights.
pub fn train_probe(
    features: &[impl AsRef<[f64]>],
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<LinearProbe> {
    let present = {
        let mut seen = vec![false; classes];
        labels.iter().for_each(|&l| seen[l] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if present < 2 {
        return Err(FsslError::SingleClass);
    }
    let dim = features[0].as_ref().len();
    let mut probe = LinearProbe {
        classes,
        dim,
        weights: vec![0.0; classes * dim],
        bias: vec![0.0; classes],
    };
    let inv_n = 1.0 / features.len() as f64;
    for _ in 0..cfg.epochs {
        let mut gw = vec![0.0; classes * dim];
        let mut gb = vec![0.0; classes];
        for (x, &y) in features.iter().zip(labels) {
            let x = x.as_ref();
            let logits = probe.logits(x);
            let (probs, _) = softmax_lse(&logits);
            for c in 0..classes {
                let p = probs[c] - if c == y { 1.0 } else { 0.0 };
                gb[c] += p;
                crate::linalg::axpy(&mut gw[c * dim..(c + 1) * dim], p, x);
            }
        }
        crate::linalg::axpy(&mut probe.weights, -cfg.lr * inv_n, &gw);
        crate::linalg::axpy(&mut probe.bias, -cfg.lr * inv_n, &gb);
    }
    Ok(probe)
}

/// Trains a probe on the encoder's embeddings of `train`.
pub fn linear_probe(
    encoder: &ModelParams<f64>,
    train: &Dataset,
    cfg: &ProbeConfig,
) -> Result<LinearProbe> {
    let feats = embed_all(encoder, &train.samples)?;
    train_probe(&feats, &train.labels, train.classes, cfg)
}

/// Fraction of test samples classified correctly.
pub fn acc(probe: &LinearProbe, encoder: &ModelParams<f64>, test: &Dataset) -> Result<f64> {
    if test.is_empty() {
        return Err(FsslError::EmptyTestSet);
    }
    let mut correct = 0usize;
    for (x, &y) in test.samples.iter().zip(&test.labels) {
        if probe.predict(&embed(encoder, x)?) == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / test.len() as f64)
}

/// Fraction of triggered non-target test samples predicted as the target
/// class.
pub fn asr(
    probe: &LinearProbe,
    encoder: &ModelParams<f64>,
    test: &Dataset,
    trig: &TriggerSpec,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut eligible = 0usize;
    for (x, &y) in test.samples.iter().zip(&test.labels) {
        if y == trig.target_class {
            continue;
        }
        eligible += 1;
        let xt = embed_trigger(x, trig)?;
        if probe.predict(&embed(encoder, &xt)?) == trig.target_class {
            hits += 1;
        }
    }
    if eligible == 0 {
        return Err(FsslError::NoEligibleSamples);
    }
    Ok(hits as f64 / eligible as f64)
}

/// One point of a persistence curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PersistencePoint {
    pub round: usize,
    pub asr: f64,
    /// `100 * ASR(round) / ASR(stop)`; `None` when the attack never ran or
    /// the stopping-round ASR is zero.
    pub retention: Option<f64>,
}

/// Retention at `stop, stop + step, stop + 2 step, ...` up to the last
/// recorded round. `asr_by_round[r]` is the ASR after round `r`.
pub fn persistence_curve(
    asr_by_round: &[f64],
    stop: usize,
    step: usize,
    attack_ran: bool,
) -> Vec<PersistencePoint> {
    let step = step.max(1);
    let base = asr_by_round.get(stop).copied().unwrap_or(0.0);
    (stop..asr_by_round.len())
        .step_by(step)
        .map(|r| {
            let asr = asr_by_round[r];
            let retention = if !attack_ran || base <= 0.0 {
                None
            } else if r == stop {
                Some(100.0)
            } else {
                Some(100.0 * asr / base)
            };
            PersistencePoint {
                round: r,
                asr,
                retention,
            }
        })
        .collect()
}

/// Fixed probe set for tracking the clean contrastive loss of a global
/// model across rounds: the same views and negatives every round.
#[derive(Clone, Debug)]
pub struct CleanLossProbe {
    queries: Vec<(Vec<f64>, Vec<f64>)>,
    negatives: Vec<Vec<f64>>,
    tau: f64,
}

impl CleanLossProbe {
    pub fn new(
        samples: &[impl AsRef<[f64]>],
        n_queries: usize,
        n_negatives: usize,
        sigma: f64,
        rho: f64,
        tau: f64,
        rng: &mut RngStream,
    ) -> Self {
        let idx = rng.choose_distinct(samples.len(), n_queries + n_negatives);
        let (qi, ni) = idx.split_at(n_queries.min(idx.len()));
        let queries = qi
            .iter()
            .map(|&i| augment_pair(samples[i].as_ref(), sigma, rho, rng))
            .collect();
        let negatives = ni
            .iter()
            .map(|&i| augment_pair(samples[i].as_ref(), sigma, rho, rng).1)
            .collect();
        CleanLossProbe {
            queries,
            negatives,
            tau,
        }
    }

    /// Mean InfoNCE of `encoder` used as both query and key encoder.
    pub fn mean_loss(&self, encoder: &ModelParams<f64>) -> Result<f64> {
        let keys = self
            .negatives
            .iter()
            .map(|x| embed(encoder, x))
            .collect::<Result<Vec<_>>>()?;
        let queue = enqueue(MemoryQueue::new(keys.len().max(1)), keys);
        let mut total = 0.0;
        for (xq, xk) in &self.queries {
            let vq = embed(encoder, xq)?;
            let vk = embed(encoder, xk)?;
            total += info_nce(&vq, &vk, &queue, self.tau)?.loss;
        }
        Ok(total / self.queries.len().max(1) as f64)
    }
}

/// Whether the trailing-`window` mean of `trace` does not exceed its
/// leading-`window` mean.
pub fn non_divergent(trace: &[f64], window: usize) -> bool {
    if trace.is_empty() {
        return true;
    }
    let w = window.min(trace.len()).max(1);
    let head: f64 = trace[..w].iter().sum::<f64>() / w as f64;
    let tail: f64 = trace[trace.len() - w..].iter().sum::<f64>() / w as f64;
    tail <= head
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init, LayerLayout};
    use crate::linalg::Vector;

    fn separable() -> (Vec<Vec<f64>>, Vec<usize>) {
        let mut rng = RngStream::new(0, 0);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..100 {
            let c = i % 2;
            let s = if c == 0 { 1.0 } else { -1.0 };
            x.push(vec![s * (0.5 + 0.5 * rng.uniform()), rng.normal()]);
            y.push(c);
        }
        (x, y)
    }

    #[test]
    fn probe_separates_linearly_separable() {
        let (x, y) = separable();
        let p = train_probe(&x, &y, 2, &ProbeConfig::default()).unwrap();
        let correct = x
            .iter()
            .zip(&y)
            .filter(|(xi, &yi)| p.predict(xi) == yi)
            .count();
        assert!(correct as f64 / x.len() as f64 >= 0.99);
        assert_eq!(train_probe(&x, &y, 2, &ProbeConfig::default()).unwrap(), p);
    }

    #[test]
    fn zero_lr_predicts_uniformly() {
        let (x, y) = separable();
        let p = train_probe(
            &x,
            &y,
            2,
            &ProbeConfig {
                epochs: 10,
                lr: 0.0,
            },
        )
        .unwrap();
        assert!(x.iter().all(|xi| p.predict(xi) == 0));
        assert!(matches!(
            train_probe(&x, &vec![1; 100], 2, &ProbeConfig::default()),
            Err(FsslError::SingleClass)
        ));
    }

    fn tiny_set() -> (ModelParams<f64>, Dataset) {
        let layout = LayerLayout::uniform(4, &[8], 3, crate::encoder::Activation::Tanh).unwrap();
        let enc = init(&layout, &mut RngStream::new(1, 1));
        let samples = (0..30)
            .map(|i| Vector::new(vec![i as f64 * 0.1, 1.0, -0.5, (i % 3) as f64]))
            .collect();
        let labels = (0..30).map(|i| i % 3).collect();
        (enc, Dataset::new(samples, labels, 3).unwrap())
    }

    #[test]
    fn acc_and_asr_bounds() {
        let (enc, d) = tiny_set();
        let probe = LinearProbe {
            classes: 3,
            dim: 3,
            weights: vec![0.0; 9],
            bias: vec![0.0, 0.0, 1.0],
        };
        // constant predictor of class 2
        assert!((acc(&probe, &enc, &d).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let trig = TriggerSpec {
            coords: vec![0],
            values: vec![5.0],
            target_class: 2,
        };
        assert_eq!(asr(&probe, &enc, &d, &trig).unwrap(), 1.0);
        let trig0 = TriggerSpec {
            target_class: 0,
            ..trig
        };
        assert_eq!(asr(&probe, &enc, &d, &trig0).unwrap(), 0.0);
        assert!(matches!(
            acc(&probe, &enc, &d.subset(&[])),
            Err(FsslError::EmptyTestSet)
        ));
        let only_target = d.subset(&[0, 3, 6]);
        assert!(matches!(
            asr(&probe, &enc, &only_target, &trig0),
            Err(FsslError::NoEligibleSamples)
        ));
    }

    #[test]
    fn probe_leaves_encoder_untouched() {
        let (enc, d) = tiny_set();
        let before = enc.clone();
        linear_probe(&enc, &d, &ProbeConfig { epochs: 5, lr: 0.1 }).unwrap();
        assert_eq!(enc, before);
    }

    #[test]
    fn persistence_examples() {
        let asr = vec![0.1, 0.5, 0.8, 0.6, 0.4];
        let c = persistence_curve(&asr, 2, 1, true);
        assert_eq!(c[0].retention, Some(100.0));
        assert!((c[1].retention.unwrap() - 75.0).abs() < 1e-12);
        assert!((c[2].retention.unwrap() - 50.0).abs() < 1e-12);
        let c = persistence_curve(&asr, 2, 1, false);
        assert!(c.iter().all(|p| p.retention.is_none()));
    }

    #[test]
    fn divergence_check() {
        assert!(non_divergent(&[3.0, 2.0, 1.0], 1));
        assert!(!non_divergent(&[1.0, 2.0, 3.0], 1));
        assert!(non_divergent(&[2.0; 40], 20));
    }
}
