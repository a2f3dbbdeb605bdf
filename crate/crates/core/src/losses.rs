//! Contrastive objectives on query embeddings and the key memory queue.
//!
//! Every loss returns its value together with the gradient with respect to
//! the query embedding `v_q`, treating keys, queue entries and
//! hallucinated positives as constants.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{FsslError, Result};
use crate::linalg::{axpy, check_dims, dot, softmax_lse, UnitVector, Vector};
use crate::scalar::Real;

/// Fixed-capacity FIFO of detached key embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryQueue<T> {
    capacity: usize,
    entries: VecDeque<UnitVector<T>>,
}

impl<T: Real> MemoryQueue<T> {
    pub fn new(capacity: usize) -> Self {
        MemoryQueue {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl ExactSizeIterator<Item = &UnitVector<T>> + DoubleEndedIterator {
        self.entries.iter()
    }

    /// The `k` most recently enqueued entries, oldest first.
    pub fn most_recent(&self, k: usize) -> Vec<UnitVector<T>> {
        let skip = self.entries.len().saturating_sub(k);
        self.entries.iter().skip(skip).cloned().collect()
    }

    pub fn push(&mut self, key: UnitVector<T>) {
        if self.capacity == 0 {
            return;
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(key);
    }
}

/// Appends `keys` in order, evicting the oldest entries past capacity.
pub fn enqueue<T: Real>(
    mut q: MemoryQueue<T>,
    keys: impl IntoIterator<Item = UnitVector<T>>,
) -> MemoryQueue<T> {
    for k in keys {
        q.push(k);
    }
    q
}

/// A loss value with its gradient with respect to `v_q`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossGrad<T> {
    pub loss: T,
    pub grad: Vector<T>,
}

fn check_tau<T: Real>(tau: T) -> Result<()> {
    if !(tau > T::zero()) {
        return Err(FsslError::NonPositiveTemperature(tau.as_f64()));
    }
    Ok(())
}

/// InfoNCE with a single positive key and the queue as negatives.
pub fn info_nce<T: Real>(
    v_q: &[T],
    v_k_pos: &UnitVector<T>,
    queue: &MemoryQueue<T>,
    tau: T,
) -> Result<LossGrad<T>> {
    check_tau(tau)?;
    if queue.is_empty() {
        return Err(FsslError::EmptyQueue);
    }
    check_dims(v_k_pos.len(), v_q.len())?;
    let mut logits = Vec::with_capacity(queue.len() + 1);
    logits.push(dot(v_q, v_k_pos) / tau);
    for k in queue.iter() {
        check_dims(v_q.len(), k.len())?;
        logits.push(dot(v_q, k) / tau);
    }
    let (w, lse) = softmax_lse(&logits);
    let loss = lse - logits[0];
    let mut grad = vec![T::zero(); v_q.len()];
    axpy(&mut grad, (w[0] - T::one()) / tau, v_k_pos);
    for (wi, k) in w[1..].iter().zip(queue.iter()) {
        axpy(&mut grad, *wi / tau, k);
    }
    Ok(LossGrad {
        loss,
        grad: Vector::new(grad),
    })
}

/// Mean negative scaled similarity to the hallucinated positives.
pub fn loss_he<T: Real>(v_q: &[T], hallucinated: &[UnitVector<T>], tau: T) -> Result<LossGrad<T>> {
    check_tau(tau)?;
    if hallucinated.is_empty() {
        return Err(FsslError::NoSelectedPositives);
    }
    let scale = -T::one() / (T::lit(hallucinated.len() as f64) * tau);
    let mut grad = vec![T::zero(); v_q.len()];
    for h in hallucinated {
        check_dims(v_q.len(), h.len())?;
        axpy(&mut grad, scale, h);
    }
    let loss = dot(v_q, &grad);
    Ok(LossGrad {
        loss,
        grad: Vector::new(grad),
    })
}

/// Entanglement loss: positives from the poisoned set over queue negatives
/// only, with the `1/|B|` factor outside the log. Can be negative.
pub fn loss_bfe<T: Real>(
    v_q: &[T],
    pos_keys: &[UnitVector<T>],
    queue: &MemoryQueue<T>,
    tau: T,
) -> Result<LossGrad<T>> {
    check_tau(tau)?;
    if pos_keys.is_empty() {
        return Err(FsslError::EmptyPositives);
    }
    if queue.is_empty() {
        return Err(FsslError::EmptyQueue);
    }
    let pos: Vec<T> = pos_keys
        .iter()
        .map(|k| check_dims(v_q.len(), k.len()).map(|_| dot(v_q, k) / tau))
        .collect::<Result<_>>()?;
    let neg: Vec<T> = queue
        .iter()
        .map(|k| check_dims(v_q.len(), k.len()).map(|_| dot(v_q, k) / tau))
        .collect::<Result<_>>()?;
    let inv_b = T::one() / T::lit(pos_keys.len() as f64);
    let (w_pos, lse_pos) = softmax_lse(&pos);
    let (w_neg, lse_neg) = softmax_lse(&neg);
    let loss = -inv_b * (lse_pos - lse_neg);
    let mut grad = vec![T::zero(); v_q.len()];
    for (w, k) in w_pos.into_iter().zip(pos_keys) {
        axpy(&mut grad, -inv_b * w / tau, k);
    }
    for (w, k) in w_neg.into_iter().zip(queue.iter()) {
        axpy(&mut grad, inv_b * w / tau, k);
    }
    Ok(LossGrad {
        loss,
        grad: Vector::new(grad),
    })
}

/// Per-term losses combined with weight `mu`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown<T> {
    pub l_cl: T,
    pub l_he: T,
    pub l_bfe: T,
    pub l_total: T,
    #[serde(skip)]
    pub grad_vq: Vec<T>,
}

/// `(1 - mu) * L_CL + mu * (L_HE + L_BFE)`, for both values and gradients.
/// A missing term (`None`) contributes exactly zero.
pub fn total_loss<T: Real>(
    mu: T,
    cl: &LossGrad<T>,
    he: Option<&LossGrad<T>>,
    bfe: Option<&LossGrad<T>>,
) -> Result<LossBreakdown<T>> {
    if !(mu >= T::zero() && mu <= T::one()) {
        return Err(FsslError::MuOutOfRange(mu.as_f64()));
    }
    let dim = cl.grad.len();
    for t in [he, bfe].into_iter().flatten() {
        check_dims(dim, t.grad.len())?;
    }
    let l_he = he.map_or(T::zero(), |t| t.loss);
    let l_bfe = bfe.map_or(T::zero(), |t| t.loss);
    if mu == T::zero() {
        return Ok(LossBreakdown {
            l_cl: cl.loss,
            l_he,
            l_bfe,
            l_total: cl.loss,
            grad_vq: cl.grad.to_vec(),
        });
    }
    let w_cl = T::one() - mu;
    let l_total = w_cl * cl.loss + mu * (l_he + l_bfe);
    let mut grad: Vec<T> = cl.grad.iter().map(|&g| w_cl * g).collect();
    for t in [he, bfe].into_iter().flatten() {
        axpy(&mut grad, mu, &t.grad);
    }
    Ok(LossBreakdown {
        l_cl: cl.loss,
        l_he,
        l_bfe,
        l_total,
        grad_vq: grad,
    })
}
