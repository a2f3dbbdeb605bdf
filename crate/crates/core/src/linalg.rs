//! Dense vectors and unit vectors on the hypersphere.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{FsslError, Result};
use crate::scalar::Real;

/// Norms below this are treated as zero.
pub const ZERO_NORM_EPS: f64 = 1e-12;

/// A dense real vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector<T>(Vec<T>);

/// A vector with unit Euclidean norm. Only constructible through
/// [`normalize`] or [`UnitVector::try_new`].
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(transparent)]
pub struct UnitVector<T>(Vec<T>);

impl<T: Real> Vector<T> {
    pub fn new(data: Vec<T>) -> Self {
        Vector(data)
    }

    pub fn zeros(len: usize) -> Self {
        Vector(vec![T::zero(); len])
    }

    pub fn from_f64(data: &[f64]) -> Self {
        Vector(data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }

    pub fn norm(&self) -> T {
        norm(&self.0)
    }

    pub fn dot(&self, other: &[T]) -> Result<T> {
        check_dims(self.len(), other.len())?;
        Ok(dot(&self.0, other))
    }

    pub fn scale(&mut self, a: T) {
        self.0.iter_mut().for_each(|x| *x *= a);
    }

    /// `self += a * x`
    pub fn axpy(&mut self, a: T, x: &[T]) {
        axpy(&mut self.0, a, x);
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl<T> Deref for Vector<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> AsRef<[T]> for Vector<T> {
    fn as_ref(&self) -> &[T] {
        &self.0
    }
}

impl<T: Real> From<Vec<T>> for Vector<T> {
    fn from(v: Vec<T>) -> Self {
        Vector(v)
    }
}

impl<T: Real> UnitVector<T> {
    /// Wraps `data` if it is already unit-norm within `1e-9`.
    pub fn try_new(data: Vec<T>) -> Result<Self> {
        let n = norm(&data).as_f64();
        if (n - 1.0).abs() > 1e-9 {
            return Err(FsslError::InvalidArgument(format!(
                "vector norm {n} is not 1"
            )));
        }
        Ok(UnitVector(data))
    }

    /// Standard basis vector `e_i` in `dim` dimensions.
    pub fn basis(dim: usize, i: usize) -> Self {
        let mut v = vec![T::zero(); dim];
        v[i] = T::one();
        UnitVector(v)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn to_vector(&self) -> Vector<T> {
        Vector(self.0.clone())
    }

    pub fn into_vector(self) -> Vector<T> {
        Vector(self.0)
    }

    pub fn neg(&self) -> Self {
        UnitVector(self.0.iter().map(|&x| -x).collect())
    }
}

impl<T> Deref for UnitVector<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> AsRef<[T]> for UnitVector<T> {
    fn as_ref(&self) -> &[T] {
        &self.0
    }
}

impl<'de, T: Real + Deserialize<'de>> Deserialize<'de> for UnitVector<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = Vec::<T>::deserialize(d)?;
        normalize_slice(&raw).map_err(serde::de::Error::custom)
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    // Four independent accumulators so the loop vectorizes.
    let mut acc = [T::zero(); 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn norm<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

#[inline]
pub fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

pub fn check_dims(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(FsslError::DimMismatch { expected, found });
    }
    Ok(())
}

/// Projects `v` onto the unit hypersphere.
pub fn normalize<T: Real>(v: &Vector<T>) -> Result<UnitVector<T>> {
    normalize_slice(v.as_slice())
}

pub fn normalize_slice<T: Real>(v: &[T]) -> Result<UnitVector<T>> {
    let n = norm(v);
    if !(n.as_f64() >= ZERO_NORM_EPS) {
        return Err(FsslError::ZeroNorm(n.as_f64()));
    }
    Ok(UnitVector(v.iter().map(|&x| x / n).collect()))
}

/// Cosine similarity of two unit vectors, clamped to `[-1, 1]`.
pub fn cosine_sim<T: Real>(a: &UnitVector<T>, b: &UnitVector<T>) -> Result<T> {
    check_dims(a.len(), b.len())?;
    Ok(clamp_unit(dot(a, b)))
}

/// Cosine similarity of two arbitrary vectors; zero when either is zero.
pub fn cosine_raw<T: Real>(a: &[T], b: &[T]) -> T {
    let na = norm(a);
    let nb = norm(b);
    if na.as_f64() < ZERO_NORM_EPS || nb.as_f64() < ZERO_NORM_EPS {
        return T::zero();
    }
    clamp_unit(dot(a, b) / (na * nb))
}

#[inline]
pub fn clamp_unit<T: Real>(x: T) -> T {
    x.max(-T::one()).min(T::one())
}

/// Numerically stable `log(sum(exp(xs)))`.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    let s: T = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Softmax weights of `xs`, computed with max subtraction.
pub fn softmax<T: Real>(xs: &[T]) -> Vec<T> {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = xs.iter().map(|&x| (x - m).exp()).collect();
    let s: T = out.iter().copied().sum();
    out.iter_mut().for_each(|w| *w /= s);
    out
}

/// Softmax weights together with `log(sum(exp(xs)))`, sharing one pass of
/// exponentials.
pub fn softmax_lse<T: Real>(xs: &[T]) -> (Vec<T>, T) {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = xs.iter().map(|&x| (x - m).exp()).collect();
    let s: T = out.iter().copied().sum();
    out.iter_mut().for_each(|w| *w /= s);
    (out, m + s.ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        let u = normalize(&Vector::<f64>::new(vec![3.0, 4.0])).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-15 && (u[1] - 0.8).abs() < 1e-15);
        let u = normalize(&Vector::<f64>::new(vec![1.0, 0.0])).unwrap();
        assert_eq!(u.as_slice(), &[1.0, 0.0]);
        assert!(matches!(
            normalize(&Vector::<f64>::new(vec![0.0, 0.0])),
            Err(FsslError::ZeroNorm(_))
        ));
    }

    #[test]
    fn normalize_f32() {
        let u = normalize(&Vector::<f32>::new(vec![3.0, 4.0])).unwrap();
        assert!((u[0] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn cosine_examples() {
        let e1 = UnitVector::<f64>::basis(3, 0);
        let e2 = UnitVector::<f64>::basis(3, 1);
        assert_eq!(cosine_sim(&e1, &e1).unwrap(), 1.0);
        assert_eq!(cosine_sim(&e1, &e2).unwrap(), 0.0);
        assert_eq!(cosine_sim(&e1, &e1.neg()).unwrap(), -1.0);
        let short = UnitVector::<f64>::basis(2, 0);
        assert!(matches!(
            cosine_sim(&e1, &short),
            Err(FsslError::DimMismatch { .. })
        ));
    }

    #[test]
    fn log_sum_exp_no_overflow() {
        let xs = [1000.0_f64, 1000.0];
        assert!((log_sum_exp(&xs) - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    fn nonzero_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, 1..12).prop_filter("nonzero", |v| norm(v) > 1e-6)
    }

    proptest! {
        #[test]
        fn normalize_idempotent(v in nonzero_vec()) {
            let a = normalize_slice(&v).unwrap();
            let b = normalize_slice(a.as_slice()).unwrap();
            for (x, y) in a.iter().zip(b.iter()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
            prop_assert!((norm(a.as_slice()) - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn cosine_symmetric_bounded(a in nonzero_vec(), seed in any::<u64>()) {
            let mut b = a.clone();
            b.iter_mut().enumerate().for_each(|(i, x)| *x += ((seed >> (i % 60)) & 7) as f64 - 3.5);
            prop_assume!(norm(&b) > 1e-6);
            let (ua, ub) = (normalize_slice(&a).unwrap(), normalize_slice(&b).unwrap());
            let s1 = cosine_sim(&ua, &ub).unwrap();
            let s2 = cosine_sim(&ub, &ua).unwrap();
            prop_assert_eq!(s1, s2);
            prop_assert!(s1.abs() <= 1.0);
        }
    }
}
