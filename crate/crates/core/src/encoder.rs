//! Feed-forward encoder with analytic backward pass, projecting inputs onto
//! the unit hypersphere.
//!
//! Parameters live in one flat vector. Layer `l` contributes its weight
//! matrix (row-major, `out x in`) followed by its bias vector.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{FsslError, Result};
use crate::linalg::{check_dims, dot, norm, UnitVector, Vector, ZERO_NORM_EPS};
use crate::rng::RngStream;
use crate::scalar::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply<T: Real>(self, z: T) -> T {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(T::zero()),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn grad<T: Real>(self, z: T, a: T) -> T {
        match self {
            Activation::Tanh => T::one() - a * a,
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }

    fn code(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    fn from_code(c: u32) -> Option<Self> {
        match c {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Layer widths `[d_in, hidden.., d_emb]` and one activation per hidden layer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerLayout {
    dims: Vec<usize>,
    activations: Vec<Activation>,
}

impl LayerLayout {
    pub fn new(dims: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if dims.len() < 3 {
            return Err(FsslError::InvalidLayout(
                "need at least one hidden layer".into(),
            ));
        }
        if *dims.last().unwrap() < 2 {
            return Err(FsslError::InvalidLayout(
                "embedding dimension must be >= 2".into(),
            ));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(FsslError::InvalidLayout("zero-width layer".into()));
        }
        if activations.len() != dims.len() - 2 {
            return Err(FsslError::InvalidLayout(format!(
                "{} hidden layers but {} activations",
                dims.len() - 2,
                activations.len()
            )));
        }
        Ok(LayerLayout { dims, activations })
    }

    /// Same activation on every hidden layer.
    pub fn uniform(d_in: usize, hidden: &[usize], d_emb: usize, act: Activation) -> Result<Self> {
        let mut dims = vec![d_in];
        dims.extend_from_slice(hidden);
        dims.push(d_emb);
        LayerLayout::new(dims, vec![act; hidden.len()])
    }

    /// 32 -> 64 -> 64 -> 16 with tanh.
    pub fn desk_default() -> Self {
        LayerLayout::uniform(32, &[64, 64], 16, Activation::Tanh).unwrap()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn emb_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Offsets of (weights, biases) for layer `l`.
    fn offsets(&self, l: usize) -> (usize, usize) {
        let start: usize = self.dims[..=l].windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        (start, start + self.dims[l] * self.dims[l + 1])
    }
}

/// Flat parameter vector paired with its layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<T> {
    pub flat: Vector<T>,
    pub layout: LayerLayout,
}

/// Activations recorded by [`forward`] for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    dims: Vec<usize>,
    /// Input to each layer; `inputs[0]` is `x`.
    inputs: Vec<Vec<T>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<T>>,
    raw_norm: T,
    emb: Vec<T>,
}

impl<T> ForwardCache<T> {
    pub fn emb(&self) -> &[T] {
        &self.emb
    }
}

impl<T: Real> ModelParams<T> {
    pub fn new(flat: Vector<T>, layout: LayerLayout) -> Result<Self> {
        check_dims(layout.param_count(), flat.len())?;
        Ok(ModelParams { flat, layout })
    }

    pub fn zeros(layout: LayerLayout) -> Self {
        ModelParams {
            flat: Vector::zeros(layout.param_count()),
            layout,
        }
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        self.flat.as_slice()
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        self.flat.as_mut_slice()
    }

    pub fn same_layout(&self, other: &ModelParams<T>) -> Result<()> {
        if self.layout != other.layout || self.len() != other.len() {
            return Err(FsslError::LayoutMismatch);
        }
        Ok(())
    }

    /// A copy with `flat` replaced.
    pub fn with_flat(&self, flat: Vec<T>) -> Result<Self> {
        ModelParams::new(Vector::new(flat), self.layout.clone())
    }

    /// `self - other`, elementwise.
    pub fn delta(&self, other: &ModelParams<T>) -> Result<Vec<T>> {
        self.same_layout(other)?;
        Ok(self
            .as_slice()
            .iter()
            .zip(other.as_slice())
            .map(|(&a, &b)| a - b)
            .collect())
    }

    pub fn distance(&self, other: &ModelParams<T>) -> Result<T> {
        Ok(norm(&self.delta(other)?))
    }

    fn weights(&self, l: usize) -> (&[T], &[T]) {
        let (w, b) = self.layout.offsets(l);
        let out = self.layout.dims[l + 1];
        (&self.flat[w..b], &self.flat[b..b + out])
    }
}

/// Runs the network on `x` and normalizes the output onto the sphere.
pub fn forward<T: Real>(p: &ModelParams<T>, x: &[T]) -> Result<(UnitVector<T>, ForwardCache<T>)> {
    let lay = &p.layout;
    check_dims(lay.input_dim(), x.len())?;
    let n = lay.num_layers();
    let mut inputs = Vec::with_capacity(n);
    let mut pre = Vec::with_capacity(n - 1);
    let mut a = x.to_vec();
    for l in 0..n {
        let z = affine(p, l, &a);
        inputs.push(a);
        if l + 1 < n {
            let act = lay.activations[l];
            a = z.iter().map(|&v| act.apply(v)).collect();
            pre.push(z);
        } else {
            a = z;
        }
    }
    let raw_norm = norm(&a);
    if !(raw_norm.as_f64() >= ZERO_NORM_EPS) {
        return Err(FsslError::ZeroNorm(raw_norm.as_f64()));
    }
    let emb: Vec<T> = a.iter().map(|&v| v / raw_norm).collect();
    let cache = ForwardCache {
        dims: lay.dims.clone(),
        inputs,
        pre,
        raw_norm,
        emb: emb.clone(),
    };
    Ok((
        UnitVector::try_new(emb).unwrap_or_else(|_| renorm(&a)),
        cache,
    ))
}

fn renorm<T: Real>(a: &[T]) -> UnitVector<T> {
    crate::linalg::normalize_slice(a).expect("nonzero output")
}

/// Forward pass without recording a cache.
pub fn embed<T: Real>(p: &ModelParams<T>, x: &[T]) -> Result<UnitVector<T>> {
    let lay = &p.layout;
    check_dims(lay.input_dim(), x.len())?;
    let n = lay.num_layers();
    let mut a = x.to_vec();
    for l in 0..n {
        let mut z = affine(p, l, &a);
        if l + 1 < n {
            let act = lay.activations[l];
            z.iter_mut().for_each(|v| *v = act.apply(*v));
        }
        a = z;
    }
    crate::linalg::normalize_slice(&a)
}

fn affine<T: Real>(p: &ModelParams<T>, l: usize, a: &[T]) -> Vec<T> {
    let (w, b) = p.weights(l);
    let d_in = a.len();
    w.chunks_exact(d_in)
        .zip(b)
        .map(|(row, &bias)| dot(row, a) + bias)
        .collect()
}

/// Vector-Jacobian product of `d_emb . forward(p, x)` with respect to the
/// parameters.
pub fn backward<T: Real>(
    p: &ModelParams<T>,
    cache: &ForwardCache<T>,
    d_emb: &[T],
) -> Result<Vector<T>> {
    let mut grad = vec![T::zero(); p.len()];
    backward_accumulate(p, cache, d_emb, T::one(), &mut grad)?;
    Ok(Vector::new(grad))
}

/// Adds `scale * VJP(d_emb)` into `grad`.
pub fn backward_accumulate<T: Real>(
    p: &ModelParams<T>,
    cache: &ForwardCache<T>,
    d_emb: &[T],
    scale: T,
    grad: &mut [T],
) -> Result<()> {
    let lay = &p.layout;
    if cache.dims != lay.dims {
        return Err(FsslError::CacheMismatch);
    }
    check_dims(lay.emb_dim(), d_emb.len())?;
    check_dims(p.len(), grad.len())?;

    // Through the normalization: (I - e e^T) d / |raw|.
    let proj = dot(&cache.emb, d_emb);
    let mut delta: Vec<T> = cache
        .emb
        .iter()
        .zip(d_emb)
        .map(|(&e, &d)| scale * (d - e * proj) / cache.raw_norm)
        .collect();

    for l in (0..lay.num_layers()).rev() {
        let input = &cache.inputs[l];
        let d_in = input.len();
        let (w_off, b_off) = lay.offsets(l);
        for (o, &dz) in delta.iter().enumerate() {
            if dz == T::zero() {
                continue;
            }
            let row = &mut grad[w_off + o * d_in..w_off + (o + 1) * d_in];
            for (g, &a) in row.iter_mut().zip(input) {
                *g += dz * a;
            }
            grad[b_off + o] += dz;
        }
        if l == 0 {
            break;
        }
        let (w, _) = p.weights(l);
        let mut da = vec![T::zero(); d_in];
        for (o, &dz) in delta.iter().enumerate() {
            if dz == T::zero() {
                continue;
            }
            for (acc, &wv) in da.iter_mut().zip(&w[o * d_in..(o + 1) * d_in]) {
                *acc += dz * wv;
            }
        }
        let act = lay.activations[l - 1];
        let z = &cache.pre[l - 1];
        delta = da
            .iter()
            .zip(z)
            .zip(input)
            .map(|((&g, &zv), &av)| g * act.grad(zv, av))
            .collect();
    }
    Ok(())
}

/// Glorot-uniform weights, zero biases.
pub fn init<T: Real>(layout: &LayerLayout, rng: &mut RngStream) -> ModelParams<T> {
    let mut flat = vec![T::zero(); layout.param_count()];
    for l in 0..layout.num_layers() {
        let (fan_in, fan_out) = (layout.dims[l], layout.dims[l + 1]);
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let (w, b) = layout.offsets(l);
        for v in &mut flat[w..b] {
            *v = T::lit(rng.uniform_in(-s, s));
        }
    }
    ModelParams {
        flat: Vector::new(flat),
        layout: layout.clone(),
    }
}

/// Online encoder `f` with its momentum target `g`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderPair<T> {
    pub online: ModelParams<T>,
    pub target: ModelParams<T>,
    pub momentum: T,
}

impl<T: Real> EncoderPair<T> {
    pub fn new(online: ModelParams<T>, target: ModelParams<T>, momentum: T) -> Result<Self> {
        online.same_layout(&target)?;
        if !(momentum >= T::zero() && momentum < T::one()) {
            return Err(FsslError::InvalidArgument(format!(
                "momentum {momentum} outside [0, 1)"
            )));
        }
        Ok(EncoderPair {
            online,
            target,
            momentum,
        })
    }

    /// Both encoders start from `p`.
    pub fn from_global(p: &ModelParams<T>, momentum: T) -> Result<Self> {
        EncoderPair::new(p.clone(), p.clone(), momentum)
    }
}

/// `target <- m * target + (1 - m) * online`.
pub fn momentum_update<T: Real>(mut pair: EncoderPair<T>) -> EncoderPair<T> {
    momentum_update_in_place(&mut pair);
    pair
}

pub fn momentum_update_in_place<T: Real>(pair: &mut EncoderPair<T>) {
    let m = pair.momentum;
    let one_m = T::one() - m;
    let online = pair.online.flat.as_slice();
    for (t, &o) in pair.target.flat.as_mut_slice().iter_mut().zip(online) {
        *t = m * *t + one_m * o;
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"FSSL";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes parameters as a little-endian checkpoint:
/// `"FSSL" | version u32 | n_dims u32 | dims u32.. | activation codes u32.. | f32..`.
pub fn write_checkpoint<T: Real, W: Write>(p: &ModelParams<T>, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(p.layout.dims.len() as u32).to_le_bytes())?;
    for &d in &p.layout.dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for a in &p.layout.activations {
        w.write_all(&a.code().to_le_bytes())?;
    }
    for &v in p.as_slice() {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_checkpoint<T: Real, R: Read>(mut r: R) -> Result<ModelParams<T>> {
    let bad = |m: &str| FsslError::MalformedRecord(format!("checkpoint: {m}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("bad magic"));
    }
    let read_u32 = |r: &mut R| -> Result<u32> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    };
    if read_u32(&mut r)? != CHECKPOINT_VERSION {
        return Err(bad("unsupported version"));
    }
    let n = read_u32(&mut r)? as usize;
    if !(3..=64).contains(&n) {
        return Err(bad("implausible layer count"));
    }
    let dims = (0..n)
        .map(|_| read_u32(&mut r).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let acts = (0..n - 2)
        .map(|_| {
            read_u32(&mut r).and_then(|c| Activation::from_code(c).ok_or_else(|| bad("activation")))
        })
        .collect::<Result<Vec<_>>>()?;
    let layout = LayerLayout::new(dims, acts)?;
    let mut buf = vec![0u8; layout.param_count() * 4];
    r.read_exact(&mut buf)?;
    let flat = buf
        .chunks_exact(4)
        .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    ModelParams::new(Vector::new(flat), layout)
}
