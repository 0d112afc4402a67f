//! Dense row-major tensors and the attention primitives the denoiser is
//! built from.

use std::fmt::Debug;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

/// Floating point element type a [`Tensor`] can hold.
pub trait Element: Float + Default + Debug + Send + Sync + 'static {
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;

    fn to_f64(self) -> f64;

    /// Most negative finite value; stands in for −∞ in additive masks.
    fn neg_sentinel() -> Self {
        Self::min_value()
    }

    /// Replaces every `x` with `e^x`.
    fn exp_in_place(xs: &mut [Self]) {
        xs.iter_mut().for_each(|x| *x = x.exp());
    }
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }

    fn exp_in_place(xs: &mut [Self]) {
        xs.iter_mut().for_each(|x| *x = exp_f32(*x));
    }
}

/// Branch-free `e^x` for f32 that the compiler can vectorise.
///
/// Range reduction to `r ∈ [−ln2/2, ln2/2]`, degree-6 Taylor polynomial,
/// exponent reassembly. Relative error stays within a few ulp; inputs
/// below −87 flush to exactly zero.
#[inline]
pub fn exp_f32(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    const ROUND: f32 = 12_582_912.0;
    let xc = x.clamp(-87.0, 88.0);
    let n = (xc * LOG2E + ROUND) - ROUND;
    let r = (xc - n * LN2_HI) - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let scale = f32::from_bits(((n as i32 + 127) as u32) << 23);
    if x < -87.0 {
        0.0
    } else {
        p * scale
    }
}

/// Dot product with eight independent accumulators.
#[inline]
fn dot_lanes<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ar.iter().zip(br) {
        tail = tail + x * y;
    }
    acc.iter().fold(tail, |s, &v| s + v)
}

#[inline]
fn max_lanes<T: Element>(a: &[T]) -> T {
    let mut acc = [T::neg_infinity(); 8];
    let chunks = a.chunks_exact(8);
    let rest = chunks.remainder();
    for x in chunks {
        for l in 0..8 {
            acc[l] = if x[l] > acc[l] { x[l] } else { acc[l] };
        }
    }
    let m = rest.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
    acc.iter().fold(m, |m, &v| if v > m { v } else { m })
}

#[inline]
fn sum_lanes<T: Element>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.chunks_exact(8);
    let rest = chunks.remainder();
    for x in chunks {
        for l in 0..8 {
            acc[l] = acc[l] + x[l];
        }
    }
    acc.iter().fold(rest.iter().fold(T::zero(), |s, &v| s + v), |s, &v| s + v)
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}

/// A shaped, row-major array of floats.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("dtype", &T::DTYPE)
            .field("shape", &self.shape)
            .finish_non_exhaustive()
    }
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(shape_err!("dimensions must all be >= 1, got {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(shape_err!(
                "shape {shape:?} holds {numel} elements but {} were given",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::new(shape, vec![T::zero(); numel])
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, f: impl FnMut(usize) -> T) -> Result<Self> {
        let shape = shape.into();
        let numel = shape.iter().product();
        Self::new(shape, (0..numel).map(f).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dims3(&self) -> Result<[usize; 3]> {
        match *self.shape.as_slice() {
            [a, b, c] => Ok([a, b, c]),
            _ => Err(shape_err!("expected rank 3, got {:?}", self.shape)),
        }
    }

    pub fn dims4(&self) -> Result<[usize; 4]> {
        match *self.shape.as_slice() {
            [a, b, c, d] => Ok([a, b, c, d]),
            _ => Err(shape_err!("expected rank 4, got {:?}", self.shape)),
        }
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            acc * d + i
        })
    }

    /// Element at a multi-dimensional index. Panics when out of bounds.
    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    /// Elements `start..start+len` along the leading dimension.
    pub fn narrow0(&self, start: usize, len: usize) -> Result<Self> {
        let lead = self.shape[0];
        if len == 0 || start + len > lead {
            return Err(shape_err!("narrow {start}+{len} exceeds leading dim {lead}"));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Self {
            shape,
            data: self.data[start * inner..(start + len) * inner].to_vec(),
        })
    }

    /// Overwrites rows `start..` of the leading dimension with `src`.
    pub fn write_narrow0(&mut self, start: usize, src: &Self) -> Result<()> {
        if src.shape[1..] != self.shape[1..] || start + src.shape[0] > self.shape[0] {
            return Err(shape_err!(
                "cannot write {:?} at {start} into {:?}",
                src.shape,
                self.shape
            ));
        }
        let inner: usize = self.shape[1..].iter().product();
        self.data[start * inner..start * inner + src.data.len()].copy_from_slice(&src.data);
        Ok(())
    }

    /// Concatenates tensors along the leading dimension.
    pub fn cat0(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| invalid!("cat0 needs at least one tensor"))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if &p.shape[1..] != tail {
                return Err(shape_err!("cat0 of {:?} and {:?}", first.shape, p.shape));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Self::new(shape, data)
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::from_f64(x.to_f64())).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(shape_err!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&x| {
                let x = x.to_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskVariant {
    Full,
    Half,
    Quarter,
    Causal,
}

impl MaskVariant {
    pub const ALL: [MaskVariant; 4] = [
        MaskVariant::Full,
        MaskVariant::Half,
        MaskVariant::Quarter,
        MaskVariant::Causal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskVariant::Full => "full",
            MaskVariant::Half => "half",
            MaskVariant::Quarter => "quarter",
            MaskVariant::Causal => "causal",
        }
    }
}

impl std::str::FromStr for MaskVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(MaskVariant::Full),
            "half" => Ok(MaskVariant::Half),
            "quarter" => Ok(MaskVariant::Quarter),
            "causal" => Ok(MaskVariant::Causal),
            other => Err(invalid!("unknown mask variant {other:?}")),
        }
    }
}

impl std::fmt::Display for MaskVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// An L×L additive attention mask whose entries are either 0 or −∞.
///
/// Rows index queries, columns index keys. Every row keeps at least one key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    allowed: Vec<bool>,
    variant: MaskVariant,
}

impl AttentionMask {
    pub fn full(size: usize) -> Result<Self> {
        Self::from_allowed(size, vec![true; size * size], MaskVariant::Full)
    }

    /// Builds a mask from a row-major `allowed[q * size + k]` table.
    pub fn from_allowed(size: usize, allowed: Vec<bool>, variant: MaskVariant) -> Result<Self> {
        if size == 0 {
            return Err(invalid!("mask size must be >= 1"));
        }
        if allowed.len() != size * size {
            return Err(shape_err!(
                "mask of size {size} needs {} entries, got {}",
                size * size,
                allowed.len()
            ));
        }
        if let Some(row) = (0..size).find(|&q| !allowed[q * size..(q + 1) * size].contains(&true)) {
            return Err(Error::BlockedRow { row });
        }
        Ok(Self {
            size,
            allowed,
            variant,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn variant(&self) -> MaskVariant {
        self.variant
    }

    pub fn is_allowed(&self, query: usize, key: usize) -> bool {
        self.allowed[query * self.size + key]
    }

    pub fn allowed(&self) -> &[bool] {
        &self.allowed
    }

    /// Additive value of an entry: 0 when allowed, the −∞ sentinel otherwise.
    pub fn value<T: Element>(&self, query: usize, key: usize) -> T {
        if self.is_allowed(query, key) {
            T::zero()
        } else {
            T::neg_sentinel()
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.allowed.iter().all(|&a| a)
    }

    /// Text grid with `0` for open entries and `X` for blocked ones.
    pub fn to_grid(&self) -> String {
        let mut s = String::with_capacity(self.size * (2 * self.size + 1));
        for q in 0..self.size {
            for k in 0..self.size {
                if k > 0 {
                    s.push(' ');
                }
                s.push(if self.is_allowed(q, k) { '0' } else { 'X' });
            }
            s.push('\n');
        }
        s
    }
}

/// Reusable buffers for [`attend`].
#[derive(Debug, Default)]
pub struct AttentionScratch<T> {
    kt: Vec<T>,
    vt: Vec<T>,
    scores: Vec<T>,
}

impl<T: Element> AttentionScratch<T> {
    pub fn new() -> Self {
        Self {
            kt: Vec::new(),
            vt: Vec::new(),
            scores: Vec::new(),
        }
    }
}

/// Scaled dot-product attention over raw row-major buffers.
///
/// `q` is `[n_q, dim]`, `k` and `v` are `[n_k, dim]`, `out` is `[n_q, dim]`.
/// `allowed`, if given, is a row-major `[n_q, n_k]` table; blocked entries get
/// the −∞ sentinel added to their logits. Callers guarantee each row keeps at
/// least one key.
#[allow(clippy::too_many_arguments)]
pub fn attend<T: Element>(
    q: &[T],
    k: &[T],
    v: &[T],
    n_q: usize,
    n_k: usize,
    dim: usize,
    allowed: Option<&[bool]>,
    out: &mut [T],
    scratch: &mut AttentionScratch<T>,
) {
    debug_assert_eq!(q.len(), n_q * dim);
    debug_assert_eq!(k.len(), n_k * dim);
    debug_assert_eq!(v.len(), n_k * dim);
    debug_assert_eq!(out.len(), n_q * dim);

    let scale = T::one() / T::from_f64(dim as f64).sqrt();
    let AttentionScratch { kt, vt, scores } = scratch;
    kt.clear();
    kt.resize(dim * n_k, T::zero());
    vt.clear();
    vt.resize(dim * n_k, T::zero());
    scores.clear();
    scores.resize(n_k, T::zero());
    for j in 0..n_k {
        for c in 0..dim {
            kt[c * n_k + j] = k[j * dim + c];
            vt[c * n_k + j] = v[j * dim + c];
        }
    }

    let neg = T::neg_sentinel();
    for i in 0..n_q {
        scores.iter_mut().for_each(|s| *s = T::zero());
        for c in 0..dim {
            let qc = q[i * dim + c] * scale;
            for (s, &kv) in scores.iter_mut().zip(&kt[c * n_k..(c + 1) * n_k]) {
                *s = *s + qc * kv;
            }
        }
        match allowed {
            Some(allowed) => {
                let row = &allowed[i * n_k..(i + 1) * n_k];
                for (s, &ok) in scores.iter_mut().zip(row) {
                    *s = *s + if ok { T::zero() } else { neg };
                }
            }
            None => {}
        }
        let max = max_lanes(scores);
        scores.iter_mut().for_each(|s| *s = *s - max);
        T::exp_in_place(scores);
        let inv = T::one() / sum_lanes(scores);
        for c in 0..dim {
            out[i * dim + c] = dot_lanes(scores, &vt[c * n_k..(c + 1) * n_k]) * inv;
        }
    }
}

/// Batched softmax attention: `q`, `k`, `v` are `[B, L, C]`.
///
/// Each output row is `softmax(q kᵀ / √C + mask) v`.
pub fn softmax_attention<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    mask: Option<&AttentionMask>,
) -> Result<Tensor<T>> {
    let [b, l, c] = q.dims3()?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(shape_err!(
            "q {:?}, k {:?}, v {:?} must share a shape",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    if let Some(m) = mask {
        if m.size() != l {
            return Err(shape_err!("mask size {} for sequence length {l}", m.size()));
        }
    }
    let allowed = mask.map(|m| m.allowed());
    let mut out = vec![T::zero(); b * l * c];
    let mut scratch = AttentionScratch::new();
    let stride = l * c;
    for bi in 0..b {
        let r = bi * stride..(bi + 1) * stride;
        attend(
            &q.data()[r.clone()],
            &k.data()[r.clone()],
            &v.data()[r.clone()],
            l,
            l,
            c,
            allowed,
            &mut out[r],
            &mut scratch,
        );
    }
    Tensor::new([b, l, c], out)
}

/// Interleaved sin/cos encoding of a frame index at geometric frequencies
/// with base 10000: `[sin(i·ω₀), cos(i·ω₀), sin(i·ω₁), cos(i·ω₁), …]`.
pub fn sinusoidal_encoding<T: Element>(frame_index: usize, dim: usize) -> Result<Vec<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(invalid!("encoding dim must be even and positive, got {dim}"));
    }
    let pos = frame_index as f64;
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
        let angle = pos * freq;
        out.push(T::from_f64(angle.sin()));
        out.push(T::from_f64(angle.cos()));
    }
    Ok(out)
}

/// `[L, C, H, W]` → `[(H·W), L, C]`: every spatial location becomes a batch
/// row holding that location's sequence over frames.
pub fn reshape_spatial_temporal<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [l, c, h, w] = x.dims4()?;
    let hw = h * w;
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for i in 0..l {
        for ch in 0..c {
            let plane = &src[(i * c + ch) * hw..(i * c + ch + 1) * hw];
            for (p, &val) in plane.iter().enumerate() {
                out[(p * l + i) * c + ch] = val;
            }
        }
    }
    Tensor::new([hw, l, c], out)
}

/// Inverse of [`reshape_spatial_temporal`].
pub fn reshape_temporal_spatial<T: Element>(y: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let [hw, l, c] = y.dims3()?;
    if hw != h * w {
        return Err(shape_err!("{hw} spatial rows cannot form {h}x{w}"));
    }
    let src = y.data();
    let mut out = vec![T::zero(); src.len()];
    for p in 0..hw {
        for i in 0..l {
            for ch in 0..c {
                out[(i * c + ch) * hw + p] = src[(p * l + i) * c + ch];
            }
        }
    }
    Tensor::new([l, c, h, w], out)
}
