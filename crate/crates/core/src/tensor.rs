//! Dense row-major tensors and the shape-level operations built on them.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Real;

/// Dense row-major n-dimensional array. The last dimension varies fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

pub(crate) fn check_dims(dims: &[usize]) -> Result<usize> {
    if dims.is_empty() {
        return Err(Error::shape("rank must be at least 1"));
    }
    if let Some(i) = dims.iter().position(|&d| d == 0) {
        return Err(Error::shape(format!("extent {i} of {dims:?} is zero")));
    }
    dims.iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::shape(format!("{dims:?} overflows usize")))
}

impl<T: Real> Tensor<T> {
    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let n = check_dims(dims)?;
        if data.len() != n {
            return Err(Error::shape(format!(
                "{dims:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data,
        })
    }

    /// Tensor filled with `value`. Panics if `dims` is not a valid shape.
    pub fn full(dims: &[usize], value: T) -> Self {
        let n = check_dims(dims).expect("valid tensor dims");
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, T::one())
    }

    pub fn scalar(value: T) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(&[usize]) -> T) -> Self {
        let mut t = Self::zeros(dims);
        let mut idx = vec![0usize; dims.len()];
        for v in t.data.iter_mut() {
            *v = f(&idx);
            for d in (0..idx.len()).rev() {
                idx[d] += 1;
                if idx[d] < dims[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        t
    }

    pub fn uniform(dims: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let dist = Uniform::new(lo, hi).expect("lo < hi");
        let n = check_dims(dims).expect("valid tensor dims");
        let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
        Self {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn normal(dims: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let n = check_dims(dims).expect("valid tensor dims");
        if std == 0.0 {
            return Self::zeros(dims);
        }
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..n).map(|_| T::lit(dist.sample(rng))).collect();
        Self {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut s = vec![1usize; self.dims.len()];
        for d in (0..self.dims.len().saturating_sub(1)).rev() {
            s[d] = s[d + 1] * self.dims[d + 1];
        }
        s
    }

    /// Flat offset of a multi-index. Panics when out of bounds.
    pub fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.dims.len(), "index rank mismatch");
        idx.iter().zip(&self.dims).fold(0, |acc, (&i, &d)| {
            assert!(i < d, "index {idx:?} out of bounds for {:?}", self.dims);
            acc * d + i
        })
    }

    pub fn get(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: T) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        let n = check_dims(dims)?;
        if n != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {dims:?}",
                self.dims
            )));
        }
        Ok(Self {
            dims: dims.to_vec(),
            data: self.data,
        })
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped tensors.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_dims(other)?;
        Ok(Self {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn scale(&self, k: T) -> Self {
        self.map(|v| v * k)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_same_dims(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_same_dims(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn expect_same_dims(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::shape(format!(
                "dims differ: {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::shape(format!(
                "{what} expects rank {rank}, got {:?}",
                self.dims
            )));
        }
        Ok(())
    }
}

/// Source taps of half-pixel bilinear sampling along one axis.
#[derive(Debug, Clone)]
pub(crate) struct Taps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

impl Taps {
    /// Output sample `o` reads source coordinate `(o + 0.5) · n_in / n_out − 0.5`,
    /// clamped at 0; the upper tap is clamped at the last source index.
    pub fn new(n_in: usize, n_out: usize) -> Self {
        let scale = n_in as f64 / n_out as f64;
        let mut lo = Vec::with_capacity(n_out);
        let mut hi = Vec::with_capacity(n_out);
        let mut frac = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(src - i0 as f64);
        }
        Self { lo, hi, frac }
    }
}

/// Bilinear resize of dims 1 and 2 of a `(C, H, W, R)`-laid-out buffer, where
/// `R` is the product of any trailing dims carried along unchanged.
pub(crate) fn resize_planes<T: Real>(
    src: &[T],
    (c, h, w, r): (usize, usize, usize, usize),
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let ty = Taps::new(h, ho);
    let tx = Taps::new(w, wo);
    let mut out = vec![T::zero(); c * ho * wo * r];
    par::for_each_chunk(&mut out, wo * r, |row, dst| {
        let ch = row / ho;
        let y = row % ho;
        let fy = T::lit(ty.frac[y]);
        let base = ch * h * w * r;
        let r0 = base + ty.lo[y] * w * r;
        let r1 = base + ty.hi[y] * w * r;
        for x in 0..wo {
            let fx = T::lit(tx.frac[x]);
            let (c0, c1) = (tx.lo[x] * r, tx.hi[x] * r);
            let w00 = (T::one() - fy) * (T::one() - fx);
            let w01 = (T::one() - fy) * fx;
            let w10 = fy * (T::one() - fx);
            let w11 = fy * fx;
            for k in 0..r {
                dst[x * r + k] = w00 * src[r0 + c0 + k]
                    + w01 * src[r0 + c1 + k]
                    + w10 * src[r1 + c0 + k]
                    + w11 * src[r1 + c1 + k];
            }
        }
    });
    out
}

/// Adjoint of [`resize_planes`]: scatters output gradients back onto the source grid.
pub(crate) fn resize_planes_backward<T: Real>(
    grad_out: &[T],
    (c, h, w, r): (usize, usize, usize, usize),
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let ty = Taps::new(h, ho);
    let tx = Taps::new(w, wo);
    let mut grad = vec![T::zero(); c * h * w * r];
    par::for_each_chunk(&mut grad, h * w * r, |ch, g| {
        let gbase = ch * ho * wo * r;
        for y in 0..ho {
            let fy = T::lit(ty.frac[y]);
            let r0 = ty.lo[y] * w * r;
            let r1 = ty.hi[y] * w * r;
            for x in 0..wo {
                let fx = T::lit(tx.frac[x]);
                let (c0, c1) = (tx.lo[x] * r, tx.hi[x] * r);
                let w00 = (T::one() - fy) * (T::one() - fx);
                let w01 = (T::one() - fy) * fx;
                let w10 = fy * (T::one() - fx);
                let w11 = fy * fx;
                let src = &grad_out[gbase + (y * wo + x) * r..][..r];
                for (k, &go) in src.iter().enumerate() {
                    g[r0 + c0 + k] += w00 * go;
                    g[r0 + c1 + k] += w01 * go;
                    g[r1 + c0 + k] += w10 * go;
                    g[r1 + c1 + k] += w11 * go;
                }
            }
        }
    });
    grad
}

/// Half-pixel-centre bilinear resize of a `(C, H, W)` tensor to `(C, H', W')`.
pub fn bilinear_resize<T: Real>(src: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    src.expect_rank(3, "bilinear_resize")?;
    check_dims(&[target.0, target.1])?;
    let (c, h, w) = (src.dims[0], src.dims[1], src.dims[2]);
    let data = resize_planes(&src.data, (c, h, w, 1), target);
    Tensor::from_vec(&[c, target.0, target.1], data)
}

/// Bilinear resize of the two query dims of a `(C, Hq, Wq, Hs, Ws)` tensor.
pub fn resize_query_dims<T: Real>(src: &Tensor<T>, target: (usize, usize)) -> Result<Tensor<T>> {
    src.expect_rank(5, "resize_query_dims")?;
    check_dims(&[target.0, target.1])?;
    let d = &src.dims;
    let data = resize_planes(&src.data, (d[0], d[1], d[2], d[3] * d[4]), target);
    Tensor::from_vec(&[d[0], target.0, target.1, d[3], d[4]], data)
}

/// Mean over the last two (support) dims of a `(C, Hq, Wq, Hs, Ws)` tensor.
pub fn avg_pool_support_dims<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    t.expect_rank(5, "avg_pool_support_dims")?;
    let d = &t.dims;
    let inner = d[3] * d[4];
    let inv = T::one() / T::lit(inner as f64);
    let data = t
        .data
        .chunks(inner)
        .map(|c| c.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::from_vec(&[d[0], d[1], d[2]], data)
}

/// Per-pixel softmax over the channel dim of a `(C, H, W)` tensor.
pub fn softmax_channel<T: Real>(t: &Tensor<T>) -> Result<Tensor<T>> {
    t.expect_rank(3, "softmax_channel")?;
    let (c, plane) = (t.dims[0], t.dims[1] * t.dims[2]);
    if c < 2 {
        return Err(Error::shape(format!(
            "softmax needs at least 2 channels, got {c}"
        )));
    }
    let mut out = vec![T::zero(); t.len()];
    for p in 0..plane {
        let m = (0..c)
            .map(|k| t.data[k * plane + p])
            .fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for k in 0..c {
            let e = (t.data[k * plane + p] - m).exp();
            out[k * plane + p] = e;
            z += e;
        }
        for k in 0..c {
            out[k * plane + p] /= z;
        }
    }
    Tensor::from_vec(&t.dims, out)
}
