//! Group normalization over the leading channel dim of any tensor of rank ≥ 2.

use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const GROUP_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupNormSpec {
    pub groups: usize,
    pub eps: f64,
}

impl Default for GroupNormSpec {
    fn default() -> Self {
        Self {
            groups: 4,
            eps: GROUP_NORM_EPS,
        }
    }
}

fn layout<T: Real>(x: &Tensor<T>, spec: GroupNormSpec) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::shape(format!(
            "group norm needs rank >= 2, got {:?}",
            x.dims()
        )));
    }
    let c = x.dims()[0];
    if spec.groups == 0 || !c.is_multiple_of(spec.groups) {
        return Err(Error::input(format!(
            "{c} channels cannot be split into {} groups",
            spec.groups
        )));
    }
    Ok((c, spec.groups, x.len() / c))
}

fn check_affine<T: Real>(p: &Tensor<T>, c: usize) -> Result<()> {
    if p.dims() != [c] {
        return Err(Error::shape(format!(
            "affine parameter must be ({c}), got {:?}",
            p.dims()
        )));
    }
    Ok(())
}

/// Per-group `(mean, 1 / sqrt(var + eps))`.
fn stats<T: Real>(x: &[T], groups: usize, group_len: usize, eps: f64) -> Vec<(T, T)> {
    par::map_range(groups, |g| {
        let s = &x[g * group_len..][..group_len];
        let n = T::lit(group_len as f64);
        let mean = s.iter().copied().sum::<T>() / n;
        let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        (mean, T::one() / (var + T::lit(eps)).sqrt())
    })
}

pub fn group_norm<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    spec: GroupNormSpec,
) -> Result<Tensor<T>> {
    let (c, groups, inner) = layout(x, spec)?;
    check_affine(gamma, c)?;
    check_affine(beta, c)?;
    let group_len = inner * (c / groups);
    let st = stats(x.data(), groups, group_len, spec.eps);
    let mut out = x.data().to_vec();
    par::for_each_chunk(&mut out, inner, |ch, row| {
        let (mean, rstd) = st[ch / (c / groups)];
        let (g, b) = (gamma.data()[ch], beta.data()[ch]);
        for v in row.iter_mut() {
            *v = (*v - mean) * rstd * g + b;
        }
    });
    Tensor::from_vec(x.dims(), out)
}

/// Gradients of [`group_norm`]: `(d x, d gamma, d beta)`.
pub fn group_norm_backward<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    spec: GroupNormSpec,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (c, groups, inner) = layout(x, spec)?;
    check_affine(gamma, c)?;
    x.expect_same_dims(grad_out)?;
    let per_group = c / groups;
    let group_len = inner * per_group;
    let st = stats(x.data(), groups, group_len, spec.eps);
    let xd = x.data();
    let gd = grad_out.data();

    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        let (mean, rstd) = st[ch / per_group];
        let xs = &xd[ch * inner..][..inner];
        let gs = &gd[ch * inner..][..inner];
        dbeta[ch] = gs.iter().copied().sum();
        dgamma[ch] = xs.iter().zip(gs).map(|(&v, &g)| (v - mean) * rstd * g).sum();
    }

    let mut dx = vec![T::zero(); x.len()];
    par::for_each_chunk(&mut dx, group_len, |g, out| {
        let (mean, rstd) = st[g];
        let n = T::lit(group_len as f64);
        let base = g * group_len;
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for t in 0..group_len {
            let ch = g * per_group + t / inner;
            let dxhat = gd[base + t] * gamma.data()[ch];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * (xd[base + t] - mean) * rstd;
        }
        for t in 0..group_len {
            let ch = g * per_group + t / inner;
            let xhat = (xd[base + t] - mean) * rstd;
            let dxhat = gd[base + t] * gamma.data()[ch];
            out[t] = rstd / n * (n * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
        }
    });
    Ok((
        Tensor::from_vec(x.dims(), dx)?,
        Tensor::from_vec(&[c], dgamma)?,
        Tensor::from_vec(&[c], dbeta)?,
    ))
}
