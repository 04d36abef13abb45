//! 2D convolutions applied to one 2D subspace of a 4D correlation tensor.
//!
//! A `(C, Hq, Wq, Hs, Ws)` tensor is convolved either over its support plane
//! (one 2D convolution per query position) or over its query plane (one per
//! support position). Both are lowered to an im2col matrix whose columns are
//! ordered like the output positions `(i, j, u, v)`, so a single GEMM lands
//! directly in the row-major output layout.

use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Which 2D subspace a plane convolution slides over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Plane {
    /// Kernel slides over `(Hs, Ws)`; query positions are only subsampled.
    Support,
    /// Kernel slides over `(Hq, Wq)`; support positions are only subsampled.
    Query,
}

/// `floor((n + 2·pad − k) / stride) + 1`, or an error when the window does not fit.
pub fn output_extent(n: usize, k: usize, stride: usize) -> Result<usize> {
    let pad = k / 2;
    if stride == 0 {
        return Err(Error::input("stride must be positive"));
    }
    if n + 2 * pad < k {
        return Err(Error::shape(format!(
            "extent {n} too small for kernel {k}"
        )));
    }
    Ok((n + 2 * pad - k) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geom {
    pub cin: usize,
    pub input: [usize; 4],
    pub k: usize,
    pub stride: [usize; 4],
    pub out: [usize; 4],
}

impl Geom {
    pub fn new(x_dims: &[usize], k: usize, stride: [usize; 4]) -> Result<Self> {
        if x_dims.len() != 5 {
            return Err(Error::shape(format!(
                "4D convolution expects (C, Hq, Wq, Hs, Ws), got {x_dims:?}"
            )));
        }
        if k.is_multiple_of(2) {
            return Err(Error::input(format!("kernel size {k} must be odd")));
        }
        let input = [x_dims[1], x_dims[2], x_dims[3], x_dims[4]];
        let mut out = [0; 4];
        for d in 0..4 {
            out[d] = output_extent(input[d], k, stride[d])?;
        }
        Ok(Self {
            cin: x_dims[0],
            input,
            k,
            stride,
            out,
        })
    }

    pub fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    pub fn columns(&self) -> usize {
        self.out.iter().product()
    }

    pub fn patch_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_dims(&self, cout: usize) -> [usize; 5] {
        [cout, self.out[0], self.out[1], self.out[2], self.out[3]]
    }
}

pub(crate) fn check_weight<T: Real>(w: &Tensor<T>, cin: usize, k: usize) -> Result<usize> {
    let d = w.dims();
    if d.len() != 4 || d[1] != cin || d[2] != k || d[3] != k {
        return Err(Error::shape(format!(
            "2D kernel must be (out, {cin}, {k}, {k}), got {d:?}"
        )));
    }
    Ok(d[0])
}

pub(crate) fn check_bias<T: Real>(b: Option<&Tensor<T>>, cout: usize) -> Result<()> {
    match b {
        Some(b) if b.dims() != [cout] => Err(Error::shape(format!(
            "bias must be ({cout}), got {:?}",
            b.dims()
        ))),
        _ => Ok(()),
    }
}

/// Source position of patch row `(a, b)` for output `(i, j, u, v)`, or `None` in the padding.
#[inline]
fn source(
    plane: Plane,
    g: &Geom,
    (a, b): (usize, usize),
    (i, j, u, v): (usize, usize, usize, usize),
) -> Option<usize> {
    let p = g.pad();
    let s = g.stride;
    let (qi, qj, si, sj) = match plane {
        Plane::Support => (
            (i * s[0]) as isize,
            (j * s[1]) as isize,
            (u * s[2]) as isize + a as isize - p,
            (v * s[3]) as isize + b as isize - p,
        ),
        Plane::Query => (
            (i * s[0]) as isize + a as isize - p,
            (j * s[1]) as isize + b as isize - p,
            (u * s[2]) as isize,
            (v * s[3]) as isize,
        ),
    };
    let [hq, wq, hs, ws] = g.input.map(|n| n as isize);
    if qi < 0 || qj < 0 || si < 0 || sj < 0 || qi >= hq || qj >= wq || si >= hs || sj >= ws {
        return None;
    }
    Some((((qi * wq + qj) * hs + si) * ws + sj) as usize)
}

fn im2col<T: Real>(x: &[T], g: &Geom, plane: Plane) -> Vec<T> {
    let ncol = g.columns();
    let plane_len: usize = g.input.iter().product();
    let k = g.k;
    let [oi, oj, ou, ov] = g.out;
    let mut cols = vec![T::zero(); g.patch_rows() * ncol];
    par::for_each_chunk(&mut cols, ncol, |row, dst| {
        let c = row / (k * k);
        let ab = (row / k % k, row % k);
        let src = &x[c * plane_len..][..plane_len];
        let mut n = 0;
        for i in 0..oi {
            for j in 0..oj {
                for u in 0..ou {
                    for v in 0..ov {
                        if let Some(o) = source(plane, g, ab, (i, j, u, v)) {
                            dst[n] = src[o];
                        }
                        n += 1;
                    }
                }
            }
        }
    });
    cols
}

fn col2im<T: Real>(cols: &[T], g: &Geom, plane: Plane) -> Vec<T> {
    let ncol = g.columns();
    let plane_len: usize = g.input.iter().product();
    let k = g.k;
    let [oi, oj, ou, ov] = g.out;
    let mut grad = vec![T::zero(); g.cin * plane_len];
    par::for_each_chunk(&mut grad, plane_len, |c, dst| {
        for a in 0..k {
            for b in 0..k {
                let row = &cols[((c * k + a) * k + b) * ncol..][..ncol];
                let mut n = 0;
                for i in 0..oi {
                    for j in 0..oj {
                        for u in 0..ou {
                            for v in 0..ov {
                                if let Some(o) = source(plane, g, (a, b), (i, j, u, v)) {
                                    dst[o] += row[n];
                                }
                                n += 1;
                            }
                        }
                    }
                }
            }
        }
    });
    grad
}

/// Plane convolution of `x: (Cin, Hq, Wq, Hs, Ws)` with `w: (Cout, Cin, k, k)`.
///
/// `stride` is `(s_q1, s_q2, s_s1, s_s2)`; padding is `k / 2` on every dim.
pub fn plane_conv<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    plane: Plane,
    stride: [usize; 4],
) -> Result<Tensor<T>> {
    let k = w.dims().get(2).copied().unwrap_or(0);
    let g = Geom::new(x.dims(), k, stride)?;
    let cout = check_weight(w, g.cin, k)?;
    check_bias(bias, cout)?;
    let cols = im2col(x.data(), &g, plane);
    let ncol = g.columns();
    let mut out = vec![T::zero(); cout * ncol];
    T::gemm(cout, g.patch_rows(), ncol, w.data(), &cols, &mut out);
    if let Some(b) = bias {
        for (o, row) in out.chunks_mut(ncol).enumerate() {
            let bo = b.data()[o];
            row.iter_mut().for_each(|v| *v += bo);
        }
    }
    Tensor::from_vec(&g.out_dims(cout), out)
}

/// Gradients of [`plane_conv`]: `(d input, d weight, d bias)`.
///
/// The input gradient is skipped when `need_input` is false.
pub fn plane_conv_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    plane: Plane,
    stride: [usize; 4],
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let k = w.dims()[2];
    let g = Geom::new(x.dims(), k, stride)?;
    let cout = check_weight(w, g.cin, k)?;
    if grad_out.dims() != g.out_dims(cout) {
        return Err(Error::shape(format!(
            "gradient dims {:?} do not match output {:?}",
            grad_out.dims(),
            g.out_dims(cout)
        )));
    }
    let ncol = g.columns();
    let rows = g.patch_rows();
    let go = grad_out.data();

    let gb: Vec<T> = go.chunks(ncol).map(|r| r.iter().copied().sum()).collect();

    let cols = im2col(x.data(), &g, plane);
    let mut gw = vec![T::zero(); cout * rows];
    T::gemm_bt(cout, ncol, rows, go, &cols, &mut gw);
    drop(cols);

    let gx = if need_input {
        let mut wt = vec![T::zero(); rows * cout];
        for o in 0..cout {
            for r in 0..rows {
                wt[r * cout + o] = w.data()[o * rows + r];
            }
        }
        let mut gcols = vec![T::zero(); rows * ncol];
        T::gemm(rows, cout, ncol, &wt, go, &mut gcols);
        Some(Tensor::from_vec(x.dims(), col2im(&gcols, &g, plane))?)
    } else {
        None
    };
    Ok((
        gx,
        Tensor::from_vec(w.dims(), gw)?,
        Tensor::from_vec(&[cout], gb)?,
    ))
}

/// Ordinary 2D convolution of `(Cin, H, W)` with `(Cout, Cin, k, k)`, stride 1, padding `k / 2`.
pub fn conv2d<T: Real>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    x.expect_rank(3, "conv2d")?;
    let d = x.dims().to_vec();
    let x5 = x.clone().reshape(&[d[0], d[1], d[2], 1, 1])?;
    let y = plane_conv(&x5, w, bias, Plane::Query, [1, 1, 1, 1])?;
    let yd = y.dims().to_vec();
    y.reshape(&[yd[0], yd[1], yd[2]])
}
