//! 4D convolutions over correlation tensors laid out as `(C, Hq, Wq, Hs, Ws)`.
//!
//! Three kernel variants share one configuration type:
//!
//! * [`Variant::Original`]: a dense `k⁴` kernel evaluated by direct loops.
//! * [`Variant::CenterPivot`]: the kernel restricted to taps whose query offset
//!   or support offset is the centre. It is evaluated exactly as the sum of a
//!   support-plane 2D convolution (the `k(0, :)` slice) and a query-plane 2D
//!   convolution (the `k(:, 0)` slice), so the centre tap receives the sum of
//!   both slices' centre weights.
//! * [`Variant::Separable`]: a sequential support conv → normalization →
//!   query conv pipeline. It approximates the separable kernels found in the
//!   optical-flow literature and is kept only for comparison.
//!
//! Padding is always `k / 2` on every dim.

mod count;
mod plane;

use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub use count::{conv_flops, conv_params, weights_per_output, NORM_FLOPS_PER_ELEMENT};
pub use plane::{conv2d, output_extent, plane_conv, plane_conv_backward, Plane};

use crate::error::{Error, Result};
use crate::norm::{group_norm, GroupNormSpec};
use crate::par;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Original,
    CenterPivot,
    Separable,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::CenterPivot, Variant::Separable, Variant::Original];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::CenterPivot => "center-pivot",
            Variant::Separable => "separable",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Variant::Original),
            "center-pivot" | "cp" => Ok(Variant::CenterPivot),
            "separable" => Ok(Variant::Separable),
            other => Err(Error::Config(format!("unknown kernel variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv4dConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Kernel extent `k̂`, identical on all four dims; must be odd.
    pub kernel_size: usize,
    /// `(s_q1, s_q2, s_s1, s_s2)`.
    pub stride: [usize; 4],
    pub variant: Variant,
    pub bias: bool,
}

impl Conv4dConfig {
    pub fn new(in_channels: usize, out_channels: usize, kernel_size: usize, variant: Variant) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel_size,
            stride: [1; 4],
            variant,
            bias: true,
        }
    }

    /// Strides only the support dims, leaving the query dims untouched.
    pub fn with_support_stride(mut self, s: usize) -> Self {
        self.stride = [1, 1, s, s];
        self
    }

    pub fn with_stride(mut self, stride: [usize; 4]) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn padding(&self) -> usize {
        self.kernel_size / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_size.is_multiple_of(2) || self.kernel_size == 0 {
            return Err(Error::input(format!(
                "kernel size {} must be odd",
                self.kernel_size
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::input("channel counts must be positive"));
        }
        if self.stride.contains(&0) {
            return Err(Error::input("strides must be positive"));
        }
        Ok(())
    }

    /// Output dims for an input of dims `(Cin, Hq, Wq, Hs, Ws)`.
    pub fn output_dims(&self, input: &[usize]) -> Result<[usize; 5]> {
        self.validate()?;
        if input.len() != 5 || input[0] != self.in_channels {
            return Err(Error::shape(format!(
                "expected ({}, Hq, Wq, Hs, Ws), got {input:?}",
                self.in_channels
            )));
        }
        let mut out = [self.out_channels, 0, 0, 0, 0];
        for d in 0..4 {
            out[d + 1] = output_extent(input[d + 1], self.kernel_size, self.stride[d])?;
        }
        Ok(out)
    }
}

/// The intermediate normalization of the separable variant.
#[derive(Debug, Clone, PartialEq)]
pub enum SeparableNorm<T> {
    Identity,
    Group {
        spec: GroupNormSpec,
        gamma: Tensor<T>,
        beta: Tensor<T>,
    },
}

/// Parameters of one 4D convolution.
#[derive(Debug, Clone, PartialEq)]
pub enum Kernel4d<T> {
    Original {
        /// `(out, in, k, k, k, k)`: query offsets first, then support offsets.
        weight: Tensor<T>,
        bias: Option<Tensor<T>>,
    },
    CenterPivot {
        /// `k(0, :)`, `(out, in, k, k)`, slides over the support plane.
        support: Tensor<T>,
        support_bias: Option<Tensor<T>>,
        /// `k(:, 0)`, `(out, in, k, k)`, slides over the query plane.
        query: Tensor<T>,
        query_bias: Option<Tensor<T>>,
    },
    Separable {
        support: Tensor<T>,
        support_bias: Option<Tensor<T>>,
        norm: SeparableNorm<T>,
        /// `(out, out, k, k)`.
        query: Tensor<T>,
        query_bias: Option<Tensor<T>>,
    },
}

impl<T: Real> Kernel4d<T> {
    /// Zero-mean normal weights with variance `2 / fan_in`, zero biases, unit
    /// normalization scale.
    pub fn init(cfg: &Conv4dConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let (cin, cout, k) = (cfg.in_channels, cfg.out_channels, cfg.kernel_size);
        let bias = || cfg.bias.then(|| Tensor::zeros(&[cout]));
        let std = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        Ok(match cfg.variant {
            Variant::Original => Kernel4d::Original {
                weight: Tensor::normal(&[cout, cin, k, k, k, k], std(cin * k.pow(4)), rng),
                bias: bias(),
            },
            Variant::CenterPivot => {
                let s = std(2 * cin * k * k);
                Kernel4d::CenterPivot {
                    support: Tensor::normal(&[cout, cin, k, k], s, rng),
                    support_bias: bias(),
                    query: Tensor::normal(&[cout, cin, k, k], s, rng),
                    query_bias: bias(),
                }
            }
            Variant::Separable => Kernel4d::Separable {
                support: Tensor::normal(&[cout, cin, k, k], std(cin * k * k), rng),
                support_bias: bias(),
                norm: SeparableNorm::Group {
                    spec: GroupNormSpec {
                        groups: separable_groups(cout),
                        ..GroupNormSpec::default()
                    },
                    gamma: Tensor::ones(&[cout]),
                    beta: Tensor::zeros(&[cout]),
                },
                query: Tensor::normal(&[cout, cout, k, k], std(cout * k * k), rng),
                query_bias: bias(),
            },
        })
    }

    pub fn cast<U: Real>(&self) -> Kernel4d<U> {
        let c = |t: &Tensor<T>| t.cast::<U>();
        let co = |t: &Option<Tensor<T>>| t.as_ref().map(|t| t.cast::<U>());
        match self {
            Kernel4d::Original { weight, bias } => Kernel4d::Original {
                weight: c(weight),
                bias: co(bias),
            },
            Kernel4d::CenterPivot {
                support,
                support_bias,
                query,
                query_bias,
            } => Kernel4d::CenterPivot {
                support: c(support),
                support_bias: co(support_bias),
                query: c(query),
                query_bias: co(query_bias),
            },
            Kernel4d::Separable {
                support,
                support_bias,
                norm,
                query,
                query_bias,
            } => Kernel4d::Separable {
                support: c(support),
                support_bias: co(support_bias),
                norm: match norm {
                    SeparableNorm::Identity => SeparableNorm::Identity,
                    SeparableNorm::Group { spec, gamma, beta } => SeparableNorm::Group {
                        spec: *spec,
                        gamma: c(gamma),
                        beta: c(beta),
                    },
                },
                query: c(query),
                query_bias: co(query_bias),
            },
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            Kernel4d::Original { .. } => Variant::Original,
            Kernel4d::CenterPivot { .. } => Variant::CenterPivot,
            Kernel4d::Separable { .. } => Variant::Separable,
        }
    }

    /// All learnable tensors of this kernel.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = Vec::new();
        match self {
            Kernel4d::Original { weight, bias } => {
                v.push(weight);
                v.extend(bias.iter());
            }
            Kernel4d::CenterPivot {
                support,
                support_bias,
                query,
                query_bias,
            } => {
                v.push(support);
                v.extend(support_bias.iter());
                v.push(query);
                v.extend(query_bias.iter());
            }
            Kernel4d::Separable {
                support,
                support_bias,
                norm,
                query,
                query_bias,
            } => {
                v.push(support);
                v.extend(support_bias.iter());
                if let SeparableNorm::Group { gamma, beta, .. } = norm {
                    v.push(gamma);
                    v.push(beta);
                }
                v.push(query);
                v.extend(query_bias.iter());
            }
        }
        v
    }

    pub fn param_count(&self) -> u64 {
        self.tensors().iter().map(|t| t.len() as u64).sum()
    }

    /// The dense `k⁴` kernel that is zero off the centre-pivot taps and equals
    /// `k_c` / `k_c'` on them, with both centre weights summed at the centre.
    pub fn center_pivot_to_dense(&self) -> Result<Kernel4d<T>> {
        let Kernel4d::CenterPivot {
            support,
            support_bias,
            query,
            query_bias,
        } = self
        else {
            return Err(Error::input("only a center-pivot kernel has a dense embedding"));
        };
        let d = support.dims();
        let (cout, cin, k) = (d[0], d[1], d[2]);
        let p = k / 2;
        let mut w = Tensor::zeros(&[cout, cin, k, k, k, k]);
        for o in 0..cout {
            for c in 0..cin {
                for a in 0..k {
                    for b in 0..k {
                        let at = [o, c, p, p, a, b];
                        w.set(&at, w.get(&at) + support.get(&[o, c, a, b]));
                        let at = [o, c, a, b, p, p];
                        w.set(&at, w.get(&at) + query.get(&[o, c, a, b]));
                    }
                }
            }
        }
        let bias = match (support_bias, query_bias) {
            (None, None) => None,
            (a, b) => {
                let mut t = Tensor::zeros(&[cout]);
                for x in [a, b].into_iter().flatten() {
                    t.add_assign(x)?;
                }
                Some(t)
            }
        };
        Ok(Kernel4d::Original { weight: w, bias })
    }
}

/// Group count used for the separable variant's intermediate normalization.
pub fn separable_groups(channels: usize) -> usize {
    [4, 2, 1].into_iter().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

fn check_kernel_matches<T: Real>(x: &Tensor<T>, kernel: &Kernel4d<T>, cfg: &Conv4dConfig) -> Result<[usize; 5]> {
    if kernel.variant() != cfg.variant {
        return Err(Error::input(format!(
            "kernel is {} but config says {}",
            kernel.variant(),
            cfg.variant
        )));
    }
    let out = cfg.output_dims(x.dims())?;
    let (cin, cout, k) = (cfg.in_channels, cfg.out_channels, cfg.kernel_size);
    let expect = |t: &Tensor<T>, want: &[usize], what: &str| -> Result<()> {
        if t.dims() != want {
            return Err(Error::shape(format!(
                "{what} must be {want:?}, got {:?}",
                t.dims()
            )));
        }
        Ok(())
    };
    let expect_bias = |b: &Option<Tensor<T>>| -> Result<()> {
        match (b, cfg.bias) {
            (Some(b), true) => expect(b, &[cout], "bias"),
            (None, false) => Ok(()),
            _ => Err(Error::input("bias presence does not match config")),
        }
    };
    match kernel {
        Kernel4d::Original { weight, bias } => {
            expect(weight, &[cout, cin, k, k, k, k], "4D weight")?;
            expect_bias(bias)?;
        }
        Kernel4d::CenterPivot {
            support,
            support_bias,
            query,
            query_bias,
        } => {
            expect(support, &[cout, cin, k, k], "support kernel")?;
            expect(query, &[cout, cin, k, k], "query kernel")?;
            expect_bias(support_bias)?;
            expect_bias(query_bias)?;
        }
        Kernel4d::Separable {
            support,
            support_bias,
            norm,
            query,
            query_bias,
        } => {
            expect(support, &[cout, cin, k, k], "support kernel")?;
            expect(query, &[cout, cout, k, k], "query kernel")?;
            expect_bias(support_bias)?;
            expect_bias(query_bias)?;
            if let SeparableNorm::Group { gamma, beta, .. } = norm {
                expect(gamma, &[cout], "norm scale")?;
                expect(beta, &[cout], "norm shift")?;
            }
        }
    }
    Ok(out)
}

/// Dense 4D convolution by direct nested loops over every output, input
/// channel and `k⁴` tap. This is the reference the other variants are checked
/// against.
pub fn conv4d_original<T: Real>(x: &Tensor<T>, kernel: &Kernel4d<T>, cfg: &Conv4dConfig) -> Result<Tensor<T>> {
    let out_dims = check_kernel_matches(x, kernel, cfg)?;
    let Kernel4d::Original { weight, bias } = kernel else {
        unreachable!("checked by check_kernel_matches");
    };
    Ok(direct_conv4d(x, weight, bias.as_ref(), cfg.stride, out_dims))
}

pub(crate) fn direct_conv4d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    s: [usize; 4],
    out_dims: [usize; 5],
) -> Tensor<T> {
    let xd = x.dims();
    let (cin, hq, wq, hs, ws) = (xd[0], xd[1], xd[2], xd[3], xd[4]);
    let k = w.dims()[2];
    let p = (k / 2) as isize;
    let [_, oi, oj, ou, ov] = out_dims;
    let xs = x.data();
    let wdat = w.data();
    let k4 = k.pow(4);
    let mut out = vec![T::zero(); out_dims.iter().product()];
    // one chunk per (o, i)
    par::for_each_chunk(&mut out, oj * ou * ov, |row, dst| {
        let (o, i) = (row / oi, row % oi);
        let b0 = bias.map_or(T::zero(), |b| b.data()[o]);
        let mut n = 0;
        for j in 0..oj {
            for u in 0..ou {
                for v in 0..ov {
                    let mut acc = b0;
                    for c in 0..cin {
                        let wbase = (o * cin + c) * k4;
                        for a in 0..k {
                            let qi = (i * s[0]) as isize + a as isize - p;
                            if qi < 0 || qi >= hq as isize {
                                continue;
                            }
                            for b in 0..k {
                                let qj = (j * s[1]) as isize + b as isize - p;
                                if qj < 0 || qj >= wq as isize {
                                    continue;
                                }
                                for d in 0..k {
                                    let si = (u * s[2]) as isize + d as isize - p;
                                    if si < 0 || si >= hs as isize {
                                        continue;
                                    }
                                    for e in 0..k {
                                        let sj = (v * s[3]) as isize + e as isize - p;
                                        if sj < 0 || sj >= ws as isize {
                                            continue;
                                        }
                                        let xo = (((c * hq + qi as usize) * wq + qj as usize) * hs
                                            + si as usize)
                                            * ws
                                            + sj as usize;
                                        acc += wdat[wbase + ((a * k + b) * k + d) * k + e] * xs[xo];
                                    }
                                }
                            }
                        }
                    }
                    dst[n] = acc;
                    n += 1;
                }
            }
        }
    });
    Tensor::from_vec(&out_dims, out).expect("dims computed from config")
}

/// Gradients of the dense 4D convolution: `(d input, d weight, d bias)`.
pub fn conv4d_original_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: [usize; 4],
    grad_out: &Tensor<T>,
    need_input: bool,
) -> Result<(Option<Tensor<T>>, Tensor<T>, Tensor<T>)> {
    let xd = x.dims();
    let (cin, hq, wq, hs, ws) = (xd[0], xd[1], xd[2], xd[3], xd[4]);
    let wdims = w.dims();
    let (cout, k) = (wdims[0], wdims[2]);
    let gd = grad_out.dims();
    if gd.len() != 5 || gd[0] != cout {
        return Err(Error::shape("gradient does not match 4D conv output"));
    }
    let (oi, oj, ou, ov) = (gd[1], gd[2], gd[3], gd[4]);
    let p = (k / 2) as isize;
    let s = stride;
    let k4 = k.pow(4);
    let g = grad_out.data();
    let xs = x.data();

    // Visits every (output, tap) pair that reads an in-bounds input element.
    let visit = |o: usize, c: usize, f: &mut dyn FnMut(usize, usize, usize)| {
        for i in 0..oi {
            for j in 0..oj {
                for u in 0..ou {
                    for v in 0..ov {
                        let go = (((o * oi + i) * oj + j) * ou + u) * ov + v;
                        for a in 0..k {
                            let qi = (i * s[0]) as isize + a as isize - p;
                            if qi < 0 || qi >= hq as isize {
                                continue;
                            }
                            for b in 0..k {
                                let qj = (j * s[1]) as isize + b as isize - p;
                                if qj < 0 || qj >= wq as isize {
                                    continue;
                                }
                                for d in 0..k {
                                    let si = (u * s[2]) as isize + d as isize - p;
                                    if si < 0 || si >= hs as isize {
                                        continue;
                                    }
                                    for e in 0..k {
                                        let sj = (v * s[3]) as isize + e as isize - p;
                                        if sj < 0 || sj >= ws as isize {
                                            continue;
                                        }
                                        let xo = (((c * hq + qi as usize) * wq + qj as usize) * hs
                                            + si as usize)
                                            * ws
                                            + sj as usize;
                                        f(go, ((a * k + b) * k + d) * k + e, xo);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    };

    let mut gw = vec![T::zero(); w.len()];
    par::for_each_chunk(&mut gw, k4, |oc, dst| {
        let (o, c) = (oc / cin, oc % cin);
        visit(o, c, &mut |go, tap, xo| dst[tap] += g[go] * xs[xo]);
    });

    let plane = grad_out.len() / cout;
    let gb: Vec<T> = g.chunks(plane).map(|r| r.iter().copied().sum()).collect();

    let gx = if need_input {
        let mut gx = vec![T::zero(); x.len()];
        let wd = w.data();
        par::for_each_chunk(&mut gx, hq * wq * hs * ws, |c, dst| {
            let base = c * hq * wq * hs * ws;
            for o in 0..cout {
                let wbase = (o * cin + c) * k4;
                visit(o, c, &mut |go, tap, xo| dst[xo - base] += wd[wbase + tap] * g[go]);
            }
        });
        Some(Tensor::from_vec(xd, gx)?)
    } else {
        None
    };
    Ok((gx, Tensor::from_vec(wdims, gw)?, Tensor::from_vec(&[cout], gb)?))
}

/// Centre-pivot 4D convolution: a support-plane 2D convolution with `k(0, :)`
/// at every query position plus a query-plane 2D convolution with `k(:, 0)` at
/// every support position.
pub fn conv4d_center_pivot<T: Real>(x: &Tensor<T>, kernel: &Kernel4d<T>, cfg: &Conv4dConfig) -> Result<Tensor<T>> {
    check_kernel_matches(x, kernel, cfg)?;
    let Kernel4d::CenterPivot {
        support,
        support_bias,
        query,
        query_bias,
    } = kernel
    else {
        unreachable!("checked by check_kernel_matches");
    };
    let mut out = plane_conv(x, support, support_bias.as_ref(), Plane::Support, cfg.stride)?;
    let q = plane_conv(x, query, query_bias.as_ref(), Plane::Query, cfg.stride)?;
    out.add_assign(&q)?;
    Ok(out)
}

/// Sequential support conv → normalization → query conv.
pub fn conv4d_separable<T: Real>(x: &Tensor<T>, kernel: &Kernel4d<T>, cfg: &Conv4dConfig) -> Result<Tensor<T>> {
    check_kernel_matches(x, kernel, cfg)?;
    let Kernel4d::Separable {
        support,
        support_bias,
        norm,
        query,
        query_bias,
    } = kernel
    else {
        unreachable!("checked by check_kernel_matches");
    };
    let [sq1, sq2, ss1, ss2] = cfg.stride;
    let mid = plane_conv(x, support, support_bias.as_ref(), Plane::Support, [1, 1, ss1, ss2])?;
    let mid = match norm {
        SeparableNorm::Identity => mid,
        SeparableNorm::Group { spec, gamma, beta } => group_norm(&mid, gamma, beta, *spec)?,
    };
    plane_conv(&mid, query, query_bias.as_ref(), Plane::Query, [sq1, sq2, 1, 1])
}

/// Dispatches on the configured variant.
pub fn conv4d<T: Real>(x: &Tensor<T>, kernel: &Kernel4d<T>, cfg: &Conv4dConfig) -> Result<Tensor<T>> {
    match cfg.variant {
        Variant::Original => conv4d_original(x, kernel, cfg),
        Variant::CenterPivot => conv4d_center_pivot(x, kernel, cfg),
        Variant::Separable => conv4d_separable(x, kernel, cfg),
    }
}
