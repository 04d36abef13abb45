//! Self-checks shared by the command line and the acceptance suite.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check_params, grad_check_with, GradCheckOptions, ParamStore, Tape, Var};
use crate::conv4d::{conv4d_center_pivot, conv4d_original, Conv4dConfig, Kernel4d, Plane, Variant};
use crate::error::Result;
use crate::norm::GroupNormSpec;
use crate::scalar::Real;
use crate::tensor::Tensor;

pub const DECOMPOSITION_TOL_F32: f64 = 1e-6;
pub const DECOMPOSITION_TOL_F64: f64 = 1e-12;
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionTrial {
    pub input: [usize; 5],
    pub out_channels: usize,
    pub stride: [usize; 4],
    pub err_f32: f64,
    pub err_f64: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionReport {
    pub trials: Vec<DecompositionTrial>,
    pub elapsed: Duration,
}

impl DecompositionReport {
    pub fn max_err_f32(&self) -> f64 {
        self.trials.iter().map(|t| t.err_f32).fold(0.0, f64::max)
    }

    pub fn max_err_f64(&self) -> f64 {
        self.trials.iter().map(|t| t.err_f64).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_err_f32() < DECOMPOSITION_TOL_F32 && self.max_err_f64() < DECOMPOSITION_TOL_F64
    }
}

fn cp_vs_dense<T: Real>(x: &Tensor<T>, k: &Kernel4d<T>, cfg: &Conv4dConfig) -> Result<f64> {
    let cp = conv4d_center_pivot(x, k, cfg)?;
    let dense_cfg = Conv4dConfig {
        variant: Variant::Original,
        ..*cfg
    };
    let dense = conv4d_original(x, &k.center_pivot_to_dense()?, &dense_cfg)?;
    Ok(cp.max_abs_diff(&dense)?.as_f64())
}

/// Compares the center-pivot convolution with the brute-force dense
/// convolution under the equivalent pivot-sparse kernel. Trial 0 uses the
/// largest shape `(2, 6, 6, 6, 6)`; the rest draw every extent from 1..=6,
/// channels from 1..=2 and each stride from {1, 2}. Inputs lie in [0, 1] like
/// correlations; weights follow the layer initialization, biases are uniform
/// in [-1, 1]. The same values are evaluated in f64 and rounded to f32.
pub fn verify_decomposition(trials: usize, seed: u64) -> Result<DecompositionReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(trials);
    for t in 0..trials {
        let (input, cout, stride) = if t == 0 {
            ([2, 6, 6, 6, 6], 2, [1, 1, 2, 2])
        } else {
            let mut d = [0; 5];
            d[0] = rng.random_range(1..=2);
            for e in &mut d[1..] {
                *e = rng.random_range(1..=6);
            }
            (d, rng.random_range(1..=2), [0; 4].map(|_| rng.random_range(1..=2)))
        };
        let cfg = Conv4dConfig::new(input[0], cout, 3, Variant::CenterPivot).with_stride(stride);
        let x = Tensor::<f64>::uniform(&input, 0.0, 1.0, &mut rng);
        let Kernel4d::CenterPivot { support, query, .. } = Kernel4d::<f64>::init(&cfg, &mut rng)? else {
            unreachable!("center-pivot config")
        };
        let k = Kernel4d::CenterPivot {
            support,
            support_bias: Some(Tensor::uniform(&[cout], -1.0, 1.0, &mut rng)),
            query,
            query_bias: Some(Tensor::uniform(&[cout], -1.0, 1.0, &mut rng)),
        };
        let err_f64 = cp_vs_dense(&x, &k, &cfg)?;
        let err_f32 = cp_vs_dense(&x.cast::<f32>(), &k.cast::<f32>(), &cfg)?;
        out.push(DecompositionTrial {
            input,
            out_channels: cout,
            stride,
            err_f32,
            err_f64,
        });
    }
    Ok(DecompositionReport {
        trials: out,
        elapsed: start.elapsed(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
}

impl GradCheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOL
    }
}

/// Scalar probe `Σ y ∘ r` with a fixed random `r` shaped like `y`.
fn probe(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = Tensor::uniform(tape.value(y).dims(), -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    tape.weighted_sum(y, &r)
}

/// Central-difference checks of every differentiable operation in f64.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<GradCheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand = |dims: &[usize]| Tensor::<f64>::uniform(dims, -1.0, 1.0, &mut rng);
    let opts = GradCheckOptions {
        max_coords: 48,
        seed,
    };
    let eps = GRADCHECK_EPS;
    let mut out = Vec::new();
    let mut push = |name, e| out.push(GradCheckResult { name, max_rel_err: e });

    let x = rand(&[2, 4, 4, 4, 4]);
    let mut store = ParamStore::new();
    let ws = store.insert("support", rand(&[3, 2, 3, 3]))?;
    let bs = store.insert("support_bias", rand(&[3]))?;
    let wq = store.insert("query", rand(&[3, 2, 3, 3]))?;
    let bq = store.insert("query_bias", rand(&[3]))?;
    let cp = |t: &mut Tape<f64>, s: &ParamStore<f64>, xv: Var| -> Result<Var> {
        let (a, b, c, d) = (t.param(s, ws), t.param(s, bs), t.param(s, wq), t.param(s, bq));
        let y = t.center_pivot(xv, a, Some(b), c, Some(d), [1, 1, 2, 2])?;
        probe(t, y, seed)
    };
    push(
        "center-pivot conv4d (input)",
        grad_check_with(|t, xv| cp(t, &store, xv), &x, eps, opts)?,
    );
    push(
        "center-pivot conv4d (weights)",
        grad_check_params(
            |t, s| {
                let xv = t.constant(x.clone());
                cp(t, s, xv)
            },
            &store,
            eps,
            opts,
        )?,
    );
    for (plane, stride) in [(Plane::Support, [1, 1, 2, 2]), (Plane::Query, [1, 1, 1, 1])] {
        let w = rand(&[3, 2, 3, 3]);
        let e = grad_check_with(
            |t, xv| {
                let wv = t.constant(w.clone());
                let y = t.plane_conv(xv, wv, None, plane, stride)?;
                probe(t, y, seed)
            },
            &x,
            eps,
            opts,
        )?;
        push(
            if plane == Plane::Support {
                "support-plane conv (input)"
            } else {
                "query-plane conv (input)"
            },
            e,
        );
    }

    let gn = GroupNormSpec::default();
    let gx = rand(&[8, 2, 3, 2, 2]);
    let (gamma, beta) = (rand(&[8]), rand(&[8]));
    push(
        "group norm (input)",
        grad_check_with(
            |t, xv| {
                let (g, b) = (t.constant(gamma.clone()), t.constant(beta.clone()));
                let y = t.group_norm(xv, g, b, gn)?;
                probe(t, y, seed)
            },
            &gx,
            eps,
            opts,
        )?,
    );
    let mut affine = ParamStore::new();
    let g_id = affine.insert("gamma", gamma.clone())?;
    let b_id = affine.insert("beta", beta.clone())?;
    push(
        "group norm (affine)",
        grad_check_params(
            |t, s| {
                let xv = t.constant(gx.clone());
                let (g, b) = (t.param(s, g_id), t.param(s, b_id));
                let y = t.group_norm(xv, g, b, gn)?;
                probe(t, y, seed)
            },
            &affine,
            eps,
            opts,
        )?,
    );

    for (name, dims, target) in [
        ("bilinear resize (feature map)", vec![2, 3, 5], (8, 6)),
        ("bilinear resize (query dims)", vec![2, 3, 3, 2, 2], (6, 5)),
    ] {
        let e = grad_check_with(
            |t, xv| {
                let y = t.resize(xv, target)?;
                probe(t, y, seed)
            },
            &rand(&dims),
            eps,
            opts,
        )?;
        push(name, e);
    }

    let (fq, fs) = (rand(&[6, 3, 3]), rand(&[6, 3, 3]));
    push(
        "cosine correlation (query)",
        grad_check_with(
            |t, q| {
                let s = t.constant(fs.clone());
                let y = t.correlation(q, s)?;
                probe(t, y, seed)
            },
            &fq,
            eps,
            opts,
        )?,
    );
    push(
        "cosine correlation (support)",
        grad_check_with(
            |t, s| {
                let q = t.constant(fq.clone());
                let y = t.correlation(q, s)?;
                probe(t, y, seed)
            },
            &fs,
            eps,
            opts,
        )?,
    );

    let dx = rand(&[4, 5, 6]);
    let mut dec = ParamStore::new();
    let dw = dec.insert("weight", rand(&[3, 4, 3, 3]))?;
    let db = dec.insert("bias", rand(&[3]))?;
    let conv = |t: &mut Tape<f64>, s: &ParamStore<f64>, xv: Var| -> Result<Var> {
        let (w, b) = (t.param(s, dw), t.param(s, db));
        let y = t.conv2d(xv, w, Some(b))?;
        probe(t, y, seed)
    };
    push(
        "decoder conv2d (input)",
        grad_check_with(|t, xv| conv(t, &dec, xv), &dx, eps, opts)?,
    );
    push(
        "decoder conv2d (weights)",
        grad_check_params(
            |t, s| {
                let xv = t.constant(dx.clone());
                conv(t, s, xv)
            },
            &dec,
            eps,
            opts,
        )?,
    );

    let logits = rand(&[2, 4, 4]).scale(3.0);
    push(
        "softmax",
        grad_check_with(
            |t, xv| {
                let y = t.softmax(xv)?;
                probe(t, y, seed)
            },
            &logits,
            eps,
            opts,
        )?,
    );
    let labels = Tensor::from_fn(&[4, 4], |i| match (i[0] * 4 + i[1]) % 5 {
        0 => 255.0,
        1 | 3 => 1.0,
        _ => 0.0,
    });
    push(
        "softmax cross-entropy",
        grad_check_with(|t, xv| t.cross_entropy(xv, &labels), &logits, eps, opts)?,
    );
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decomposition_holds_on_a_few_trials() {
        let r = verify_decomposition(8, 3).unwrap();
        assert_eq!(r.trials.len(), 8);
        assert_eq!(r.trials[0].input, [2, 6, 6, 6, 6]);
        assert!(r.passed(), "{} {}", r.max_err_f32(), r.max_err_f64());
        assert_eq!(r.trials, verify_decomposition(8, 3).unwrap().trials);
    }

    #[test]
    fn gradcheck_suite_passes() {
        let r = gradcheck_suite(0).unwrap();
        assert!(r.len() >= 12);
        for c in &r {
            assert!(c.passed(), "{}: {}", c.name, c.max_rel_err);
        }
    }
}
