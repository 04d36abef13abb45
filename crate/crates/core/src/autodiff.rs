//! Reverse-mode differentiation on a recording tape.
//!
//! Every operation computes its forward value eagerly and, when any input
//! needs a gradient, records a vector–Jacobian product. [`Tape::backward`]
//! replays those in reverse recording order.

use std::collections::HashMap;
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conv4d::{conv4d_original_backward, output_extent, plane_conv, plane_conv_backward, Plane};
use crate::correlation::{correlation_4d, correlation_4d_backward};
use crate::error::{Error, Result};
use crate::norm::{group_norm, group_norm_backward, GroupNormSpec};
use crate::scalar::Real;
use crate::tensor::{resize_planes, resize_planes_backward, softmax_channel, Tensor};

/// Ground-truth value marking a pixel that contributes to neither loss nor metrics.
pub const IGNORE_LABEL: f64 = 255.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Named learnable tensors, in insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::input(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.dims());
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of learnable scalars.
    pub fn scalar_count(&self) -> u64 {
        self.params.iter().map(|p| p.value.len() as u64).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type Backward<T> = Box<dyn FnOnce(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    backward: Option<Backward<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
    consumed: bool,
}

/// Result of [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, ParamId)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to `v`, if `v` required one and was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter gradients, one entry per parameter load on the tape.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|&(n, id)| self.grads[n].as_ref().map(|g| (id, g)))
    }

    /// Adds every parameter gradient into `store`.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (id, g) in self.params() {
            store.get_mut(id).grad.add_assign(g)?;
        }
        Ok(())
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            consumed: false,
        }
    }

    /// A tape that evaluates operations without recording anything.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, t: Tensor<T>, requires_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value: Rc::new(t),
            parents: Vec::new(),
            backward: None,
            requires_grad: requires_grad && self.recording,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false, None)
    }

    /// A free leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, true, None)
    }

    /// Loads the current value of a parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.leaf(store.get(id).value.clone(), true, Some(id))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn rc(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes[v.0].value)
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        parents: &[Var],
        backward: impl FnOnce(&Tensor<T>, &[bool]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Var {
        let requires = self.recording && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Rc::new(value),
            parents: if requires { parents.iter().map(|p| p.0).collect() } else { Vec::new() },
            backward: if requires { Some(Box::new(backward)) } else { None },
            requires_grad: requires,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Back-propagates from a scalar `loss`. The tape can be consumed only once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.dims().to_vec()));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.dims()));
        for i in (0..=loss.0).rev() {
            let Some(back) = self.nodes[i].backward.take() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let parents = std::mem::take(&mut self.nodes[i].parents);
            let needs: Vec<bool> = parents.iter().map(|&p| self.nodes[p].requires_grad).collect();
            let pg = back(&g, &needs)?;
            grads[i] = Some(g);
            for ((&p, gp), need) in parents.iter().zip(pg).zip(&needs) {
                if let (Some(gp), true) = (gp, need) {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&gp)?,
                        slot @ None => *slot = Some(gp),
                    }
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, nd)| nd.param.map(|id| (i, id)))
            .collect();
        Ok(Gradients { grads, params })
    }

    // ---- elementwise and reductions ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, &[a, b], |g, _| Ok(vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.rc(a), self.rc(b));
        let y = av.zip_map(&bv, |x, y| x * y)?;
        Ok(self.push(y, &[a, b], move |g, need| {
            Ok(vec![
                need[0].then(|| g.zip_map(&bv, |x, y| x * y)).transpose()?,
                need[1].then(|| g.zip_map(&av, |x, y| x * y)).transpose()?,
            ])
        }))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let y = self.value(a).scale(k);
        self.push(y, &[a], move |g, _| Ok(vec![Some(g.scale(k))]))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let y = av.map(|v| v.max(T::zero()));
        self.push(y, &[a], move |g, _| {
            Ok(vec![Some(g.zip_map(&av, |g, x| if x > T::zero() { g } else { T::zero() })?)])
        })
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let dims = self.value(a).dims().to_vec();
        let y = Tensor::from_vec(&[1], vec![self.value(a).sum()]).expect("scalar dims");
        self.push(y, &[a], move |g, _| Ok(vec![Some(Tensor::full(&dims, g.data()[0]))]))
    }

    /// `Σ a ∘ w` for a constant weight tensor `w`.
    pub fn weighted_sum(&mut self, a: Var, w: &Tensor<T>) -> Result<Var> {
        let s = self.value(a).zip_map(w, |x, y| x * y)?.sum();
        let w = w.clone();
        let y = Tensor::from_vec(&[1], vec![s])?;
        Ok(self.push(y, &[a], move |g, _| Ok(vec![Some(w.scale(g.data()[0]))])))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let from = self.value(a).dims().to_vec();
        let y = self.value(a).clone().reshape(dims)?;
        Ok(self.push(y, &[a], move |g, _| Ok(vec![Some(g.clone().reshape(&from)?)])))
    }

    // ---- convolutions ----

    /// Differentiable [`plane_conv`].
    pub fn plane_conv(&mut self, x: Var, w: Var, bias: Option<Var>, plane: Plane, stride: [usize; 4]) -> Result<Var> {
        let (xv, wv) = (self.rc(x), self.rc(w));
        let y = plane_conv(&xv, &wv, bias.map(|b| self.value(b)), plane, stride)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push(y, &parents, move |g, need| {
            let (gx, gw, gb) = plane_conv_backward(&xv, &wv, plane, stride, g, need[0])?;
            let mut out = vec![gx, Some(gw)];
            if need.len() == 3 {
                out.push(Some(gb));
            }
            Ok(out)
        }))
    }

    /// Centre-pivot 4D convolution as the sum of the two plane convolutions.
    #[allow(clippy::too_many_arguments)]
    pub fn center_pivot(
        &mut self,
        x: Var,
        support: Var,
        support_bias: Option<Var>,
        query: Var,
        query_bias: Option<Var>,
        stride: [usize; 4],
    ) -> Result<Var> {
        let a = self.plane_conv(x, support, support_bias, Plane::Support, stride)?;
        let b = self.plane_conv(x, query, query_bias, Plane::Query, stride)?;
        self.add(a, b)
    }

    /// Dense 4D convolution with a `(out, in, k, k, k, k)` kernel.
    pub fn conv4d_dense(&mut self, x: Var, w: Var, bias: Option<Var>, stride: [usize; 4]) -> Result<Var> {
        let (xv, wv) = (self.rc(x), self.rc(w));
        xv.expect_rank(5, "conv4d_dense")?;
        let wd = wv.dims();
        if wd.len() != 6 || wd[1] != xv.dims()[0] || wd[2..].iter().any(|&e| e != wd[2]) || wd[2] % 2 == 0 {
            return Err(Error::shape(format!(
                "dense kernel {wd:?} does not fit input {:?}",
                xv.dims()
            )));
        }
        let k = wd[2];
        let mut out = [wd[0], 0, 0, 0, 0];
        for d in 0..4 {
            out[d + 1] = output_extent(xv.dims()[d + 1], k, stride[d])?;
        }
        let bv = bias.map(|b| self.value(b).clone());
        if let Some(b) = &bv {
            if b.dims() != [wd[0]] {
                return Err(Error::shape("dense kernel bias has wrong dims"));
            }
        }
        let y = crate::conv4d::direct_conv4d(&xv, &wv, bv.as_ref(), stride, out);
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push(y, &parents, move |g, need| {
            let (gx, gw, gb) = conv4d_original_backward(&xv, &wv, stride, g, need[0])?;
            let mut out = vec![gx, Some(gw)];
            if need.len() == 3 {
                out.push(Some(gb));
            }
            Ok(out)
        }))
    }

    /// 2D convolution of `(Cin, H, W)`, stride 1, padding `k / 2`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let d = self.value(x).dims().to_vec();
        if d.len() != 3 {
            return Err(Error::shape(format!("conv2d needs (C, H, W), got {d:?}")));
        }
        let x5 = self.reshape(x, &[d[0], d[1], d[2], 1, 1])?;
        let y = self.plane_conv(x5, w, bias, Plane::Query, [1, 1, 1, 1])?;
        let yd = self.value(y).dims().to_vec();
        self.reshape(y, &yd[..3])
    }

    // ---- normalization, resampling, pooling ----

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, spec: GroupNormSpec) -> Result<Var> {
        let (xv, gv) = (self.rc(x), self.rc(gamma));
        let y = group_norm(&xv, &gv, self.value(beta), spec)?;
        Ok(self.push(y, &[x, gamma, beta], move |g, _| {
            let (dx, dg, db) = group_norm_backward(&xv, &gv, spec, g)?;
            Ok(vec![Some(dx), Some(dg), Some(db)])
        }))
    }

    /// Bilinear resize of dims 1 and 2 of a rank-3 or rank-5 tensor.
    pub fn resize(&mut self, x: Var, target: (usize, usize)) -> Result<Var> {
        let d = self.value(x).dims().to_vec();
        if d.len() != 3 && d.len() != 5 {
            return Err(Error::shape(format!("resize needs rank 3 or 5, got {d:?}")));
        }
        crate::tensor::check_dims(&[target.0, target.1])?;
        let r: usize = d[3..].iter().product();
        let layout = (d[0], d[1], d[2], r);
        let y = resize_planes(self.value(x).data(), layout, target);
        let mut od = d.clone();
        od[1] = target.0;
        od[2] = target.1;
        let y = Tensor::from_vec(&od, y)?;
        Ok(self.push(y, &[x], move |g, _| {
            Ok(vec![Some(Tensor::from_vec(&d, resize_planes_backward(g.data(), layout, target))?)])
        }))
    }

    pub fn avg_pool_support(&mut self, x: Var) -> Result<Var> {
        let y = crate::tensor::avg_pool_support_dims(self.value(x))?;
        let d = self.value(x).dims().to_vec();
        let inner = d[3] * d[4];
        Ok(self.push(y, &[x], move |g, _| {
            let inv = T::one() / T::lit(inner as f64);
            let mut out = Vec::with_capacity(g.len() * inner);
            for &v in g.data() {
                out.extend(std::iter::repeat_n(v * inv, inner));
            }
            Ok(vec![Some(Tensor::from_vec(&d, out)?)])
        }))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let y = softmax_channel(self.value(x))?;
        let yv = Rc::new(y.clone());
        Ok(self.push(y, &[x], move |g, _| {
            let (c, plane) = (yv.dims()[0], yv.len() / yv.dims()[0]);
            let (p, gd) = (yv.data(), g.data());
            let mut out = vec![T::zero(); yv.len()];
            for x in 0..plane {
                let dot: T = (0..c).map(|k| p[k * plane + x] * gd[k * plane + x]).sum();
                for k in 0..c {
                    out[k * plane + x] = p[k * plane + x] * (gd[k * plane + x] - dot);
                }
            }
            Ok(vec![Some(Tensor::from_vec(yv.dims(), out)?)])
        }))
    }

    // ---- correlation and loss ----

    pub fn correlation(&mut self, fq: Var, fs: Var) -> Result<Var> {
        let (qv, sv) = (self.rc(fq), self.rc(fs));
        let y = correlation_4d(&qv, &sv)?;
        Ok(self.push(y, &[fq, fs], move |g, _| {
            let (gq, gs) = correlation_4d_backward(&qv, &sv, g)?;
            Ok(vec![Some(gq), Some(gs)])
        }))
    }

    /// Mean pixelwise cross-entropy of `(C, H, W)` logits against an `(H, W)`
    /// label map, computed with log-sum-exp. Pixels labelled
    /// [`IGNORE_LABEL`] are skipped.
    pub fn cross_entropy(&mut self, logits: Var, labels: &Tensor<T>) -> Result<Var> {
        let lv = self.rc(logits);
        let (c, plane, cls) = check_labels(&lv, labels)?;
        let valid = cls.iter().filter(|c| c.is_some()).count();
        if valid == 0 {
            return Err(Error::UndefinedLoss);
        }
        let l = lv.data();
        let mut total = 0.0;
        for (x, k) in cls.iter().enumerate() {
            if let Some(k) = *k {
                let m = (0..c).map(|j| l[j * plane + x]).fold(T::neg_infinity(), T::max);
                let lse = m + (0..c).map(|j| (l[j * plane + x] - m).exp()).sum::<T>().ln();
                total += (lse - l[k * plane + x]).as_f64();
            }
        }
        let y = Tensor::from_vec(&[1], vec![T::lit(total / valid as f64)])?;
        Ok(self.push(y, &[logits], move |g, _| {
            let p = softmax_channel(&lv)?;
            let scale = g.data()[0] / T::lit(valid as f64);
            let mut out = vec![T::zero(); lv.len()];
            for (x, k) in cls.iter().enumerate() {
                if let Some(k) = *k {
                    for j in 0..c {
                        let onehot = if j == k { T::one() } else { T::zero() };
                        out[j * plane + x] = (p.data()[j * plane + x] - onehot) * scale;
                    }
                }
            }
            Ok(vec![Some(Tensor::from_vec(lv.dims(), out)?)])
        }))
    }
}

/// Class index per pixel (`None` for ignored pixels).
fn check_labels<T: Real>(logits: &Tensor<T>, labels: &Tensor<T>) -> Result<(usize, usize, Vec<Option<usize>>)> {
    logits.expect_rank(3, "cross_entropy logits")?;
    let d = logits.dims();
    if labels.dims() != &d[1..] {
        return Err(Error::shape(format!(
            "labels {:?} do not match logits {d:?}",
            labels.dims()
        )));
    }
    let cls = labels
        .data()
        .iter()
        .map(|&v| {
            let v = v.as_f64();
            if v == IGNORE_LABEL {
                Ok(None)
            } else if v >= 0.0 && v.fract() == 0.0 && (v as usize) < d[0] {
                Ok(Some(v as usize))
            } else {
                Err(Error::input(format!("label {v} is neither a class nor ignore")))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((d[0], d[1] * d[2], cls))
}

/// Coordinates sampled by the gradient checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            max_coords: 32,
            seed: 0,
        }
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn sample_coords(len: usize, opts: GradCheckOptions) -> Vec<usize> {
    if len <= opts.max_coords {
        return (0..len).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rand::seq::index::sample(&mut rng, len, opts.max_coords).into_vec()
}

/// Largest relative error between the tape gradient of the scalar `f` at `x`
/// and central differences with step `eps`, over at most 32 coordinates.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_with(f, x, eps, GradCheckOptions::default())
}

pub fn grad_check_with<F>(f: F, x: &Tensor<f64>, eps: f64, opts: GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.input(x.clone());
    let y = f(&mut tape, xv)?;
    let grads = tape.backward(y)?;
    let analytic = grads.wrt(xv).cloned().unwrap_or_else(|| Tensor::zeros(x.dims()));

    let eval = |t: Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::inference();
        let v = tape.input(t);
        let y = f(&mut tape, v)?;
        Ok(tape.value(y).data()[0])
    };
    let mut worst = 0.0f64;
    for i in sample_coords(x.len(), opts) {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Gradient check over the parameters of `store`. Each sample picks a
/// parameter uniformly, then a coordinate within it.
pub fn grad_check_params<F>(f: F, store: &ParamStore<f64>, eps: f64, opts: GradCheckOptions) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if store.is_empty() {
        return Err(Error::EmptyInput("parameter store".into()));
    }
    let mut tape = Tape::new();
    let y = f(&mut tape, store)?;
    let grads = tape.backward(y)?;
    let mut acc = store.clone();
    acc.zero_grad();
    grads.accumulate_into(&mut acc)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::inference();
        let y = f(&mut tape, s)?;
        Ok(tape.value(y).data()[0])
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    for _ in 0..opts.max_coords {
        let id = ParamId(rng.random_range(0..store.len()));
        let i = rng.random_range(0..store.get(id).value.len());
        let orig = store.get(id).value.data()[i];
        probe.get_mut(id).value.data_mut()[i] = orig + eps;
        let up = eval(&probe)?;
        probe.get_mut(id).value.data_mut()[i] = orig - eps;
        let down = eval(&probe)?;
        probe.get_mut(id).value.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        worst = worst.max(relative_error(acc.get(id).grad.data()[i], numeric));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_t(dims: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::uniform(dims, -1.0, 1.0, &mut rng(seed))
    }

    /// Scalar probe `Σ y ∘ r` with a fixed random `r` shaped like `y`.
    fn probe(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
        let r = rand_t(tape.value(y).dims(), 99);
        tape.weighted_sum(y, &r)
    }

    const EPS: f64 = 1e-4;
    const TOL: f64 = 1e-4;

    #[test]
    fn sum_gives_ones() {
        let mut store = ParamStore::new();
        let p = store.insert("p", rand_t(&[3, 4], 0)).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let s = tape.sum(v);
        tape.backward(s).unwrap().accumulate_into(&mut store).unwrap();
        assert_eq!(store.get(p).grad, Tensor::ones(&[3, 4]));
    }

    #[test]
    fn half_square_gives_value() {
        let mut store = ParamStore::new();
        let p = store.insert("p", rand_t(&[5], 1)).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(&store, p);
        let sq = tape.mul(v, v).unwrap();
        let s = tape.sum(sq);
        let l = tape.scale(s, 0.5);
        tape.backward(l).unwrap().accumulate_into(&mut store).unwrap();
        assert!(store.get(p).grad.max_abs_diff(&store.get(p).value).unwrap() < 1e-15);
    }

    #[test]
    fn reuse_accumulates() {
        let mut store = ParamStore::new();
        let p = store.insert("p", rand_t(&[4], 2)).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, p);
        let b = tape.param(&store, p);
        let s1 = tape.sum(a);
        let s2 = tape.sum(b);
        let s3 = tape.sum(a);
        let t = tape.add(s1, s2).unwrap();
        let t = tape.add(t, s3).unwrap();
        tape.backward(t).unwrap().accumulate_into(&mut store).unwrap();
        assert_eq!(store.get(p).grad, Tensor::full(&[4], 3.0));
    }

    #[test]
    fn linearity_of_gradients() {
        let x = rand_t(&[2, 3, 3], 3);
        let grad_of = |a: f64, b: f64| {
            let mut tape = Tape::new();
            let v = tape.input(x.clone());
            let f = {
                let sq = tape.mul(v, v).unwrap();
                tape.sum(sq)
            };
            let g = {
                let r = tape.relu(v);
                probe(&mut tape, r).unwrap()
            };
            let fa = tape.scale(f, a);
            let gb = tape.scale(g, b);
            let l = tape.add(fa, gb).unwrap();
            tape.backward(l).unwrap().wrt(v).unwrap().clone()
        };
        let combined = grad_of(2.0, -3.0);
        let split = grad_of(1.0, 0.0).scale(2.0).add(&grad_of(0.0, 1.0).scale(-3.0)).unwrap();
        assert!(combined.max_abs_diff(&split).unwrap() < 1e-10);
    }

    #[test]
    fn backward_errors() {
        let mut tape = Tape::<f64>::new();
        let v = tape.input(rand_t(&[2], 4));
        assert!(matches!(tape.backward(v), Err(Error::NonScalarLoss(_))));
        let s = tape.sum(v);
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::TapeConsumed)));
    }

    #[test]
    fn inference_tape_records_nothing() {
        let mut tape = Tape::<f32>::inference();
        let v = tape.input(Tensor::ones(&[3]));
        let s = tape.sum(v);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(v).is_none());
        assert_eq!(tape.value(s).data(), &[3.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(rand_t(&[3], 5));
        let x = tape.input(rand_t(&[3], 6));
        let m = tape.mul(c, x).unwrap();
        let s = tape.sum(m);
        let g = tape.backward(s).unwrap();
        assert!(g.wrt(c).is_none());
        assert!(g.wrt(x).is_some());
    }

    #[test]
    fn grad_check_of_sum_is_exact() {
        let err = grad_check(|t, x| Ok(t.sum(x)), &rand_t(&[4, 5], 7), EPS).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn grad_check_plane_convs() {
        for (plane, stride) in [
            (Plane::Support, [1, 1, 1, 1]),
            (Plane::Support, [1, 1, 2, 2]),
            (Plane::Query, [2, 1, 1, 1]),
            (Plane::Query, [1, 1, 1, 1]),
        ] {
            let w = rand_t(&[3, 2, 3, 3], 8);
            let b = rand_t(&[3], 9);
            let x = rand_t(&[2, 4, 3, 5, 4], 10);
            let ex = grad_check(
                |t, x| {
                    let (wv, bv) = (t.constant(w.clone()), t.constant(b.clone()));
                    let y = t.plane_conv(x, wv, Some(bv), plane, stride)?;
                    probe(t, y)
                },
                &x,
                EPS,
            )
            .unwrap();
            let ew = grad_check(
                |t, wv| {
                    let (xv, bv) = (t.constant(x.clone()), t.constant(b.clone()));
                    let y = t.plane_conv(xv, wv, Some(bv), plane, stride)?;
                    probe(t, y)
                },
                &w,
                EPS,
            )
            .unwrap();
            let eb = grad_check(
                |t, bv| {
                    let (xv, wv) = (t.constant(x.clone()), t.constant(w.clone()));
                    let y = t.plane_conv(xv, wv, Some(bv), plane, stride)?;
                    probe(t, y)
                },
                &b,
                EPS,
            )
            .unwrap();
            assert!(ex < TOL && ew < TOL && eb < TOL, "{plane:?} {ex} {ew} {eb}");
        }
    }

    #[test]
    fn grad_check_dense_conv4d() {
        let w = rand_t(&[2, 2, 3, 3, 3, 3], 11);
        let x = rand_t(&[2, 3, 3, 4, 4], 12);
        let e = grad_check(
            |t, x| {
                let wv = t.constant(w.clone());
                let y = t.conv4d_dense(x, wv, None, [1, 1, 2, 2])?;
                probe(t, y)
            },
            &x,
            EPS,
        )
        .unwrap();
        assert!(e < TOL, "{e}");
    }

    #[test]
    fn grad_check_group_norm_conv2d_resize_pool_softmax() {
        let spec = GroupNormSpec::default();
        let gamma = rand_t(&[8], 13);
        let beta = rand_t(&[8], 14);
        let e = grad_check(
            |t, x| {
                let (g, b) = (t.constant(gamma.clone()), t.constant(beta.clone()));
                let y = t.group_norm(x, g, b, spec)?;
                probe(t, y)
            },
            &rand_t(&[8, 2, 3, 2, 2], 15),
            EPS,
        )
        .unwrap();
        assert!(e < TOL, "group norm {e}");

        let w = rand_t(&[4, 3, 3, 3], 16);
        let e = grad_check(
            |t, x| {
                let wv = t.constant(w.clone());
                let y = t.conv2d(x, wv, None)?;
                probe(t, y)
            },
            &rand_t(&[3, 5, 6], 17),
            EPS,
        )
        .unwrap();
        assert!(e < TOL, "conv2d {e}");

        for (dims, target) in [(vec![2, 3, 5], (6, 4)), (vec![2, 3, 3, 2, 2], (5, 5))] {
            let e = grad_check(
                |t, x| {
                    let y = t.resize(x, target)?;
                    probe(t, y)
                },
                &rand_t(&dims, 18),
                EPS,
            )
            .unwrap();
            assert!(e < TOL, "resize {e}");
        }

        let e = grad_check(
            |t, x| {
                let y = t.avg_pool_support(x)?;
                probe(t, y)
            },
            &rand_t(&[2, 2, 2, 3, 3], 19),
            EPS,
        )
        .unwrap();
        assert!(e < TOL, "pool {e}");

        let e = grad_check(
            |t, x| {
                let y = t.softmax(x)?;
                probe(t, y)
            },
            &rand_t(&[3, 4, 4], 20),
            EPS,
        )
        .unwrap();
        assert!(e < TOL, "softmax {e}");
    }

    #[test]
    fn grad_check_correlation_both_sides() {
        let fq = rand_t(&[5, 3, 3], 21);
        let fs = rand_t(&[5, 3, 3], 22);
        let eq = grad_check(
            |t, q| {
                let s = t.constant(fs.clone());
                let y = t.correlation(q, s)?;
                probe(t, y)
            },
            &fq,
            EPS,
        )
        .unwrap();
        let es = grad_check(
            |t, s| {
                let q = t.constant(fq.clone());
                let y = t.correlation(q, s)?;
                probe(t, y)
            },
            &fs,
            EPS,
        )
        .unwrap();
        assert!(eq < TOL && es < TOL, "{eq} {es}");
    }

    #[test]
    fn cross_entropy_values_and_gradient() {
        let mut tape = Tape::<f64>::new();
        let z = tape.input(Tensor::zeros(&[2, 2, 2]));
        let labels = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let l = tape.cross_entropy(z, &labels).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

        // One confident correct pixel, one uniform pixel.
        let logits = Tensor::from_vec(&[2, 1, 2], vec![-40.0, 0.0, 40.0, 0.0]).unwrap();
        let v = tape.input(logits);
        let l = tape.cross_entropy(v, &Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap()).unwrap();
        assert!((tape.value(l).data()[0] - 0.5 * std::f64::consts::LN_2).abs() < 1e-12);

        let labels = Tensor::from_vec(&[3, 3], vec![0., 1., 255., 1., 1., 0., 255., 0., 1.]).unwrap();
        let e = grad_check(|t, x| t.cross_entropy(x, &labels), &rand_t(&[2, 3, 3], 23), EPS).unwrap();
        assert!(e < TOL, "{e}");
    }

    #[test]
    fn cross_entropy_ignore_and_errors() {
        let mut tape = Tape::<f64>::new();
        let x = rand_t(&[2, 2, 2], 24);
        let v = tape.input(x.clone());
        let all_ignored = Tensor::full(&[2, 2], 255.0);
        assert!(matches!(tape.cross_entropy(v, &all_ignored), Err(Error::UndefinedLoss)));
        let bad = Tensor::full(&[2, 2], 0.5);
        assert!(matches!(tape.cross_entropy(v, &bad), Err(Error::InvalidInput(_))));

        // Ignored pixels neither change the loss nor receive gradient.
        let with_ignore = Tensor::from_vec(&[2, 2], vec![1.0, 255.0, 0.0, 255.0]).unwrap();
        let l = tape.cross_entropy(v, &with_ignore).unwrap();
        let g = tape.backward(l).unwrap();
        let g = g.wrt(v).unwrap();
        for c in 0..2 {
            assert_eq!(g.get(&[c, 0, 1]), 0.0);
            assert_eq!(g.get(&[c, 1, 1]), 0.0);
        }
    }

    #[test]
    fn center_pivot_param_grad_check() {
        let mut store = ParamStore::new();
        let ws = store.insert("s", rand_t(&[2, 2, 3, 3], 25)).unwrap();
        let bs = store.insert("sb", rand_t(&[2], 26)).unwrap();
        let wq = store.insert("q", rand_t(&[2, 2, 3, 3], 27)).unwrap();
        let bq = store.insert("qb", rand_t(&[2], 28)).unwrap();
        let x = rand_t(&[2, 4, 4, 4, 4], 29);
        let e = grad_check_params(
            |t, s| {
                let xv = t.constant(x.clone());
                let (a, b, c, d) = (t.param(s, ws), t.param(s, bs), t.param(s, wq), t.param(s, bq));
                let y = t.center_pivot(xv, a, Some(b), c, Some(d), [1, 1, 2, 2])?;
                probe(t, y)
            },
            &store,
            EPS,
            GradCheckOptions { max_coords: 40, seed: 1 },
        )
        .unwrap();
        assert!(e < TOL, "{e}");
    }

    #[test]
    fn duplicate_param_names_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.insert("a", Tensor::ones(&[1])).unwrap();
        assert!(store.insert("a", Tensor::ones(&[1])).is_err());
        assert_eq!(store.id("a"), Some(ParamId(0)));
    }
}
