//! Masked support features, 4D cosine correlations and hypercorrelation pyramids.

use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Real;
use crate::tensor::{bilinear_resize, Tensor};

/// Feature vectors with a norm below this are treated as zero vectors.
pub const ZERO_NORM: f64 = 1e-8;

/// Intermediate backbone features of one image plus their pyramid grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet<T> {
    /// `(layer index, (C_l, H_l, W_l))`, strictly increasing layer index.
    entries: Vec<(usize, Tensor<T>)>,
    /// Layer indices per pyramid level, level 1 (finest) first.
    groups: Vec<Vec<usize>>,
}

impl<T: Real> FeatureSet<T> {
    pub fn new(entries: Vec<(usize, Tensor<T>)>, groups: Vec<Vec<usize>>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::InvalidSpec("feature set has no layers".into()));
        }
        for w in entries.windows(2) {
            if w[0].0 >= w[1].0 {
                return Err(Error::InvalidSpec(format!(
                    "layer indices must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        for (l, t) in &entries {
            if t.rank() != 3 {
                return Err(Error::shape(format!(
                    "layer {l} feature must be (C, H, W), got {:?}",
                    t.dims()
                )));
            }
        }
        let set = Self { entries, groups };
        for (p, g) in set.groups.iter().enumerate() {
            if g.is_empty() {
                return Err(Error::InvalidSpec(format!("pyramid level {} is empty", p + 1)));
            }
            let mut size = None;
            for &l in g {
                let t = set.layer(l).ok_or_else(|| {
                    Error::InvalidSpec(format!("level {} names unknown layer {l}", p + 1))
                })?;
                let hw = (t.dims()[1], t.dims()[2]);
                if *size.get_or_insert(hw) != hw {
                    return Err(Error::InvalidSpec(format!(
                        "level {} mixes spatial sizes {:?} and {hw:?}",
                        p + 1,
                        size.unwrap()
                    )));
                }
            }
        }
        Ok(set)
    }

    pub fn entries(&self) -> &[(usize, Tensor<T>)] {
        &self.entries
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn layer(&self, l: usize) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(i, _)| *i == l).map(|(_, t)| t)
    }

    fn with_entries(&self, entries: Vec<(usize, Tensor<T>)>) -> Self {
        Self {
            entries,
            groups: self.groups.clone(),
        }
    }
}

/// Multiplies every support feature map by the mask resized to its spatial
/// size. Interpolated mask values are used as soft weights.
pub fn mask_support_features<T: Real>(fs: &FeatureSet<T>, mask: &Tensor<T>) -> Result<FeatureSet<T>> {
    let mask = match mask.rank() {
        2 => mask.clone().reshape(&[1, mask.dims()[0], mask.dims()[1]])?,
        3 if mask.dims()[0] == 1 => mask.clone(),
        _ => {
            return Err(Error::shape(format!(
                "support mask must be (H, W), got {:?}",
                mask.dims()
            )))
        }
    };
    if let Some(v) = mask.data().iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
        return Err(Error::input(format!("support mask value {v} outside [0, 1]")));
    }
    let entries = fs
        .entries
        .iter()
        .map(|(l, f)| {
            let (c, h, w) = (f.dims()[0], f.dims()[1], f.dims()[2]);
            let m = bilinear_resize(&mask, (h, w))?;
            let plane = h * w;
            let mut out = f.data().to_vec();
            for ch in 0..c {
                for (v, &mv) in out[ch * plane..][..plane].iter_mut().zip(m.data()) {
                    *v *= mv;
                }
            }
            Ok((*l, Tensor::from_vec(f.dims(), out)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(fs.with_entries(entries))
}

/// `(C, H, W)` → row-normalized `(H·W, C)` plus the norms. Zero vectors stay zero.
fn normalized_rows<T: Real>(f: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let (c, plane) = (f.dims()[0], f.dims()[1] * f.dims()[2]);
    let d = f.data();
    let mut rows = vec![T::zero(); plane * c];
    let mut norms = vec![T::zero(); plane];
    for x in 0..plane {
        let n = (0..c).map(|k| d[k * plane + x] * d[k * plane + x]).sum::<T>().sqrt();
        norms[x] = n;
        if n.as_f64() >= ZERO_NORM {
            for k in 0..c {
                rows[x * c + k] = d[k * plane + x] / n;
            }
        }
    }
    (rows, norms)
}

fn check_pair<T: Real>(fq: &Tensor<T>, fs: &Tensor<T>) -> Result<()> {
    fq.expect_rank(3, "correlation_4d")?;
    if fq.dims() != fs.dims() {
        return Err(Error::shape(format!(
            "query {:?} and support {:?} features differ",
            fq.dims(),
            fs.dims()
        )));
    }
    Ok(())
}

/// `out[x_q, x_s] = max(0, cos(F^q(x_q), F^s(x_s)))`, dims `(H, W, H, W)`.
pub fn correlation_4d<T: Real>(fq: &Tensor<T>, fs: &Tensor<T>) -> Result<Tensor<T>> {
    check_pair(fq, fs)?;
    let (c, h, w) = (fq.dims()[0], fq.dims()[1], fq.dims()[2]);
    let plane = h * w;
    let (q, _) = normalized_rows(fq);
    let (s, _) = normalized_rows(fs);
    let mut out = vec![T::zero(); plane * plane];
    T::gemm_bt(plane, c, plane, &q, &s, &mut out);
    for v in out.iter_mut() {
        *v = v.max(T::zero()).min(T::one());
    }
    Tensor::from_vec(&[h, w, h, w], out)
}

/// Gradients of [`correlation_4d`] with respect to both feature maps.
pub fn correlation_4d_backward<T: Real>(
    fq: &Tensor<T>,
    fs: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_pair(fq, fs)?;
    let (c, h, w) = (fq.dims()[0], fq.dims()[1], fq.dims()[2]);
    let plane = h * w;
    if grad_out.dims() != [h, w, h, w] {
        return Err(Error::shape("correlation gradient has wrong dims"));
    }
    let (q, qn) = normalized_rows(fq);
    let (s, sn) = normalized_rows(fs);
    let mut cos = vec![T::zero(); plane * plane];
    T::gemm_bt(plane, c, plane, &q, &s, &mut cos);
    let masked: Vec<T> = cos
        .iter()
        .zip(grad_out.data())
        .map(|(&cv, &g)| if cv > T::zero() { g } else { T::zero() })
        .collect();
    // d q̂ = G' ŝ ; d ŝ = G'^T q̂
    let mut dq_hat = vec![T::zero(); plane * c];
    T::gemm(plane, plane, c, &masked, &s, &mut dq_hat);
    let mut gt = vec![T::zero(); plane * plane];
    for i in 0..plane {
        for j in 0..plane {
            gt[j * plane + i] = masked[i * plane + j];
        }
    }
    let mut ds_hat = vec![T::zero(); plane * c];
    T::gemm(plane, plane, c, &gt, &q, &mut ds_hat);

    let unnormalize = |hat: &[T], dhat: &[T], norms: &[T]| -> Vec<T> {
        let mut g = vec![T::zero(); c * plane];
        for x in 0..plane {
            let n = norms[x];
            if n.as_f64() < ZERO_NORM {
                continue;
            }
            let r = &hat[x * c..][..c];
            let dr = &dhat[x * c..][..c];
            let dot: T = r.iter().zip(dr).map(|(&a, &b)| a * b).sum();
            for k in 0..c {
                g[k * plane + x] = (dr[k] - r[k] * dot) / n;
            }
        }
        g
    };
    Ok((
        Tensor::from_vec(fq.dims(), unnormalize(&q, &dq_hat, &qn))?,
        Tensor::from_vec(fs.dims(), unnormalize(&s, &ds_hat, &sn))?,
    ))
}

/// Channel-stacked correlations of one pyramid level, dims `(|L_p|, H_p, W_p, H_p, W_p)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypercorrelation<T> {
    /// 1-based pyramid level; level 1 is the finest.
    pub level: usize,
    pub tensor: Tensor<T>,
}

impl<T: Real> Hypercorrelation<T> {
    pub fn channels(&self) -> usize {
        self.tensor.dims()[0]
    }
}

/// Builds one hypercorrelation per pyramid level, stacking the per-layer
/// correlations in increasing layer order.
pub fn build_hypercorrelation_pyramid<T: Real>(
    q: &FeatureSet<T>,
    s_masked: &FeatureSet<T>,
) -> Result<Vec<Hypercorrelation<T>>> {
    if q.groups != s_masked.groups {
        return Err(Error::InvalidSpec(
            "query and support pyramid specs differ".into(),
        ));
    }
    q.groups
        .iter()
        .enumerate()
        .map(|(p, group)| {
            if group.is_empty() {
                return Err(Error::InvalidSpec(format!("pyramid level {} is empty", p + 1)));
            }
            let mut layers = group.clone();
            layers.sort_unstable();
            let corrs = par::map_range(layers.len(), |i| {
                let l = layers[i];
                match (q.layer(l), s_masked.layer(l)) {
                    (Some(a), Some(b)) => correlation_4d(a, b),
                    _ => Err(Error::InvalidSpec(format!("layer {l} missing"))),
                }
            })
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
            let d = corrs[0].dims().to_vec();
            let mut data = Vec::with_capacity(corrs.len() * corrs[0].len());
            for t in &corrs {
                data.extend_from_slice(t.data());
            }
            Ok(Hypercorrelation {
                level: p + 1,
                tensor: Tensor::from_vec(&[corrs.len(), d[0], d[1], d[2], d[3]], data)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_level(f: Tensor<f64>) -> FeatureSet<f64> {
        FeatureSet::new(vec![(0, f)], vec![vec![0]]).unwrap()
    }

    #[test]
    fn masking_identity_zero_and_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = Tensor::<f64>::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
        let fs = single_level(f.clone());
        let ones = Tensor::ones(&[16, 16]);
        assert_eq!(mask_support_features(&fs, &ones).unwrap().layer(0).unwrap(), &f);
        let zeros = Tensor::zeros(&[16, 16]);
        let z = mask_support_features(&fs, &zeros).unwrap();
        assert!(z.layer(0).unwrap().data().iter().all(|&v| v == 0.0));

        let half = Tensor::from_fn(&[4, 4], |i| if i[0] < 2 { 1.0 } else { 0.0 });
        let m = mask_support_features(&fs, &half).unwrap();
        let m = m.layer(0).unwrap();
        for c in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    let want = if y < 2 { f.get(&[c, y, x]) } else { 0.0 };
                    assert_eq!(m.get(&[c, y, x]), want);
                }
            }
        }
    }

    #[test]
    fn masking_rejects_out_of_range() {
        let fs = single_level(Tensor::ones(&[1, 2, 2]));
        let bad = Tensor::from_vec(&[2, 2], vec![0.0, 1.0, 2.0, 0.0]).unwrap();
        assert!(matches!(mask_support_features(&fs, &bad), Err(Error::InvalidInput(_))));
        let nan = Tensor::from_vec(&[1, 1], vec![f64::NAN]).unwrap();
        assert!(mask_support_features(&fs, &nan).is_err());
    }

    #[test]
    fn masking_is_idempotent_at_feature_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let fs = single_level(Tensor::uniform(&[2, 5, 5], -1.0, 1.0, &mut rng));
        let mask = Tensor::from_fn(&[5, 5], |i| ((i[0] + i[1]) % 2) as f64);
        let once = mask_support_features(&fs, &mask).unwrap();
        let twice = mask_support_features(&once, &mask).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn diagonal_orthogonal_and_antiparallel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = Tensor::<f64>::uniform(&[4, 3, 3], 0.1, 1.0, &mut rng);
        let c = correlation_4d(&f, &f).unwrap();
        for y in 0..3 {
            for x in 0..3 {
                assert!((c.get(&[y, x, y, x]) - 1.0).abs() < 1e-12);
            }
        }
        let a = Tensor::from_vec(&[2, 1, 1], vec![1.0, 0.0]).unwrap();
        let b = Tensor::from_vec(&[2, 1, 1], vec![0.0, 3.0]).unwrap();
        assert_eq!(correlation_4d(&a, &b).unwrap().data(), &[0.0]);
        let neg = a.scale(-2.0);
        assert_eq!(correlation_4d(&a, &neg).unwrap().data(), &[0.0]);
    }

    #[test]
    fn zero_support_columns_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fq = Tensor::<f64>::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
        let fs = single_level(Tensor::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng));
        let mask = Tensor::from_fn(&[4, 4], |i| if i[1] >= 2 { 1.0 } else { 0.0 });
        let masked = mask_support_features(&fs, &mask).unwrap();
        let c = correlation_4d(&fq, masked.layer(0).unwrap()).unwrap();
        for qy in 0..4 {
            for qx in 0..4 {
                for sy in 0..4 {
                    for sx in 0..2 {
                        assert_eq!(c.get(&[qy, qx, sy, sx]), 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn correlation_rejects_mismatch() {
        let a = Tensor::<f32>::ones(&[2, 3, 3]);
        assert!(correlation_4d(&a, &Tensor::ones(&[3, 3, 3])).is_err());
    }

    #[test]
    fn pyramid_shapes_and_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let entries: Vec<_> = [(0, 4), (1, 4), (2, 2), (3, 2), (4, 2), (5, 1)]
            .iter()
            .map(|&(l, s)| (l, Tensor::<f64>::uniform(&[5, s, s], 0.1, 1.0, &mut rng)))
            .collect();
        let groups = vec![vec![0, 1], vec![2, 3, 4], vec![5]];
        let fs = FeatureSet::new(entries, groups).unwrap();
        let pyr = build_hypercorrelation_pyramid(&fs, &fs).unwrap();
        let shapes: Vec<_> = pyr.iter().map(|h| h.tensor.dims().to_vec()).collect();
        assert_eq!(shapes, vec![vec![2, 4, 4, 4, 4], vec![3, 2, 2, 2, 2], vec![1, 1, 1, 1, 1]]);
        assert!((pyr[2].tensor.data()[0] - 1.0).abs() < 1e-12);
        assert!(pyr.iter().all(|h| h.tensor.data().iter().all(|&v| (0.0..=1.0).contains(&v))));
    }

    #[test]
    fn feature_set_validation() {
        let t = || Tensor::<f32>::ones(&[1, 2, 2]);
        assert!(FeatureSet::new(vec![(1, t()), (0, t())], vec![vec![0, 1]]).is_err());
        assert!(FeatureSet::new(vec![(0, t())], vec![vec![]]).is_err());
        assert!(FeatureSet::new(
            vec![(0, t()), (1, Tensor::ones(&[1, 3, 3]))],
            vec![vec![0, 1]]
        )
        .is_err());
    }

    proptest! {
        #[test]
        fn values_in_unit_interval_and_scale_invariant(seed in 0u64..500, k in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let fq = Tensor::<f64>::uniform(&[6, 3, 4], -1.0, 1.0, &mut rng);
            let fs = Tensor::<f64>::uniform(&[6, 3, 4], -1.0, 1.0, &mut rng);
            let c = correlation_4d(&fq, &fs).unwrap();
            prop_assert!(c.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let c2 = correlation_4d(&fq.scale(k), &fs).unwrap();
            prop_assert!(c.max_abs_diff(&c2).unwrap() < 1e-6);
        }
    }
}
