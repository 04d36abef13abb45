//! The full network: parameters, the 4D encoder and the 2D decoder, evaluated
//! on a [`Tape`].

use rand::Rng;

use crate::arch::{BlockConfig, ModelSpec};
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::conv4d::{Conv4dConfig, Kernel4d, Plane, SeparableNorm};
use crate::correlation::{build_hypercorrelation_pyramid, mask_support_features, FeatureSet, Hypercorrelation};
use crate::error::{Error, Result};
use crate::norm::GroupNormSpec;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConvIds {
    Original {
        weight: ParamId,
        bias: ParamId,
    },
    CenterPivot {
        support: ParamId,
        support_bias: ParamId,
        query: ParamId,
        query_bias: ParamId,
    },
    Separable {
        support: ParamId,
        support_bias: ParamId,
        gamma: ParamId,
        beta: ParamId,
        query: ParamId,
        query_bias: ParamId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct StageIds {
    conv: ConvIds,
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BlockIds {
    stages: [StageIds; 3],
}

/// Named intermediate dims recorded during a forward pass.
pub type ShapeTrace = Vec<(String, Vec<usize>)>;

/// Network parameters for one [`ModelSpec`].
#[derive(Debug, Clone)]
pub struct Model<T> {
    spec: ModelSpec,
    pub params: ParamStore<T>,
    squeeze: [BlockIds; 3],
    mix: [BlockIds; 2],
    decoder: [(ParamId, ParamId); 4],
}

fn add_conv<T: Real>(store: &mut ParamStore<T>, name: &str, cfg: &Conv4dConfig, rng: &mut impl Rng) -> Result<ConvIds> {
    let mut ins = |suffix: &str, t: Tensor<T>| store.insert(format!("{name}.{suffix}"), t);
    let cfg = cfg.with_bias(true);
    Ok(match Kernel4d::<T>::init(&cfg, rng)? {
        Kernel4d::Original { weight, bias } => ConvIds::Original {
            weight: ins("weight", weight)?,
            bias: ins("bias", bias.expect("bias enabled"))?,
        },
        Kernel4d::CenterPivot {
            support,
            support_bias,
            query,
            query_bias,
        } => ConvIds::CenterPivot {
            support: ins("support.weight", support)?,
            support_bias: ins("support.bias", support_bias.expect("bias enabled"))?,
            query: ins("query.weight", query)?,
            query_bias: ins("query.bias", query_bias.expect("bias enabled"))?,
        },
        Kernel4d::Separable {
            support,
            support_bias,
            norm,
            query,
            query_bias,
        } => {
            let SeparableNorm::Group { gamma, beta, .. } = norm else {
                unreachable!("init always builds a group norm");
            };
            ConvIds::Separable {
                support: ins("support.weight", support)?,
                support_bias: ins("support.bias", support_bias.expect("bias enabled"))?,
                gamma: ins("mid_norm.gamma", gamma)?,
                beta: ins("mid_norm.beta", beta)?,
                query: ins("query.weight", query)?,
                query_bias: ins("query.bias", query_bias.expect("bias enabled"))?,
            }
        }
    })
}

fn add_block<T: Real>(store: &mut ParamStore<T>, name: &str, b: &BlockConfig, rng: &mut impl Rng) -> Result<BlockIds> {
    let cfgs = b.conv_configs();
    let mut stages = Vec::with_capacity(3);
    for (i, cfg) in cfgs.iter().enumerate() {
        let stage = format!("{name}.stage{}", i + 1);
        let conv = add_conv(store, &format!("{stage}.conv"), cfg, rng)?;
        let c = cfg.out_channels;
        stages.push(StageIds {
            conv,
            gamma: store.insert(format!("{stage}.norm.gamma"), Tensor::ones(&[c]))?,
            beta: store.insert(format!("{stage}.norm.beta"), Tensor::zeros(&[c]))?,
        });
    }
    Ok(BlockIds {
        stages: [stages[0], stages[1], stages[2]],
    })
}

impl<T: Real> Model<T> {
    /// Fresh parameters: normal weights with variance `2 / fan_in`, zero
    /// biases, unit norm scale and zero norm shift.
    pub fn new(spec: ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut sq = Vec::with_capacity(3);
        for p in 1..=3 {
            sq.push(add_block(&mut params, &format!("squeeze{p}"), &spec.squeeze[p - 1], rng)?);
        }
        let mix1 = add_block(&mut params, "mix1", &spec.mix[0], rng)?;
        let mix2 = add_block(&mut params, "mix2", &spec.mix[1], rng)?;
        let k = spec.decoder.kernel_size;
        let mut dec = Vec::with_capacity(4);
        for (i, (cin, cout)) in spec.decoder.convs().into_iter().enumerate() {
            let std = (2.0 / (cin * k * k) as f64).sqrt();
            let w = params.insert(format!("decoder.conv{}.weight", i + 1), Tensor::normal(&[cout, cin, k, k], std, rng))?;
            let b = params.insert(format!("decoder.conv{}.bias", i + 1), Tensor::zeros(&[cout]))?;
            dec.push((w, b));
        }
        Ok(Self {
            spec,
            params,
            squeeze: [sq[0], sq[1], sq[2]],
            mix: [mix1, mix2],
            decoder: [dec[0], dec[1], dec[2], dec[3]],
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    /// Same structure with every parameter converted to `U`.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            spec: self.spec.clone(),
            params: self.params.cast(),
            squeeze: self.squeeze,
            mix: self.mix,
            decoder: self.decoder,
        }
    }

    fn conv(&self, tape: &mut Tape<T>, ids: &ConvIds, x: Var, cfg: &Conv4dConfig, store: &ParamStore<T>) -> Result<Var> {
        let s = cfg.stride;
        match *ids {
            ConvIds::Original { weight, bias } => {
                let (w, b) = (tape.param(store, weight), tape.param(store, bias));
                tape.conv4d_dense(x, w, Some(b), s)
            }
            ConvIds::CenterPivot {
                support,
                support_bias,
                query,
                query_bias,
            } => {
                let ws = tape.param(store, support);
                let bs = tape.param(store, support_bias);
                let wq = tape.param(store, query);
                let bq = tape.param(store, query_bias);
                tape.center_pivot(x, ws, Some(bs), wq, Some(bq), s)
            }
            ConvIds::Separable {
                support,
                support_bias,
                gamma,
                beta,
                query,
                query_bias,
            } => {
                let ws = tape.param(store, support);
                let bs = tape.param(store, support_bias);
                let mid = tape.plane_conv(x, ws, Some(bs), Plane::Support, [1, 1, s[2], s[3]])?;
                let (g, b) = (tape.param(store, gamma), tape.param(store, beta));
                let spec = GroupNormSpec {
                    groups: crate::conv4d::separable_groups(cfg.out_channels),
                    ..GroupNormSpec::default()
                };
                let mid = tape.group_norm(mid, g, b, spec)?;
                let wq = tape.param(store, query);
                let bq = tape.param(store, query_bias);
                tape.plane_conv(mid, wq, Some(bq), Plane::Query, [s[0], s[1], 1, 1])
            }
        }
    }

    fn block(&self, tape: &mut Tape<T>, ids: &BlockIds, cfg: &BlockConfig, mut x: Var, store: &ParamStore<T>) -> Result<Var> {
        let spec = GroupNormSpec {
            groups: cfg.groups,
            ..GroupNormSpec::default()
        };
        for (st, conv_cfg) in ids.stages.iter().zip(cfg.conv_configs()) {
            let y = self.conv(tape, &st.conv, x, &conv_cfg, store)?;
            let (g, b) = (tape.param(store, st.gamma), tape.param(store, st.beta));
            let y = tape.group_norm(y, g, b, spec)?;
            x = tape.relu(y);
        }
        Ok(x)
    }

    /// `f_p^sqz` applied to the level-`p` hypercorrelation.
    pub fn squeeze_block(&self, tape: &mut Tape<T>, p: usize, c: Var) -> Result<Var> {
        if !(1..=3).contains(&p) {
            return Err(Error::InvalidSpec(format!("no pyramid level {p}")));
        }
        let want = self.spec.hypercorrelation_dims(p);
        if tape.value(c).dims() != want {
            return Err(Error::shape(format!(
                "level {p} hypercorrelation must be {want:?}, got {:?}",
                tape.value(c).dims()
            )));
        }
        self.block(tape, &self.squeeze[p - 1], &self.spec.squeeze[p - 1], c, &self.params)
    }

    /// Top-down merge: resize the coarser query dims to the finer level's,
    /// add, and apply the finer level's mixing block. Returns the level-1 result.
    pub fn mix_blocks(&self, tape: &mut Tape<T>, squeezed: [Var; 3], trace: &mut ShapeTrace) -> Result<Var> {
        let mut x = squeezed[2];
        for p in [2, 1] {
            let d = tape.value(squeezed[p - 1]).dims().to_vec();
            let up = tape.resize(x, (d[1], d[2]))?;
            let merged = tape.add(up, squeezed[p - 1])?;
            x = self.block(tape, &self.mix[p - 1], &self.spec.mix[p - 1], merged, &self.params)?;
            trace.push((format!("C{p}_mix"), tape.value(x).dims().to_vec()));
        }
        Ok(x)
    }

    /// Squeezes, mixes and pools the pyramid into the condensed map `Z`.
    pub fn encode(&self, tape: &mut Tape<T>, pyramid: &[Hypercorrelation<T>], trace: &mut ShapeTrace) -> Result<Var> {
        if pyramid.len() != 3 {
            return Err(Error::InvalidSpec(format!("expected 3 pyramid levels, got {}", pyramid.len())));
        }
        let mut sq = [None; 3];
        for p in (1..=3).rev() {
            let c = tape.constant(pyramid[p - 1].tensor.clone());
            let s = self.squeeze_block(tape, p, c)?;
            trace.push((format!("C{p}_sqz"), tape.value(s).dims().to_vec()));
            sq[p - 1] = Some(s);
        }
        let sq = sq.map(|v| v.expect("every level squeezed"));
        let mix1 = self.mix_blocks(tape, sq, trace)?;
        let z = tape.avg_pool_support(mix1)?;
        trace.push(("Z".into(), tape.value(z).dims().to_vec()));
        Ok(z)
    }

    /// Decoder logits of dims `(2, H, W)` at the image size.
    pub fn decode(&self, tape: &mut Tape<T>, z: Var) -> Result<Var> {
        let d = tape.value(z).dims().to_vec();
        if d.len() != 3 || d[0] != self.spec.decoder.channels[0] {
            return Err(Error::shape(format!(
                "condensed map must be ({}, H, W), got {d:?}",
                self.spec.decoder.channels[0]
            )));
        }
        let mut x = z;
        for (i, &(w, b)) in self.decoder.iter().enumerate() {
            if i == 2 {
                x = tape.resize(x, (2 * d[1], 2 * d[2]))?;
            }
            let (wv, bv) = (tape.param(&self.params, w), tape.param(&self.params, b));
            x = tape.conv2d(x, wv, Some(bv))?;
            if i < 3 {
                x = tape.relu(x);
            }
        }
        tape.resize(x, self.spec.image_size)
    }

    /// Masks the support features, builds the pyramid and returns it.
    pub fn hypercorrelation(
        &self,
        query: &FeatureSet<T>,
        support: &FeatureSet<T>,
        mask: &Tensor<T>,
    ) -> Result<Vec<Hypercorrelation<T>>> {
        self.check_features(query, "query")?;
        self.check_features(support, "support")?;
        let masked = mask_support_features(support, mask)?;
        build_hypercorrelation_pyramid(query, &masked)
    }

    fn check_features(&self, fs: &FeatureSet<T>, what: &str) -> Result<()> {
        let want = self.spec.feature_dims();
        let got: Vec<_> = fs.entries().iter().map(|(_, t)| t.dims().to_vec()).collect();
        if got.len() != want.len() || got.iter().zip(&want).any(|(g, w)| g.as_slice() != w) {
            return Err(Error::shape(format!(
                "{what} features {got:?} do not match the schedule {want:?}"
            )));
        }
        if fs.groups() != self.spec.pyramid_groups().as_slice() {
            return Err(Error::InvalidSpec(format!("{what} pyramid grouping differs from the schedule")));
        }
        Ok(())
    }

    /// Full episode forward for one support: logits `(2, H, W)`.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        query: &FeatureSet<T>,
        support: &FeatureSet<T>,
        mask: &Tensor<T>,
        trace: &mut ShapeTrace,
    ) -> Result<Var> {
        let pyramid = self.hypercorrelation(query, support, mask)?;
        for h in pyramid.iter().rev() {
            trace.push((format!("C{}", h.level), h.tensor.dims().to_vec()));
        }
        let z = self.encode(tape, &pyramid, trace)?;
        let logits = self.decode(tape, z)?;
        trace.push(("M_hat".into(), tape.value(logits).dims().to_vec()));
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::LevelFeatures;
    use crate::autodiff::{grad_check_params, GradCheckOptions};
    use crate::conv4d::Variant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_spec(variant: Variant) -> ModelSpec {
        let lv = |layers, size| LevelFeatures {
            layers,
            channels: 3,
            size,
        };
        ModelSpec::scaled([lv(2, 8), lv(2, 6), lv(1, 4)], [4, 4, 8], 16, variant)
    }

    fn random_pyramid(spec: &ModelSpec, rng: &mut ChaCha8Rng) -> Vec<Hypercorrelation<f64>> {
        (1..=3)
            .map(|p| Hypercorrelation {
                level: p,
                tensor: Tensor::uniform(&spec.hypercorrelation_dims(p), 0.0, 1.0, rng),
            })
            .collect()
    }

    #[test]
    fn param_count_matches_spec() {
        for v in Variant::ALL {
            let spec = ModelSpec::toy(v);
            let m = Model::<f32>::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
            assert_eq!(m.params.scalar_count(), spec.total_params(), "{v}");
        }
    }

    #[test]
    fn toy_forward_shapes() {
        let spec = ModelSpec::toy(Variant::CenterPivot);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Model::<f64>::new(spec.clone(), &mut rng).unwrap();
        let pyr = random_pyramid(&spec, &mut rng);
        let mut tape = Tape::inference();
        let mut trace = ShapeTrace::new();
        let z = m.encode(&mut tape, &pyr, &mut trace).unwrap();
        assert_eq!(tape.value(z).dims(), &[32, 8, 8]);
        let y = m.decode(&mut tape, z).unwrap();
        assert_eq!(tape.value(y).dims(), &[2, 64, 64]);
        assert_eq!(trace[0], ("C3_sqz".to_string(), vec![32, 2, 2, 2, 2]));
    }

    #[test]
    fn zero_parameters_give_half_probability() {
        let spec = ModelSpec::toy(Variant::CenterPivot);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut m = Model::<f64>::new(spec.clone(), &mut rng).unwrap();
        for id in m.params.ids().collect::<Vec<_>>() {
            m.params.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let pyr = random_pyramid(&spec, &mut rng);
        let mut tape = Tape::inference();
        let z = m.encode(&mut tape, &pyr, &mut ShapeTrace::new()).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
        let y = m.decode(&mut tape, z).unwrap();
        let p = tape.softmax(y).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn encoder_is_deterministic() {
        let spec = ModelSpec::toy(Variant::CenterPivot);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Model::<f32>::new(spec.clone(), &mut rng).unwrap();
        let pyr: Vec<_> = random_pyramid(&spec, &mut rng)
            .into_iter()
            .map(|h| Hypercorrelation {
                level: h.level,
                tensor: h.tensor.cast::<f32>(),
            })
            .collect();
        let run = || {
            let mut tape = Tape::inference();
            let z = m.encode(&mut tape, &pyr, &mut ShapeTrace::new()).unwrap();
            tape.value(z).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn wrong_level_shape_rejected() {
        let spec = ModelSpec::toy(Variant::CenterPivot);
        let m = Model::<f32>::new(spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut tape = Tape::inference();
        let c = tape.constant(Tensor::ones(&[1, 2, 2, 2, 2]));
        assert!(m.squeeze_block(&mut tape, 1, c).is_err());
        assert!(m.squeeze_block(&mut tape, 4, c).is_err());
    }

    #[test]
    fn encoder_and_decoder_gradients() {
        for v in [Variant::CenterPivot, Variant::Separable] {
            let spec = tiny_spec(v);
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let m = Model::<f64>::new(spec.clone(), &mut rng).unwrap();
            let pyr = random_pyramid(&spec, &mut rng);
            let r = Tensor::uniform(&[2, 16, 16], -1.0, 1.0, &mut rng);
            let e = grad_check_params(
                |t, store| {
                    let mut mm = m.clone();
                    mm.params = store.clone();
                    let z = mm.encode(t, &pyr, &mut ShapeTrace::new())?;
                    let y = mm.decode(t, z)?;
                    t.weighted_sum(y, &r)
                },
                &m.params,
                1e-4,
                GradCheckOptions { max_coords: 24, seed: 7 },
            )
            .unwrap();
            assert!(e < 1e-4, "{v}: {e}");
        }
    }
}
