//! Episodes and the synthetic episode generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::arch::{level_groups, LevelFeatures, ModelSpec};
use crate::conv4d::Variant;
use crate::correlation::FeatureSet;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{bilinear_resize, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Support<T> {
    pub features: FeatureSet<T>,
    /// Binary `(H, W)` mask at image resolution.
    pub mask: Tensor<T>,
}

/// One few-shot task.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode<T> {
    pub class_id: usize,
    pub query: FeatureSet<T>,
    /// Ground truth `(H, W)`: 0 background, 1 foreground, 255 ignore.
    pub query_mask: Tensor<T>,
    pub supports: Vec<Support<T>>,
}

impl<T: Real> Episode<T> {
    pub fn shots(&self) -> usize {
        self.supports.len()
    }

    pub fn cast<U: Real>(&self) -> Episode<U> {
        let fs = |f: &FeatureSet<T>| {
            FeatureSet::new(
                f.entries().iter().map(|(l, t)| (*l, t.cast())).collect(),
                f.groups().to_vec(),
            )
            .expect("casting keeps a valid feature set")
        };
        Episode {
            class_id: self.class_id,
            query: fs(&self.query),
            query_mask: self.query_mask.cast(),
            supports: self
                .supports
                .iter()
                .map(|s| Support {
                    features: fs(&s.features),
                    mask: s.mask.cast(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticEpisodeSpec {
    pub seed: u64,
    pub levels: [LevelFeatures; 3],
    pub image_size: usize,
    pub shots: usize,
    /// Rectangles per mask.
    pub blobs: usize,
    /// Inclusive range of rectangle sides, in level-1 cells.
    pub blob_cells: (usize, usize),
    /// Standard deviation of the noise added to the planted pattern.
    pub noise: f64,
    /// Use the query image (features and mask) as every support.
    pub share_image: bool,
    pub class_id: usize,
}

impl Default for SyntheticEpisodeSpec {
    fn default() -> Self {
        Self::for_spec(&ModelSpec::toy(Variant::CenterPivot), 0)
    }
}

impl SyntheticEpisodeSpec {
    /// Episodes shaped for `spec`'s feature schedule.
    pub fn for_spec(spec: &ModelSpec, seed: u64) -> Self {
        Self {
            seed,
            levels: spec.levels,
            image_size: spec.image_size.0,
            shots: 1,
            blobs: 1,
            blob_cells: (3, 5),
            noise: 0.1,
            share_image: false,
            class_id: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s1 = self.levels[0].size;
        if s1 == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(s1) {
            return Err(Error::InvalidSpec(format!(
                "image size {} must be a positive multiple of the level-1 size {s1}",
                self.image_size
            )));
        }
        let (lo, hi) = self.blob_cells;
        if lo == 0 || lo > hi || hi > s1 {
            return Err(Error::InvalidSpec(format!(
                "blob side range {lo}..={hi} must lie in 1..={s1}"
            )));
        }
        if self.shots == 0 || self.blobs == 0 {
            return Err(Error::InvalidSpec("shots and blobs must be at least 1".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::InvalidSpec(format!("noise {} must be finite and non-negative", self.noise)));
        }
        if self.levels.iter().any(|l| l.layers == 0 || l.channels == 0 || l.size == 0) {
            return Err(Error::InvalidSpec("every level needs layers, channels and size".into()));
        }
        Ok(())
    }
}

fn gaussian<T: Real>(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<T> {
    (0..n)
        .map(|_| T::lit(std * rng.sample::<f64, _>(StandardNormal)))
        .collect()
}

/// Union of random rectangles on the level-1 grid, rendered at image
/// resolution along the decoder's upsampling path (2× then to the image size,
/// both half-pixel bilinear) and thresholded at one half. Corners come out
/// rounded, so the mask is exactly reachable by the decoder's last resize.
fn random_mask<T: Real>(spec: &SyntheticEpisodeSpec, rng: &mut ChaCha8Rng) -> Result<Tensor<T>> {
    let s1 = spec.levels[0].size;
    let mut cells = Tensor::<T>::zeros(&[1, s1, s1]);
    for _ in 0..spec.blobs {
        let h = rng.random_range(spec.blob_cells.0..=spec.blob_cells.1);
        let w = rng.random_range(spec.blob_cells.0..=spec.blob_cells.1);
        let (y0, x0) = (rng.random_range(0..=s1 - h), rng.random_range(0..=s1 - w));
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                cells.set(&[0, y, x], T::one());
            }
        }
    }
    let n = spec.image_size;
    let up = bilinear_resize(&bilinear_resize(&cells, (2 * s1, 2 * s1))?, (n, n))?;
    let half = T::lit(0.5);
    Tensor::from_vec(&[n, n], up.data().iter().map(|&v| if v > half { T::one() } else { T::zero() }).collect())
}

/// Features for one image: the layer's prototype plus noise wherever the
/// mask, resized to the layer's grid, is at least one half; an independent
/// standard normal vector everywhere else.
fn image_features<T: Real>(
    spec: &SyntheticEpisodeSpec,
    prototypes: &[Vec<T>],
    mask: &Tensor<T>,
    rng: &mut ChaCha8Rng,
) -> Result<FeatureSet<T>> {
    let mut entries = Vec::new();
    let mut l = 0;
    for lv in &spec.levels {
        let m = bilinear_resize(&mask.clone().reshape(&[1, spec.image_size, spec.image_size])?, (lv.size, lv.size))?;
        for _ in 0..lv.layers {
            let plane = lv.size * lv.size;
            let mut data = vec![T::zero(); lv.channels * plane];
            for x in 0..plane {
                let v: Vec<T> = if m.data()[x] >= T::lit(0.5) {
                    let n = gaussian::<T>(rng, lv.channels, spec.noise);
                    prototypes[l].iter().zip(n).map(|(&p, e)| p + e).collect()
                } else {
                    gaussian(rng, lv.channels, 1.0)
                };
                for (c, v) in v.into_iter().enumerate() {
                    data[c * plane + x] = v;
                }
            }
            entries.push((l, Tensor::from_vec(&[lv.channels, lv.size, lv.size], data)?));
            l += 1;
        }
    }
    FeatureSet::new(entries, level_groups(&spec.levels))
}

/// Query and support images sharing a planted feature pattern under their
/// foreground masks. Deterministic in `spec.seed`.
pub fn generate_synthetic_episode<T: Real>(spec: &SyntheticEpisodeSpec) -> Result<Episode<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let prototypes: Vec<Vec<T>> = spec
        .levels
        .iter()
        .flat_map(|lv| std::iter::repeat_n(lv.channels, lv.layers))
        .map(|c| gaussian(&mut rng, c, 1.0))
        .collect();
    let query_mask = random_mask::<T>(spec, &mut rng)?;
    let query = image_features(spec, &prototypes, &query_mask, &mut rng)?;
    let supports = (0..spec.shots)
        .map(|_| {
            if spec.share_image {
                return Ok(Support {
                    features: query.clone(),
                    mask: query_mask.clone(),
                });
            }
            let mask = random_mask::<T>(spec, &mut rng)?;
            let features = image_features(spec, &prototypes, &mask, &mut rng)?;
            Ok(Support { features, mask })
        })
        .collect::<Result<_>>()?;
    Ok(Episode {
        class_id: spec.class_id,
        query,
        query_mask,
        supports,
    })
}

/// Supplies training episodes. `rng` is the trainer's seeded generator.
pub trait EpisodeSource<T> {
    fn sample(&mut self, rng: &mut ChaCha8Rng) -> Result<Episode<T>>;
}

/// Cycles through a fixed list.
#[derive(Debug, Clone)]
pub struct FixedEpisodes<T> {
    episodes: Vec<Episode<T>>,
    next: usize,
}

impl<T> FixedEpisodes<T> {
    pub fn new(episodes: Vec<Episode<T>>) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::EmptyInput("episode list is empty".into()));
        }
        Ok(Self { episodes, next: 0 })
    }
}

impl<T: Clone> EpisodeSource<T> for FixedEpisodes<T> {
    fn sample(&mut self, _rng: &mut ChaCha8Rng) -> Result<Episode<T>> {
        let e = self.episodes[self.next].clone();
        self.next = (self.next + 1) % self.episodes.len();
        Ok(e)
    }
}

/// A fresh synthetic episode per draw, seeded from the trainer's generator.
#[derive(Debug, Clone)]
pub struct SyntheticEpisodes {
    pub spec: SyntheticEpisodeSpec,
}

impl<T: Real> EpisodeSource<T> for SyntheticEpisodes {
    fn sample(&mut self, rng: &mut ChaCha8Rng) -> Result<Episode<T>> {
        let spec = SyntheticEpisodeSpec {
            seed: rng.random(),
            ..self.spec.clone()
        };
        generate_synthetic_episode(&spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::correlation::{build_hypercorrelation_pyramid, mask_support_features};

    #[test]
    fn same_seed_same_episode() {
        let spec = SyntheticEpisodeSpec::default();
        let a = generate_synthetic_episode::<f32>(&spec).unwrap();
        let b = generate_synthetic_episode::<f32>(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic_episode::<f32>(&SyntheticEpisodeSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn default_matches_toy_schedule() {
        let toy = ModelSpec::toy(Variant::CenterPivot);
        let e = generate_synthetic_episode::<f32>(&SyntheticEpisodeSpec::default()).unwrap();
        let want = toy.feature_dims();
        for fs in std::iter::once(&e.query).chain(e.supports.iter().map(|s| &s.features)) {
            let got: Vec<_> = fs.entries().iter().map(|(_, t)| t.dims().to_vec()).collect();
            assert_eq!(got, want.iter().map(|d| d.to_vec()).collect::<Vec<_>>());
            assert_eq!(fs.groups(), toy.pyramid_groups().as_slice());
        }
        assert_eq!(e.query_mask.dims(), &[64, 64]);
        assert!(e.query_mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(e.query_mask.sum() > 0.0);
    }

    #[test]
    fn noiseless_shared_image_has_unit_foreground_diagonal() {
        let spec = SyntheticEpisodeSpec {
            noise: 0.0,
            share_image: true,
            blobs: 2,
            ..Default::default()
        };
        for seed in 0..4 {
            let e = generate_synthetic_episode::<f64>(&SyntheticEpisodeSpec { seed, ..spec.clone() }).unwrap();
            let s = &e.supports[0];
            let masked = mask_support_features(&s.features, &s.mask).unwrap();
            let pyr = build_hypercorrelation_pyramid(&e.query, &masked).unwrap();
            for (p, h) in pyr.iter().enumerate() {
                let n = spec.levels[p].size;
                let m = bilinear_resize(&e.query_mask.clone().reshape(&[1, 64, 64]).unwrap(), (n, n)).unwrap();
                let mut fg = 0;
                for x in 0..n * n {
                    if m.data()[x] < 0.5 {
                        continue;
                    }
                    fg += 1;
                    for c in 0..h.channels() {
                        let (i, j) = (x / n, x % n);
                        let v = h.tensor.get(&[c, i, j, i, j]);
                        assert!((v - 1.0).abs() < 1e-12, "level {} ({i},{j}) = {v}", p + 1);
                    }
                }
                assert!(p > 0 || fg > 0);
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let ok = SyntheticEpisodeSpec::default();
        for bad in [
            SyntheticEpisodeSpec { image_size: 60, ..ok.clone() },
            SyntheticEpisodeSpec { blob_cells: (0, 2), ..ok.clone() },
            SyntheticEpisodeSpec { blob_cells: (4, 9), ..ok.clone() },
            SyntheticEpisodeSpec { shots: 0, ..ok.clone() },
            SyntheticEpisodeSpec { noise: f64::NAN, ..ok.clone() },
        ] {
            assert!(generate_synthetic_episode::<f32>(&bad).is_err());
        }
    }

    #[test]
    fn sources_are_deterministic() {
        let mut a = SyntheticEpisodes { spec: SyntheticEpisodeSpec::default() };
        let mut b = a.clone();
        let (mut ra, mut rb) = (ChaCha8Rng::seed_from_u64(5), ChaCha8Rng::seed_from_u64(5));
        for _ in 0..3 {
            let x: Episode<f32> = a.sample(&mut ra).unwrap();
            let y: Episode<f32> = b.sample(&mut rb).unwrap();
            assert_eq!(x, y);
        }
        let e = generate_synthetic_episode::<f32>(&SyntheticEpisodeSpec::default()).unwrap();
        let mut fixed = FixedEpisodes::new(vec![e.clone()]).unwrap();
        assert_eq!(fixed.sample(&mut ra).unwrap(), e);
        assert_eq!(fixed.sample(&mut ra).unwrap(), e);
        assert!(FixedEpisodes::<f32>::new(vec![]).is_err());
    }
}
