//! Architecture schedules, parameter and FLOP accounting, and the expected
//! parameter-count tables the `params` command checks against.

use std::fmt;
use std::str::FromStr;

use crate::conv4d::{conv_flops, conv_params, output_extent, Conv4dConfig, Variant};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backbone {
    Vgg16,
    Resnet50,
    Resnet101,
}

impl Backbone {
    pub const ALL: [Backbone; 3] = [Backbone::Vgg16, Backbone::Resnet50, Backbone::Resnet101];

    pub fn tag(self) -> &'static str {
        match self {
            Backbone::Vgg16 => "vgg16",
            Backbone::Resnet50 => "resnet50",
            Backbone::Resnet101 => "resnet101",
        }
    }

    /// Extracted features per pyramid level, level 1 (finest) first.
    pub fn levels(self) -> [LevelFeatures; 3] {
        let lv = |layers, channels, size| LevelFeatures {
            layers,
            channels,
            size,
        };
        match self {
            Backbone::Vgg16 => [lv(3, 512, 50), lv(3, 512, 25), lv(1, 512, 12)],
            Backbone::Resnet50 => [lv(4, 512, 50), lv(6, 1024, 25), lv(3, 2048, 13)],
            Backbone::Resnet101 => [lv(4, 512, 50), lv(23, 1024, 25), lv(3, 2048, 13)],
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Backbone::ALL
            .into_iter()
            .find(|b| b.tag() == s)
            .ok_or_else(|| Error::Config(format!("unknown backbone {s:?} (vgg16, resnet50, resnet101)")))
    }
}

/// Feature maps of one pyramid level: `layers` maps of `(channels, size, size)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LevelFeatures {
    pub layers: usize,
    pub channels: usize,
    pub size: usize,
}

/// One (4D conv, group norm, ReLU) stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageSpec {
    pub out_channels: usize,
    pub kernel_size: usize,
    pub support_stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub stages: [StageSpec; 3],
    pub groups: usize,
    pub variant: Variant,
}

impl BlockConfig {
    pub fn out_channels(&self) -> usize {
        self.stages[2].out_channels
    }

    pub fn conv_configs(&self) -> [Conv4dConfig; 3] {
        let mut cin = self.in_channels;
        self.stages.map(|s| {
            let cfg = Conv4dConfig::new(cin, s.out_channels, s.kernel_size, self.variant)
                .with_support_stride(s.support_stride);
            cin = s.out_channels;
            cfg
        })
    }

    /// Convolution parameters plus the group-norm scale and shift of every stage.
    pub fn param_count(&self) -> u64 {
        self.conv_configs()
            .iter()
            .map(|c| conv_params(c) + 2 * c.out_channels as u64)
            .sum()
    }

    /// Dims after each stage for an input of dims `(C, Hq, Wq, Hs, Ws)`.
    pub fn stage_dims(&self, input: &[usize]) -> Result<[[usize; 5]; 3]> {
        let mut cur = input.to_vec();
        let mut out = [[0; 5]; 3];
        for (i, c) in self.conv_configs().iter().enumerate() {
            out[i] = c.output_dims(&cur)?;
            cur = out[i].to_vec();
        }
        Ok(out)
    }

    pub fn flops(&self, input: &[usize]) -> Result<u64> {
        let mut cur = input.to_vec();
        let mut total = 0;
        for c in self.conv_configs() {
            total += conv_flops(&c, &cur)?;
            cur = c.output_dims(&cur)?.to_vec();
        }
        Ok(total)
    }
}

/// The 2D decoder: conv c0→c1, ReLU, conv c1→c2, ReLU, ×2 resize, conv
/// c2→c3, ReLU, conv c3→c4, resize to the image size. All convs are biased.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderSpec {
    pub channels: [usize; 5],
    pub kernel_size: usize,
}

impl DecoderSpec {
    /// `(in, out)` per conv.
    pub fn convs(&self) -> [(usize, usize); 4] {
        let c = self.channels;
        [(c[0], c[1]), (c[1], c[2]), (c[2], c[3]), (c[3], c[4])]
    }

    pub fn param_count(&self) -> u64 {
        let k2 = (self.kernel_size * self.kernel_size) as u64;
        self.convs()
            .iter()
            .map(|&(i, o)| k2 * i as u64 * o as u64 + o as u64)
            .sum()
    }

    /// FLOPs for a condensed map of spatial size `(h, w)`.
    pub fn flops(&self, (h, w): (usize, usize)) -> u64 {
        let k2 = (self.kernel_size * self.kernel_size) as u64;
        let (lo, hi) = ((h * w) as u64, (4 * h * w) as u64);
        let conv = |n: u64, (i, o): (usize, usize)| 2 * n * o as u64 * k2 * i as u64;
        let c = self.convs();
        conv(lo, c[0]) + conv(lo, c[1]) + conv(hi, c[2]) + conv(hi, c[3])
    }
}

/// Complete network schedule for one feature pyramid.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub backbone: Option<Backbone>,
    pub levels: [LevelFeatures; 3],
    /// Squeezing block per level, index `p - 1`.
    pub squeeze: [BlockConfig; 3],
    /// Mixing blocks: index 0 runs at level 1, index 1 at level 2.
    pub mix: [BlockConfig; 2],
    pub decoder: DecoderSpec,
    pub image_size: (usize, usize),
}

pub const BLOCK_CHANNELS: [usize; 3] = [16, 64, 128];
pub const GROUPS: usize = 4;
pub const IMAGE_SIZE: usize = 400;

/// Per-level `(kernel, support stride)` of the three squeezing stages.
const FULL_SQUEEZE: [[(usize, usize); 3]; 3] = [
    [(5, 4), (5, 4), (3, 2)],
    [(5, 4), (3, 2), (3, 2)],
    [(3, 2), (3, 2), (3, 2)],
];

fn block(in_channels: usize, channels: [usize; 3], ks: [(usize, usize); 3], variant: Variant) -> BlockConfig {
    let mut stages = [StageSpec {
        out_channels: 0,
        kernel_size: 0,
        support_stride: 0,
    }; 3];
    for i in 0..3 {
        stages[i] = StageSpec {
            out_channels: channels[i],
            kernel_size: ks[i].0,
            support_stride: ks[i].1,
        };
    }
    BlockConfig {
        in_channels,
        stages,
        groups: GROUPS,
        variant,
    }
}

/// Layer indices per level, numbered from 0 starting at level 1.
pub fn level_groups(levels: &[LevelFeatures]) -> Vec<Vec<usize>> {
    let mut next = 0;
    levels
        .iter()
        .map(|l| {
            let g = (next..next + l.layers).collect();
            next += l.layers;
            g
        })
        .collect()
}

/// Support strides that halve the extent while it exceeds 2, then stay at 1.
pub fn halving_strides(size: usize) -> [usize; 3] {
    let mut n = size;
    [0; 3].map(|_| {
        if n > 2 {
            n = output_extent(n, 3, 2).expect("positive extent");
            2
        } else {
            1
        }
    })
}

impl ModelSpec {
    /// Full-scale network for a backbone tag, as in the architecture tables.
    pub fn full(backbone: Backbone, variant: Variant) -> Self {
        let levels = backbone.levels();
        let squeeze = [0, 1, 2].map(|p| block(levels[p].layers, BLOCK_CHANNELS, FULL_SQUEEZE[p], variant));
        let c = BLOCK_CHANNELS[2];
        let mix = [0; 2].map(|_| block(c, [c; 3], [(3, 1); 3], variant));
        Self {
            backbone: Some(backbone),
            levels,
            squeeze,
            mix,
            decoder: DecoderSpec {
                channels: [c, 128, 64, 64, 2],
                kernel_size: 3,
            },
            image_size: (IMAGE_SIZE, IMAGE_SIZE),
        }
    }

    /// A reduced network: `k = 3` everywhere, support strides from
    /// [`halving_strides`], block channels `channels` and a decoder
    /// `c → c → c/2 → c/2 → 2` where `c = channels[2]`.
    pub fn scaled(levels: [LevelFeatures; 3], channels: [usize; 3], image: usize, variant: Variant) -> Self {
        let squeeze = [0, 1, 2].map(|p| {
            let s = halving_strides(levels[p].size);
            block(levels[p].layers, channels, [(3, s[0]), (3, s[1]), (3, s[2])], variant)
        });
        let c = channels[2];
        let mix = [0; 2].map(|_| block(c, [c; 3], [(3, 1); 3], variant));
        Self {
            backbone: None,
            levels,
            squeeze,
            mix,
            decoder: DecoderSpec {
                channels: [c, c, c / 2, c / 2, 2],
                kernel_size: 3,
            },
            image_size: (image, image),
        }
    }

    /// The training-test scale: 64×64 images, pyramid sizes 8/4/2, block
    /// channels 8→16→32.
    pub fn toy(variant: Variant) -> Self {
        let lv = |layers, size| LevelFeatures {
            layers,
            channels: 16,
            size,
        };
        Self::scaled([lv(2, 8), lv(2, 4), lv(1, 2)], [8, 16, 32], 64, variant)
    }

    pub fn variant(&self) -> Variant {
        self.squeeze[0].variant
    }

    pub fn feature_count(&self) -> usize {
        self.levels.iter().map(|l| l.layers).sum()
    }

    /// Layer indices per level, numbered from 0 starting at level 1.
    pub fn pyramid_groups(&self) -> Vec<Vec<usize>> {
        level_groups(&self.levels)
    }

    /// `(C, H, W)` of every feature layer in index order.
    pub fn feature_dims(&self) -> Vec<[usize; 3]> {
        self.levels
            .iter()
            .flat_map(|l| std::iter::repeat_n([l.channels, l.size, l.size], l.layers))
            .collect()
    }

    pub fn hypercorrelation_dims(&self, p: usize) -> [usize; 5] {
        let l = self.levels[p - 1];
        [l.layers, l.size, l.size, l.size, l.size]
    }

    pub fn validate(&self) -> Result<()> {
        let mut support = None;
        for p in 1..=3 {
            let l = self.levels[p - 1];
            if l.layers == 0 || l.channels == 0 || l.size == 0 {
                return Err(Error::InvalidSpec(format!("level {p} is empty")));
            }
            let b = &self.squeeze[p - 1];
            if b.in_channels != l.layers {
                return Err(Error::InvalidSpec(format!(
                    "squeeze block {p} expects {} channels but level has {} layers",
                    b.in_channels, l.layers
                )));
            }
            let out = b.stage_dims(&self.hypercorrelation_dims(p))?[2];
            let s = (out[3], out[4]);
            if *support.get_or_insert(s) != s {
                return Err(Error::InvalidSpec(format!(
                    "level {p} squeezes support to {s:?}, other levels to {:?}",
                    support.unwrap()
                )));
            }
        }
        for b in self.squeeze.iter().chain(&self.mix) {
            for c in b.conv_configs() {
                c.validate()?;
                if c.out_channels % b.groups != 0 {
                    return Err(Error::InvalidSpec(format!(
                        "{} channels not divisible into {} groups",
                        c.out_channels, b.groups
                    )));
                }
            }
        }
        let c = self.squeeze[0].out_channels();
        if self.squeeze.iter().any(|b| b.out_channels() != c)
            || self.mix.iter().any(|b| b.in_channels != c || b.out_channels() != c)
            || self.decoder.channels[0] != c
            || self.decoder.channels[4] != 2
        {
            return Err(Error::InvalidSpec("block channel counts do not chain".into()));
        }
        Ok(())
    }

    /// Learnable parameters per block, in table order.
    pub fn block_params(&self) -> Vec<(BlockName, u64)> {
        vec![
            (BlockName::Squeeze(3), self.squeeze[2].param_count()),
            (BlockName::Squeeze(2), self.squeeze[1].param_count()),
            (BlockName::Squeeze(1), self.squeeze[0].param_count()),
            (BlockName::Mix(2), self.mix[1].param_count()),
            (BlockName::Mix(1), self.mix[0].param_count()),
            (BlockName::Decoder, self.decoder.param_count()),
        ]
    }

    pub fn total_params(&self) -> u64 {
        self.block_params().iter().map(|(_, n)| n).sum()
    }

    /// FLOPs per block in table order for one query/support pair.
    pub fn block_flops(&self) -> Result<Vec<(BlockName, u64)>> {
        let sq = |p: usize| self.squeeze[p - 1].flops(&self.hypercorrelation_dims(p));
        let squeezed = |p: usize| -> Result<[usize; 5]> {
            Ok(self.squeeze[p - 1].stage_dims(&self.hypercorrelation_dims(p))?[2])
        };
        let s1 = self.levels[0].size;
        Ok(vec![
            (BlockName::Squeeze(3), sq(3)?),
            (BlockName::Squeeze(2), sq(2)?),
            (BlockName::Squeeze(1), sq(1)?),
            (BlockName::Mix(2), self.mix[1].flops(&squeezed(2)?)?),
            (BlockName::Mix(1), self.mix[0].flops(&squeezed(1)?)?),
            (BlockName::Decoder, self.decoder.flops((s1, s1))),
        ])
    }

    pub fn total_flops(&self) -> Result<u64> {
        Ok(self.block_flops()?.iter().map(|(_, n)| n).sum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockName {
    Squeeze(usize),
    Mix(usize),
    Decoder,
}

impl fmt::Display for BlockName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockName::Squeeze(p) => write!(f, "squeeze-{p}"),
            BlockName::Mix(p) => write!(f, "mix-{p}"),
            BlockName::Decoder => f.write_str("decoder"),
        }
    }
}

/// Published per-block parameter counts in thousands, table order
/// (squeeze 3, 2, 1, mix 2, 1, decoder), for the center-pivot network.
pub fn expected_block_kilo(backbone: Backbone) -> [(BlockName, u64); 6] {
    let sq = match backbone {
        Backbone::Vgg16 => [167, 169, 202],
        Backbone::Resnet50 => [168, 172, 203],
        Backbone::Resnet101 => [168, 185, 203],
    };
    [
        (BlockName::Squeeze(3), sq[0]),
        (BlockName::Squeeze(2), sq[1]),
        (BlockName::Squeeze(1), sq[2]),
        (BlockName::Mix(2), 886),
        (BlockName::Mix(1), 886),
        (BlockName::Decoder, 259),
    ]
}

/// Published network totals in tenths of a million, where stated.
pub fn expected_total_deci_mega(backbone: Backbone, variant: Variant) -> Option<u64> {
    match (backbone, variant) {
        (_, Variant::CenterPivot) => Some(26),
        (Backbone::Resnet101, Variant::Original) => Some(113),
        _ => None,
    }
}

pub fn round_kilo(n: u64) -> u64 {
    (n + 500) / 1000
}

pub fn round_deci_mega(n: u64) -> u64 {
    (n + 50_000) / 100_000
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_block_counts() {
        let spec = ModelSpec::full(Backbone::Resnet101, Variant::CenterPivot);
        assert_eq!(spec.mix[0].param_count(), 886_272);
        assert_eq!(spec.mix[0].param_count(), 3 * 2 * (9 * 128 * 128 + 128) + 3 * 2 * 128);
        assert_eq!(spec.decoder.param_count(), 259_458);
        let orig = ModelSpec::full(Backbone::Resnet101, Variant::Original);
        assert_eq!(orig.mix[0].param_count(), 3 * (81 * 128 * 128 + 128) + 3 * 2 * 128);
        assert_eq!(orig.mix[0].param_count(), 3_982_464);
    }

    #[test]
    fn all_tables_round_correctly() {
        for b in Backbone::ALL {
            let spec = ModelSpec::full(b, Variant::CenterPivot);
            spec.validate().unwrap();
            let got: Vec<_> = spec.block_params().iter().map(|&(n, c)| (n, round_kilo(c))).collect();
            assert_eq!(got, expected_block_kilo(b).to_vec(), "{b}");
            assert_eq!(round_deci_mega(spec.total_params()), 26, "{b}");
        }
        let orig = ModelSpec::full(Backbone::Resnet101, Variant::Original);
        assert_eq!(round_deci_mega(orig.total_params()), 113);
    }

    #[test]
    fn squeeze_reaches_two_by_two() {
        for b in Backbone::ALL {
            let spec = ModelSpec::full(b, Variant::CenterPivot);
            for p in 1..=3 {
                let d = spec.squeeze[p - 1].stage_dims(&spec.hypercorrelation_dims(p)).unwrap();
                let s = spec.levels[p - 1].size;
                assert_eq!(d[2], [128, s, s, 2, 2]);
            }
        }
    }

    #[test]
    fn flops_ordering() {
        let f = |v| ModelSpec::full(Backbone::Resnet101, v).total_flops().unwrap();
        let (cp, sep, orig) = (f(Variant::CenterPivot), f(Variant::Separable), f(Variant::Original));
        assert!(cp < sep && sep < orig, "{cp} {sep} {orig}");
    }

    #[test]
    fn scaled_schedules() {
        assert_eq!(halving_strides(8), [2, 2, 1]);
        assert_eq!(halving_strides(6), [2, 2, 1]);
        assert_eq!(halving_strides(4), [2, 1, 1]);
        assert_eq!(halving_strides(2), [1, 1, 1]);
        let toy = ModelSpec::toy(Variant::CenterPivot);
        toy.validate().unwrap();
        assert_eq!(toy.pyramid_groups(), vec![vec![0, 1], vec![2, 3], vec![4]]);
        assert_eq!(toy.feature_dims().len(), 5);
    }

    #[test]
    fn backbone_tags_parse() {
        for b in Backbone::ALL {
            assert_eq!(b.tag().parse::<Backbone>().unwrap(), b);
        }
        assert!("resnet18".parse::<Backbone>().is_err());
        let counts: Vec<usize> = Backbone::ALL
            .iter()
            .map(|b| b.levels().iter().map(|l| l.layers).sum())
            .collect();
        assert_eq!(counts, vec![7, 13, 30]);
    }
}
