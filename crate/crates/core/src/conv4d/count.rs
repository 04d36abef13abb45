//! Parameter and FLOP accounting for single 4D convolutions.
//!
//! A multiply-accumulate counts as 2 FLOPs. Bias additions are not counted.
//! The separable variant's intermediate normalization is charged
//! [`NORM_FLOPS_PER_ELEMENT`] per normalized element.

use super::{Conv4dConfig, Variant};
use crate::error::Result;

/// Subtract-mean and scale, then affine: two multiply-adds per element.
pub const NORM_FLOPS_PER_ELEMENT: u64 = 4;

/// Learnable scalars of one convolution (weights, biases and, for the
/// separable variant, its normalization affine parameters).
pub fn conv_params(cfg: &Conv4dConfig) -> u64 {
    let (cin, cout, k) = (
        cfg.in_channels as u64,
        cfg.out_channels as u64,
        cfg.kernel_size as u64,
    );
    let b = if cfg.bias { cout } else { 0 };
    match cfg.variant {
        Variant::Original => k.pow(4) * cin * cout + b,
        Variant::CenterPivot => 2 * (k * k * cin * cout + b),
        Variant::Separable => (k * k * cin * cout + b) + 2 * cout + (k * k * cout * cout + b),
    }
}

/// Weights applied to produce one output scalar. For the separable variant
/// this is the sum over both stages.
pub fn weights_per_output(cfg: &Conv4dConfig) -> u64 {
    let (cin, cout, k) = (
        cfg.in_channels as u64,
        cfg.out_channels as u64,
        cfg.kernel_size as u64,
    );
    match cfg.variant {
        Variant::Original => k.pow(4) * cin,
        Variant::CenterPivot => 2 * k * k * cin,
        Variant::Separable => k * k * cin + k * k * cout,
    }
}

/// FLOPs of one convolution applied to an input of dims `(Cin, Hq, Wq, Hs, Ws)`.
pub fn conv_flops(cfg: &Conv4dConfig, input: &[usize]) -> Result<u64> {
    let out = cfg.output_dims(input)?;
    let n_out: u64 = out.iter().map(|&d| d as u64).product();
    let (cin, cout, k) = (
        cfg.in_channels as u64,
        cfg.out_channels as u64,
        cfg.kernel_size as u64,
    );
    Ok(match cfg.variant {
        Variant::Original | Variant::CenterPivot => 2 * n_out * weights_per_output(cfg),
        Variant::Separable => {
            // First stage keeps every query position.
            let mid = cout * (input[1] * input[2]) as u64 * (out[3] * out[4]) as u64;
            2 * mid * k * k * cin + NORM_FLOPS_PER_ELEMENT * mid + 2 * n_out * k * k * cout
        }
    })
}
