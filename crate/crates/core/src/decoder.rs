//! Predictions, hard masks and K-shot voting.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{softmax_channel, Tensor};

/// Two-channel prediction: channel 0 background, channel 1 foreground.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub logits: Tensor<T>,
    pub probabilities: Tensor<T>,
}

impl<T: Real> Prediction<T> {
    pub fn from_logits(logits: Tensor<T>) -> Result<Self> {
        if logits.rank() != 3 || logits.dims()[0] != 2 {
            return Err(Error::shape(format!(
                "prediction logits must be (2, H, W), got {:?}",
                logits.dims()
            )));
        }
        let probabilities = softmax_channel(&logits)?;
        Ok(Self {
            logits,
            probabilities,
        })
    }

    /// Per-pixel argmax of the probabilities; ties go to background.
    pub fn hard_mask(&self) -> Tensor<T> {
        hard_mask(&self.probabilities).expect("validated in from_logits")
    }
}

/// `(2, H, W)` scores → `(H, W)` in {0, 1}. Foreground only when strictly greater.
pub fn hard_mask<T: Real>(scores: &Tensor<T>) -> Result<Tensor<T>> {
    if scores.rank() != 3 || scores.dims()[0] != 2 {
        return Err(Error::shape(format!(
            "hard mask needs (2, H, W), got {:?}",
            scores.dims()
        )));
    }
    let (h, w) = (scores.dims()[1], scores.dims()[2]);
    let (bg, fg) = scores.data().split_at(h * w);
    let data = bg
        .iter()
        .zip(fg)
        .map(|(&b, &f)| if f > b { T::one() } else { T::zero() })
        .collect();
    Tensor::from_vec(&[h, w], data)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoteConfig {
    pub threshold: f64,
}

impl Default for VoteConfig {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

impl VoteConfig {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(threshold > 0.0 && threshold < 1.0) {
            return Err(Error::input(format!("vote threshold {threshold} outside (0, 1)")));
        }
        Ok(Self { threshold })
    }
}

/// Pixelwise vote over K binary masks, normalized by the largest vote in the
/// image and thresholded. An image with no votes is all background.
pub fn kshot_vote<T: Real>(masks: &[Tensor<T>], cfg: VoteConfig) -> Result<Tensor<T>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::EmptyInput("K-shot vote needs at least one mask".into()))?;
    first.expect_rank(2, "kshot_vote")?;
    let mut votes = vec![0u32; first.len()];
    for m in masks {
        first.expect_same_dims(m)?;
        for (v, &x) in votes.iter_mut().zip(m.data()) {
            if x == T::one() {
                *v += 1;
            } else if x != T::zero() {
                return Err(Error::input(format!("vote mask value {x} is not binary")));
            }
        }
    }
    let max = votes.iter().copied().max().unwrap_or(0);
    let data = votes
        .iter()
        .map(|&v| {
            if max > 0 && v as f64 / max as f64 > cfg.threshold {
                T::one()
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::from_vec(first.dims(), data)
}
