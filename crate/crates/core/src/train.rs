//! Episodic training, prediction and evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape};
use crate::decoder::{kshot_vote, Prediction, VoteConfig};
use crate::episode::{Episode, EpisodeSource};
use crate::error::{Error, Result};
use crate::metrics::EvalAccumulator;
use crate::model::{Model, ShapeTrace};
use crate::optim::{AdamConfig, AdamState};
use crate::par;
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Episodes per optimizer step.
    pub batch: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Report cadence in steps for the logging callback; 0 disables it.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 1,
            max_steps: 500,
            seed: 0,
            adam: AdamConfig::default(),
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        let a = self.adam;
        if !(a.lr >= 0.0 && a.lr.is_finite()) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }
}

/// Cross-entropy of the query prediction from the first support, and the
/// parameter gradients of `scale * loss`.
pub fn episode_gradients<T: Real>(model: &Model<T>, ep: &Episode<T>, scale: f64) -> Result<(f64, Gradients<T>)> {
    let support = ep
        .supports
        .first()
        .ok_or_else(|| Error::EmptyInput("episode has no support".into()))?;
    let mut tape = Tape::new();
    let logits = model.forward(&mut tape, &ep.query, &support.features, &support.mask, &mut ShapeTrace::new())?;
    let loss = tape.cross_entropy(logits, &ep.query_mask)?;
    let value = tape.value(loss).data()[0].as_f64();
    let scaled = tape.scale(loss, T::lit(scale));
    Ok((value, tape.backward(scaled)?))
}

/// Trains in place; returns the mean batch loss of every step.
pub fn train_episodes<T: Real>(
    model: &mut Model<T>,
    source: &mut dyn EpisodeSource<T>,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    train_episodes_with(model, source, cfg, |_, _| {})
}

/// [`train_episodes`] with `on_log(step, loss)` called every `cfg.log_every` steps
/// and after the last one.
pub fn train_episodes_with<T: Real>(
    model: &mut Model<T>,
    source: &mut dyn EpisodeSource<T>,
    cfg: &TrainConfig,
    mut on_log: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&model.params, cfg.adam);
    let mut trace = Vec::with_capacity(cfg.max_steps);
    let scale = 1.0 / cfg.batch as f64;
    for step in 0..cfg.max_steps {
        let batch = (0..cfg.batch)
            .map(|_| source.sample(&mut rng))
            .collect::<Result<Vec<_>>>()?;
        let m = &*model;
        let results = par::map_range(batch.len(), |i| episode_gradients(m, &batch[i], scale));
        model.params.zero_grad();
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l * scale;
            g.accumulate_into(&mut model.params)?;
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, value: loss });
        }
        adam.step(&mut model.params)?;
        trace.push(loss);
        if cfg.log_every > 0 && ((step + 1) % cfg.log_every == 0 || step + 1 == cfg.max_steps) {
            on_log(step + 1, loss);
        }
    }
    Ok(trace)
}

/// Binary query mask: the hard mask of each support's prediction, combined
/// by voting when there is more than one support.
pub fn predict<T: Real>(model: &Model<T>, ep: &Episode<T>, vote: VoteConfig) -> Result<Tensor<T>> {
    if ep.supports.is_empty() {
        return Err(Error::EmptyInput("episode has no support".into()));
    }
    let masks = par::map_range(ep.supports.len(), |k| {
        let s = &ep.supports[k];
        let mut tape = Tape::inference();
        let logits = model.forward(&mut tape, &ep.query, &s.features, &s.mask, &mut ShapeTrace::new())?;
        Ok(Prediction::from_logits(tape.value(logits).clone())?.hard_mask())
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    if masks.len() == 1 {
        return Ok(masks.into_iter().next().expect("one mask"));
    }
    kshot_vote(&masks, vote)
}

/// Predicts every episode and accumulates the metrics.
pub fn evaluate<T: Real>(
    model: &Model<T>,
    episodes: &[Episode<T>],
    vote: VoteConfig,
    ignore_enabled: bool,
) -> Result<EvalAccumulator> {
    let mut acc = EvalAccumulator::new(ignore_enabled);
    for ep in episodes {
        let pred = predict(model, ep, vote)?;
        acc.accumulate(&pred, &ep.query_mask, ep.class_id as u32)?;
    }
    Ok(acc)
}

/// Outcome of training the toy model on a single synthetic episode.
#[derive(Debug, Clone, PartialEq)]
pub struct OverfitReport {
    /// Mean loss of every step taken.
    pub trace: Vec<f64>,
    /// First step after which the model met both targets.
    pub reached_at: Option<usize>,
    /// Cross-entropy of the model after the last step taken.
    pub final_loss: f64,
    /// Episode mIoU of the model after the last step taken.
    pub miou: f64,
}

/// Cross-entropy and mIoU of the first-support prediction, without a gradient tape.
pub fn episode_fit<T: Real>(model: &Model<T>, ep: &Episode<T>) -> Result<(f64, f64)> {
    let s = ep
        .supports
        .first()
        .ok_or_else(|| Error::EmptyInput("episode has no support".into()))?;
    let mut tape = Tape::inference();
    let logits = model.forward(&mut tape, &ep.query, &s.features, &s.mask, &mut ShapeTrace::new())?;
    let loss = tape.cross_entropy(logits, &ep.query_mask)?;
    let loss = tape.value(loss).data()[0].as_f64();
    let pred = Prediction::from_logits(tape.value(logits).clone())?.hard_mask();
    let mut acc = EvalAccumulator::new(true);
    acc.accumulate(&pred, &ep.query_mask, ep.class_id as u32)?;
    Ok((loss, acc.miou()?))
}

/// Trains a fresh toy-scale center-pivot model on one synthetic episode until
/// its loss is below `loss_bound` and its mIoU is 1, or `max_steps` run out.
/// Model initialization, the episode and the trainer all derive from `seed`.
pub fn overfit_harness(seed: u64, max_steps: usize, loss_bound: f64) -> Result<OverfitReport> {
    Ok(overfit_toy(seed, max_steps, loss_bound)?.report)
}

/// Everything an [`overfit_toy`] run produced.
#[derive(Debug, Clone)]
pub struct OverfitRun {
    pub report: OverfitReport,
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub episode: Episode<f32>,
}

/// [`overfit_harness`], keeping the trained model, optimizer and episode.
pub fn overfit_toy(seed: u64, max_steps: usize, loss_bound: f64) -> Result<OverfitRun> {
    use crate::arch::ModelSpec;
    use crate::conv4d::Variant;
    use crate::episode::{generate_synthetic_episode, SyntheticEpisodeSpec};

    let spec = ModelSpec::toy(Variant::CenterPivot);
    let mut model = Model::<f32>::new(spec.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let ep = generate_synthetic_episode::<f32>(&SyntheticEpisodeSpec::for_spec(&spec, seed))?;
    let mut adam = AdamState::new(&model.params, AdamConfig::default());
    let mut trace = Vec::new();
    let (mut final_loss, mut miou) = episode_fit(&model, &ep)?;
    let mut reached_at = None;
    for step in 1..=max_steps {
        model.params.zero_grad();
        let (loss, grads) = episode_gradients(&model, &ep, 1.0)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: step - 1, value: loss });
        }
        grads.accumulate_into(&mut model.params)?;
        adam.step(&mut model.params)?;
        trace.push(loss);
        if loss < loss_bound {
            (final_loss, miou) = episode_fit(&model, &ep)?;
            if final_loss < loss_bound && miou == 1.0 {
                reached_at = Some(step);
                break;
            }
        }
    }
    if reached_at.is_none() {
        (final_loss, miou) = episode_fit(&model, &ep)?;
    }
    Ok(OverfitRun {
        report: OverfitReport {
            trace,
            reached_at,
            final_loss,
            miou,
        },
        model,
        adam,
        episode: ep,
    })
}

/// Moving average over `window` steps; shorter prefix windows are skipped.
pub fn smooth(trace: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || trace.len() < window {
        return Vec::new();
    }
    trace.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}
