use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use hypercorr::arch::{
    expected_block_kilo, expected_total_deci_mega, round_deci_mega, round_kilo, Backbone, ModelSpec,
};
use hypercorr::checkpoint;
use hypercorr::conv4d::{conv4d, conv_flops, conv_params, Conv4dConfig, Kernel4d, Variant};
use hypercorr::decoder::VoteConfig;
use hypercorr::manifest::{write_episodes, EpisodeManifest, ScheduleTag};
use hypercorr::metrics::EvalAccumulator;
use hypercorr::model::Model;
use hypercorr::train::{overfit_toy, predict};
use hypercorr::verify::{self, gradcheck_suite};
use hypercorr::{par, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::report::{Failure, Report};
use crate::Context;

/// `all` or one value.
fn choose<T: Copy + std::str::FromStr<Err = hypercorr::Error>>(s: &str, all: &[T]) -> Result<Vec<T>, Failure> {
    if s == "all" {
        return Ok(all.to_vec());
    }
    Ok(vec![s.parse().map_err(|e: hypercorr::Error| Failure::usage(e.to_string()))?])
}

fn mega(n: u64) -> String {
    format!("{:.1}M", round_deci_mega(n) as f64 / 10.0)
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// vgg16, resnet50, resnet101 or all.
    #[arg(long)]
    backbone: Option<String>,
    /// center-pivot, separable, original or all.
    #[arg(long)]
    kernel: Option<String>,
}

pub fn params(ctx: &Context, a: &ParamsArgs, report: &mut Report) -> Result<(), Failure> {
    let c = &ctx.config;
    let backbones = choose(&c.pick(a.backbone.clone(), "backbone", "all".into())?, &Backbone::ALL)?;
    let variants = choose(&c.pick(a.kernel.clone(), "kernel", "all".into())?, &Variant::ALL)?;
    for &b in &backbones {
        for &v in &variants {
            let spec = ModelSpec::full(b, v);
            let got = spec.block_params();
            println!("{b} / {v}");
            println!("  {:<10} {:>10} {:>8} {:>9}", "block", "params", "rounded", "published");
            for (name, want) in expected_block_kilo(b) {
                let n = got.iter().find(|(m, _)| *m == name).map_or(0, |&(_, n)| n);
                let key = format!("{b}.{v}.{name}");
                report.value(&key, n);
                let published = if v == Variant::CenterPivot {
                    let ok = report.check(&key, round_kilo(n) == want, format!("{n} rounds to {}K, published {want}K", round_kilo(n)));
                    format!("{want}K{}", if ok { "" } else { " MISMATCH" })
                } else {
                    "-".into()
                };
                println!("  {:<10} {n:>10} {:>7}K {published:>9}", name.to_string(), round_kilo(n));
            }
            let total = spec.total_params();
            report.value(format!("{b}.{v}.total"), total);
            let published = match expected_total_deci_mega(b, v) {
                Some(want) => {
                    let ok = report.check(
                        format!("{b}.{v}.total"),
                        round_deci_mega(total) == want,
                        format!("{total} rounds to {}, published {:.1}M", mega(total), want as f64 / 10.0),
                    );
                    format!("{:.1}M{}", want as f64 / 10.0, if ok { "" } else { " MISMATCH" })
                }
                None => "-".into(),
            };
            println!("  {:<10} {total:>10} {:>8} {published:>9}\n", "total", mega(total));
        }
    }
    let failed = report.failed();
    if failed > 0 {
        println!("{failed} count(s) differ from the published tables");
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Backbone whose full network FLOPs are compared.
    #[arg(long)]
    backbone: Option<Backbone>,
    /// Extent of all four spatial dims of the timed layer input.
    #[arg(long)]
    size: Option<usize>,
    /// Input and output channels of the timed layer.
    #[arg(long)]
    channels: Option<usize>,
    /// Timed runs per variant; the median is reported.
    #[arg(long)]
    repeats: Option<usize>,
}

pub fn bench(ctx: &Context, a: &BenchArgs, report: &mut Report) -> Result<(), Failure> {
    let c = &ctx.config;
    let backbone = c.pick(a.backbone, "backbone", Backbone::Resnet101)?;
    let size = c.pick(a.size, "size", 13)?;
    let channels = c.pick(a.channels, "channels", 16)?;
    let repeats = c.pick(a.repeats, "repeats", 3)?;
    if size == 0 || channels == 0 || repeats == 0 {
        return Err(Failure::usage("size, channels and repeats must be positive"));
    }
    let mode = if par::parallel_enabled() { "parallel" } else { "sequential" };
    println!("{backbone} network, 2 FLOPs per multiply-accumulate");
    let mut net = Vec::new();
    for v in Variant::ALL {
        let f = ModelSpec::full(backbone, v).total_flops()?;
        println!("  {:<13} {:>8.1} GFLOPs", v.name(), f as f64 / 1e9);
        report.value(format!("network_flops.{v}"), f);
        net.push(f);
    }
    report.check(
        "network_flops_order",
        net[0] < net[1] && net[1] < net[2],
        format!("center-pivot {} < separable {} < original {}", net[0], net[1], net[2]),
    );

    let dims = [channels, size, size, size, size];
    println!("\nlayer {channels}->{channels}, k=3, input {dims:?}, {mode}, median of {repeats}");
    println!("  {:<13} {:>10} {:>14} {:>10}", "variant", "params", "FLOPs", "ms");
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);
    let x = Tensor::<f32>::uniform(&dims, 0.0, 1.0, &mut rng);
    let mut layer = Vec::new();
    for v in Variant::ALL {
        let cfg = Conv4dConfig::new(channels, channels, 3, v);
        let k = Kernel4d::<f32>::init(&cfg, &mut rng)?;
        let flops = conv_flops(&cfg, &dims)?;
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let t = Instant::now();
            std::hint::black_box(conv4d(&x, &k, &cfg)?);
            times.push(t.elapsed().as_secs_f64() * 1e3);
        }
        times.sort_by(f64::total_cmp);
        let ms = times[times.len() / 2];
        println!("  {:<13} {:>10} {flops:>14} {ms:>10.2}", v.name(), conv_params(&cfg));
        report.value(format!("layer_flops.{v}"), flops);
        report.value(format!("layer_ms.{v}"), format!("{ms:.3}"));
        layer.push(flops);
    }
    report.check(
        "layer_flops_order",
        layer[0] < layer[1] && layer[1] < layer[2],
        format!("center-pivot {} < separable {} < original {}", layer[0], layer[1], layer[2]),
    );
    Ok(())
}

pub fn gradcheck(ctx: &Context, report: &mut Report) -> Result<(), Failure> {
    println!("central differences, eps {:e}, tolerance {:e}", verify::GRADCHECK_EPS, verify::GRADCHECK_TOL);
    for r in gradcheck_suite(ctx.seed)? {
        let ok = r.passed();
        println!("  {} {:<32} {:.2e}", if ok { "PASS" } else { "FAIL" }, r.name, r.max_rel_err);
        let key = r.name.replace([' ', '(', ')'], "_").replace("__", "_");
        report.check(
            key.trim_end_matches('_'),
            ok,
            format!("max relative error {:e}", r.max_rel_err),
        );
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Adam step budget.
    #[arg(long)]
    steps: Option<usize>,
    /// Cross-entropy the model must get below.
    #[arg(long)]
    loss_bound: Option<f64>,
    /// Save the trained parameters and optimizer state here.
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<PathBuf>,
    /// Write the training episode as a manifest directory here.
    #[arg(long, value_name = "DIR")]
    export_episode: Option<PathBuf>,
}

pub fn train_toy(ctx: &Context, a: &TrainArgs, report: &mut Report) -> Result<(), Failure> {
    let c = &ctx.config;
    let steps = c.pick(a.steps, "steps", 500)?;
    let bound = c.pick(a.loss_bound, "loss_bound", 0.05)?;
    let start = Instant::now();
    let run = overfit_toy(ctx.seed, steps, bound)?;
    let r = &run.report;
    for (i, l) in r.trace.iter().enumerate() {
        if (i + 1) % 25 == 0 || i + 1 == r.trace.len() {
            println!("step {:>4}  loss {l:.5}", i + 1);
        }
    }
    println!("final loss {:.5}, mIoU {:.4}, {:.1?}", r.final_loss, r.miou, start.elapsed());
    report.value("steps", r.trace.len());
    report.value("final_loss", r.final_loss);
    report.value("miou", r.miou);
    report.check(
        "overfit",
        r.reached_at.is_some(),
        match r.reached_at {
            Some(s) => format!("loss < {bound} and mIoU 1 after step {s}"),
            None => format!("not reached in {steps} steps: loss {}, mIoU {}", r.final_loss, r.miou),
        },
    );
    if let Some(dir) = c.pick_opt(a.checkpoint.clone(), "checkpoint")? {
        let meta = [
            ("schedule", ScheduleTag::Toy.to_string()),
            ("kernel", Variant::CenterPivot.to_string()),
            ("seed", ctx.seed.to_string()),
            ("steps", r.trace.len().to_string()),
        ];
        checkpoint::save(&dir, &run.model.params, Some(&run.adam), &meta)?;
        println!("checkpoint written to {}", dir.display());
    }
    if let Some(dir) = c.pick_opt(a.export_episode.clone(), "export_episode")? {
        let path = write_episodes(&dir, ScheduleTag::Toy, std::slice::from_ref(&run.episode), None)?;
        println!("episode manifest written to {}", path.display());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Episode manifest.
    manifest: PathBuf,
    /// Predict with this checkpoint instead of the manifest's prediction files.
    #[arg(long, value_name = "DIR")]
    checkpoint: Option<PathBuf>,
    /// Kernel variant when the checkpoint does not record one.
    #[arg(long)]
    kernel: Option<Variant>,
    /// K-shot vote threshold.
    #[arg(long)]
    vote_threshold: Option<f64>,
    /// Count ignore-labelled pixels as background.
    #[arg(long)]
    no_ignore: bool,
    /// Fail unless mIoU reaches this value.
    #[arg(long)]
    min_miou: Option<f64>,
}

fn load_model(ctx: &Context, dir: &PathBuf, schedule: ScheduleTag, kernel: Option<Variant>) -> Result<Model<f32>, Failure> {
    let meta = checkpoint::read_meta(dir).map_err(|e| Failure::usage(format!("{}: {e}", dir.display())))?;
    if let Some(s) = meta.get("schedule") {
        let s: ScheduleTag = s.parse()?;
        if s != schedule {
            return Err(Failure::usage(format!("checkpoint was trained for {s}, manifest is {schedule}")));
        }
    }
    let variant = match meta.get("kernel") {
        Some(k) => k.parse()?,
        None => ctx.config.pick(kernel, "kernel", Variant::CenterPivot)?,
    };
    let mut model = Model::<f32>::new(schedule.model_spec(variant), &mut ChaCha8Rng::seed_from_u64(ctx.seed))?;
    checkpoint::load_into(dir, &mut model.params)?;
    Ok(model)
}

pub fn eval(ctx: &Context, a: &EvalArgs, report: &mut Report) -> Result<(), Failure> {
    let c = &ctx.config;
    let manifest = EpisodeManifest::load(&a.manifest)?;
    manifest.validate()?;
    let vote = VoteConfig::new(c.pick(a.vote_threshold, "vote_threshold", 0.5)?)?;
    let ignore = !a.no_ignore && c.get::<bool>("ignore")?.unwrap_or(true);
    let model = match c.pick_opt(a.checkpoint.clone(), "checkpoint")? {
        Some(dir) => Some(load_model(ctx, &dir, manifest.schedule, a.kernel)?),
        None => {
            if let Some(e) = manifest.episodes.iter().find(|e| e.prediction.is_none()) {
                return Err(Failure::usage(format!(
                    "{}:{}: episode {} has no prediction file; pass --checkpoint to predict",
                    manifest.source.display(),
                    e.line,
                    e.id
                )));
            }
            None
        }
    };
    let per_episode = par::map_range(manifest.episodes.len(), |i| -> Result<EvalAccumulator, hypercorr::Error> {
        let ep = manifest.load_episode::<f32>(i)?;
        let pred = match &model {
            Some(m) => predict(m, &ep, vote)?,
            None => manifest.load_prediction(i)?.expect("checked above"),
        };
        let mut acc = EvalAccumulator::new(ignore);
        acc.accumulate(&pred, &ep.query_mask, ep.class_id as u32)?;
        Ok(acc)
    });
    let mut acc = EvalAccumulator::new(ignore);
    for a in per_episode {
        acc.merge(&a?)?;
    }
    print!("{}", acc.text_report()?);
    let miou = acc.miou()?;
    report.value("episodes", acc.episodes());
    report.value("miou", miou);
    report.value("fbiou", acc.fbiou()?);
    for (class, iou) in acc.class_iou() {
        report.value(format!("iou.{class}"), iou);
    }
    if let Some(min) = c.pick_opt(a.min_miou, "min_miou")? {
        report.check("min_miou", miou >= min, format!("mIoU {miou} against required {min}"));
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Number of random trials.
    #[arg(long)]
    trials: Option<usize>,
}

pub fn verify_decomposition(ctx: &Context, a: &VerifyArgs, report: &mut Report) -> Result<(), Failure> {
    let trials = ctx.config.pick(a.trials, "trials", 100)?;
    if trials == 0 {
        return Err(Failure::usage("trials must be positive"));
    }
    let r = verify::verify_decomposition(trials, ctx.seed)?;
    let (e32, e64) = (r.max_err_f32(), r.max_err_f64());
    println!("{trials} trials in {:.2?}", r.elapsed);
    println!("  f32 max abs error {e32:.3e} (tolerance {:e})", verify::DECOMPOSITION_TOL_F32);
    println!("  f64 max abs error {e64:.3e} (tolerance {:e})", verify::DECOMPOSITION_TOL_F64);
    report.value("trials", trials);
    report.value("elapsed_ms", r.elapsed.as_millis());
    report.check("f32", e32 < verify::DECOMPOSITION_TOL_F32, format!("max abs error {e32:e}"));
    report.check("f64", e64 < verify::DECOMPOSITION_TOL_F64, format!("max abs error {e64:e}"));
    Ok(())
}
