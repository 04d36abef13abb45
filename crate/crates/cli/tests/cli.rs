use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use hypercorr::arch::ModelSpec;
use hypercorr::conv4d::Variant;
use hypercorr::episode::{generate_synthetic_episode, SyntheticEpisodeSpec};
use hypercorr::manifest::{write_episodes, ScheduleTag};
use hypercorr::Tensor;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hypercorr")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn report_lines(path: &Path) -> Vec<String> {
    fs::read_to_string(path).unwrap().lines().map(str::to_string).collect()
}

fn toy_episodes(n: u64) -> Vec<hypercorr::episode::Episode<f32>> {
    let spec = ModelSpec::toy(Variant::CenterPivot);
    (0..n)
        .map(|s| {
            let mut e = SyntheticEpisodeSpec::for_spec(&spec, s);
            e.class_id = s as usize % 2;
            generate_synthetic_episode(&e).unwrap()
        })
        .collect()
}

#[test]
fn params_totals() {
    let o = run(&["params", "--backbone", "resnet101", "--kernel", "center-pivot"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).lines().any(|l| l.trim_start().starts_with("total") && l.contains("2.6M")));
    let o = run(&["params", "--backbone", "resnet101", "--kernel", "original"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).lines().any(|l| l.trim_start().starts_with("total") && l.contains("11.3M")));
    assert_eq!(run(&["params"]).status.code(), Some(0));
    assert_eq!(run(&["params", "--backbone", "resnet18"]).status.code(), Some(2));
}

#[test]
fn verify_decomposition_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("r.txt");
    let o = run(&["verify-decomposition", "--trials", "100", "--seed", "0", "--report", report.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let lines = report_lines(&report);
    for want in ["command=verify-decomposition", "status=pass", "exit=0", "check.f32=pass", "check.f64=pass"] {
        assert!(lines.iter().any(|l| l == want), "{want} in {lines:?}");
    }
}

#[test]
fn config_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    let report = dir.path().join("r.txt");
    fs::write(&cfg, format!("# test\nseed=9\ntrials=3\nreport={}\n", report.display())).unwrap();
    let o = run(&["verify-decomposition", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let lines = report_lines(&report);
    assert!(lines.contains(&"value.seed=9".to_string()) && lines.contains(&"value.trials=3".to_string()));

    run(&["verify-decomposition", "--config", cfg.to_str().unwrap(), "--seed", "4", "--trials", "5"]);
    let lines = report_lines(&report);
    assert!(lines.contains(&"value.seed=4".to_string()) && lines.contains(&"value.trials=5".to_string()));

    fs::write(&cfg, "trials=many\n").unwrap();
    let o = run(&["verify-decomposition", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("status=error"));
    assert_eq!(run(&["verify-decomposition", "--config", "/nonexistent/c.txt"]).status.code(), Some(2));
}

#[test]
fn gradcheck_is_deterministic_by_seed() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.txt"), dir.path().join("b.txt"));
    assert_eq!(run(&["gradcheck", "--seed", "5", "--report", a.to_str().unwrap()]).status.code(), Some(0));
    assert_eq!(run(&["gradcheck", "--seed", "5", "--report", b.to_str().unwrap()]).status.code(), Some(0));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert!(report_lines(&a).contains(&"failed=0".to_string()));
}

#[test]
fn eval_of_ground_truth_predictions_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let eps = toy_episodes(3);
    let preds: Vec<Tensor<f32>> = eps.iter().map(|e| e.query_mask.clone()).collect();
    let manifest = write_episodes(dir.path(), ScheduleTag::Toy, &eps, Some(&preds)).unwrap();
    let report = dir.path().join("r.txt");
    let o = run(&["eval", manifest.to_str().unwrap(), "--min-miou", "1", "--report", report.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let lines = report_lines(&report);
    assert!(lines.contains(&"value.miou=1".to_string()) && lines.contains(&"value.fbiou=1".to_string()), "{lines:?}");
    assert!(lines.contains(&"value.episodes=3".to_string()));
}

#[test]
fn eval_below_threshold_fails_with_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let eps = toy_episodes(2);
    let preds: Vec<Tensor<f32>> = eps.iter().map(|e| Tensor::zeros(e.query_mask.dims())).collect();
    let manifest = write_episodes(dir.path(), ScheduleTag::Toy, &eps, Some(&preds)).unwrap();
    let o = run(&["eval", manifest.to_str().unwrap(), "--min-miou", "0.5"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr).into_owned();
    assert!(err.contains("status=fail") && err.contains("check.min_miou=fail"), "{err}");
}

#[test]
fn eval_rejects_inconsistent_files() {
    let dir = tempfile::tempdir().unwrap();
    let eps = toy_episodes(1);
    let manifest = write_episodes(dir.path(), ScheduleTag::Toy, &eps, Some(&[eps[0].query_mask.clone()])).unwrap();
    hypercorr::io::write_tensor(&Tensor::<f32>::zeros(&[16, 7, 8]), dir.path().join("ep0000.support0.l01.hstn")).unwrap();
    let o = run(&["eval", manifest.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr).into_owned();
    assert!(err.contains("ep0000.support0.l01.hstn") && err.contains("support 0 layer 1"), "{err}");
    assert_eq!(run(&["eval", "/nonexistent/manifest.txt"]).status.code(), Some(2));
}

#[test]
fn train_toy_checkpoint_feeds_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (ck, ep) = (dir.path().join("ck"), dir.path().join("ep"));
    let o = run(&["train-toy", "--seed", "1", "--checkpoint", ck.to_str().unwrap(), "--export-episode", ep.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ck.join("manifest.txt").exists());
    let manifest = ep.join("manifest.txt");
    let o = run(&["eval", manifest.to_str().unwrap(), "--checkpoint", ck.to_str().unwrap(), "--min-miou", "1"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("mIoU   1.0000"));
    // The episode has no prediction files, so eval needs a model.
    assert_eq!(run(&["eval", manifest.to_str().unwrap()]).status.code(), Some(2));
    // A budget too small to fit is a failed check, not an error.
    assert_eq!(run(&["train-toy", "--steps", "2"]).status.code(), Some(1));
}

#[test]
fn bench_reports_ordering() {
    let o = run(&["bench", "--size", "5", "--channels", "4", "--repeats", "1", "--sequential"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("sequential"));
}
