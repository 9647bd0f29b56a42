use std::fs;
use std::path::Path;

use msgdd::cli::{print_run_summary, run};
use msgdd::config::RunConfig;
use msgdd::Error;

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn every_verb_runs_at_micro_scale() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let runs = dir.path().join("runs");

    assert_eq!(
        run(["msgdd", "synth", "--out", s(&data), "--count", "8", "--size", "16"]),
        0
    );
    assert_eq!(fs::read_dir(data.join("images")).unwrap().count(), 8);

    let config = dir.path().join("run.cfg");
    let mut c = RunConfig::micro();
    c.model.image_size = 16;
    c.data.root = Some(data.clone());
    c.data.train_count = 4;
    c.data.val_count = 2;
    c.data.test_count = 2;
    c.output_dir = runs.join("train");
    fs::write(&config, c.to_text()).unwrap();

    assert_eq!(run(["msgdd", "train", "--config", s(&config), "--epochs", "2"]), 0);
    let best = runs.join("train").join("best.ckpt");
    assert!(best.is_file());

    let report = dir.path().join("test.csv");
    assert_eq!(run(["msgdd", "eval", "--checkpoint", s(&best), "--out", s(&report)]), 0);
    assert_eq!(fs::read_to_string(&report).unwrap().lines().count(), 3);
    assert_eq!(run(["msgdd", "eval", "--checkpoint", s(&best), "--split", "val"]), 0);
    assert!(runs.join("train").join("val_report.csv").is_file());

    assert_eq!(
        run(["msgdd", "probe", "--checkpoint", s(&best), "--adversarial-only"]),
        0
    );
    assert!(runs.join("train").join("grad_probe.csv").is_file());

    let metrics = runs.join("train").join("metrics.csv");
    assert_eq!(run(["msgdd", "plot", s(&metrics)]), 0);
    assert!(runs.join("train").join("loss_curve.png").is_file());

    let ablate_dir = runs.join("ablate");
    assert_eq!(
        run([
            "msgdd",
            "ablate",
            "--config",
            s(&config),
            "--output-dir",
            s(&ablate_dir),
            "--variants",
            "msgdd_4l1,unet_only",
        ]),
        0
    );
    let table = fs::read_to_string(ablate_dir.join("ablation.csv")).unwrap();
    let arms: Vec<&str> = table.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(arms, ["msgdd_4l1", "unet_only"]);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    assert_eq!(
        run(["msgdd", "ablate", "--preset", "micro", "--variants", "msgdd_3l1"]),
        2
    );
    assert_eq!(run(["msgdd", "train", "--preset", "huge"]), 2);
    assert_eq!(run(["msgdd", "train", "--preset", "micro", "--scales", "0"]), 2);
    assert_eq!(run(["msgdd", "synth", "--out", s(&out), "--epochs", "3"]), 2);
    assert_eq!(run(["msgdd", "eval", "--checkpoint", s(&out), "--split", "dev"]), 2);
    assert_eq!(run(["msgdd", "eval", "--checkpoint", s(&out)]), 1);
}

#[test]
fn summaries_name_the_outcome() {
    let config = RunConfig::micro();
    let aborted = print_run_summary(
        &config,
        &Err(Error::NonFinite {
            epoch: 3,
            step: 7,
            term: "l_g_total",
        }),
    );
    assert!(
        aborted.contains("aborted at epoch 3, step 7: non-finite l_g_total"),
        "{aborted}"
    );
    assert!(aborted.starts_with("variant=msgdd"));
}

#[test]
fn the_shipped_full_scale_recipe_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/hc18.cfg");
    let config = RunConfig::load(&path).unwrap().validate().unwrap();
    assert_eq!(config.model.image_size, 256);
    assert_eq!(config.model.scales, 4);
    assert_eq!(
        (config.data.train_count, config.data.val_count, config.data.test_count),
        (699, 100, 200)
    );
}
