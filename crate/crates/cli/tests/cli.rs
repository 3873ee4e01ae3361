use std::ffi::OsStr;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn sfcnn<S: AsRef<OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sfcnn"))
        .args(args)
        .env_remove("SFCNN_THREADS")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn text(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &[&str] = &[
    "--regions",
    "2",
    "--items",
    "6",
    "--brands",
    "2",
    "--categories",
    "2",
    "--suppliers",
    "2",
    "--days",
    "90",
];

fn small_data(dir: &Path) {
    let mut args = vec!["synth", "--seed", "3", "--out", p(dir)];
    args.extend_from_slice(SMALL);
    let out = sfcnn(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

fn train_args(data: &Path, out: &Path, extra: &[&str]) -> Vec<String> {
    let mut args: Vec<String> = vec![
        "train".into(),
        "--logs".into(),
        p(&data.join("logs.csv")).into(),
        "--items".into(),
        p(&data.join("items.csv")).into(),
        "--out".into(),
        p(out).into(),
    ];
    args.extend(
        [
            "--window",
            "28",
            "--stride",
            "7",
            "--filter-sizes",
            "3,2",
            "--pool-sizes",
            "3,2",
            "--maps",
            "2,2",
            "--dense-dim",
            "6",
            "--pretrain-epochs",
            "2",
            "--finetune-epochs",
            "1",
            "--batch-size",
            "16",
        ]
        .map(String::from),
    );
    for pair in extra.chunks(2) {
        match args.iter().position(|a| a == pair[0]) {
            Some(i) if pair.len() == 2 && args[i + 1] != "--out" => {
                args[i + 1] = pair[1].to_string()
            }
            _ => args.extend(pair.iter().map(|s| s.to_string())),
        }
    }
    args
}

#[test]
fn help_and_version_succeed() {
    assert_eq!(code(&sfcnn(&["--help"])), 0);
    assert_eq!(code(&sfcnn(&["--version"])), 0);
    assert_eq!(code(&sfcnn(&["train", "--help"])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&sfcnn::<&str>(&[])), 1);
    assert_eq!(code(&sfcnn(&["frobnicate"])), 1);
    assert_eq!(code(&sfcnn(&["gradcheck", "--seed", "x"])), 1);
}

#[test]
fn synth_is_deterministic_and_counts_rows() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    small_data(a.path());
    small_data(b.path());
    for f in ["logs.csv", "items.csv", "truth.json"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    let logs = fs::read_to_string(a.path().join("logs.csv")).unwrap();
    assert_eq!(logs.lines().count() - 1, 6 * 2 * 90);

    let out = sfcnn(&[
        "synth",
        "--out",
        p(a.path()),
        "--days",
        "20",
        "--regions",
        "1",
        "--items",
        "3",
        "--brands",
        "1",
        "--categories",
        "1",
        "--suppliers",
        "1",
    ]);
    assert!(text(&out).contains("60 log rows"), "{}", text(&out));
}

#[test]
fn synth_region_count_leaves_items_unchanged() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    sfcnn(&[
        "synth",
        "--out",
        p(a.path()),
        "--regions",
        "2",
        "--days",
        "10",
    ]);
    sfcnn(&[
        "synth",
        "--out",
        p(b.path()),
        "--regions",
        "5",
        "--days",
        "10",
    ]);
    assert_eq!(
        fs::read(a.path().join("items.csv")).unwrap(),
        fs::read(b.path().join("items.csv")).unwrap()
    );
    let logs = fs::read_to_string(b.path().join("logs.csv")).unwrap();
    let regions: std::collections::BTreeSet<&str> = logs
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(2).unwrap())
        .collect();
    assert_eq!(regions.len(), 5);
}

#[test]
fn unwritable_synth_output_is_a_runtime_error() {
    let dir = TempDir::new().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let out = sfcnn(&["synth", "--out", p(&blocker.join("sub")), "--days", "5"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn train_predict_evaluate_round_trip() {
    let data = TempDir::new().unwrap();
    let run = TempDir::new().unwrap();
    small_data(data.path());
    let out = sfcnn(&train_args(data.path(), run.path(), &[]));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "model_pretrained.sfcnn",
        "model_r1.sfcnn",
        "model_r2.sfcnn",
        "train.log",
        "config.json",
    ] {
        assert!(run.path().join(f).exists(), "{f}");
    }
    let log = fs::read_to_string(run.path().join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 2 + 2);
    assert!(log
        .lines()
        .all(|l| l.starts_with("phase=") && l.contains(" region=") && l.contains(" loss=")));
    assert_eq!(text(&out), log);

    let logs = data.path().join("logs.csv");
    let items = data.path().join("items.csv");
    let preds = run.path().join("predictions.csv");
    let out = sfcnn(&[
        "predict",
        "--model",
        p(run.path()),
        "--logs",
        p(&logs),
        "--items",
        p(&items),
        "--out",
        p(&preds),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(&preds).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("item_id,region_id,forecast_start,horizon,y_pred,y_true")
    );
    assert_eq!(lines.count(), 12);

    let metrics = run.path().join("metrics.json");
    let out = sfcnn(&[
        "evaluate",
        "--predictions",
        p(&preds),
        "--method",
        "cnn",
        "--logs",
        p(&logs),
        "--items",
        p(&items),
        "--baselines",
        "naive,moving-average,ar-ls",
        "--out",
        p(&metrics),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&metrics).unwrap()).unwrap();
    for m in ["cnn", "naive_last_window", "moving_average_4w", "ar_ls_2"] {
        let method = &json["methods"][m];
        assert!(method["average"].is_number(), "{m}");
        assert!(
            method["regions"]["r1"].is_number() && method["regions"]["r2"].is_number(),
            "{m}"
        );
    }
}

#[test]
fn finetune_zero_gives_identical_files() {
    let data = TempDir::new().unwrap();
    let run = TempDir::new().unwrap();
    small_data(data.path());
    assert_eq!(
        code(&sfcnn(&train_args(
            data.path(),
            run.path(),
            &["--finetune-epochs", "0"]
        ))),
        0
    );
    let pre = fs::read(run.path().join("model_pretrained.sfcnn")).unwrap();
    for r in ["r1", "r2"] {
        assert_eq!(
            fs::read(run.path().join(format!("model_{r}.sfcnn"))).unwrap(),
            pre
        );
    }
}

#[test]
fn train_is_deterministic_across_thread_counts() {
    let data = TempDir::new().unwrap();
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    small_data(data.path());
    assert_eq!(
        code(&sfcnn(&train_args(
            data.path(),
            a.path(),
            &["--variant", "cnn"]
        ))),
        0
    );
    let out = Command::new(env!("CARGO_BIN_EXE_sfcnn"))
        .args(train_args(data.path(), b.path(), &["--variant", "cnn"]))
        .env("SFCNN_THREADS", "3")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    for f in ["model_r1.sfcnn", "model_r2.sfcnn", "train.log"] {
        assert_eq!(
            fs::read(a.path().join(f)).unwrap(),
            fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
    assert!(!a.path().join("model_pretrained.sfcnn").exists());
}

#[test]
fn validation_errors_exit_one_before_work() {
    let data = TempDir::new().unwrap();
    let run = TempDir::new().unwrap();
    small_data(data.path());
    let out = sfcnn(&train_args(data.path(), run.path(), &["--batch-size", "0"]));
    assert_eq!(code(&out), 1);
    let out = sfcnn(&train_args(data.path(), run.path(), &["--pool-sizes", "3"]));
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!run.path().join("train.log").exists());

    let config = run.path().join("bad.json");
    fs::write(&config, r#"{"train": {"batch_size": 4, "nonsense": 1}}"#).unwrap();
    assert_eq!(code(&sfcnn(&["train", "--config", p(&config)])), 1);

    let out = Command::new(env!("CARGO_BIN_EXE_sfcnn"))
        .args(["gradcheck"])
        .env("SFCNN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn data_errors_exit_two() {
    let data = TempDir::new().unwrap();
    let run = TempDir::new().unwrap();
    small_data(data.path());
    let logs = data.path().join("logs.csv");
    let mut text = fs::read_to_string(&logs).unwrap();
    text.push_str("2024-01-01,item01,r1,1,2,3\n");
    fs::write(&logs, text).unwrap();
    let out = sfcnn(&train_args(data.path(), run.path(), &[]));
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line"));
}

#[test]
fn config_file_values_are_overridden_by_flags() {
    let data = TempDir::new().unwrap();
    let run = TempDir::new().unwrap();
    small_data(data.path());
    let config = run.path().join("run.json");
    fs::write(
        &config,
        r#"{"train": {"seed": 11, "pretrain_epochs": 5}, "data": {"horizon": 3}}"#,
    )
    .unwrap();
    let mut args = train_args(data.path(), run.path(), &[]);
    args.extend(["--config".to_string(), p(&config).to_string()]);
    assert_eq!(code(&sfcnn(&args)), 0);
    let echo: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.path().join("config.json")).unwrap()).unwrap();
    assert_eq!(echo["train"]["seed"], 11);
    assert_eq!(echo["train"]["pretrain_epochs"], 2);
    assert_eq!(echo["data"]["horizon"], 3);
}

#[test]
fn gradcheck_reports_every_tensor() {
    let out = sfcnn(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", text(&out));
    let report = text(&out);
    for name in ["F1", "B1", "H", "w"] {
        assert!(
            report
                .lines()
                .any(|l| l.starts_with(&format!("tensor={name} "))),
            "{name}\n{report}"
        );
    }
    assert_eq!(code(&sfcnn(&["gradcheck", "--inject-sign-flip"])), 2);
    assert_eq!(
        code(&sfcnn(&["gradcheck", "--random", "3", "--seed", "5"])),
        0
    );
}

#[test]
fn evaluate_needs_truth() {
    let dir = TempDir::new().unwrap();
    let preds = dir.path().join("p.csv");
    fs::write(
        &preds,
        "item_id,region_id,forecast_start,horizon,y_pred,y_true\nitem01,r1,2024-01-01,7,3.0,\n",
    )
    .unwrap();
    assert_eq!(code(&sfcnn(&["evaluate", "--predictions", p(&preds)])), 2);
    assert_eq!(code(&sfcnn(&["evaluate"])), 1);
}

#[test]
fn evaluate_hand_computed_fixture() {
    let dir = TempDir::new().unwrap();
    let preds = dir.path().join("p.csv");
    fs::write(
        &preds,
        "item_id,region_id,forecast_start,horizon,y_pred,y_true\n\
         a,r1,2024-01-01,7,1.5,1\n\
         b,r1,2024-01-01,7,4,2\n\
         a,r2,2024-01-01,7,0,3\n",
    )
    .unwrap();
    let out = sfcnn(&[
        "evaluate",
        "--predictions",
        p(&preds),
        "--predictions",
        p(&preds),
        "--method",
        "x",
        "--method",
        "y",
    ]);
    assert_eq!(code(&out), 0);
    let json: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let r1 = (0.25 + 4.0) / 2.0;
    let r2 = 9.0;
    for m in ["x", "y"] {
        let method = &json["methods"][m];
        assert!((method["regions"]["r1"].as_f64().unwrap() - r1).abs() < 1e-12);
        assert!((method["regions"]["r2"].as_f64().unwrap() - r2).abs() < 1e-12);
        assert!((method["average"].as_f64().unwrap() - (r1 + r2) / 2.0).abs() < 1e-12);
    }
    assert_eq!(json["methods"]["x"], json["methods"]["y"]);
}

#[test]
fn sweep_beta_row_accounting() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("sweep.csv");
    let mut args = vec![
        "sweep",
        "--param",
        "beta",
        "--grid",
        "0,0.02,0.2",
        "--window",
        "28",
        "--stride",
        "7",
        "--filter-sizes",
        "3,2",
        "--pool-sizes",
        "3,2",
        "--maps",
        "2,2",
        "--dense-dim",
        "4",
        "--pretrain-epochs",
        "1",
        "--finetune-epochs",
        "1",
        "--out",
        p(&csv),
    ];
    let config = dir.path().join("c.json");
    fs::write(&config, r#"{"synth": {"num_regions": 2, "num_items": 4, "num_brands": 2, "num_categories": 2, "num_suppliers": 2, "num_days": 70}}"#).unwrap();
    args.extend(["--config", p(&config)]);
    let out = sfcnn(&args);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("param,value,region,mse"));
    let rows: Vec<_> = lines.collect();
    assert_eq!(rows.len(), 3 * 2);
    assert!(rows.iter().all(|r| r.starts_with("beta,")));
}
