use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3
[data.generator]
firms = 120
observation_quarters = 8
pricing_days = 80
base_hazard = -5.0
[windows]
pricing_days = 42
[model]
hidden = 8
[model.fundamental]
kind = "tep"
model_size = 16
layers = 1
heads = 4
[model.market]
kind = "tep"
model_size = 8
layers = 1
heads = 2
[model.pricing]
kind = "tcn"
filters = 8
levels = 2
[training]
max_epochs = 3
"#;

fn tep(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tep"))
        .args(args)
        .current_dir(dir)
        .env_remove("TEP_OUTPUT_ROOT")
        .env("TEP_LOG", "info")
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    fs::write(&p, SMALL).unwrap();
    p
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    out
}

#[test]
fn gen_is_reproducible_across_output_roots() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("g.toml");
    fs::write(&cfg, "[data.generator]\nfirms = 30\npricing_days = 60\n").unwrap();
    assert!(tep(&["gen", "-c", "g.toml", "--seed", "7", "--out", "a"], tmp.path()).status.success());
    let o = Command::new(env!("CARGO_BIN_EXE_tep"))
        .args(["gen", "-c", "g.toml", "--seed", "7"])
        .current_dir(tmp.path())
        .env("TEP_OUTPUT_ROOT", "b")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let a = files(&tmp.path().join("a/gen"));
    assert_eq!(a, files(&tmp.path().join("b/gen")));
    let names: Vec<&str> = a.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["config.resolved.toml", "fundamental.csv", "labels.csv", "market.csv", "pricing.csv"]);
}

#[test]
fn logs_are_json_lines() {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("g.toml"), "[data.generator]\nfirms = 10\npricing_days = 30\n").unwrap();
    let o = tep(&["gen", "-c", "g.toml", "--out", "o"], tmp.path());
    assert!(o.status.success());
    let text = stderr(&o);
    assert!(!text.is_empty());
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap_or_else(|e| panic!("{e}: {line}"));
        assert!(v["level"].is_string() && v["msg"].is_string());
    }
}

#[test]
fn config_errors_exit_2_with_key_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        ("[model.fundamental]\nkind = \"tep\"\nmodel_siz = 3\n", "model.fundamental"),
        ("[training]\nmax_epochs = 0\n", "training.max_epochs"),
        ("[cv]\nk = \"ten\"\n", "cv.k"),
        ("[data.generator]\nfirmz = 3\n", "data.generator"),
        ("[model.pricing]\nkind = \"tep\"\nmodel_size = 10\nheads = 4\n", "model.pricing"),
        ("[attention]\nhorizon = 6\n", "attention.horizon"),
    ];
    for (body, key) in cases {
        fs::write(tmp.path().join("bad.toml"), body).unwrap();
        let o = tep(&["train", "-c", "bad.toml", "--out", "o"], tmp.path());
        assert_eq!(o.status.code(), Some(2), "{body}");
        assert!(stderr(&o).contains(&format!("`{key}")), "{key}: {}", stderr(&o));
    }
    let o = tep(&["cv", "--k", "1", "--out", "o"], tmp.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("`cv.k`"));
}

#[test]
fn runtime_errors_exit_1_with_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let o = tep(&["eval", "--checkpoint", "missing.tepc", "--out", "o"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stage `load-checkpoint`"));
    let o = tep(&["prep", "--data", "nowhere", "--out", "o"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stage `load-data`"));
}

#[test]
fn help_lists_consumed_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let help = |cmd: &str| String::from_utf8(tep(&[cmd, "--help"], tmp.path()).stdout).unwrap();
    let train = help("train");
    for key in ["seed", "data.generator.firms", "windows.pricing_days", "channels.market", "model.hidden", "model.fundamental.model_size (tep)", "training.regime", "training.optimizer.lr"] {
        assert!(train.contains(&format!("  {key} [")), "train help lacks {key}");
    }
    assert!(help("cv").contains("  cv.k [10]"));
    assert!(help("shapley").contains("  shapley.temporal [false]"));
    assert!(help("attention").contains("  attention.horizon [5]"));
    assert!(help("sweep-window").contains("  sweep.windows ["));
    assert!(!help("gen").contains("model.hidden"));
}

#[test]
fn train_eval_attention_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    small_config(tmp.path());
    let o = tep(&["train", "-c", "small.toml", "--regime", "r3", "--out", "run"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let hash_lines: Vec<String> = stderr(&o).lines().filter(|l| l.contains("frozen hash")).map(String::from).collect();
    assert_eq!(hash_lines.len(), 3);

    let train = tmp.path().join("run/train");
    let log: serde_json::Value = serde_json::from_slice(&fs::read(train.join("training_log.json")).unwrap()).unwrap();
    let stages = log["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 3);
    for s in stages {
        assert_eq!(s["frozen_hash_before"], s["frozen_hash_after"]);
        assert_ne!(s["trainable_hash_before"], s["trainable_hash_after"]);
    }
    let snapshot = fs::read_to_string(train.join("config.resolved.toml")).unwrap();
    assert!(snapshot.contains("regime = \"r3\""));

    let o = tep(&["eval", "-c", "small.toml", "--out", "run"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(train.join("metrics.csv")).unwrap();
    let report = fs::read_to_string(tmp.path().join("run/eval/report.csv")).unwrap();
    assert_eq!(metrics.lines().nth(1).unwrap().split_once(',').unwrap().1, report.lines().nth(1).unwrap().split_once(',').unwrap().1);
    let preds = fs::read_to_string(tmp.path().join("run/eval/predictions.csv")).unwrap();
    assert!(preds.starts_with("firm_id,date,p_3m,p_6m,p_9m,p_1y,p_2y,p_3y\n"));

    let o = tep(&["attention", "-c", "small.toml", "--out", "run", "--horizon", "3"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let att = tmp.path().join("run/attention");
    assert!(att.join("attention_fundamental_defaulted_l0_h0.csv").exists());
    assert!(att.join("attention_fundamental_non-defaulted.svg").exists());

    let o = tep(&["attention", "-c", "small.toml", "--out", "run", "--channel", "pricing"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stage `attention`"));
}

#[test]
fn cv_report_has_mean_and_std_cells() {
    let tmp = tempfile::tempdir().unwrap();
    small_config(tmp.path());
    let o = tep(&["cv", "-c", "small.toml", "--k", "3", "--regime", "r2", "--out", "run"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(tmp.path().join("run/cv/cv_report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "model,Average,d_3m,d_6m,d_9m,d_1y,d_2y,d_3y");
    let row = lines.next().unwrap();
    assert!(row.starts_with("r2,\""));
    assert_eq!(row.matches(" (").count(), 7, "{row}");
    assert_eq!(fs::read_to_string(tmp.path().join("run/cv/cv_folds.csv")).unwrap().lines().count(), 4);
}

#[test]
fn prep_sweep_and_shapley_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    small_config(tmp.path());
    let o = tep(&["prep", "-c", "small.toml", "--out", "run"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let audit: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("run/prep/audit.json")).unwrap()).unwrap();
    assert_eq!(audit["lookahead_check"], "passed");
    assert!(tmp.path().join("run/prep/stats.json").exists());

    let o = tep(&["sweep-window", "-c", "small.toml", "--out", "run", "--windows", "21,42"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let sweep = fs::read_to_string(tmp.path().join("run/sweep-window/sweep.csv")).unwrap();
    assert!(sweep.starts_with("horizon,21d,42d\nAverage,"));
    assert_eq!(sweep.lines().count(), 8);

    let o = tep(&["shapley", "-c", "small.toml", "--out", "run", "--temporal"], tmp.path());
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = tmp.path().join("run/shapley");
    let table = fs::read_to_string(dir.join("shapley.csv")).unwrap();
    let values: Vec<f64> = table.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(values.len(), 4);
    assert!((values[..3].iter().sum::<f64>() - values[3]).abs() < 1e-5);
    let temporal = fs::read_to_string(dir.join("temporal.csv")).unwrap();
    assert!(temporal.starts_with("channel,Past year,Previous 2 years\n"));
    assert_eq!(temporal.lines().count(), 3, "pricing is skipped with a 42-day window");
    assert!(dir.join("shapley.svg").exists());
}
