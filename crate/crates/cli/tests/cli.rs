use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use msft_cli::config::RunConfig;

const TINY: &str = "\
# small enough for debug-speed tests
data=synth
synth_periods=8,32
synth_amplitudes=1,0.5
synth_len=900
context=16
horizon=16
patch=4
d_model=16
layers=2
heads=2
k=1
batch_size=8
epochs=2
steps=4
patience=2
val_windows=16
test_windows=16
eval_batch=16
diag_windows=12
";

fn msft(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msft"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join("run.cfg");
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn run_ok(cmd: &str, cfg: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    let o = msft(&args);
    assert!(
        o.status.success(),
        "{cmd} failed ({:?}): {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn read_csv(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect()
}

fn column(rows: &[Vec<String>], name: &str) -> String {
    let i = rows[0].iter().position(|h| h == name).unwrap_or_else(|| panic!("no column {name}"));
    rows[1][i].clone()
}

#[test]
fn unknown_key_exits_one_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "foo=1\n");
    let o = msft(&["pretrain", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("foo"));
}

#[test]
fn bad_flag_value_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = msft(&["evaluate", "--mode", "bogus", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mode"));
    let o = msft(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = msft(&["finetune", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_is_echoed_and_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    run_ok("pretrain", &cfg, dir.path(), &["--seed", "3"]);
    let echoed = RunConfig::from_file(&dir.path().join("config_pretrain.txt")).unwrap();
    assert_eq!(echoed.seed, 3);
    assert_eq!(echoed.context, 16);
    assert_eq!(echoed.out, dir.path());
    let text = fs::read_to_string(dir.path().join("config_pretrain.txt")).unwrap();
    assert_eq!(text.lines().count(), RunConfig::default().entries().len());
}

#[test]
fn zero_shot_evaluate_reproduces_pretrain_validation_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    run_ok("pretrain", &cfg, dir.path(), &[]);
    run_ok("evaluate", &cfg, dir.path(), &["--mode", "zero_shot"]);
    let stored = column(&read_csv(&dir.path().join("pretrain_summary.csv")), "best_val");
    let metrics = read_csv(&dir.path().join("metrics_zero_shot.csv"));
    assert_eq!(column(&metrics, "val_loss"), stored);
    assert_eq!(column(&metrics, "w0"), "1");
}

#[test]
fn msft_finetune_logs_one_weight_per_scale() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    run_ok("pretrain", &cfg, dir.path(), &[]);
    run_ok("finetune", &cfg, dir.path(), &["--mode", "msft", "--k", "2"]);
    run_ok("evaluate", &cfg, dir.path(), &["--mode", "msft", "--k", "2"]);
    let m = read_csv(&dir.path().join("metrics_msft.csv"));
    let w: Vec<f64> = (0..3).map(|i| column(&m, &format!("w{i}")).parse().unwrap()).collect();
    assert!(!m[0].contains(&"w3".to_string()));
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let log = read_csv(&dir.path().join("train_log_msft.csv"));
    assert_eq!(&log[0][3..], ["w0", "w1", "w2"]);
    assert_eq!(log.len(), 1 + 1 + 2 * 4);
}

#[test]
fn identical_runs_write_identical_artifacts() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        let cfg = write_config(d, "");
        run_ok("pretrain", &cfg, d, &[]);
        run_ok("finetune", &cfg, d, &["--mode", "lora"]);
        run_ok("evaluate", &cfg, d, &["--mode", "lora"]);
    }
    for f in ["metrics_lora.csv", "train_log_lora.csv", "pretrained.ckpt", "finetuned_lora.ckpt"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    run_ok("pretrain", &cfg, dir.path(), &[]);
    let p = dir.path().join("pretrained.ckpt");
    let mut bytes = fs::read(&p).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    fs::write(&p, &bytes).unwrap();
    let o = msft(&[
        "evaluate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--mode",
        "zero_shot",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("corrupt"));
    assert!(!dir.path().join("metrics_zero_shot.csv").exists());
}

#[test]
fn mismatched_backbone_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    run_ok("pretrain", &cfg, dir.path(), &[]);
    let o = msft(&[
        "evaluate",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--mode",
        "zero_shot",
        "--set",
        "layers=1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("incompatible"));
}

#[test]
fn export_attn_writes_one_heatmap_per_attention_mode() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    run_ok("pretrain", &cfg, dir.path(), &[]);
    run_ok("export-attn", &cfg, dir.path(), &["--set", "layer=1", "--set", "head=1"]);
    let s = read_csv(&dir.path().join("run_attention_summary.csv"));
    assert_eq!(s.len(), 4);
    for row in &s[1..] {
        assert!(dir.path().join(&row[9]).exists());
        assert!(row[5].parse::<f64>().unwrap() < 1e-6);
    }
    assert_eq!(s[1][0], "in_scale");
    assert_eq!(s[1][4], "0");
    assert!(s[2][4].parse::<f64>().unwrap() > 0.0);
}

#[test]
fn diagnose_writes_triplets_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    run_ok("pretrain", &cfg, dir.path(), &[]);
    run_ok("diagnose", &cfg, dir.path(), &[]);
    let t = read_csv(&dir.path().join("triplets.csv"));
    assert_eq!(t.len(), 1 + 12 * 2);
    let r = read_csv(&dir.path().join("confounder.csv"));
    assert_eq!(column(&r, "n"), "24");
    for k in ["raw", "partial"] {
        assert!(column(&r, k).parse::<f64>().unwrap().abs() <= 1.0);
    }
}

#[test]
fn ablate_emits_reference_and_toggle_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "toggles=no_mixing,average_mixing\n");
    run_ok("pretrain", &cfg, dir.path(), &[]);
    run_ok("ablate", &cfg, dir.path(), &[]);
    let rows = read_csv(&dir.path().join("ablation.csv"));
    let labels: Vec<&str> = rows[1..].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(labels, ["msft", "no_mixing", "average_mixing"]);
    let diff = |r: &Vec<String>| r.last().unwrap().parse::<f64>().unwrap();
    assert_eq!(diff(&rows[1]), 0.0);
    assert!(diff(&rows[2]) > 0.0 && diff(&rows[3]) > 0.0);
}
