use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[dataset]
train_scenes = 120
val_scenes = 60
test_scenes = 60

[head]
seeds = [7]

[eval]
methods = ["ours", "msp", "oracle"]
"#;

fn lidar_ood(args: &[&str], config: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lidar-ood"))
        .arg("--config")
        .arg(config)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "command failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn pipeline_refuses_overwrite_and_regenerates_identically() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("run.toml");
    fs::write(&config, SMALL).unwrap();
    let p = |name: &str| root.join(name).to_str().unwrap().to_owned();

    ok(&lidar_ood(&["gen-data", "--out", &p("data")], &config));
    let first = fs::read(root.join("data/test.jsonl")).unwrap();

    let again = lidar_ood(&["gen-data", "--out", &p("data")], &config);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));

    ok(&lidar_ood(&["--force", "gen-data", "--out", &p("data")], &config));
    assert_eq!(fs::read(root.join("data/test.jsonl")).unwrap(), first);

    let train = ok(&lidar_ood(&["train", "--data", &p("data"), "--out", &p("ckpt")], &config));
    assert!(train.contains("seed 7"));

    let table = ok(&lidar_ood(
        &["eval", "--data", &p("data"), "--checkpoints", &p("ckpt"), "--out", &p("res")],
        &config,
    ));
    let oracle = table.lines().find(|l| l.starts_with("Oracle")).expect("oracle row");
    // a perfect score: FPR 0, AUROC 100
    let cols: Vec<&str> = oracle.split_whitespace().collect();
    assert!(cols.contains(&"0.00") && cols.contains(&"100.00"), "{oracle}");

    let report = ok(&lidar_ood(&["report", "--out", &p("res")], &config));
    assert!(report.contains("Ours") && report.contains("MSP"));
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[eval]\nmethods = [\"nope\"]\n").unwrap();
    let out = lidar_ood(&["show-config"], &config);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
