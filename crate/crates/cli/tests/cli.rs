use std::path::Path;
use std::process::Command;

use aresunet::data::{image_stem, load_mask, mask_stem, synth_dataset, save_volume};
use aresunet::train::{evaluate, EpochRecord};
use aresunet_cli::report::RunReport;
use aresunet_cli::{cmd_eval, cmd_predict, cmd_synth, cmd_train, exit_code, RunConfig};

const SMALL: &str = r#"
[model]
levels = 2
base_channels = 8
input_shape = [8, 16, 16]
precision = "f64"

[train]
epochs = 1
batch_size = 2
lr = 1e-3

[windowing]
depth = 8
stride = 4
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_aresunet"))
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(&path, SMALL).unwrap();
    path
}

fn status(cmd: &mut Command) -> i32 {
    let out = cmd.output().unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out.status.code().unwrap()
}

#[test]
fn train_on_four_synthetic_volumes_writes_all_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    let data = tmp.path().join("data");
    let out = tmp.path().join("run");
    let code = status(bin().args(["synth", "--count", "4", "--shape", "12x16x16", "--out"]).arg(&data));
    assert_eq!(code, 0);
    let code = status(bin().arg("train").arg("--config").arg(&config).arg("--data").arg(&data).arg("--out").arg(&out));
    assert_eq!(code, 0);

    let history = std::fs::read_to_string(out.join("history.log")).unwrap();
    let records: Vec<EpochRecord> = history.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 1);
    assert!(records[0].val_loss.is_some());
    assert!(std::fs::metadata(out.join("best.ckpt")).unwrap().len() > 0);

    let report = RunReport::parse(&std::fs::read_to_string(out.join("report.txt")).unwrap()).unwrap();
    assert_eq!(report.evaluated_on, "held_out");
    assert_eq!(report.metrics.volumes.len(), 1);
    let saved = RunConfig::from_toml(&std::fs::read_to_string(out.join("run.toml")).unwrap()).unwrap();
    assert_eq!(saved.data.dir.as_deref(), Some(data.as_path()));
}

#[test]
fn missing_data_path_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    let code = status(
        bin()
            .arg("train")
            .arg("--config")
            .arg(&config)
            .arg("--data")
            .arg(tmp.path().join("absent"))
            .arg("--out")
            .arg(tmp.path().join("run")),
    );
    assert_eq!(code, 2);
    assert_eq!(status(bin().args(["train", "--out"]).arg(tmp.path().join("run"))), 2);
}

#[test]
fn batch_norm_with_batch_one_rejected_before_training() {
    let tmp = tempfile::tempdir().unwrap();
    let config = small_config(tmp.path());
    let data = tmp.path().join("data");
    cmd_synth(&data, 2, [8, 16, 16], 0).unwrap();
    let out = tmp.path().join("run");
    let code = status(
        bin()
            .args(["train", "--norm", "batch", "--batch-size", "1", "--config"])
            .arg(&config)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&out),
    );
    assert_eq!(code, 2);
    assert!(!out.exists());
}

#[test]
fn empty_dataset_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::from_toml(SMALL).unwrap();
    let empty = tmp.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    cfg.data.dir = Some(empty.clone());
    cfg.out = tmp.path().join("run");
    let err = cmd_train(&cfg).unwrap_err();
    assert_eq!(exit_code(&err), 3);
    assert!(cmd_eval(&tmp.path().join("none.ckpt"), &empty, 4).is_err());
}

#[test]
fn predict_then_evaluate_reproduces_eval_report() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::from_toml(SMALL).unwrap();
    let data = tmp.path().join("data");
    cmd_synth(&data, 3, [11, 16, 16], 5).unwrap();
    cfg.data.dir = Some(data.clone());
    cfg.out = tmp.path().join("run");
    cmd_train(&cfg).unwrap();
    let ckpt = cfg.out.join("best.ckpt");

    let report = cmd_eval(&ckpt, &data, cfg.windowing.stride).unwrap();
    assert_eq!(report.metrics.volumes.len(), 3);
    let mut pooled = aresunet::train::Confusion::default();
    for row in &report.metrics.volumes {
        let predicted = tmp.path().join(format!("{}.pred", row.id));
        cmd_predict(&ckpt, &image_stem(&data, &row.id), &predicted, cfg.windowing.stride).unwrap();
        let mask = load_mask(&predicted).unwrap();
        assert!(mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
        let gt = load_mask(&mask_stem(&data, &row.id)).unwrap();
        let direct = evaluate(&mask, &gt).unwrap();
        assert_eq!(direct.counts, row.counts());
        assert_eq!(direct.dice, row.dice);
        pooled = pooled.merge(row.counts());
        // every emitted field follows from the emitted counts
        let again = row.recompute().unwrap();
        assert_eq!((again.dice, again.accuracy, again.precision), (row.dice, row.accuracy, row.precision));
        assert_eq!((again.recall, again.specificity), (row.recall, row.specificity));
    }
    assert_eq!(pooled, report.metrics.aggregate.counts());
}

#[test]
fn incompatible_volumes_rejected_by_name() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::from_toml(SMALL).unwrap();
    let data = tmp.path().join("data");
    cmd_synth(&data, 2, [8, 16, 16], 1).unwrap();
    cfg.data.dir = Some(data.clone());
    cfg.out = tmp.path().join("run");
    cmd_train(&cfg).unwrap();
    let ckpt = cfg.out.join("best.ckpt");

    let odd = tmp.path().join("odd");
    let mut wide = synth_dataset(1, [8, 16, 20], 1).unwrap().remove(0);
    wide.id = "wide01".into();
    save_volume(&odd, &wide).unwrap();
    let err = cmd_eval(&ckpt, &odd, 4).unwrap_err();
    assert!(err.to_string().contains("wide01"), "{err}");
    assert_eq!(exit_code(&err), 3);

    let shallow = tmp.path().join("shallow");
    cmd_synth(&shallow, 1, [6, 16, 16], 1).unwrap();
    let err = cmd_predict(&ckpt, &image_stem(&shallow, "synth000"), &tmp.path().join("p"), 4).unwrap_err();
    assert_eq!(exit_code(&err), 3);
}

#[test]
fn verify_scope_limits_suites_and_bad_scope_is_rejected() {
    assert_ne!(status(bin().args(["verify", "--scope", "everything"])), 0);
    let out = bin().args(["verify", "--scope", "oracle"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("PASS [oracle]"));
    assert!(!text.contains("[grad]"));
}
