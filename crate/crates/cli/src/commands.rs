//! The verbs, callable without going through argument parsing.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use aresunet::data::{
    augment, extract_windows, load_dataset, load_image, save_mask, save_volume, split_dataset, synth_dataset,
    VolumeSample,
};
use aresunet::inference::{evaluate_volumes, predict_mask, Evaluation};
use aresunet::model::AtrousResUNet;
use aresunet::train::{ablation_run, train_loop, AblationArm, AblationReport, TrainOutcome};
use aresunet::verify::{self, Scope, VerifyReport};
use aresunet::Error;

use crate::config::RunConfig;
use crate::report::{AblationFile, ArmSection, EvalSection, MetricRow, RunReport};

pub const HISTORY_FILE: &str = "history.log";
pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const REPORT_FILE: &str = "report.txt";
pub const CONFIG_FILE: &str = "run.toml";

fn data_error(path: &Path, reason: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Writes `count` synthetic volumes of extents `shape` into `dir`.
pub fn cmd_synth(dir: &Path, count: usize, shape: [usize; 3], seed: u64) -> anyhow::Result<Vec<String>> {
    let volumes = synth_dataset(count, shape, seed)?;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    for v in &volumes {
        save_volume(dir, v)?;
    }
    Ok(volumes.into_iter().map(|v| v.id).collect())
}

/// Loads a dataset and checks every volume against the model's input.
fn load_checked(dir: &Path, input_shape: [usize; 3]) -> anyhow::Result<Vec<VolumeSample>> {
    let volumes = load_dataset(dir)?;
    if volumes.is_empty() {
        return Err(data_error(dir, "no volumes found").into());
    }
    let [depth, h, w] = input_shape;
    for v in &volumes {
        let [vd, vh, vw] = v.extents();
        if [vh, vw] != [h, w] || vd < depth {
            return Err(data_error(
                dir,
                format!(
                    "volume `{}` has extents {:?}, the model needs {h}x{w} slices and depth >= {depth}",
                    v.id,
                    v.extents()
                ),
            )
            .into());
        }
    }
    Ok(volumes)
}

fn windows(volumes: &[VolumeSample], cfg: &RunConfig) -> anyhow::Result<Vec<VolumeSample>> {
    let mut out = Vec::new();
    for v in volumes {
        out.extend(extract_windows(v, &cfg.windowing)?);
    }
    Ok(out)
}

/// The prepared data of a training run.
struct Prepared {
    train_windows: Vec<VolumeSample>,
    val_windows: Vec<VolumeSample>,
    /// Whole volumes for the final report.
    report_volumes: Vec<VolumeSample>,
    evaluated_on: &'static str,
}

fn prepare(cfg: &RunConfig) -> anyhow::Result<Prepared> {
    cfg.validate()?;
    let dir = cfg.data_dir()?;
    let volumes = load_checked(dir, cfg.model.input_shape)?;
    let (train, held_out) = split_dataset(volumes, cfg.data.train_fraction, cfg.train.seed)?;
    let train_windows = augment(&windows(&train, cfg)?, &cfg.augmentation)?.samples;
    let val_windows = windows(&held_out, cfg)?;
    let (report_volumes, evaluated_on) = if held_out.is_empty() {
        (train, "train")
    } else {
        (held_out, "held_out")
    };
    Ok(Prepared {
        train_windows,
        val_windows,
        report_volumes,
        evaluated_on,
    })
}

fn history_lines(outcome: &TrainOutcome) -> String {
    outcome
        .history
        .iter()
        .map(|r| serde_json::to_string(r).expect("epoch record serializes") + "\n")
        .collect()
}

fn write_file(path: PathBuf, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_run(dir: &Path, outcome: &TrainOutcome) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_file(dir.join(HISTORY_FILE), history_lines(outcome))?;
    write_file(dir.join(CHECKPOINT_FILE), &outcome.best_checkpoint)
}

fn eval_section(e: &Evaluation) -> EvalSection {
    EvalSection {
        aggregate: MetricRow::new("aggregate", &e.aggregate),
        volumes: e.volumes.iter().map(|(id, r)| MetricRow::new(id.clone(), r)).collect(),
    }
}

fn halt_error(halted: &Option<String>) -> anyhow::Result<()> {
    match halted {
        Some(reason) => Err(Error::Numeric(reason.clone()).into()),
        None => Ok(()),
    }
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub outcome: TrainOutcome,
    pub report: RunReport,
}

/// Trains on windows of the training split and writes history.log,
/// best.ckpt, report.txt and run.toml into `cfg.out`. A diverged run still
/// writes its artifacts before failing.
pub fn cmd_train(cfg: &RunConfig) -> anyhow::Result<TrainSummary> {
    let data = prepare(cfg)?;
    let mut model = AtrousResUNet::build(&cfg.model)?;
    let outcome = train_loop(&mut model, &data.train_windows, &data.val_windows, &cfg.train)?;
    let eval = evaluate_volumes(&model, &data.report_volumes, cfg.windowing.stride)?;
    let report = RunReport {
        evaluated_on: data.evaluated_on.into(),
        best_epoch: outcome.best_epoch,
        halted: outcome.halted.clone(),
        metrics: eval_section(&eval),
    };
    write_run(&cfg.out, &outcome)?;
    write_file(cfg.out.join(REPORT_FILE), report.render())?;
    write_file(cfg.out.join(CONFIG_FILE), cfg.to_toml())?;
    halt_error(&outcome.halted)?;
    Ok(TrainSummary { outcome, report })
}

fn load_model(checkpoint: &Path) -> anyhow::Result<AtrousResUNet> {
    let bytes = fs::read(checkpoint).map_err(|e| data_error(checkpoint, e.to_string()))?;
    Ok(AtrousResUNet::from_checkpoint(&bytes)?)
}

/// Per-volume and aggregate metrics of a checkpoint on every volume in `dir`.
pub fn cmd_eval(checkpoint: &Path, dir: &Path, stride: usize) -> anyhow::Result<RunReport> {
    let model = load_model(checkpoint)?;
    let volumes = load_checked(dir, model.config().input_shape)?;
    let eval = evaluate_volumes(&model, &volumes, stride)?;
    Ok(RunReport {
        evaluated_on: "dataset".into(),
        best_epoch: None,
        halted: None,
        metrics: eval_section(&eval),
    })
}

/// Predicts the mask of the image at `volume` and writes it at `output`.
pub fn cmd_predict(checkpoint: &Path, volume: &Path, output: &Path, stride: usize) -> anyhow::Result<()> {
    let model = load_model(checkpoint)?;
    let image = load_image(volume)?;
    let mask = predict_mask(&model, &image, stride).map_err(|e| data_error(volume, e.to_string()))?;
    save_mask(output, &mask)?;
    Ok(())
}

fn arm_section(arm: &AblationArm) -> ArmSection {
    ArmSection {
        norm_kind: arm.config.norm_kind.to_string(),
        best_epoch: arm.outcome.best_epoch,
        halted: arm.outcome.halted.clone(),
        steps: arm.outcome.history.last().map_or(0, |r| r.steps),
        metrics: MetricRow::new(arm.config.norm_kind.to_string(), &arm.report),
    }
}

/// Trains the layer-norm and batch-norm arms on the same data and writes
/// `out/layer/`, `out/batch/` and the paired `out/report.txt`.
pub fn cmd_ablate(cfg: &RunConfig) -> anyhow::Result<(AblationReport, AblationFile)> {
    let data = prepare(cfg)?;
    let report = ablation_run(&cfg.model, &data.train_windows, &data.val_windows, &cfg.train)?;
    write_run(&cfg.out.join("layer"), &report.layer.outcome)?;
    write_run(&cfg.out.join("batch"), &report.batch.outcome)?;
    let file = AblationFile {
        evaluated_on: data.evaluated_on.into(),
        config_diff: report.config_diff.iter().map(|s| s.to_string()).collect(),
        layer: arm_section(&report.layer),
        batch: arm_section(&report.batch),
    };
    write_file(cfg.out.join(REPORT_FILE), file.render())?;
    write_file(cfg.out.join(CONFIG_FILE), cfg.to_toml())?;
    halt_error(&report.layer.outcome.halted)?;
    halt_error(&report.batch.outcome.halted)?;
    Ok((report, file))
}

pub fn cmd_verify(scope: Scope) -> anyhow::Result<VerifyReport> {
    Ok(verify::run(scope)?)
}
