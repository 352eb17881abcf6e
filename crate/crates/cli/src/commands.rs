//! The batch commands. Each writes its artifacts under the given output
//! directory only.

use std::fs;
use std::path::{Path, PathBuf};

use danet_core::checkpoint;
use danet_core::data::{load_image, write_synthetic_dataset, Dataset};
use danet_core::detector::{curve_csv, detect, train, Detector, LossRecord, Toggles, TrainOutcome};
use danet_core::eval::{coco_map, EvalReport};
use danet_core::gradcheck::{run_checks, CheckReport};
use serde::{Deserialize, Serialize};

use crate::config::{DataConfig, RunConfig};
use crate::error::{CliError, CliResult};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOSS_FILE: &str = "loss.csv";
pub const CONFIG_FILE: &str = "config.json";

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub loss_csv: PathBuf,
    pub outcome: TrainOutcome,
}

/// Trains from the config's seed and writes the checkpoint, the loss curve
/// and the resolved config under `out`.
pub fn cmd_train(cfg: &RunConfig, out: &Path, on_step: impl FnMut(&LossRecord)) -> CliResult<TrainArtifacts> {
    cfg.validate()?;
    let (train_set, _) = cfg.data.load()?;
    let det = Detector::new(cfg.model.clone(), cfg.seed)?;
    let outcome = train(det, &train_set, &cfg.train, cfg.seed, on_step)?;
    let checkpoint = out.join(CHECKPOINT_FILE);
    let loss_csv = out.join(LOSS_FILE);
    write(&checkpoint, checkpoint::encode(&outcome.detector.params))?;
    write(&loss_csv, curve_csv(&outcome.curve))?;
    write(&out.join(CONFIG_FILE), cfg.to_json())?;
    Ok(TrainArtifacts {
        checkpoint,
        loss_csv,
        outcome,
    })
}

/// Detector for `checkpoint`, using `cfg` or else the `config.json` saved
/// beside the checkpoint.
pub fn load_detector(checkpoint: &Path, cfg: Option<&RunConfig>) -> CliResult<(Detector, RunConfig)> {
    let cfg = match cfg {
        Some(c) => c.clone(),
        None => {
            let beside = checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
            RunConfig::load(&beside)?
        }
    };
    let bytes = fs::read(checkpoint).map_err(|e| CliError::io(checkpoint, e))?;
    let det = Detector::from_params(cfg.model.clone(), checkpoint::decode(&bytes)?)?;
    Ok((det, cfg))
}

pub fn evaluate(det: &Detector, data: &Dataset) -> CliResult<EvalReport> {
    let dets = data
        .samples
        .iter()
        .map(|s| detect(det, &s.image))
        .collect::<danet_core::Result<Vec<_>>>()?;
    let gts: Vec<_> = data.samples.iter().map(|s| s.boxes.clone()).collect();
    Ok(coco_map(&dets, &gts, &data.classes)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Split {
    Train,
    Test,
}

/// Evaluates on one split and writes `eval.json` and `eval.csv`.
pub fn cmd_eval(checkpoint: &Path, cfg: Option<&RunConfig>, split: Split, out: &Path) -> CliResult<EvalReport> {
    let (det, cfg) = load_detector(checkpoint, cfg)?;
    let (train_set, test_set) = cfg.data.load()?;
    let data = match split {
        Split::Train => train_set,
        Split::Test => test_set,
    };
    let report = evaluate(&det, &data)?;
    write(&out.join("eval.json"), report.to_json()?)?;
    write(&out.join("eval.csv"), report.to_csv())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: String,
    pub label: usize,
    pub score: f64,
    /// `[x1, y1, x2, y2]` in pixels.
    pub bbox: [f64; 4],
}

/// Runs the detector on one PGM/PPM image and writes `detections.json`.
pub fn cmd_infer(checkpoint: &Path, cfg: Option<&RunConfig>, image: &Path, out: &Path) -> CliResult<Vec<Detection>> {
    let (det, cfg) = load_detector(checkpoint, cfg)?;
    let img = load_image(image)?;
    let classes = match &cfg.data {
        DataConfig::Synthetic { spec, .. } => spec.classes.clone(),
        DataConfig::Directory { .. } => (0..cfg.model.num_classes).map(|c| format!("class{c}")).collect(),
    };
    let found: Vec<Detection> = detect(&det, &img)?
        .into_iter()
        .map(|b| {
            let label = b.label.unwrap_or(0);
            Detection {
                class: classes.get(label).cloned().unwrap_or_default(),
                label,
                score: b.score.unwrap_or(0.0),
                bbox: b.coords(),
            }
        })
        .collect();
    let json = serde_json::to_string_pretty(&found).map_err(|e| CliError::Config(e.to_string()))?;
    write(&out.join("detections.json"), json)?;
    Ok(found)
}

/// The five ablation phases, from the plain two-stage baseline to the full
/// model, each adding one component.
pub fn ablation_phases() -> [(&'static str, Toggles); 5] {
    let t = |fpn, dcn, cbam, focal| Toggles { fpn, dcn, cbam, focal };
    [
        ("baseline", t(false, false, false, false)),
        ("+fpn", t(true, false, false, false)),
        ("+fpn+dcn", t(true, true, false, false)),
        ("+fpn+dcn+cbam", t(true, true, true, false)),
        ("all", t(true, true, true, true)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub phase: usize,
    pub name: String,
    pub toggles: Toggles,
    /// Per-class AP at IoU 0.5, `None` for classes without test objects.
    pub ap50: Vec<Option<f64>>,
    pub map50: f64,
    pub final_loss: f64,
}

pub fn ablation_csv(rows: &[AblationRow], classes: &[String]) -> String {
    let mut s = String::from("phase,name,fpn,dcn,cbam,focal");
    for c in classes {
        s.push_str(&format!(",AP50_{c}"));
    }
    s.push_str(",mAP50,final_loss\n");
    for r in rows {
        let t = r.toggles;
        s.push_str(&format!("{},{},{},{},{},{}", r.phase, r.name, t.fpn as u8, t.dcn as u8, t.cbam as u8, t.focal as u8));
        for ap in &r.ap50 {
            match ap {
                Some(v) => s.push_str(&format!(",{v:.6}")),
                None => s.push(','),
            }
        }
        s.push_str(&format!(",{:.6},{:.6}\n", r.map50, r.final_loss));
    }
    s
}

/// Trains and evaluates the five phases one after another from the same
/// seed and data. Writes `ablation.csv` plus each phase's loss curve.
pub fn cmd_ablation(base: &RunConfig, out: &Path, mut log: impl FnMut(&str)) -> CliResult<(Vec<AblationRow>, String)> {
    base.validate()?;
    let (train_set, test_set) = base.data.load()?;
    let mut rows = Vec::new();
    for (i, (name, toggles)) in ablation_phases().into_iter().enumerate() {
        let mut cfg = base.clone();
        cfg.model.toggles = toggles;
        cfg.validate()?;
        let det = Detector::new(cfg.model.clone(), cfg.seed)?;
        let outcome = train(det, &train_set, &cfg.train, cfg.seed, |_| {})?;
        let report = evaluate(&outcome.detector, &test_set)?;
        write(&out.join(format!("phase{}", i + 1)).join(LOSS_FILE), curve_csv(&outcome.curve))?;
        let row = AblationRow {
            phase: i + 1,
            name: name.to_string(),
            toggles,
            ap50: report.classes.iter().map(|c| c.ap50).collect(),
            map50: report.map50,
            final_loss: outcome.final_loss().unwrap_or(f64::NAN),
        };
        log(&format!("phase {} {name}: mAP@0.5 {:.4}", row.phase, row.map50));
        rows.push(row);
    }
    let csv = ablation_csv(&rows, &train_set.classes);
    write(&out.join("ablation.csv"), &csv)?;
    Ok((rows, csv))
}

/// Runs the registered gradient checks and writes `gradcheck.json`.
pub fn cmd_gradcheck(scope: Option<&str>, seeds: usize, corrupt: Option<&str>, out: Option<&Path>) -> CliResult<Vec<CheckReport>> {
    let reports = run_checks(scope, seeds, corrupt).map_err(|e| match e {
        danet_core::Error::InvalidArgument { .. } => CliError::Config(e.to_string()),
        other => CliError::Core(other),
    })?;
    if let Some(dir) = out {
        let json = serde_json::to_string_pretty(&reports).map_err(|e| CliError::Config(e.to_string()))?;
        write(&dir.join("gradcheck.json"), json)?;
    }
    Ok(reports)
}

/// Writes the configured synthetic dataset as a dataset directory.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> CliResult<usize> {
    match &cfg.data {
        DataConfig::Synthetic { spec, train, test } => {
            write_synthetic_dataset(out, spec, *train, *test)?;
            Ok(train + test)
        }
        DataConfig::Directory { .. } => Err(CliError::Config("gen-data needs a `synthetic` data section".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use danet_core::data::SyntheticSpec;

    pub(crate) fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.pyramid_channels = 8;
        c.model.head.fc_dim = 16;
        c.train.epochs = 0;
        c.data = DataConfig::Synthetic {
            spec: SyntheticSpec {
                width: 48,
                height: 48,
                max_side: 12,
                ..Default::default()
            },
            train: 2,
            test: 1,
        };
        c
    }

    #[test]
    fn zero_epoch_checkpoint_equals_initialisation() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let a = cmd_train(&cfg, dir.path(), |_| {}).unwrap();
        let init = Detector::new(cfg.model.clone(), cfg.seed).unwrap();
        let mut q = init.params.clone();
        checkpoint::quantize(&mut q);
        assert_eq!(checkpoint::load(&a.checkpoint).unwrap(), q);
        let (det, _) = load_detector(&a.checkpoint, None).unwrap();
        assert_eq!(det.params, q);
    }

    #[test]
    fn phases_form_the_lattice() {
        let p = ablation_phases();
        assert_eq!(p[0].1, Toggles::NONE);
        assert_eq!(p[4].1, Toggles::ALL);
        // each phase switches exactly one component on
        for w in p.windows(2) {
            let (a, b) = (w[0].1, w[1].1);
            let diff = [a.fpn != b.fpn, a.dcn != b.dcn, a.cbam != b.cbam, a.focal != b.focal];
            assert_eq!(diff.iter().filter(|&&d| d).count(), 1);
        }
    }

    #[test]
    fn ablation_csv_layout() {
        let rows = vec![AblationRow {
            phase: 1,
            name: "baseline".into(),
            toggles: Toggles::NONE,
            ap50: vec![Some(0.5), None],
            map50: 0.5,
            final_loss: 1.0,
        }];
        let csv = ablation_csv(&rows, &["a".into(), "b".into()]);
        assert_eq!(
            csv,
            "phase,name,fpn,dcn,cbam,focal,AP50_a,AP50_b,mAP50,final_loss\n1,baseline,0,0,0,0,0.500000,,0.500000,1.000000\n"
        );
    }

    #[test]
    fn gen_data_then_directory_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        assert_eq!(cmd_gen_data(&cfg, dir.path()).unwrap(), 3);
        let mut d = cfg.clone();
        d.data = DataConfig::Directory {
            root: dir.path().to_path_buf(),
        };
        let (tr, te) = d.data.load().unwrap();
        let (str_, ste) = cfg.data.load().unwrap();
        assert_eq!((tr.len(), te.len()), (2, 1));
        assert_eq!(tr.samples[0].boxes, str_.samples[0].boxes);
        assert_eq!(te.samples[0].image, ste.samples[0].image);
    }
}
