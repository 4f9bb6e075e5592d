//! The operations behind each CLI subcommand. Every command writes its fully
//! resolved config next to its outputs.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::ablation::{run_ablation, select_cells, AblationReport};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, postprocess, test_proposal_seed, Detection, EvalReport};
use crate::gradcheck::{run_gradcheck, GradcheckOptions, SuiteReport};
use crate::heads::Model;
use crate::proposals::{generate_test_proposals, grid_proposals};
use crate::synth::{self, rasterize, Dataset, DatasetManifest, ShapeClass};
use crate::train::run_training;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const DETECTIONS_FILE: &str = "detections.json";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("cannot create {}: {e}", dir.display())))
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Generates the dataset, writes `manifest.json` and optionally one PGM per scene
/// under `images/`. Returns the manifest path.
pub fn cmd_gen_data(cfg: &RunConfig, out_dir: &Path, render_images: bool) -> Result<PathBuf> {
    cfg.validate()?;
    create_dir(out_dir)?;
    let ds = Dataset::generate(&cfg.dataset)?;
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, ds.manifest().to_json()?)?;
    cfg.save(&out_dir.join(CONFIG_FILE))?;
    if render_images {
        let dir = out_dir.join("images");
        create_dir(&dir)?;
        for (split, scenes) in [("train", &ds.train), ("test", &ds.test)] {
            for (i, s) in scenes.iter().enumerate() {
                synth::write_pgm(&dir.join(format!("{split}_{i:04}.pgm")), &rasterize(s, &ds.config.render)?)?;
            }
        }
    }
    Ok(path)
}

/// The dataset from a manifest if given, else generated from the config.
pub fn load_dataset(cfg: &RunConfig, manifest: Option<&Path>) -> Result<Dataset> {
    match manifest {
        Some(p) => Dataset::from_manifest(&DatasetManifest::load(p)?),
        None => Dataset::generate(&cfg.dataset),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub final_loss: Option<f64>,
    pub eval: EvalReport,
}

/// Trains from scratch, streaming `metrics.jsonl`, then saves `model.ckpt` and
/// evaluates on the test split into `eval.json`.
pub fn cmd_train(cfg: &RunConfig, dataset: &Dataset, out_dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    create_dir(out_dir)?;
    cfg.save(&out_dir.join(CONFIG_FILE))?;
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    let mut metrics = BufWriter::new(File::create(out_dir.join(METRICS_FILE))?);
    let mut write_err = None;
    let outcome = run_training(dataset, model, &cfg.train, &cfg.proposals, cfg.seed, |r| {
        let line = serde_json::to_string(r).expect("metrics records serialize");
        if let Err(e) = writeln!(metrics, "{line}").and_then(|_| metrics.flush()) {
            write_err.get_or_insert(e);
        }
        log::info!("iter {} loss {:.4} (cls {:.4}, bbox {:.4})", r.iter, r.loss, r.cls_loss, r.bbox_loss);
    });
    if let Some(e) = write_err {
        return Err(e.into());
    }
    let outcome = outcome?;
    checkpoint::save(&outcome.model, &out_dir.join(CHECKPOINT_FILE))?;
    let (report, _) = evaluate(&outcome.model, &dataset.test, &dataset.config.render, &cfg.proposals, cfg.seed, &cfg.eval)?;
    write_json(&out_dir.join(EVAL_FILE), &report)?;
    Ok(TrainSummary {
        iterations: cfg.train.iterations(),
        final_loss: outcome.log.last().map(|r| r.loss),
        eval: report,
    })
}

/// Evaluates a checkpoint on the test split; writes `eval.json` and `detections.json`.
pub fn cmd_eval(cfg: &RunConfig, dataset: &Dataset, checkpoint_path: &Path, out_dir: &Path) -> Result<EvalReport> {
    cfg.validate()?;
    let model = checkpoint::load(checkpoint_path)?;
    create_dir(out_dir)?;
    let mut resolved = cfg.clone();
    resolved.model = model.config.clone();
    resolved.save(&out_dir.join(CONFIG_FILE))?;
    let (report, dets) = evaluate(&model, &dataset.test, &dataset.config.render, &cfg.proposals, cfg.seed, &cfg.eval)?;
    write_json(&out_dir.join(EVAL_FILE), &report)?;
    write_json(&out_dir.join(DETECTIONS_FILE), &dets)?;
    Ok(report)
}

/// One line per suite; the second value is true when every suite passed.
pub fn cmd_gradcheck(opts: &GradcheckOptions) -> Result<(Vec<SuiteReport>, String, bool)> {
    let reports = run_gradcheck(opts)?;
    let mut text = String::new();
    for r in &reports {
        text.push_str(&format!(
            "{:<11} max_rel_err {:.3e}  tol {:.0e}  checked {:>5}  skipped {:>3}  {}\n",
            r.name,
            r.max_rel_error,
            r.tolerance,
            r.checked,
            r.skipped,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    let ok = reports.iter().all(|r| r.passed);
    Ok((reports, text, ok))
}

/// Runs the grid over `cfg.ablation.seeds` and writes `ablation.md` / `ablation.csv`.
pub fn cmd_ablate(cfg: &RunConfig, dataset: &Dataset, out_dir: &Path) -> Result<AblationReport> {
    cfg.validate()?;
    let cells = select_cells(cfg.ablation.cells.as_deref())?;
    create_dir(out_dir)?;
    cfg.save(&out_dir.join(CONFIG_FILE))?;
    let report = run_ablation(cfg, dataset, &cells, &cfg.ablation.seeds)?;
    fs::write(out_dir.join("ablation.md"), report.to_markdown())?;
    fs::write(out_dir.join("ablation.csv"), report.to_csv())?;
    Ok(report)
}

/// What to run inference on.
#[derive(Clone, Debug, PartialEq)]
pub enum InferInput {
    /// A scene of the dataset's test split, with the evaluation test proposals.
    TestScene(usize),
    /// A PGM file, with dense sliding-window proposals.
    Image(PathBuf),
}

/// Detects objects, keeps those scoring at least `score_thresh`, and writes
/// `detections.json` plus an `overlay.ppm` with per-class coloured boxes.
pub fn cmd_infer(
    cfg: &RunConfig,
    dataset: Option<&Dataset>,
    checkpoint_path: &Path,
    input: &InferInput,
    score_thresh: f64,
    out_dir: &Path,
) -> Result<Vec<Detection>> {
    cfg.validate()?;
    if !score_thresh.is_finite() {
        return Err(Error::Config("score threshold must be finite".into()));
    }
    let model = checkpoint::load(checkpoint_path)?;
    let (image, rois, index) = match input {
        InferInput::TestScene(i) => {
            let ds = dataset.ok_or_else(|| Error::Config("scene input needs a dataset".into()))?;
            let scene = ds
                .test
                .get(*i)
                .ok_or_else(|| Error::Config(format!("test scene {i} out of range ({} scenes)", ds.test.len())))?;
            let rois = generate_test_proposals(scene, &cfg.proposals, test_proposal_seed(cfg.seed, *i))?;
            (rasterize(scene, &ds.config.render)?, rois, *i)
        }
        InferInput::Image(p) => {
            let img = synth::decode_pgm(&fs::read(p)?)?;
            let s = img.shape();
            (img, grid_proposals(s.w, s.h), 0)
        }
    };
    let s = image.shape();
    let outputs = model.predict(&image, &rois)?;
    let dets: Vec<Detection> = postprocess(&outputs, &rois, index, s.w as f64, s.h as f64, &cfg.eval)?
        .into_iter()
        .filter(|d| d.score >= score_thresh)
        .collect();
    create_dir(out_dir)?;
    let mut resolved = cfg.clone();
    resolved.model = model.config.clone();
    resolved.save(&out_dir.join(CONFIG_FILE))?;
    write_json(&out_dir.join(DETECTIONS_FILE), &dets)?;
    let boxes: Vec<(ShapeClass, crate::boxes::BBox)> = dets
        .iter()
        .filter_map(|d| ShapeClass::from_label(d.class).map(|c| (c, d.bbox)))
        .collect();
    fs::write(out_dir.join("overlay.ppm"), synth::encode_overlay(&image, &boxes))?;
    Ok(dets)
}
