//! Command implementations behind the `selftof` binary.
//!
//! Dataset directories produced by [`simulate`] hold one scene directory per
//! sequence plus `train.txt` and `test.txt` split files; every command echoes
//! its resolved config as `config.toml` into its output directory.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use selftof::data::{build_triplets, generate_synthetic_scene, load_nyu_layout, write_scene, SceneDir, Sequence};
use selftof::eval::{evaluate, DepthPredictor, EvalOutcome, EvalSample, GuidedFilter, NearestNeighbour};
use selftof::train::{Checkpoint, FitReport, Trainer};
use selftof::{Error, Models, Real, Result};
use serde::Serialize;

pub use config::{Config, Profile};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Process exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => EXIT_CONFIG,
        Error::Io { .. } | Error::Data { .. } | Error::InvalidArgument(_) | Error::ShapeMismatch(_) => EXIT_DATA,
        Error::NonFinite(_) | Error::Degenerate(_) | Error::NoScaleAvailable | Error::EmptyOverlap => EXIT_NUMERIC,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn echo_config(cfg: &Config, dir: &Path) -> Result<()> {
    write_text(&dir.join("config.toml"), &cfg.to_toml())
}

/// Seed of scene `index` in a split; train and test scenes never share one.
pub fn scene_seed(seed: u64, test: bool, index: usize) -> u64 {
    seed.wrapping_mul(10_007)
        .wrapping_add(if test { 1 << 32 } else { 0 })
        .wrapping_add(index as u64)
}

#[derive(Serialize)]
struct SceneEntry {
    name: String,
    split: &'static str,
    frames: usize,
    seed: u64,
}

#[derive(Serialize)]
struct DatasetManifest {
    seed: u64,
    width: usize,
    height: usize,
    zone_rows: usize,
    zone_cols: usize,
    scenes: Vec<SceneEntry>,
}

/// Renders the synthetic train and test scenes into `out`.
pub fn simulate(cfg: &Config, out: &Path) -> Result<()> {
    cfg.validate()?;
    let scene_cfg = cfg.scene();
    let mut entries = Vec::new();
    for (split, count, test) in [("train", cfg.train_scenes, false), ("test", cfg.test_scenes, true)] {
        let mut names = String::new();
        for i in 0..count {
            let seed = scene_seed(cfg.seed, test, i);
            let name = format!("{split}/scene_{i:03}");
            let seq = generate_synthetic_scene::<Real>(seed, &scene_cfg)?;
            write_scene(&out.join(&name), &seq, cfg.zone_rows, cfg.zone_cols)?;
            log::info!("wrote {name} ({} frames)", seq.frames.len());
            names.push_str(&name);
            names.push('\n');
            entries.push(SceneEntry {
                name,
                split,
                frames: seq.frames.len(),
                seed,
            });
        }
        write_text(&out.join(format!("{split}.txt")), &names)?;
    }
    let manifest = DatasetManifest {
        seed: cfg.seed,
        width: cfg.image_width,
        height: cfg.image_height,
        zone_rows: cfg.zone_rows,
        zone_cols: cfg.zone_cols,
        scenes: entries,
    };
    write_text(
        &out.join("manifest.json"),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    echo_config(cfg, out)
}

/// Highest-numbered `epoch_{n}.ckpt` in `dir`.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.is_dir() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let epoch = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("epoch_"))
            .and_then(|n| n.strip_suffix(".ckpt"))
            .and_then(|n| n.parse::<usize>().ok());
        if let Some(e) = epoch {
            if best.as_ref().is_none_or(|(b, _)| e > *b) {
                best = Some((e, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

fn split_path(data: &Path, split: &str) -> PathBuf {
    data.join(format!("{split}.txt"))
}

/// Trains on the `train` split of `data`, writing checkpoints and the loss
/// log to `out`. With `resume`, continues from the latest checkpoint there.
pub fn train(cfg: &Config, data: &Path, out: &Path, resume: bool) -> Result<FitReport> {
    cfg.validate()?;
    let scenes: Vec<SceneDir<Real>> = load_nyu_layout(data, &split_path(data, "train"))?;
    let triplets = build_triplets(
        &scenes,
        cfg.frame_stride,
        &cfg.source_offsets,
        cfg.zone_rows,
        cfg.zone_cols,
    )?;
    if triplets.is_empty() {
        return Err(Error::data(data, "no training triplet fits the scenes"));
    }
    log::info!("{} training triplets", triplets.len());
    let mut trainer = match latest_checkpoint(out)? {
        Some(ck) if resume => {
            log::info!("resuming from {}", ck.display());
            let t = Trainer::resume(&ck, cfg.train())?;
            if t.models.config != cfg.model() {
                return Err(Error::config(
                    "model",
                    "checkpoint was trained with a different model config",
                ));
            }
            t
        }
        _ => {
            if resume {
                log::warn!("no checkpoint in {}; starting afresh", out.display());
            }
            let log_path = out.join("train_log.csv");
            if log_path.exists() {
                fs::remove_file(&log_path).map_err(|e| Error::io(&log_path, e))?;
            }
            Trainer::new(cfg.model(), cfg.train())?
        }
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    echo_config(cfg, out)?;
    let report = trainer.fit(&triplets, Some(out))?;
    if let Some(last) = report.losses.last() {
        log::info!("step {}: total loss {:.5}", trainer.step, last.total);
    }
    if report.skipped > 0 {
        log::warn!("{} steps skipped on non-finite values", report.skipped);
    }
    Ok(report)
}

/// Which predictor `eval` runs.
#[derive(Clone, Debug, PartialEq)]
pub enum Predictor {
    Checkpoint(PathBuf),
    NearestNeighbour,
    GuidedFilter,
}

/// Every `eval_stride`-th frame with ground truth of the `test` split.
pub fn load_test_samples(cfg: &Config, data: &Path) -> Result<Vec<EvalSample<Real>>> {
    let scenes: Vec<SceneDir<Real>> = load_nyu_layout(data, &split_path(data, "test"))?;
    let mut samples = Vec::new();
    for scene in &scenes {
        for i in (0..scene.len()).step_by(cfg.eval_stride) {
            let f = scene.frame(i)?;
            let Some(gt) = f.depth.clone() else { continue };
            samples.push(EvalSample {
                zones: f.zone_grid(cfg.zone_rows, cfg.zone_cols)?,
                image: f.image,
                gt,
            });
        }
    }
    if samples.is_empty() {
        return Err(Error::data(data, "test split has no frame with ground-truth depth"));
    }
    Ok(samples)
}

/// Evaluates a checkpoint or a baseline on the `test` split of `data` and
/// writes metrics, per-sample rows and optional image dumps to `out`.
pub fn eval(cfg: &Config, data: &Path, predictor: &Predictor, out: &Path, dump: bool) -> Result<EvalOutcome<Real>> {
    cfg.validate()?;
    let samples = load_test_samples(cfg, data)?;
    let model;
    let gf = GuidedFilter(cfg.guided_filter());
    let p: &dyn DepthPredictor<Real> = match predictor {
        Predictor::Checkpoint(path) => {
            let ck = Checkpoint::<Real>::load(path)?;
            model = Models::from_params(ck.config, ck.params)?;
            &model
        }
        Predictor::NearestNeighbour => &NearestNeighbour,
        Predictor::GuidedFilter => &gf,
    };
    let outcome = evaluate(p, &samples, &cfg.eval())?;
    outcome.write(out, dump.then_some(samples.as_slice()))?;
    echo_config(cfg, out)?;
    Ok(outcome)
}
