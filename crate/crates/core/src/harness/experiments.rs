//! Experiment drivers: positive-sample audit, pyramid-level ablation and
//! the loss-threshold sweep. Each writes CSV and JSON under `<out>/reports`.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::assign::{iou, level_stats, stats_csv, AnchorConfig, Assigner, GtImage, LevelStats};
use crate::dcloss::DcLossParams;
use crate::error::{Error, Result};
use crate::pyramid::Level;
use crate::synth::{generate_scenes, Scene};

use super::config::{RegressionLoss, RunConfig};
use super::eval::{evaluate_model, EvalResult};
use super::model::Detector;
use super::train::{train, EpochLoss};

pub fn reports_dir(out: &Path) -> Result<PathBuf> {
    let d = out.join("reports");
    fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    Ok(d)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

/// Train scenes `0..n_train` and validation scenes `n_train..n_train + n_val`
/// of the configured scene stream.
pub fn split(cfg: &RunConfig, n_train: usize, n_val: usize) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let train = generate_scenes(&cfg.data, 0, n_train)?;
    let val = generate_scenes(&cfg.data, n_train as u64, n_val)?;
    Ok((train, val))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fig1Report {
    pub images: usize,
    pub objects: usize,
    pub stats: Vec<LevelStats>,
    /// Fraction of all positives on each level.
    pub positive_share: Vec<(Level, f64)>,
    /// Number of gts whose single best anchor lies on each level.
    pub best_level_counts: Vec<(Level, usize)>,
}

/// Level holding each gt's highest-IoU anchor (lowest anchor index on ties).
pub fn best_levels(img: &GtImage, anchors: &AnchorConfig) -> Vec<Level> {
    let set = anchors.anchors(img.height, img.width);
    img.boxes
        .iter()
        .map(|g| {
            let mut best = (f64::NEG_INFINITY, Level::P2);
            for (level, range, _) in &set.spans {
                for a in &set.boxes[range.clone()] {
                    let v = iou(a, g);
                    if v > best.0 {
                        best = (v, *level);
                    }
                }
            }
            best.1
        })
        .collect()
}

pub fn experiment_fig1(images: &[GtImage], anchors: &AnchorConfig, assigner: &dyn Assigner) -> Result<Fig1Report> {
    let stats = level_stats(images, anchors, assigner)?;
    let total: usize = stats.iter().map(|s| s.positives).sum();
    let positive_share = stats
        .iter()
        .map(|s| (s.level, if total == 0 { 0.0 } else { s.positives as f64 / total as f64 }))
        .collect();
    let mut best_level_counts: Vec<(Level, usize)> = anchors.levels.iter().map(|&l| (l, 0)).collect();
    for img in images {
        for l in best_levels(img, anchors) {
            if let Some(slot) = best_level_counts.iter_mut().find(|(x, _)| *x == l) {
                slot.1 += 1;
            }
        }
    }
    Ok(Fig1Report {
        images: images.len(),
        objects: images.iter().map(|i| i.boxes.len()).sum(),
        stats,
        positive_share,
        best_level_counts,
    })
}

pub fn write_fig1(out: &Path, report: &Fig1Report) -> Result<()> {
    let dir = reports_dir(out)?;
    write_text(&dir.join("level_stats.csv"), &stats_csv(&report.stats))?;
    write_json(&dir.join("level_stats.json"), report)
}

/// Mean and two-sided 95% Student-t interval of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval95 {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

pub fn confidence_interval(xs: &[f64]) -> Result<Interval95> {
    if xs.is_empty() {
        return Err(Error::Invalid("confidence interval of an empty sample".into()));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return Ok(Interval95 { mean, lo: mean, hi: mean });
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let t = StudentsT::new(0.0, 1.0, n - 1.0).map_err(|e| Error::Invalid(e.to_string()))?.inverse_cdf(0.975);
    let half = t * (var / n).sqrt();
    Ok(Interval95 { mean, lo: mean - half, hi: mean + half })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub eval: EvalResult,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub levels: Vec<Level>,
    pub runs: Vec<SeedRun>,
    pub ap: Interval95,
    pub ap50: Interval95,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub train_scenes: usize,
    pub val_scenes: usize,
    pub epochs: usize,
    pub rows: Vec<AblationRow>,
    /// Mean AP of the first subset over mean AP of the last one.
    pub ap_ratio_first_to_last: Option<f64>,
}

/// One detector per (level subset, seed) with enhancement modules off; the
/// seed drives both initialization and data order.
pub fn experiment_ablation(cfg: &RunConfig) -> Result<AblationReport> {
    let ab = &cfg.ablation;
    if ab.subsets.is_empty() || ab.seeds.is_empty() {
        return Err(Error::Invalid("ablation needs at least one subset and one seed".into()));
    }
    let n_train = ab.train_scenes.unwrap_or(cfg.train_scenes);
    let n_val = ab.val_scenes.unwrap_or(cfg.val_scenes);
    let (train_set, val_set) = split(cfg, n_train, n_val)?;
    let mut tc = cfg.train.clone();
    tc.epochs = ab.epochs.unwrap_or(tc.epochs);

    let mut rows = Vec::new();
    for levels in &ab.subsets {
        let mut mc = cfg.model.clone();
        mc.enhance = false;
        mc.levels = levels.clone();
        let det = Detector::new(mc)?;
        let mut runs = Vec::new();
        for &seed in &ab.seeds {
            let t = super::config::TrainConfig { seed, ..tc.clone() };
            let out = train(&det, &train_set, &t, &cfg.assign)?;
            let eval = evaluate_model(&det, &out.checkpoint.params, &val_set, &cfg.eval)?;
            info!("ablation {levels:?} seed {seed}: AP {:.4} AP50 {:.4}", eval.ap, eval.ap50);
            runs.push(SeedRun { seed, eval, final_loss: out.curve.last().map_or(f64::NAN, |e| e.total) });
        }
        let ap = confidence_interval(&runs.iter().map(|r| r.eval.ap).collect::<Vec<_>>())?;
        let ap50 = confidence_interval(&runs.iter().map(|r| r.eval.ap50).collect::<Vec<_>>())?;
        rows.push(AblationRow { levels: levels.clone(), runs, ap, ap50 });
    }
    let first = rows.first().map(|r| r.ap.mean);
    let last = rows.last().map(|r| r.ap.mean);
    let ap_ratio_first_to_last = match (first, last) {
        (Some(a), Some(b)) if rows.len() > 1 && b > 0.0 => Some(a / b),
        _ => None,
    };
    Ok(AblationReport { train_scenes: n_train, val_scenes: n_val, epochs: tc.epochs, rows, ap_ratio_first_to_last })
}

fn level_list(levels: &[Level]) -> String {
    levels.iter().map(|l| l.name()).collect::<Vec<_>>().join("+")
}

pub fn ablation_csv(r: &AblationReport) -> String {
    let mut s = String::from("levels,seed,ap,ap50,ap75,ap_vt,ap_t,final_loss\n");
    for row in &r.rows {
        for run in &row.runs {
            let e = &run.eval;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                level_list(&row.levels),
                run.seed,
                e.ap,
                e.ap50,
                e.ap75,
                e.ap_vt,
                e.ap_t,
                run.final_loss
            ));
        }
    }
    s
}

pub fn write_ablation(out: &Path, r: &AblationReport) -> Result<()> {
    let dir = reports_dir(out)?;
    write_text(&dir.join("ablation.csv"), &ablation_csv(r))?;
    write_json(&dir.join("ablation.json"), r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub delta: f64,
    pub k: f64,
    pub eval: EvalResult,
    pub curve: Vec<EpochLoss>,
}

/// One training run per `delta` with `k` fixed and the loss parameters
/// frozen; all runs share the seed and data.
pub fn experiment_delta_sweep(cfg: &RunConfig) -> Result<Vec<SweepRow>> {
    let sw = &cfg.sweep;
    if sw.deltas.is_empty() {
        return Err(Error::Invalid("delta sweep needs at least one value".into()));
    }
    let n_train = sw.train_scenes.unwrap_or(cfg.train_scenes);
    let n_val = sw.val_scenes.unwrap_or(cfg.val_scenes);
    let (train_set, val_set) = split(cfg, n_train, n_val)?;
    let det = Detector::new(cfg.model.clone())?;
    let mut rows = Vec::new();
    for &delta in &sw.deltas {
        let mut tc = cfg.train.clone();
        tc.epochs = sw.epochs.unwrap_or(tc.epochs);
        if tc.regression == RegressionLoss::SmoothL1 {
            tc.regression = RegressionLoss::Dcloss;
        }
        tc.dcloss = DcLossParams { k: sw.k, delta, learnable: false, swap_weights: tc.dcloss.swap_weights };
        tc.dcloss.validate()?;
        let out = train(&det, &train_set, &tc, &cfg.assign)?;
        let eval = evaluate_model(&det, &out.checkpoint.params, &val_set, &cfg.eval)?;
        info!("sweep delta {delta}: AP {:.4} AP50 {:.4}", eval.ap, eval.ap50);
        rows.push(SweepRow { delta, k: sw.k, eval, curve: out.curve });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("delta,k,ap,ap50,ap75,ap_vt,ap_t\n");
    for r in rows {
        let e = &r.eval;
        s.push_str(&format!("{},{},{},{},{},{},{}\n", r.delta, r.k, e.ap, e.ap50, e.ap75, e.ap_vt, e.ap_t));
    }
    s
}

pub fn write_sweep(out: &Path, rows: &[SweepRow]) -> Result<()> {
    let dir = reports_dir(out)?;
    write_text(&dir.join("delta_sweep.csv"), &sweep_csv(rows))?;
    write_json(&dir.join("delta_sweep.json"), &rows)
}
