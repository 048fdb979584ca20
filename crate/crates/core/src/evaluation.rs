//! Session metrics, run summaries and the on-disk report files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::LabeledSet;
use crate::error::{Error, Result};
use crate::losses::argmax_rows;
use crate::model::Classifier;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub t: usize,
    /// Top-1 accuracy over all seen classes.
    pub acc: f64,
    /// `None` when there are no old classes yet.
    pub acc_old: Option<f64>,
    pub acc_new: f64,
    pub params_trainable: usize,
    pub params_total: usize,
    /// Boosted-model accuracy minus final-model accuracy, when a boosted
    /// model was trained this session.
    pub gap: Option<f64>,
    pub boosted_acc: Option<f64>,
    /// Rows are true labels, columns predictions.
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: serde_json::Value,
    pub seed: u64,
    pub sessions: Vec<SessionReport>,
    pub avg_inc_acc: f64,
    /// Backbone parameter count of the final model is the same every session.
    pub size_law_holds: bool,
}

/// Accuracy, old/new split and confusion counts for one model on the
/// test instances of all seen classes. Labels `< num_old` are old classes.
pub fn evaluate_session(
    model: &impl Classifier,
    test_all_seen: &LabeledSet,
    t: usize,
    num_old: usize,
) -> Result<SessionReport> {
    let k = model.num_classes();
    if let Some(&label) = test_all_seen.y.iter().find(|&&y| y >= k) {
        return Err(Error::Protocol(format!(
            "test label {label} is outside the model's {k} classes"
        )));
    }
    if test_all_seen.is_empty() {
        return Err(Error::MissingData("empty test set".into()));
    }
    let pred = argmax_rows(model.logits(test_all_seen.x.view())?.view());
    let mut confusion = vec![vec![0usize; k]; k];
    for (&y, &p) in test_all_seen.y.iter().zip(&pred) {
        confusion[y][p] += 1;
    }
    let part = |range: std::ops::Range<usize>| -> Option<f64> {
        let n: usize = range.clone().map(|c| confusion[c].iter().sum::<usize>()).sum();
        let hit: usize = range.map(|c| confusion[c][c]).sum();
        (n > 0).then(|| hit as f64 / n as f64)
    };
    let params = model.parameter_count();
    Ok(SessionReport {
        t,
        acc: part(0..k).unwrap_or(0.0),
        acc_old: part(0..num_old),
        acc_new: part(num_old..k).unwrap_or(0.0),
        params_trainable: params.trainable,
        params_total: params.total,
        gap: None,
        boosted_acc: None,
        confusion,
    })
}

pub fn average_incremental_accuracy(reports: &[SessionReport]) -> Result<f64> {
    if reports.is_empty() {
        return Err(Error::InvalidArgument("no session reports".into()));
    }
    Ok(reports.iter().map(|r| r.acc).sum::<f64>() / reports.len() as f64)
}

pub fn curve_csv(run: &RunReport) -> String {
    let mut s = String::from("t,acc\n");
    for r in &run.sessions {
        let _ = writeln!(s, "{},{}", r.t, r.acc);
    }
    s
}

/// Row-normalized confusion heatmap, white (0) to dark blue (1).
pub fn confusion_heatmap(confusion: &[Vec<usize>]) -> RgbImage {
    let k = confusion.len().max(1);
    let cell = (256 / k as u32).max(4);
    let mut img = RgbImage::new(cell * k as u32, cell * k as u32);
    for (i, row) in confusion.iter().enumerate() {
        let total = row.iter().sum::<usize>().max(1) as f64;
        for (j, &c) in row.iter().enumerate() {
            let v = c as f64 / total;
            let px = Rgb([
                (255.0 * (1.0 - v)).round() as u8,
                (255.0 * (1.0 - 0.8 * v)).round() as u8,
                255,
            ]);
            for dy in 0..cell {
                for dx in 0..cell {
                    img.put_pixel(j as u32 * cell + dx, i as u32 * cell + dy, px);
                }
            }
        }
    }
    img
}

pub fn results_json(run: &RunReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(run)?;
    s.push('\n');
    Ok(s)
}

/// Writes `results.json`, `curve.csv` and one `confusion_<t>.png` per
/// session into `out_dir`, creating it if needed.
pub fn emit_reports(run: &RunReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let json = out_dir.join("results.json");
    fs::write(&json, results_json(run)?)?;
    written.push(json);
    written.extend(emit_plots(run, out_dir)?);
    Ok(written)
}

/// The derived files only (`curve.csv` and heatmaps).
pub fn emit_plots(run: &RunReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let csv = out_dir.join("curve.csv");
    fs::write(&csv, curve_csv(run))?;
    written.push(csv);
    for r in &run.sessions {
        let png = out_dir.join(format!("confusion_{}.png", r.t));
        confusion_heatmap(&r.confusion).save(&png)?;
        written.push(png);
    }
    Ok(written)
}

pub fn load_run(dir: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(dir.join("results.json"))?;
    Ok(serde_json::from_str(&text)?)
}
