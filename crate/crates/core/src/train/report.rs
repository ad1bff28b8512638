//! Evaluation reports: per-cell table, metrics, per-day histograms.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{io_err, predict_set, Metrics, Result, TrainError};
use crate::data::PreparedSet;
use crate::features::ScalerParams;
use crate::model::SarcNetParams;

/// Left edge of the first histogram bin.
pub const HIST_LOW: f64 = 0.5;
pub const HIST_WIDTH: f64 = 0.5;
pub const HIST_BINS: usize = 10;

/// Bin of a prediction after clamping it to the score range `[1, 5]`.
pub fn histogram_bin(prediction: f64) -> usize {
    let c = prediction.clamp(1.0, 5.0);
    (((c - HIST_LOW) / HIST_WIDTH).floor() as usize).min(HIST_BINS - 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPrediction {
    pub cell_id: String,
    pub day: i64,
    pub ground_truth: f64,
    pub prediction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DayHistogram {
    pub day: i64,
    pub cells: usize,
    pub mean_prediction: f64,
    pub counts: [usize; HIST_BINS],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub cells: Vec<CellPrediction>,
    pub metrics: Metrics,
    /// Sorted by day.
    pub histograms: Vec<DayHistogram>,
    /// Training epoch of the evaluated checkpoint, when known.
    pub epoch: Option<usize>,
}

#[derive(Serialize)]
struct Summary<'a> {
    cells: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    epoch: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spearman: Option<f64>,
    mae: f64,
    mse: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    r2: Option<f64>,
    degenerate: Vec<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    highest_mean_day: Option<i64>,
    bin_edges: Vec<f64>,
    day: BTreeMap<String, &'a DayHistogram>,
}

impl EvalReport {
    pub fn from_cells(cells: Vec<CellPrediction>, epoch: Option<usize>) -> Result<Self> {
        if cells.is_empty() {
            return Err(TrainError::Report("no cells to report".into()));
        }
        let pred: Vec<f64> = cells.iter().map(|c| c.prediction).collect();
        let gt: Vec<f64> = cells.iter().map(|c| c.ground_truth).collect();
        let metrics = Metrics::compute(&pred, &gt)?;
        let mut days: BTreeMap<i64, DayHistogram> = BTreeMap::new();
        for c in &cells {
            let h = days.entry(c.day).or_insert(DayHistogram {
                day: c.day,
                cells: 0,
                mean_prediction: 0.0,
                counts: [0; HIST_BINS],
            });
            h.cells += 1;
            h.mean_prediction += c.prediction;
            h.counts[histogram_bin(c.prediction)] += 1;
        }
        let histograms = days
            .into_values()
            .map(|mut h| {
                h.mean_prediction /= h.cells as f64;
                h
            })
            .collect();
        let report = Self {
            cells,
            metrics,
            histograms,
            epoch,
        };
        report.check_consistency()?;
        Ok(report)
    }

    /// Recomputes the metrics and histogram totals from the per-cell table.
    pub fn check_consistency(&self) -> Result<()> {
        let pred: Vec<f64> = self.cells.iter().map(|c| c.prediction).collect();
        let gt: Vec<f64> = self.cells.iter().map(|c| c.ground_truth).collect();
        let again = Metrics::compute(&pred, &gt)?;
        let same = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(x), Some(y)) => (x - y).abs() <= 1e-12,
            (None, None) => true,
            _ => false,
        };
        let ok = same(again.spearman, self.metrics.spearman)
            && same(again.r2, self.metrics.r2)
            && (again.mae - self.metrics.mae).abs() <= 1e-12
            && (again.mse - self.metrics.mse).abs() <= 1e-12;
        let binned: usize = self.histograms.iter().flat_map(|h| h.counts).sum();
        if !ok || binned != self.cells.len() {
            return Err(TrainError::Report("metrics do not match the per-cell table".into()));
        }
        Ok(())
    }

    /// Day whose mean prediction is highest.
    pub fn highest_mean_day(&self) -> Option<i64> {
        self.histograms
            .iter()
            .max_by(|a, b| a.mean_prediction.total_cmp(&b.mean_prediction))
            .map(|h| h.day)
    }

    pub fn summary_text(&self) -> String {
        let summary = Summary {
            cells: self.cells.len(),
            epoch: self.epoch,
            spearman: self.metrics.spearman,
            mae: self.metrics.mae,
            mse: self.metrics.mse,
            r2: self.metrics.r2,
            degenerate: self.metrics.degenerate(),
            highest_mean_day: self.highest_mean_day(),
            bin_edges: (0..=HIST_BINS).map(|i| HIST_LOW + HIST_WIDTH * i as f64).collect(),
            day: self.histograms.iter().map(|h| (h.day.to_string(), h)).collect(),
        };
        toml::to_string(&summary).expect("summary is plain data")
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(io_err(path))?;
        let mut w = csv::Writer::from_writer(file);
        for c in &self.cells {
            w.serialize(c).map_err(|e| TrainError::Report(e.to_string()))?;
        }
        w.flush().map_err(io_err(path))
    }

    /// One bar chart per day, named `hist_day{day}.png`.
    pub fn write_histograms(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        let tallest = self.histograms.iter().flat_map(|h| h.counts).max().unwrap_or(1).max(1);
        let mut paths = Vec::new();
        for h in &self.histograms {
            let path = dir.join(format!("hist_day{}.png", h.day));
            render_histogram(&h.counts, tallest)
                .save(&path)
                .map_err(|e| TrainError::Report(format!("{}: {e}", path.display())))?;
            paths.push(path);
        }
        Ok(paths)
    }

    /// Writes `predictions.csv`, `summary.toml` and the histograms into `dir`.
    pub fn write_all(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let csv = dir.join("predictions.csv");
        self.write_csv(&csv)?;
        let summary = dir.join("summary.toml");
        fs::write(&summary, self.summary_text()).map_err(io_err(&summary))?;
        let mut out = vec![csv, summary];
        out.extend(self.write_histograms(dir)?);
        Ok(out)
    }
}

const BAR_W: u32 = 32;
const MARGIN: u32 = 16;
const PLOT_H: u32 = 200;

/// Shared y-scale across days so charts are comparable side by side.
fn render_histogram(counts: &[usize; HIST_BINS], tallest: usize) -> RgbImage {
    let width = 2 * MARGIN + BAR_W * HIST_BINS as u32;
    let height = 2 * MARGIN + PLOT_H;
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let base = MARGIN + PLOT_H;
    for (i, &c) in counts.iter().enumerate() {
        let h = ((c as f64 / tallest as f64) * PLOT_H as f64).round() as u32;
        let x0 = MARGIN + i as u32 * BAR_W + 2;
        for x in x0..x0 + BAR_W - 4 {
            for y in base - h..base {
                img.put_pixel(x, y, Rgb([51, 102, 170]));
            }
        }
    }
    for x in MARGIN..width - MARGIN {
        img.put_pixel(x, base, Rgb([0, 0, 0]));
    }
    for y in MARGIN..=base {
        img.put_pixel(MARGIN - 1, y, Rgb([0, 0, 0]));
    }
    // ticks at integer scores 1..5
    for s in 1..=5u32 {
        let x = MARGIN + (2 * s - 1) * BAR_W;
        for y in base..base + 4 {
            img.put_pixel(x.min(width - 1), y, Rgb([0, 0, 0]));
        }
    }
    img
}

/// Reads a table written by [`EvalReport::write_csv`].
pub fn read_predictions(path: &Path) -> Result<Vec<CellPrediction>> {
    let file = File::open(path).map_err(io_err(path))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(|e| TrainError::Report(format!("{}: {e}", path.display()))))
        .collect()
}

/// Scores every cell in eval mode and builds the report.
pub fn evaluate(
    params: &SarcNetParams<f32>,
    set: &PreparedSet,
    scaler: &ScalerParams,
    epoch: Option<usize>,
) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(TrainError::Report("no records to evaluate".into()));
    }
    if scaler.protocol != set.protocol || params.config.protocol != set.protocol {
        return Err(TrainError::Config(format!(
            "protocol mismatch: data {:?}, scaler {:?}, model {:?}",
            set.protocol, scaler.protocol, params.config.protocol
        )));
    }
    let pred = predict_set(params, set, scaler)?;
    let cells = set
        .cells
        .iter()
        .zip(pred)
        .map(|(c, p)| CellPrediction {
            cell_id: c.cell_id.clone(),
            day: c.day,
            ground_truth: c.target,
            prediction: p,
        })
        .collect();
    EvalReport::from_cells(cells, epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(id: usize, day: i64, gt: f64, p: f64) -> CellPrediction {
        CellPrediction {
            cell_id: format!("c{id}"),
            day,
            ground_truth: gt,
            prediction: p,
        }
    }

    #[test]
    fn bins_clamp_for_display_only() {
        assert_eq!(histogram_bin(-3.0), 1);
        assert_eq!(histogram_bin(1.0), 1);
        assert_eq!(histogram_bin(1.49), 1);
        assert_eq!(histogram_bin(1.5), 2);
        assert_eq!(histogram_bin(4.99), 8);
        assert_eq!(histogram_bin(5.0), 9);
        assert_eq!(histogram_bin(9.0), 9);
        let r = EvalReport::from_cells(
            vec![cell(0, 18, 1.0, 7.0), cell(1, 18, 2.0, 2.0), cell(2, 18, 3.0, 3.0)],
            None,
        )
        .unwrap();
        // raw 7.0 enters the metrics unclamped
        assert!((r.metrics.mae - 6.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_predictions_are_flagged_not_fatal() {
        let cells = (0..6).map(|i| cell(i, 18, 1.0 + i as f64 * 0.5, 2.5)).collect();
        let r = EvalReport::from_cells(cells, Some(3)).unwrap();
        assert_eq!(r.metrics.spearman, None);
        assert_eq!(r.metrics.degenerate(), ["spearman"]);
        assert!(r.summary_text().contains("degenerate = [\"spearman\"]"));
    }

    #[test]
    fn per_day_histograms_and_files() {
        let mut cells = Vec::new();
        for i in 0..10 {
            cells.push(cell(i, 18, 2.0, 1.5 + 0.1 * i as f64));
            cells.push(cell(100 + i, 32, 4.0, 3.0 + 0.1 * i as f64));
        }
        let r = EvalReport::from_cells(cells, None).unwrap();
        assert_eq!(r.histograms.len(), 2);
        assert_eq!(r.highest_mean_day(), Some(32));
        assert!(r.summary_text().contains("highest_mean_day = 32"));
        let dir = tempfile::tempdir().unwrap();
        let files = r.write_all(dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        let back = read_predictions(&dir.path().join("predictions.csv")).unwrap();
        assert_eq!(back, r.cells);
        let img = image::open(dir.path().join("hist_day32.png")).unwrap();
        assert_eq!(img.width(), 2 * MARGIN + BAR_W * HIST_BINS as u32);
    }

    #[test]
    fn tampered_report_fails_consistency() {
        let cells = (0..5).map(|i| cell(i, 18, i as f64, i as f64 * 0.9)).collect();
        let mut r = EvalReport::from_cells(cells, None).unwrap();
        r.metrics.mae += 0.1;
        assert!(r.check_consistency().is_err());
    }
}
