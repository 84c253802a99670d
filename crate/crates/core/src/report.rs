//! Report documents: versioned JSON, markdown tables and raster figures.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Scene};
use crate::evaluation::{
    cv_baseline, evaluate_baseline, predict_all, report_from_predictions, AblationReport, EvalMode, RmseReport,
    REPORT_SCHEMA_VERSION,
};
use crate::model::AgentPrediction;
use crate::training::{apply_variant, Checkpoint};
use crate::{Error, Result};

/// Published RMSE (m) at 1–5 s on NGSIM.
pub const NGSIM_TARGETS: [f64; 5] = [0.32, 0.83, 1.59, 2.46, 3.52];

/// One agent's inputs and outputs, kept for plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleAgent {
    pub agent_id: i64,
    pub history: Vec<[f64; 2]>,
    pub future: Vec<[f64; 2]>,
    pub predicted: Vec<[f64; 2]>,
    pub baseline: Vec<[f64; 2]>,
    pub endpoint_samples: Vec<[f64; 2]>,
    pub candidates: Vec<[f64; 2]>,
    pub endpoint: Option<[f64; 2]>,
}

impl ExampleAgent {
    pub fn from_prediction(scene: &Scene, agent: usize, pred: &AgentPrediction) -> Self {
        let w = &scene.windows[agent];
        Self {
            agent_id: w.agent_id,
            history: w.history.iter().map(|f| [f[0], f[1]]).collect(),
            future: w.future.clone(),
            predicted: pred.trajectory.mu.clone(),
            baseline: cv_baseline(w),
            endpoint_samples: pred.distribution.as_ref().map_or(Vec::new(), |d| d.samples.clone()),
            candidates: pred.candidates.as_ref().map_or(Vec::new(), |c| c.points.clone()),
            endpoint: pred.endpoint,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    /// Dataset source id, e.g. `ngsim` or `synthetic:lane_change`.
    pub source: String,
    pub seed: u64,
    pub model: RmseReport,
    pub baseline: RmseReport,
    /// Published numbers, present for NGSIM data only.
    pub targets: Option<Vec<f64>>,
    pub example: Option<ExampleAgent>,
}

impl EvalReport {
    pub fn new(source: &str, seed: u64, model: RmseReport, baseline: RmseReport, example: Option<ExampleAgent>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            source: source.to_string(),
            seed,
            model,
            baseline,
            targets: (source == "ngsim").then(|| NGSIM_TARGETS.to_vec()),
            example,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn from_json(text: &str, path: &Path) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: format!("report schema {} is not supported", r.schema_version),
            });
        }
        Ok(r)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }

    /// Horizons as columns, one row per model.
    pub fn markdown_table(&self) -> String {
        let mut s = String::new();
        header(&mut s, "Model", &self.model);
        row(&mut s, "CV (Kalman)", &self.baseline.rmse());
        let label = match self.model.mode {
            EvalMode::Calibrated => format!("DED ({})", self.model.label),
            EvalMode::BestOfC => format!("DED ({}, best_of_C, diagnostic)", self.model.label),
        };
        row(&mut s, &label, &self.model.rmse());
        if let Some(t) = &self.targets {
            row(&mut s, "DED (published, NGSIM)", &t[..self.model.horizons.len().min(t.len())]);
        }
        if let Some(c) = &self.model.cost {
            let _ = writeln!(
                s,
                "\n{} windows; {} parameters; {:.3e} MACs per scene.",
                self.model.n_windows, c.parameters, c.macs_per_scene
            );
        }
        s
    }
}

/// Evaluates `ckpt` on the test split of `data` against the baseline,
/// keeping the first test agent as the plotted example.
pub fn build_eval_report(ckpt: &Checkpoint, data: &Dataset, mode: EvalMode, seed: u64) -> Result<EvalReport> {
    let cfg = &ckpt.model.config;
    if data.hist_len != cfg.hist_len || data.fut_len != cfg.fut_len {
        return Err(Error::Data(format!(
            "dataset windows are {}+{} frames but the checkpoint expects {}+{}",
            data.hist_len, data.fut_len, cfg.hist_len, cfg.fut_len
        )));
    }
    let test = data.split_scenes()?.test;
    if test.is_empty() {
        return Err(Error::Data("test split is empty".into()));
    }
    let variant = ckpt.train.variant;
    let preds = predict_all(ckpt, &test, variant, mode == EvalMode::BestOfC, seed)?;
    let model = report_from_predictions(ckpt, &test, &preds, variant, mode)?;
    let example = ExampleAgent::from_prediction(&test[0], 0, &preds[0][0]);
    Ok(EvalReport::new(&data.source, seed, model, evaluate_baseline(&test)?, Some(example)))
}

fn header(s: &mut String, first: &str, r: &RmseReport) {
    let _ = write!(s, "| {first} |");
    for h in &r.horizons {
        let _ = write!(s, " {} s |", h.seconds);
    }
    s.push_str("\n|---|");
    for _ in &r.horizons {
        s.push_str("---:|");
    }
    s.push('\n');
}

fn row(s: &mut String, label: &str, values: &[f64]) {
    let _ = write!(s, "| {label} |");
    for v in values {
        let _ = write!(s, " {v:.2} |");
    }
    s.push('\n');
}

impl AblationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ablation serializes") + "\n"
    }

    /// One row per variant with the endpoint modules it uses.
    pub fn markdown_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "| Variant | ED | EP |");
        for h in &self.baseline.horizons {
            let _ = write!(s, " {} s |", h.seconds);
        }
        s.push_str("\n|---|:-:|:-:|");
        for _ in &self.baseline.horizons {
            s.push_str("---:|");
        }
        s.push('\n');
        let mark = |b: bool| if b { "✓" } else { "" };
        for r in &self.rows {
            let w = apply_variant(r.variant);
            let _ = write!(s, "| {} | {} | {} |", r.variant, mark(w.uses_diffusion()), mark(w.uses_candidates()));
            for v in &r.mean_rmse {
                let _ = write!(s, " {v:.2} |");
            }
            s.push('\n');
        }
        let _ = write!(s, "| cv_kalman | | |");
        for v in self.baseline.rmse() {
            let _ = write!(s, " {v:.2} |");
        }
        let _ = writeln!(s, "\n\nMean over seeds {:?}.", self.seeds);
        s
    }
}

const FIG_SIZE: (u32, u32) = (640, 480);

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Runtime(format!("{}: cannot draw figure: {e}", path.display()))
}

fn bounds(points: impl Iterator<Item = [f64; 2]>) -> ((f64, f64), (f64, f64)) {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for [x, y] in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return ((-1.0, 1.0), (-1.0, 1.0));
    }
    let px = ((x1 - x0) * 0.05).max(0.5);
    let py = ((y1 - y0) * 0.05).max(0.5);
    ((x0 - px, x1 + px), (y0 - py, y1 + py))
}

/// RMSE against horizon: model blue, baseline red, published targets grey.
pub fn plot_rmse(report: &EvalReport, path: &Path) -> Result<()> {
    let series: Vec<(Vec<(f64, f64)>, RGBColor)> = [(&report.model, BLUE), (&report.baseline, RED)]
    .into_iter()
    .map(|(r, c)| (r.horizons.iter().map(|h| (h.seconds, h.rmse)).collect(), c))
    .chain(report.targets.iter().map(|t| {
        (t.iter().enumerate().map(|(i, &v)| ((i + 1) as f64, v)).collect(), RGBColor(128, 128, 128))
    }))
    .collect();
    let ymax = series
        .iter()
        .flat_map(|(s, _)| s.iter().map(|p| p.1))
        .fold(0.0f64, f64::max)
        .max(1e-3)
        * 1.1;
    let root = BitMapBackend::new(path, FIG_SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .build_cartesian_2d(0.0..5.5f64, 0.0..ymax)
        .map_err(|e| plot_err(path, e))?;
    for (s, c) in series {
        chart
            .draw_series(LineSeries::new(s.clone(), c.stroke_width(2)))
            .map_err(|e| plot_err(path, e))?;
        chart
            .draw_series(s.iter().map(|&p| Circle::new(p, 4, c.filled())))
            .map_err(|e| plot_err(path, e))?;
    }
    root.present().map_err(|e| plot_err(path, e))
}

/// Endpoint samples (grey), candidates (blue), chosen endpoint (red) and
/// the true endpoint (green).
pub fn plot_endpoints(ex: &ExampleAgent, path: &Path) -> Result<()> {
    let truth = *ex.future.last().ok_or_else(|| Error::usage("example has no future"))?;
    let all = ex
        .endpoint_samples
        .iter()
        .chain(&ex.candidates)
        .copied()
        .chain(ex.endpoint)
        .chain(std::iter::once(truth));
    let ((x0, x1), (y0, y1)) = bounds(all);
    let root = BitMapBackend::new(path, FIG_SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| plot_err(path, e))?;
    let grey = RGBColor(150, 150, 150);
    chart
        .draw_series(ex.endpoint_samples.iter().map(|p| Circle::new((p[0], p[1]), 2, grey.filled())))
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(ex.candidates.iter().map(|p| Circle::new((p[0], p[1]), 4, BLUE.filled())))
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(std::iter::once(Cross::new((truth[0], truth[1]), 7, GREEN.stroke_width(3))))
        .map_err(|e| plot_err(path, e))?;
    if let Some(e) = ex.endpoint {
        chart
            .draw_series(std::iter::once(TriangleMarker::new((e[0], e[1]), 8, RED.filled())))
            .map_err(|e| plot_err(path, e))?;
    }
    root.present().map_err(|e| plot_err(path, e))
}

/// History (black), ground truth (green), prediction (blue) and the
/// baseline (red).
pub fn plot_trajectory(ex: &ExampleAgent, path: &Path) -> Result<()> {
    let all = ex.history.iter().chain(&ex.future).chain(&ex.predicted).chain(&ex.baseline).copied();
    let ((x0, x1), (y0, y1)) = bounds(all);
    let root = BitMapBackend::new(path, FIG_SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .margin(20)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| plot_err(path, e))?;
    let last = *ex.history.last().unwrap_or(&[0.0, 0.0]);
    for (pts, c) in [
        (&ex.history, BLACK),
        (&ex.future, GREEN),
        (&ex.predicted, BLUE),
        (&ex.baseline, RED),
    ] {
        let mut line: Vec<(f64, f64)> = Vec::new();
        if !std::ptr::eq(pts, &ex.history) {
            line.push((last[0], last[1]));
        }
        line.extend(pts.iter().map(|p| (p[0], p[1])));
        chart
            .draw_series(LineSeries::new(line, c.stroke_width(2)))
            .map_err(|e| plot_err(path, e))?;
    }
    root.present().map_err(|e| plot_err(path, e))
}

/// Writes the three figures into `dir`, returning their paths.
pub fn emit_figures(report: &EvalReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = vec![dir.join("rmse.png")];
    plot_rmse(report, &out[0])?;
    if let Some(ex) = &report.example {
        let p = dir.join("endpoints.png");
        plot_endpoints(ex, &p)?;
        out.push(p);
        let p = dir.join("trajectory.png");
        plot_trajectory(ex, &p)?;
        out.push(p);
    }
    Ok(out)
}

/// Writes the JSON report and its markdown table beside it.
pub fn emit_report(report: &EvalReport, json_path: &Path) -> Result<()> {
    if let Some(parent) = json_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(json_path, report.to_json()).map_err(|e| Error::io(json_path, e))?;
    let md = json_path.with_extension("md");
    std::fs::write(&md, report.markdown_table()).map_err(|e| Error::io(&md, e))
}
