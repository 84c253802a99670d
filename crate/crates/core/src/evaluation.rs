//! RMSE at 1–5 s, the constant-velocity Kalman baseline, checkpoint
//! evaluation and variant ablations.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, Scene, TrajectoryWindow, FRAME_DT};
use crate::model::{AgentPrediction, ModelConfig};
use crate::training::{train, Checkpoint, EpochMetrics, TrainConfig, Variant};
use crate::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Frames between scored horizons (1 s at 5 Hz).
pub const HORIZON_STRIDE: usize = 5;
pub const MAX_HORIZONS: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalMode {
    #[default]
    Calibrated,
    /// Per window and horizon, the smallest error over the scored
    /// trajectory and every candidate decode. Diagnostic only.
    BestOfC,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Calibrated => "calibrated",
            EvalMode::BestOfC => "best_of_C",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "calibrated" => Ok(EvalMode::Calibrated),
            "best_of_C" | "best_of_c" => Ok(EvalMode::BestOfC),
            other => Err(Error::usage(format!(
                "unknown evaluation mode '{other}' (expected calibrated or best_of_C)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    pub seconds: f64,
    /// 1-based future frame.
    pub frame: usize,
    pub rmse: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCost {
    pub parameters: usize,
    pub macs_per_agent: usize,
    /// `macs_per_agent` times the mean number of agents per scene.
    pub macs_per_scene: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    /// Variant name, or `cv_kalman` for the baseline.
    pub label: String,
    pub mode: EvalMode,
    pub n_windows: usize,
    pub horizons: Vec<Horizon>,
    pub cost: Option<ModelCost>,
}

impl RmseReport {
    pub fn rmse(&self) -> Vec<f64> {
        self.horizons.iter().map(|h| h.rmse).collect()
    }

    /// RMSE at the last scored horizon.
    pub fn final_rmse(&self) -> f64 {
        self.horizons.last().map_or(f64::NAN, |h| h.rmse)
    }
}

/// Scored future frames (1-based) for a future of `len` frames.
pub fn horizon_frames(len: usize) -> Vec<usize> {
    (1..=MAX_HORIZONS)
        .map(|h| h * HORIZON_STRIDE)
        .take_while(|&f| f <= len)
        .collect()
}

fn check_lengths(preds: &[Vec<[f64; 2]>], gts: &[Vec<[f64; 2]>]) -> Result<usize> {
    if preds.is_empty() {
        return Err(Error::usage("no trajectories to score"));
    }
    if preds.len() != gts.len() {
        return Err(Error::usage(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            gts.len()
        )));
    }
    let len = gts[0].len();
    if preds.iter().chain(gts).any(|t| t.len() != len) {
        return Err(Error::usage("trajectories differ in length"));
    }
    if len < HORIZON_STRIDE {
        return Err(Error::usage(format!(
            "trajectories of {len} frames reach no scored horizon"
        )));
    }
    Ok(len)
}

fn rmse_from_sq(sq: Vec<f64>, frames: &[usize], n: usize) -> Vec<Horizon> {
    frames
        .iter()
        .zip(sq)
        .map(|(&f, s)| Horizon {
            seconds: f as f64 * FRAME_DT,
            frame: f,
            rmse: (s / n as f64).sqrt(),
        })
        .collect()
}

fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// `sqrt(mean over windows of squared Euclidean error)` at frames 5, 10, …
pub fn rmse_at_horizons(preds: &[Vec<[f64; 2]>], gts: &[Vec<[f64; 2]>]) -> Result<Vec<Horizon>> {
    let len = check_lengths(preds, gts)?;
    let frames = horizon_frames(len);
    let sq = frames
        .iter()
        .map(|&f| preds.iter().zip(gts).map(|(p, g)| sq_dist(p[f - 1], g[f - 1])).sum())
        .collect();
    Ok(rmse_from_sq(sq, &frames, preds.len()))
}

/// Like [`rmse_at_horizons`], but each window contributes the smallest
/// error over its set of alternative trajectories at every horizon.
pub fn min_rmse_at_horizons(sets: &[Vec<Vec<[f64; 2]>>], gts: &[Vec<[f64; 2]>]) -> Result<Vec<Horizon>> {
    if sets.iter().any(Vec::is_empty) {
        return Err(Error::usage("a window has no trajectory to score"));
    }
    let firsts: Vec<Vec<[f64; 2]>> = sets.iter().map(|s| s[0].clone()).collect();
    let len = check_lengths(&firsts, gts)?;
    if sets.iter().flatten().any(|t| t.len() != len) {
        return Err(Error::usage("trajectories differ in length"));
    }
    let frames = horizon_frames(len);
    let sq = frames
        .iter()
        .map(|&f| {
            sets.iter()
                .zip(gts)
                .map(|(set, g)| set.iter().map(|p| sq_dist(p[f - 1], g[f - 1])).fold(f64::INFINITY, f64::min))
                .sum()
        })
        .collect();
    Ok(rmse_from_sq(sq, &frames, sets.len()))
}

/// Noise settings of the constant-velocity Kalman filter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KalmanParams {
    /// Process acceleration noise (m/s²).
    pub accel_sigma: f64,
    /// Position observation noise (m).
    pub obs_sigma: f64,
    pub dt: f64,
}

impl Default for KalmanParams {
    fn default() -> Self {
        Self {
            accel_sigma: 1.0,
            obs_sigma: 0.5,
            dt: FRAME_DT,
        }
    }
}

/// Filters `positions` with a constant-velocity Kalman filter and
/// extrapolates `horizon` frames. The axes are independent, so each is a
/// two-state filter over (position, velocity).
pub fn kalman_forecast(positions: &[[f64; 2]], horizon: usize, p: &KalmanParams) -> Vec<[f64; 2]> {
    let mut out = vec![[0.0; 2]; horizon];
    for axis in 0..2 {
        let z: Vec<f64> = positions.iter().map(|q| q[axis]).collect();
        let (pos, vel) = kalman_axis(&z, p);
        for (i, o) in out.iter_mut().enumerate() {
            o[axis] = pos + vel * p.dt * (i + 1) as f64;
        }
    }
    out
}

fn kalman_axis(z: &[f64], p: &KalmanParams) -> (f64, f64) {
    let dt = p.dt;
    let r = p.obs_sigma * p.obs_sigma;
    let q = p.accel_sigma * p.accel_sigma;
    let (q11, q12, q22) = (q * dt.powi(4) / 4.0, q * dt.powi(3) / 2.0, q * dt * dt);
    match z.len() {
        0 => return (0.0, 0.0),
        1 => return (z[0], 0.0),
        _ => {}
    }
    // Two-point initialization at the second observation.
    let mut x = [z[1], (z[1] - z[0]) / dt];
    let mut cov = [[r, r / dt], [r / dt, 2.0 * r / (dt * dt)]];
    for &obs in &z[2..] {
        x = [x[0] + dt * x[1], x[1]];
        let [[a, b], [_, d]] = cov;
        let p11 = a + 2.0 * dt * b + dt * dt * d + q11;
        let p12 = b + dt * d + q12;
        let p22 = d + q22;
        let s = p11 + r;
        let (k1, k2) = (p11 / s, p12 / s);
        let innov = obs - x[0];
        x = [x[0] + k1 * innov, x[1] + k2 * innov];
        cov = [
            [(1.0 - k1) * p11, (1.0 - k1) * p12],
            [(1.0 - k1) * p12, p22 - k2 * p12],
        ];
    }
    (x[0], x[1])
}

/// Constant-velocity Kalman forecast of one window's future.
pub fn cv_baseline(w: &TrajectoryWindow) -> Vec<[f64; 2]> {
    let positions: Vec<[f64; 2]> = w.history.iter().map(|f| [f[0], f[1]]).collect();
    kalman_forecast(&positions, w.future.len(), &KalmanParams::default())
}

fn ground_truth(scenes: &[Scene]) -> Vec<Vec<[f64; 2]>> {
    scenes.iter().flat_map(|s| s.windows.iter().map(|w| w.future.clone())).collect()
}

pub fn evaluate_baseline(scenes: &[Scene]) -> Result<RmseReport> {
    let preds: Vec<Vec<[f64; 2]>> = scenes.iter().flat_map(|s| s.windows.iter().map(cv_baseline)).collect();
    let gts = ground_truth(scenes);
    Ok(RmseReport {
        label: "cv_kalman".into(),
        mode: EvalMode::Calibrated,
        n_windows: gts.len(),
        horizons: rmse_at_horizons(&preds, &gts)?,
        cost: None,
    })
}

/// Inference over every scene, in scene order. Scene `i` is predicted
/// with seed `seed + i`.
pub fn predict_all(ckpt: &Checkpoint, scenes: &[Scene], variant: Variant, with_alternatives: bool, seed: u64) -> Result<Vec<Vec<AgentPrediction>>> {
    scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| ckpt.model.predict_scene(s, variant, seed.wrapping_add(i as u64), with_alternatives))
        .collect()
}

/// Runs full inference with the checkpoint's variant and scores it.
pub fn evaluate(ckpt: &Checkpoint, test: &[Scene], mode: EvalMode, seed: u64) -> Result<RmseReport> {
    let variant = ckpt.train.variant;
    let preds = predict_all(ckpt, test, variant, mode == EvalMode::BestOfC, seed)?;
    report_from_predictions(ckpt, test, &preds, variant, mode)
}

pub fn report_from_predictions(
    ckpt: &Checkpoint,
    test: &[Scene],
    preds: &[Vec<AgentPrediction>],
    variant: Variant,
    mode: EvalMode,
) -> Result<RmseReport> {
    let gts = ground_truth(test);
    let agents = preds.iter().flatten();
    let horizons = match mode {
        EvalMode::Calibrated => {
            let mus: Vec<Vec<[f64; 2]>> = agents.map(|a| a.trajectory.mu.clone()).collect();
            rmse_at_horizons(&mus, &gts)?
        }
        EvalMode::BestOfC => {
            let sets: Vec<Vec<Vec<[f64; 2]>>> = agents
                .map(|a| {
                    std::iter::once(&a.trajectory)
                        .chain(&a.alternatives)
                        .map(|t| t.mu.clone())
                        .collect()
                })
                .collect();
            min_rmse_at_horizons(&sets, &gts)?
        }
    };
    let mean_agents = gts.len() as f64 / test.len().max(1) as f64;
    let macs = ckpt.model.macs_per_agent(variant);
    Ok(RmseReport {
        label: variant.name().into(),
        mode,
        n_windows: gts.len(),
        horizons,
        cost: Some(ModelCost {
            parameters: ckpt.model.num_parameters(),
            macs_per_agent: macs,
            macs_per_scene: macs as f64 * mean_agents,
        }),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// One report per seed.
    pub runs: Vec<RmseReport>,
    /// Per-horizon mean RMSE over seeds.
    pub mean_rmse: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub baseline: RmseReport,
    /// Training logs, one per (variant, seed) in row order.
    pub logs: Vec<Vec<EpochMetrics>>,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    /// Whether `full ≤ no_ep ≤ no_ed ≤ none` holds at the last horizon
    /// with the given slack.
    pub fn ordering_holds(&self, slack: f64) -> bool {
        let order = [Variant::Full, Variant::NoEp, Variant::NoEd, Variant::None];
        let finals: Option<Vec<f64>> = order
            .iter()
            .map(|&v| self.row(v).and_then(|r| r.mean_rmse.last().copied()))
            .collect();
        finals.is_some_and(|f| f.windows(2).all(|p| p[0] <= p[1] + slack))
    }
}

/// Trains and evaluates every variant once per seed on the test split.
pub fn ablate(
    split: &DatasetSplit,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<AblationReport> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::usage("ablation needs at least one seed and one variant"));
    }
    if split.test.is_empty() {
        return Err(Error::usage("ablation needs a non-empty test split"));
    }
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    for &variant in variants {
        let mut runs = Vec::new();
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                variant,
                ..train_cfg.clone()
            };
            let out = train(split, model_cfg, &cfg)?;
            if let Some(epoch) = out.diverged_at {
                return Err(Error::Diverged { epoch });
            }
            log::info!("ablation: trained {variant} seed {seed}");
            runs.push(evaluate(&out.checkpoint, &split.test, EvalMode::Calibrated, seed)?);
            logs.push(out.log);
        }
        let h = runs[0].horizons.len();
        let mean_rmse = (0..h)
            .map(|i| runs.iter().map(|r| r.horizons[i].rmse).sum::<f64>() / runs.len() as f64)
            .collect();
        rows.push(AblationRow {
            variant,
            runs,
            mean_rmse,
        });
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        rows,
        baseline: evaluate_baseline(&split.test)?,
        logs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(n: usize, offset: [f64; 2]) -> Vec<[f64; 2]> {
        (0..n).map(|i| [i as f64 + offset[0], 0.5 * i as f64 + offset[1]]).collect()
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let t = vec![line(25, [0.0, 0.0])];
        let h = rmse_at_horizons(&t, &t).unwrap();
        assert_eq!(h.len(), 5);
        assert!(h.iter().all(|h| h.rmse == 0.0));
        assert_eq!(h.iter().map(|h| h.frame).collect::<Vec<_>>(), vec![5, 10, 15, 20, 25]);
    }

    #[test]
    fn unit_offset_scores_one() {
        let p = vec![line(25, [1.0, 0.0]), line(25, [3.0, -1.0])];
        let g = vec![line(25, [0.0, 0.0]), line(25, [2.0, -1.0])];
        for h in rmse_at_horizons(&p, &g).unwrap() {
            assert!((h.rmse - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mixed_errors_hand_computed() {
        let g = vec![vec![[0.0; 2]; 25]; 3];
        let mut p = g.clone();
        p[1][4] = [3.0, 0.0];
        p[2][4] = [0.0, 4.0];
        let h = rmse_at_horizons(&p, &g).unwrap();
        assert!((h[0].rmse - (25.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert!((h[0].rmse - 2.8868).abs() < 1e-4);
        assert_eq!(h[1].rmse, 0.0);
    }

    #[test]
    fn empty_input_is_usage_error() {
        assert!(matches!(rmse_at_horizons(&[], &[]), Err(Error::Usage(_))));
    }

    #[test]
    fn stationary_history_stays_put() {
        let hist = vec![[4.0, -2.0]; 15];
        let f = kalman_forecast(&hist, 25, &KalmanParams::default());
        for p in f {
            assert!((p[0] - 4.0).abs() < 1e-12 && (p[1] + 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn straight_line_is_extended_exactly() {
        let pts: Vec<[f64; 2]> = (0..40).map(|i| [3.0 * i as f64 * FRAME_DT, -1.5 * i as f64 * FRAME_DT]).collect();
        let f = kalman_forecast(&pts[..15], 25, &KalmanParams::default());
        for (p, g) in f.iter().zip(&pts[15..]) {
            assert!(sq_dist(*p, *g).sqrt() < 1e-9);
        }
    }

    #[test]
    fn modes_parse() {
        assert_eq!("best_of_C".parse::<EvalMode>().unwrap(), EvalMode::BestOfC);
        assert!(matches!("best".parse::<EvalMode>(), Err(Error::Usage(_))));
    }
}
