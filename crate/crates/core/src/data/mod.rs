//! Trajectory ingestion, windowing, scene assembly, synthetic scenarios and
//! dataset splitting.
//!
//! All coordinates are meters. Windows are sampled at 5 Hz
//! ([`FRAME_DT`]) and expressed relative to the agent's last observed
//! position; each window also remembers that position (`origin`) in its
//! scene's frame so relative placement between agents is recoverable.

mod ingest;
mod scene;
mod split;
mod store;
mod synth;
mod window;

use serde::{Deserialize, Serialize};

pub use ingest::{ingest_csv, ingest_reader, IngestReport, LengthUnit};
pub use scene::assemble_scenes;
pub use split::{split_dataset, DatasetSplit, SplitIndices};
pub use store::{Dataset, DATASET_VERSION};
pub use synth::{synth_scenarios, ScenarioKind};
pub use window::{downsample_and_window, kinematics, WindowAnchor, WindowSpec, WindowingReport};

/// Sampling period of raw tracks (10 Hz).
pub const SOURCE_DT: f64 = 0.1;
/// Sampling period after 2x downsampling (5 Hz).
pub const FRAME_DT: f64 = 0.2;
pub const DEFAULT_HIST_LEN: usize = 15;
pub const DEFAULT_FUT_LEN: usize = 25;
/// Per-frame history features: x, y, vx, vy, ax, ay.
pub const FEATURES: usize = 6;
/// Default distance (m) within which agents share a scene.
pub const DEFAULT_NEIGHBOR_RADIUS: f64 = 50.0;
/// Dataset source id of ingested CSV tracks.
pub const NGSIM_SOURCE: &str = "ngsim";

/// Reads an NGSIM-style CSV and turns it into windowed scenes.
pub fn ingest_dataset(
    path: &std::path::Path,
    unit: LengthUnit,
    spec: &WindowSpec,
    radius: f64,
) -> crate::Result<Dataset> {
    if radius.is_nan() || radius <= 0.0 {
        return Err(crate::Error::usage("neighbor radius must be positive"));
    }
    let report = ingest_csv(path, unit)?;
    let windows = downsample_and_window(&report.tracks, spec);
    log::info!(
        "{}: {} tracks ({} rejected), {} windows ({} short segments skipped)",
        path.display(),
        report.tracks.len(),
        report.rejected_tracks,
        windows.windows.len(),
        windows.skipped_segments
    );
    if windows.windows.is_empty() {
        return Err(crate::Error::Data(format!(
            "{}: no track is long enough for a {}+{} frame window",
            path.display(),
            spec.hist_len,
            spec.fut_len
        )));
    }
    let scenes = assemble_scenes(windows.windows, radius);
    Ok(Dataset::new(NGSIM_SOURCE, spec.hist_len, spec.fut_len, scenes))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub frame: i64,
    pub x: f64,
    pub y: f64,
    pub t: f64,
}

/// One vehicle's positions at the source rate, ordered by frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawTrack {
    pub vehicle_id: i64,
    pub points: Vec<TrackPoint>,
}

/// One agent's aligned history and future.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryWindow {
    pub agent_id: i64,
    /// Source frame of the last history point; agents sharing it are
    /// observed at the same instant.
    pub end_frame: i64,
    /// `(x, y, vx, vy, ax, ay)` per history frame, positions origin-centered.
    pub history: Vec<[f64; FEATURES]>,
    /// Future positions, origin-centered.
    pub future: Vec<[f64; 2]>,
    /// Last observed position in the enclosing frame (global until the
    /// window is placed in a scene, then relative to the scene origin).
    pub origin: [f64; 2],
}

impl TrajectoryWindow {
    pub fn endpoint(&self) -> [f64; 2] {
        *self.future.last().expect("window has a future")
    }

    pub fn last_velocity(&self) -> [f64; 2] {
        let h = self.history.last().expect("window has a history");
        [h[2], h[3]]
    }

    /// Positions a constant-velocity model reaches from the last observed
    /// state, one per future frame.
    pub fn constant_velocity_future(&self) -> Vec<[f64; 2]> {
        let [vx, vy] = self.last_velocity();
        (1..=self.future.len())
            .map(|i| {
                let t = i as f64 * FRAME_DT;
                [vx * t, vy * t]
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.history.iter().flatten().all(|v| v.is_finite())
            && self.future.iter().flatten().all(|v| v.is_finite())
            && self.origin.iter().all(|v| v.is_finite())
    }

    /// Index of the first history frame holding a non-finite value.
    pub fn first_non_finite_frame(&self) -> Option<usize> {
        self.history
            .iter()
            .position(|f| f.iter().any(|v| !v.is_finite()))
    }
}

/// Co-present agents sharing a reference frame; every agent is a neighbor
/// of every other.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub windows: Vec<TrajectoryWindow>,
    /// `presence_mask[agent][frame]` for each history frame.
    pub presence_mask: Vec<Vec<bool>>,
    pub scene_origin: [f64; 2],
}

impl Scene {
    /// Builds a scene from windows whose origins are global, re-expressing
    /// origins relative to their centroid. All history frames are present.
    pub fn from_global_windows(mut windows: Vec<TrajectoryWindow>) -> Self {
        assert!(!windows.is_empty(), "a scene needs at least one agent");
        let n = windows.len() as f64;
        let cx = windows.iter().map(|w| w.origin[0]).sum::<f64>() / n;
        let cy = windows.iter().map(|w| w.origin[1]).sum::<f64>() / n;
        for w in &mut windows {
            w.origin = [w.origin[0] - cx, w.origin[1] - cy];
        }
        let presence_mask = windows.iter().map(|w| vec![true; w.history.len()]).collect();
        Scene {
            windows,
            presence_mask,
            scene_origin: [cx, cy],
        }
    }

    pub fn num_agents(&self) -> usize {
        self.windows.len()
    }

    /// Checks the structural invariants of a scene.
    pub fn validate(&self, hist_len: usize, fut_len: usize) -> crate::Result<()> {
        use crate::Error;
        if self.windows.is_empty() {
            return Err(Error::Data("scene without agents".into()));
        }
        if self.presence_mask.len() != self.windows.len() {
            return Err(Error::Data("presence mask does not cover every agent".into()));
        }
        for (w, mask) in self.windows.iter().zip(&self.presence_mask) {
            if w.history.len() != hist_len || w.future.len() != fut_len {
                return Err(Error::Data(format!(
                    "agent {} has {}+{} frames, expected {hist_len}+{fut_len}",
                    w.agent_id,
                    w.history.len(),
                    w.future.len()
                )));
            }
            if mask.len() != hist_len || !mask.last().copied().unwrap_or(false) {
                return Err(Error::Data(format!(
                    "agent {} is not present at the final history frame",
                    w.agent_id
                )));
            }
            if let Some(frame) = w.first_non_finite_frame() {
                return Err(Error::NonFinite {
                    agent_id: w.agent_id,
                    frame,
                });
            }
        }
        Ok(())
    }
}
