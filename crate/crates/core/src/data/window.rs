use crate::data::{RawTrack, TrajectoryWindow, DEFAULT_FUT_LEN, DEFAULT_HIST_LEN, FEATURES, FRAME_DT};

/// Where sliding windows are anchored.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WindowAnchor {
    /// Windows start at the first kept frame of each track and advance by
    /// `stride`.
    TrackStart,
    /// Windows end their history on kept frames whose index is a multiple
    /// of `stride`, so windows of different vehicles line up in time.
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowSpec {
    pub hist_len: usize,
    pub fut_len: usize,
    /// Step between consecutive windows, in kept (5 Hz) frames.
    pub stride: usize,
    pub anchor: WindowAnchor,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            hist_len: DEFAULT_HIST_LEN,
            fut_len: DEFAULT_FUT_LEN,
            stride: 10,
            anchor: WindowAnchor::Global,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowingReport {
    pub windows: Vec<TrajectoryWindow>,
    /// Contiguous track segments too short for a single window.
    pub skipped_segments: usize,
}

/// Per-frame `(x, y, vx, vy, ax, ay)` from positions sampled every `dt`.
///
/// Backward differences; frames without a defined difference copy the
/// first defined one (velocity from frame 1, acceleration from frame 2).
pub fn kinematics(positions: &[[f64; 2]], dt: f64) -> Vec<[f64; FEATURES]> {
    let n = positions.len();
    let mut vel = vec![[0.0; 2]; n];
    for i in 1..n {
        for d in 0..2 {
            vel[i][d] = (positions[i][d] - positions[i - 1][d]) / dt;
        }
    }
    if n > 1 {
        vel[0] = vel[1];
    }
    let mut acc = vec![[0.0; 2]; n];
    for i in 2..n {
        for d in 0..2 {
            acc[i][d] = (vel[i][d] - vel[i - 1][d]) / dt;
        }
    }
    if n > 2 {
        acc[0] = acc[2];
        acc[1] = acc[2];
    }
    (0..n)
        .map(|i| {
            [
                positions[i][0],
                positions[i][1],
                vel[i][0],
                vel[i][1],
                acc[i][0],
                acc[i][1],
            ]
        })
        .collect()
}

/// Builds an origin-centered window from `hist_len + fut_len` global
/// positions at 5 Hz.
pub(crate) fn window_from_positions(
    agent_id: i64,
    end_frame: i64,
    positions: &[[f64; 2]],
    hist_len: usize,
) -> TrajectoryWindow {
    let origin = positions[hist_len - 1];
    let centered: Vec<[f64; 2]> = positions
        .iter()
        .map(|p| [p[0] - origin[0], p[1] - origin[1]])
        .collect();
    TrajectoryWindow {
        agent_id,
        end_frame,
        history: kinematics(&centered[..hist_len], FRAME_DT),
        future: centered[hist_len..].to_vec(),
        origin,
    }
}

/// Downsamples 10 Hz tracks to 5 Hz by keeping even source frames, then
/// cuts sliding windows of `hist_len + fut_len` kept frames.
///
/// Tracks are split wherever a kept frame is missing. Output is ordered by
/// vehicle id, then frame.
pub fn downsample_and_window(tracks: &[RawTrack], spec: &WindowSpec) -> WindowingReport {
    assert!(spec.hist_len >= 1 && spec.fut_len >= 1 && spec.stride >= 1);
    let total = spec.hist_len + spec.fut_len;
    let mut report = WindowingReport::default();

    let mut order: Vec<&RawTrack> = tracks.iter().collect();
    order.sort_by_key(|t| t.vehicle_id);

    for track in order {
        let kept: Vec<_> = track.points.iter().filter(|p| p.frame % 2 == 0).collect();
        let mut segments: Vec<&[_]> = Vec::new();
        let mut start = 0;
        for i in 1..=kept.len() {
            if i == kept.len() || kept[i].frame != kept[i - 1].frame + 2 {
                if i > start {
                    segments.push(&kept[start..i]);
                }
                start = i;
            }
        }
        for seg in segments {
            if seg.len() < total {
                report.skipped_segments += 1;
                continue;
            }
            let starts: Vec<usize> = match spec.anchor {
                WindowAnchor::TrackStart => (0..=seg.len() - total).step_by(spec.stride).collect(),
                WindowAnchor::Global => (0..=seg.len() - total)
                    .filter(|&s| {
                        let end = seg[s + spec.hist_len - 1].frame;
                        (end / 2).rem_euclid(spec.stride as i64) == 0
                    })
                    .collect(),
            };
            for s in starts {
                let positions: Vec<[f64; 2]> =
                    seg[s..s + total].iter().map(|p| [p.x, p.y]).collect();
                report.windows.push(window_from_positions(
                    track.vehicle_id,
                    seg[s + spec.hist_len - 1].frame,
                    &positions,
                    spec.hist_len,
                ));
            }
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TrackPoint;

    fn track(id: i64, frames: std::ops::RangeInclusive<i64>, f: impl Fn(f64) -> [f64; 2]) -> RawTrack {
        RawTrack {
            vehicle_id: id,
            points: frames
                .map(|fr| {
                    let t = fr as f64 * 0.1;
                    let [x, y] = f(t);
                    TrackPoint { frame: fr, x, y, t }
                })
                .collect(),
        }
    }

    fn spec(stride: usize, anchor: WindowAnchor) -> WindowSpec {
        WindowSpec {
            hist_len: 15,
            fut_len: 25,
            stride,
            anchor,
        }
    }

    #[test]
    fn unit_step_gives_five_meters_per_second() {
        let k = kinematics(&[[0.0, 0.0], [1.0, 0.0]], 0.2);
        assert_eq!(k[1][2], 5.0);
        assert_eq!(k[0][2], 5.0);
    }

    #[test]
    fn constant_velocity_has_zero_acceleration() {
        let t = track(1, 0..=200, |t| [12.5 * t + 3.0, -4.0 * t]);
        let r = downsample_and_window(&[t], &spec(7, WindowAnchor::TrackStart));
        assert!(!r.windows.is_empty());
        for w in &r.windows {
            for f in &w.history {
                assert!(f[4].abs() < 1e-9 && f[5].abs() < 1e-9, "{f:?}");
                assert!((f[2] - 12.5).abs() < 1e-9 && (f[3] + 4.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn eighty_one_frames_make_one_window() {
        // Frames 1..=81 keep the 40 even frames 2, 4, ..., 80.
        let t = track(3, 1..=81, |t| [t, 0.0]);
        let r = downsample_and_window(&[t], &spec(40, WindowAnchor::TrackStart));
        assert_eq!(r.windows.len(), 1);
        assert_eq!(r.windows[0].end_frame, 30);
        assert_eq!(r.skipped_segments, 0);
    }

    #[test]
    fn short_tracks_are_counted() {
        let t = track(3, 0..=40, |t| [t, 0.0]);
        let r = downsample_and_window(&[t], &spec(1, WindowAnchor::TrackStart));
        assert!(r.windows.is_empty());
        assert_eq!(r.skipped_segments, 1);
    }

    #[test]
    fn windows_are_recentered() {
        let t = track(1, 0..=300, |t| [100.0 + 3.0 * t * t, 7.0]);
        let r = downsample_and_window(&[t], &spec(5, WindowAnchor::TrackStart));
        for w in &r.windows {
            let last = w.history.last().unwrap();
            assert_eq!((last[0], last[1]), (0.0, 0.0));
        }
    }

    #[test]
    fn global_anchor_aligns_vehicles() {
        let a = track(1, 0..=120, |t| [10.0 * t, 0.0]);
        let b = track(2, 6..=140, |t| [10.0 * t, 3.5]);
        let r = downsample_and_window(&[a, b], &spec(10, WindowAnchor::Global));
        let ends = |id| {
            r.windows
                .iter()
                .filter(|w| w.agent_id == id)
                .map(|w| w.end_frame)
                .collect::<Vec<_>>()
        };
        assert_eq!(ends(1), vec![40, 60]);
        assert_eq!(ends(2), vec![40, 60, 80]);
    }

    #[test]
    fn gaps_split_tracks() {
        let mut t = track(1, 0..=100, |t| [t, 0.0]);
        t.points.retain(|p| p.frame != 50);
        let r = downsample_and_window(&[t], &spec(1, WindowAnchor::TrackStart));
        // Segments of kept frames 0..=48 (25) and 52..=100 (25): both short.
        assert!(r.windows.is_empty());
        assert_eq!(r.skipped_segments, 2);
    }
}
