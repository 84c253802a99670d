use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::window::window_from_positions;
use crate::data::{Scene, DEFAULT_FUT_LEN, DEFAULT_HIST_LEN, FRAME_DT};
use crate::{Error, Result};

pub(crate) const LANE_WIDTH: f64 = 3.5;
/// Logistic argument range covered by a lane change; the curve is
/// renormalized so it starts at exactly 0 and ends at exactly 1.
const LOGISTIC_SPAN: f64 = 5.0;
/// Frames between the leader's and the follower's braking onset.
const REACTION_FRAMES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScenarioKind {
    ConstantVelocity,
    LaneChange,
    FollowBrake,
}

impl ScenarioKind {
    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::ConstantVelocity => "constant_velocity",
            ScenarioKind::LaneChange => "lane_change",
            ScenarioKind::FollowBrake => "follow_brake",
        }
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant_velocity" => Ok(ScenarioKind::ConstantVelocity),
            "lane_change" => Ok(ScenarioKind::LaneChange),
            "follow_brake" => Ok(ScenarioKind::FollowBrake),
            other => Err(Error::usage(format!(
                "unknown scenario kind {other:?} (expected constant_velocity, lane_change or follow_brake)"
            ))),
        }
    }
}

/// Fraction of a lane change completed `frames_since_start` frames after it
/// began, for a maneuver lasting `duration` frames.
pub(crate) fn lane_change_progress(frames_since_start: f64, duration: f64) -> f64 {
    let u = (-LOGISTIC_SPAN + 2.0 * LOGISTIC_SPAN * frames_since_start / duration)
        .clamp(-LOGISTIC_SPAN, LOGISTIC_SPAN);
    let s = |x: f64| 1.0 / (1.0 + (-x).exp());
    (s(u) - s(-LOGISTIC_SPAN)) / (s(LOGISTIC_SPAN) - s(-LOGISTIC_SPAN))
}

/// Distance covered after braking at `decel` for `tau` seconds from `speed`,
/// stopping at zero speed.
fn braking_distance(speed: f64, decel: f64, tau: f64) -> f64 {
    let stop = speed / decel;
    if tau >= stop {
        speed * speed / (2.0 * decel)
    } else {
        speed * tau - 0.5 * decel * tau * tau
    }
}

fn frame_time(i: usize) -> f64 {
    i as f64 * FRAME_DT
}

/// Deterministic synthetic scenes of 40 frames at 5 Hz (15 history + 25
/// future) for desk-scale experiments.
///
/// * `constant_velocity`: 1–3 agents on a road with random heading, each at
///   a random constant speed.
/// * `lane_change`: an ego vehicle starts a 3.5 m lane change at a random
///   history frame, away from a neighbor occupying the other adjacent lane.
/// * `follow_brake`: a follower behind a leader that brakes; the follower
///   brakes the same way after a reaction delay.
pub fn synth_scenarios(kind: ScenarioKind, n: usize, seed: u64) -> Result<Vec<Scene>> {
    if n == 0 {
        return Err(Error::usage("synthetic scenario count must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = DEFAULT_HIST_LEN + DEFAULT_FUT_LEN;
    let mut scenes = Vec::with_capacity(n);
    for scene_idx in 0..n {
        let tracks: Vec<Vec<[f64; 2]>> = match kind {
            ScenarioKind::ConstantVelocity => constant_velocity_tracks(&mut rng, total),
            ScenarioKind::LaneChange => lane_change_tracks(&mut rng, total),
            ScenarioKind::FollowBrake => follow_brake_tracks(&mut rng, total),
        };
        let end_frame = scene_idx as i64;
        let windows = tracks
            .iter()
            .enumerate()
            .map(|(j, pos)| {
                window_from_positions(scene_idx as i64 * 10 + j as i64, end_frame, pos, DEFAULT_HIST_LEN)
            })
            .collect();
        scenes.push(Scene::from_global_windows(windows));
    }
    Ok(scenes)
}

fn road_frame(rng: &mut ChaCha8Rng, heading: f64) -> impl Fn(f64, f64) -> [f64; 2] {
    let base = [rng.random_range(-500.0..500.0), rng.random_range(-500.0..500.0)];
    let (s, c) = heading.sin_cos();
    move |along: f64, lateral: f64| {
        [
            base[0] + c * along - s * lateral,
            base[1] + s * along + c * lateral,
        ]
    }
}

fn constant_velocity_tracks(rng: &mut ChaCha8Rng, total: usize) -> Vec<Vec<[f64; 2]>> {
    let heading = rng.random_range(0.0..2.0 * PI);
    let to_world = road_frame(rng, heading);
    let agents = rng.random_range(1..=3usize);
    let first_lane = rng.random_range(-1..=1i32);
    (0..agents)
        .map(|j| {
            let lane = ((first_lane + j as i32 + 1).rem_euclid(3) - 1) as f64 * LANE_WIDTH;
            let start = rng.random_range(-30.0..30.0);
            let speed = rng.random_range(5.0..30.0);
            (0..total)
                .map(|i| to_world(start + speed * frame_time(i), lane))
                .collect()
        })
        .collect()
}

fn lane_change_tracks(rng: &mut ChaCha8Rng, total: usize) -> Vec<Vec<[f64; 2]>> {
    let to_world = road_frame(rng, 0.0);
    let direction = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    // At least two maneuvering frames are observed before the history ends.
    let start_frame = rng.random_range(0..=DEFAULT_HIST_LEN - 3) as f64;
    let duration = rng.random_range(15.0..25.0);
    let speed = rng.random_range(15.0..30.0);
    let ego: Vec<[f64; 2]> = (0..total)
        .map(|i| {
            let lateral = direction * LANE_WIDTH * lane_change_progress(i as f64 - start_frame, duration);
            to_world(speed * frame_time(i), lateral)
        })
        .collect();

    // The neighbor occupies the lane the ego moves away from.
    let offset = rng.random_range(-15.0..15.0);
    let neighbor_speed = speed + rng.random_range(-2.0..2.0);
    let neighbor: Vec<[f64; 2]> = (0..total)
        .map(|i| to_world(offset + neighbor_speed * frame_time(i), -direction * LANE_WIDTH))
        .collect();
    vec![ego, neighbor]
}

fn follow_brake_tracks(rng: &mut ChaCha8Rng, total: usize) -> Vec<Vec<[f64; 2]>> {
    let to_world = road_frame(rng, 0.0);
    let speed = rng.random_range(15.0..30.0);
    // Headway longer than the reaction delay keeps the pair collision free.
    let gap = speed * rng.random_range(1.5..2.5);
    let decel = rng.random_range(2.0..4.0);
    let brake_frame = rng.random_range(5..=25usize);
    let along = |i: usize, onset: usize| {
        if i <= onset {
            speed * frame_time(i)
        } else {
            speed * frame_time(onset) + braking_distance(speed, decel, frame_time(i - onset))
        }
    };
    let leader = (0..total).map(|i| to_world(gap + along(i, brake_frame), 0.0)).collect();
    let follower = (0..total)
        .map(|i| to_world(along(i, brake_frame + REACTION_FRAMES), 0.0))
        .collect();
    vec![follower, leader]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_kind_is_usage_error() {
        assert!(matches!("zigzag".parse::<ScenarioKind>(), Err(Error::Usage(_))));
        assert!(matches!(
            synth_scenarios(ScenarioKind::LaneChange, 0, 1),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn constant_velocity_future_is_linear() {
        for scene in synth_scenarios(ScenarioKind::ConstantVelocity, 20, 3).unwrap() {
            for w in &scene.windows {
                let v = w.last_velocity();
                for (i, p) in w.future.iter().enumerate() {
                    let t = (i + 1) as f64 * FRAME_DT;
                    assert!((p[0] - v[0] * t).abs() < 1e-9 && (p[1] - v[1] * t).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn lane_change_progress_hits_its_ends() {
        assert_eq!(lane_change_progress(-3.0, 20.0), 0.0);
        assert_eq!(lane_change_progress(0.0, 20.0), 0.0);
        assert!((lane_change_progress(10.0, 20.0) - 0.5).abs() < 1e-12);
        assert!((lane_change_progress(20.0, 20.0) - 1.0).abs() < 1e-12);
        assert!((lane_change_progress(30.0, 20.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn follower_keeps_distance_behind_braking_leader() {
        for scene in synth_scenarios(ScenarioKind::FollowBrake, 10, 11).unwrap() {
            let (f, l) = (&scene.windows[0], &scene.windows[1]);
            let gx = |w: &crate::data::TrajectoryWindow, i: usize| w.origin[0] + w.future[i][0];
            for i in 0..f.future.len() {
                assert!(gx(l, i) > gx(f, i));
            }
            let end_speed = (l.future[24][0] - l.future[23][0]) / FRAME_DT;
            let start_speed = l.history[14][2];
            assert!(end_speed < start_speed);
        }
    }
}
