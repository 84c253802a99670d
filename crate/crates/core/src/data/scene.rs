use std::collections::BTreeMap;

use crate::data::{Scene, TrajectoryWindow};

/// Groups windows observed at the same instant into scenes.
///
/// Two windows are linked when their global last positions are within
/// `radius` meters; scenes are the connected components of that relation,
/// so membership is symmetric. Scenes come out ordered by end frame and then
/// by their smallest agent id, with agents ordered by id.
pub fn assemble_scenes(windows: Vec<TrajectoryWindow>, radius: f64) -> Vec<Scene> {
    let mut by_frame: BTreeMap<i64, Vec<TrajectoryWindow>> = BTreeMap::new();
    for w in windows {
        by_frame.entry(w.end_frame).or_default().push(w);
    }

    let mut scenes = Vec::new();
    for (_, mut group) in by_frame {
        group.sort_by_key(|w| w.agent_id);
        let n = group.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn root(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        let r2 = radius * radius;
        for i in 0..n {
            for j in i + 1..n {
                let dx = group[i].origin[0] - group[j].origin[0];
                let dy = group[i].origin[1] - group[j].origin[1];
                if dx * dx + dy * dy <= r2 {
                    let (a, b) = (root(&mut parent, i), root(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
        let mut components: BTreeMap<usize, Vec<TrajectoryWindow>> = BTreeMap::new();
        for (i, w) in group.into_iter().enumerate() {
            let r = root(&mut parent, i);
            components.entry(r).or_default().push(w);
        }
        // Roots are the smallest member index, so BTreeMap order is by
        // smallest agent id.
        scenes.extend(components.into_values().map(Scene::from_global_windows));
    }
    scenes
}

#[cfg(test)]
mod tests {
    use super::*;

    fn at(id: i64, x: f64, y: f64) -> TrajectoryWindow {
        TrajectoryWindow {
            agent_id: id,
            end_frame: 100,
            history: vec![[0.0; 6]; 15],
            future: vec![[0.0; 2]; 25],
            origin: [x, y],
        }
    }

    #[test]
    fn close_agents_share_a_scene() {
        let s = assemble_scenes(vec![at(1, 0.0, 0.0), at(2, 10.0, 0.0)], 50.0);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].num_agents(), 2);
    }

    #[test]
    fn distant_agents_are_separate() {
        let s = assemble_scenes(vec![at(1, 0.0, 0.0), at(2, 100.0, 0.0)], 50.0);
        assert_eq!(s.len(), 2);
        assert!(s.iter().all(|s| s.num_agents() == 1));
    }

    #[test]
    fn different_instants_never_mix() {
        let mut b = at(2, 1.0, 0.0);
        b.end_frame = 102;
        let s = assemble_scenes(vec![at(1, 0.0, 0.0), b], 50.0);
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn origins_become_scene_relative() {
        let s = assemble_scenes(vec![at(1, 100.0, 0.0), at(2, 110.0, 4.0)], 50.0);
        assert_eq!(s[0].scene_origin, [105.0, 2.0]);
        assert_eq!(s[0].windows[0].origin, [-5.0, -2.0]);
        assert_eq!(s[0].windows[1].origin, [5.0, 2.0]);
        assert!(s[0].presence_mask.iter().flatten().all(|&p| p));
    }
}
