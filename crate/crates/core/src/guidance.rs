//! Per-agent guidance features: an LSTM over the agent's own history
//! (`temp`) concatenated with a learned transform of the agent's state and
//! the mean message of its neighbors (`spat`).

use ded_autograd::{Graph, Mat, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Scene, TrajectoryWindow, FEATURES};
use crate::model::{Model, Normalizer};
use crate::nn::{Linear, Lstm};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuidanceEncoder {
    pub lstm: Lstm,
    /// Maps `[temp_n, mean neighbor temp, mean neighbor offset]` to `spat_n`.
    pub agg: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceFeature {
    pub temp: Vec<f64>,
    pub spat: Vec<f64>,
    pub gi: Vec<f64>,
}

impl GuidanceEncoder {
    pub fn new(store: &mut ParamStore, name: &str, temporal: usize, spatial: usize, rng: &mut impl Rng) -> Self {
        assert!(temporal >= 1 && spatial >= 1, "guidance widths must be positive");
        Self {
            lstm: Lstm::new(store, &format!("{name}.lstm"), FEATURES, temporal, rng),
            agg: Linear::new(store, &format!("{name}.agg"), 2 * temporal + 2, spatial, rng),
        }
    }

    pub fn temporal_width(&self) -> usize {
        self.lstm.hidden
    }

    pub fn spatial_width(&self) -> usize {
        self.agg.outputs
    }

    pub fn width(&self) -> usize {
        self.temporal_width() + self.spatial_width()
    }

    /// `temp` (1 × H_t) for one window.
    pub fn temporal(&self, g: &mut Graph, w: &TrajectoryWindow, norm: &Normalizer) -> Result<Var> {
        if let Some(frame) = w.first_non_finite_frame() {
            return Err(Error::NonFinite {
                agent_id: w.agent_id,
                frame,
            });
        }
        let x = g.constant(norm.history(w));
        Ok(self.lstm.final_hidden(g, x))
    }

    /// `spat` (1 × H_s) per agent from per-agent `temps`.
    ///
    /// Neighbors of agent n are the other agents present at the final
    /// history frame. Their message is their `temp` plus their origin
    /// relative to agent n; messages are averaged in an order-independent
    /// way so the result does not depend on how neighbors are listed.
    pub fn spatial(&self, g: &mut Graph, scene: &Scene, temps: &[Var], norm: &Normalizer) -> Result<Vec<Var>> {
        let n = scene.num_agents();
        assert_eq!(temps.len(), n, "one temporal state per agent");
        let present: Vec<usize> = (0..n)
            .filter(|&i| scene.presence_mask[i].last().copied().unwrap_or(false))
            .collect();
        if present.is_empty() {
            return Err(Error::usage("presence mask excludes every agent"));
        }
        let h = self.temporal_width();
        let origins: Vec<[f64; 2]> = scene
            .windows
            .iter()
            .map(|w| [w.origin[0] / norm.offset_scale, w.origin[1] / norm.offset_scale])
            .collect();

        let mut out = vec![None; n];
        let stacked = g.concat_rows(&present.iter().map(|&i| temps[i]).collect::<Vec<_>>());
        let origin_rows: Vec<[f64; 2]> = present.iter().map(|&i| origins[i]).collect();
        let (mean_temp, mean_origin) = mean_messages(g, stacked, &origin_rows);
        for (r, &i) in present.iter().enumerate() {
            let msg = if present.len() == 1 {
                g.constant(Mat::zeros(1, h + 2))
            } else {
                let mt = g.slice_rows(mean_temp, r, 1);
                let mo = g.value(mean_origin).row(r);
                let off = [mo[0] - origins[i][0], mo[1] - origins[i][1]];
                let off = g.constant(Mat::row_vector(&off));
                g.concat_cols(&[mt, off])
            };
            out[i] = Some(self.transform(g, temps[i], msg));
        }
        // An absent agent's neighbors are all present agents: append it as
        // an extra row and read its "others" mean.
        for i in (0..n).filter(|i| !present.contains(i)) {
            let with_self = g.concat_rows(&[stacked, temps[i]]);
            let mut rows = origin_rows.clone();
            rows.push(origins[i]);
            let (mean_temp, mean_origin) = mean_messages(g, with_self, &rows);
            let last = rows.len() - 1;
            let mt = g.slice_rows(mean_temp, last, 1);
            let mo = g.value(mean_origin).row(last);
            let off = [mo[0] - origins[i][0], mo[1] - origins[i][1]];
            let off = g.constant(Mat::row_vector(&off));
            let msg = g.concat_cols(&[mt, off]);
            out[i] = Some(self.transform(g, temps[i], msg));
        }
        Ok(out.into_iter().map(|v| v.expect("every agent aggregated")).collect())
    }

    fn transform(&self, g: &mut Graph, temp: Var, msg: Var) -> Var {
        let x = g.concat_cols(&[temp, msg]);
        let y = self.agg.forward(g, x);
        g.tanh(y)
    }

    /// `gi = [temp, spat]` (1 × (H_t + H_s)) for every agent of the scene.
    pub fn encode(&self, g: &mut Graph, scene: &Scene, norm: &Normalizer) -> Result<Vec<Var>> {
        let temps = scene
            .windows
            .iter()
            .map(|w| self.temporal(g, w, norm))
            .collect::<Result<Vec<_>>>()?;
        let spats = self.spatial(g, scene, &temps, norm)?;
        Ok(temps
            .iter()
            .zip(&spats)
            .map(|(&t, &s)| g.concat_cols(&[t, s]))
            .collect())
    }

    pub fn macs(&self, agents: usize, hist_len: usize) -> usize {
        agents * (self.lstm.macs(hist_len) + self.agg.macs())
    }
}

fn mean_messages(g: &mut Graph, temps: Var, origins: &[[f64; 2]]) -> (Var, Var) {
    let mean_temp = g.mean_of_others(temps);
    let origin_mat = g.constant(Mat::from_rows(origins));
    (mean_temp, g.mean_of_others(origin_mat))
}

pub fn encode_temporal(w: &TrajectoryWindow, model: &Model) -> Result<Vec<f64>> {
    let mut g = Graph::new(&model.store);
    let t = model.guidance.temporal(&mut g, w, &model.norm)?;
    Ok(g.value(t).data().to_vec())
}

/// `spat` for every agent of `scene` from precomputed temporal states.
pub fn aggregate_spatial(scene: &Scene, temps: &[Vec<f64>], model: &Model) -> Result<Vec<Vec<f64>>> {
    if temps.len() != scene.num_agents() {
        return Err(Error::usage(format!(
            "{} temporal states for {} agents",
            temps.len(),
            scene.num_agents()
        )));
    }
    let mut g = Graph::new(&model.store);
    let tv: Vec<Var> = temps.iter().map(|t| g.constant(Mat::row_vector(t))).collect();
    let spats = model.guidance.spatial(&mut g, scene, &tv, &model.norm)?;
    Ok(spats.iter().map(|&s| g.value(s).data().to_vec()).collect())
}

pub fn encode_scene(scene: &Scene, model: &Model) -> Result<Vec<GuidanceFeature>> {
    let mut g = Graph::new(&model.store);
    let gis = model.guidance.encode(&mut g, scene, &model.norm)?;
    let ht = model.guidance.temporal_width();
    Ok(gis
        .iter()
        .map(|&v| {
            let gi = g.value(v).data().to_vec();
            GuidanceFeature {
                temp: gi[..ht].to_vec(),
                spat: gi[ht..].to_vec(),
                gi,
            }
        })
        .collect())
}
