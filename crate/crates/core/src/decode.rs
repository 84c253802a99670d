//! Endpoint calibration and the one-shot trajectory decoder.

use ded_autograd::{Graph, Mat, ParamId, ParamStore, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{TrajectoryWindow, FEATURES};
use crate::diffusion::EndpointSampleSet;
use crate::endpoint::EndpointCandidates;
use crate::guidance::GuidanceFeature;
use crate::model::{Model, Normalizer};
use crate::nn::{embedding_table, Linear, TransformerBlock};
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
pub const SIGMA_FLOOR: f64 = 1e-3;
pub const RHO_LIMIT: f64 = 0.999;

/// The candidate with the lowest NLL under `dist`, and its index. Ties go
/// to the lowest index.
pub fn calibrate(c: &EndpointCandidates, dist: &EndpointSampleSet) -> ([f64; 2], usize) {
    let idx = rank_by_nll(c, dist)[0];
    (c.points[idx], idx)
}

/// Candidate indices ordered by increasing NLL under `dist` (stable).
pub fn rank_by_nll(c: &EndpointCandidates, dist: &EndpointSampleSet) -> Vec<usize> {
    assert!(!c.is_empty(), "calibration needs at least one candidate");
    let nll: Vec<f64> = c.points.iter().map(|&p| dist.nll(p)).collect();
    let mut idx: Vec<usize> = (0..c.len()).collect();
    idx.sort_by(|&a, &b| nll[a].total_cmp(&nll[b]));
    idx
}

/// The `j` best candidates by NLL, best first.
pub fn top_modes(c: &EndpointCandidates, dist: &EndpointSampleSet, j: usize) -> Vec<usize> {
    let mut idx = rank_by_nll(c, dist);
    idx.truncate(j.max(1));
    idx
}

/// Per-frame bivariate Gaussians over future positions (meters,
/// origin-centered).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianTrajectory {
    pub mu: Vec<[f64; 2]>,
    pub sigma: Vec<[f64; 2]>,
    pub rho: Vec<f64>,
}

impl GaussianTrajectory {
    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().flatten().all(|v| v.is_finite())
            && self.sigma.iter().flatten().all(|v| v.is_finite())
            && self.rho.iter().all(|v| v.is_finite())
    }
}

/// Decoder over `[history tokens; guidance token; endpoint token]` with
/// one learned query per future frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDecoder {
    pub hist_embed: Linear,
    pub hist_pos: ParamId,
    pub gi_token: Linear,
    pub endpoint_token: Linear,
    pub blocks: Vec<TransformerBlock>,
    pub queries: ParamId,
    pub cross: TransformerBlock,
    pub head: Linear,
    /// Per-frame weight of the endpoint residual added to the means.
    pub endpoint_ramp: ParamId,
}

/// Raw decoder outputs as graph values.
pub struct DecodedVars {
    pub mu: Var,
    pub sigma: Var,
    pub rho: Var,
}

impl TrajectoryDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        hist_len: usize,
        fut_len: usize,
        guidance_width: usize,
        d_model: usize,
        heads: usize,
        layers: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let hist_embed = Linear::new(store, &format!("{name}.hist_embed"), FEATURES, d_model, rng);
        let hist_pos = embedding_table(store, &format!("{name}.hist_pos"), hist_len, d_model, rng);
        let gi_token = Linear::new(store, &format!("{name}.gi_token"), guidance_width, d_model, rng);
        let endpoint_token = Linear::new(store, &format!("{name}.endpoint_token"), 2, d_model, rng);
        let blocks = (0..layers)
            .map(|l| TransformerBlock::new(store, &format!("{name}.block{l}"), d_model, heads, rng))
            .collect();
        let queries = embedding_table(store, &format!("{name}.queries"), fut_len, d_model, rng);
        let cross = TransformerBlock::new(store, &format!("{name}.cross"), d_model, heads, rng);
        let head = Linear::new(store, &format!("{name}.head"), d_model, 5, rng);
        // Start at the constant-velocity mean.
        store.get_mut(head.w).data_mut().fill(0.0);
        let ramp = (1..=fut_len).map(|t| t as f64 / fut_len as f64).collect();
        let endpoint_ramp = store.add(format!("{name}.endpoint_ramp"), Mat::from_vec(fut_len, 1, ramp));
        Self {
            hist_embed,
            hist_pos,
            gi_token,
            endpoint_token,
            blocks,
            queries,
            cross,
            head,
            endpoint_ramp,
        }
    }

    pub fn d_model(&self) -> usize {
        self.hist_embed.outputs
    }

    /// Decodes one agent. `endpoint` is the normalized endpoint residual
    /// (1×2); `cv` is the constant-velocity future the means are offset
    /// from.
    pub fn forward(
        &self,
        g: &mut Graph,
        history: Var,
        gi: Var,
        endpoint: Var,
        cv: &[[f64; 2]],
        norm: &Normalizer,
    ) -> DecodedVars {
        let h = self.hist_embed.forward(g, history);
        let pos = g.param(self.hist_pos);
        let h = g.add(h, pos);
        let gt = self.gi_token.forward(g, gi);
        let et = self.endpoint_token.forward(g, endpoint);
        let mut memory = g.concat_rows(&[h, gt, et]);
        for block in &self.blocks {
            memory = block.encode(g, memory);
        }
        let q = g.param(self.queries);
        let y = self.cross.forward(g, q, memory);
        let out = self.head.forward(g, y);

        let t = cv.len();
        let res = g.slice_cols(out, 0, 2);
        let ramp = g.param(self.endpoint_ramp);
        let anchor = g.matmul(ramp, endpoint);
        let res = g.add(res, anchor);
        let res = g.scale(res, norm.residual_scale);
        let base = g.constant(Mat::from_rows(cv));
        let mu = g.add(base, res);
        let raw_sigma = g.slice_cols(out, 2, 2);
        let sigma = g.softplus(raw_sigma);
        let floor = g.constant(Mat::filled(t, 2, SIGMA_FLOOR));
        let sigma = g.add(sigma, floor);
        let raw_rho = g.slice_cols(out, 4, 1);
        let rho = g.tanh(raw_rho);
        let rho = g.scale(rho, RHO_LIMIT);
        DecodedVars { mu, sigma, rho }
    }

    pub fn macs(&self, hist_len: usize, fut_len: usize, guidance_width: usize) -> usize {
        let d = self.d_model();
        let mem = hist_len + 2;
        hist_len * self.hist_embed.macs()
            + guidance_width * d
            + 2 * d
            + self.blocks.iter().map(|b| b.macs(mem, mem)).sum::<usize>()
            + self.cross.macs(fut_len, mem)
            + fut_len * self.head.macs()
            + 2 * fut_len
    }
}

pub fn trajectory_from_vars(g: &Graph, v: &DecodedVars) -> GaussianTrajectory {
    let rows2 = |var: Var| -> Vec<[f64; 2]> {
        g.value(var).data().chunks(2).map(|r| [r[0], r[1]]).collect()
    };
    GaussianTrajectory {
        mu: rows2(v.mu),
        sigma: rows2(v.sigma),
        rho: g.value(v.rho).data().to_vec(),
    }
}

/// Decodes the future of `w` given its guidance and an endpoint in
/// meters (`None` feeds the zero endpoint input).
pub fn decode_trajectory(
    w: &TrajectoryWindow,
    gi: &GuidanceFeature,
    endpoint: Option<[f64; 2]>,
    model: &Model,
) -> Result<GaussianTrajectory> {
    if let Some(frame) = w.first_non_finite_frame() {
        return Err(Error::NonFinite {
            agent_id: w.agent_id,
            frame,
        });
    }
    if endpoint.is_some_and(|e| !e.iter().all(|v| v.is_finite())) {
        return Err(Error::Runtime(format!("non-finite endpoint for agent {}", w.agent_id)));
    }
    let mut g = Graph::new(&model.store);
    let hist = g.constant(model.norm.history(w));
    let giv = g.constant(Mat::row_vector(&gi.gi));
    let e = endpoint.map_or([0.0; 2], |e| model.norm.endpoint_residual(w, e));
    let ev = g.constant(Mat::row_vector(&e));
    let cv = w.constant_velocity_future();
    let vars = model.decoder.forward(&mut g, hist, giv, ev, &cv, &model.norm);
    let traj = trajectory_from_vars(&g, &vars);
    if !traj.is_finite() {
        return Err(Error::Runtime(format!("non-finite decoder output for agent {}", w.agent_id)));
    }
    Ok(traj)
}

/// Negative log density of one point under a bivariate normal.
pub fn bivariate_nll(p: [f64; 2], mu: [f64; 2], sigma: [f64; 2], rho: f64) -> f64 {
    let (dx, dy) = (p[0] - mu[0], p[1] - mu[1]);
    let (sx, sy) = (sigma[0], sigma[1]);
    let q = 1.0 - rho * rho;
    let z = dx * dx / (sx * sx) + dy * dy / (sy * sy) - 2.0 * rho * dx * dy / (sx * sy);
    LN_2PI + sx.ln() + sy.ln() + 0.5 * q.ln() + z / (2.0 * q)
}

/// Mean over frames of the per-frame negative log density of `gt`.
pub fn trajectory_nll_loss(pred: &GaussianTrajectory, gt: &[[f64; 2]]) -> Result<f64> {
    if pred.len() != gt.len() || gt.is_empty() {
        return Err(Error::usage(format!(
            "prediction has {} frames, ground truth {}",
            pred.len(),
            gt.len()
        )));
    }
    let total: f64 = (0..gt.len())
        .map(|t| bivariate_nll(gt[t], pred.mu[t], pred.sigma[t], pred.rho[t]))
        .sum();
    Ok(total / gt.len() as f64)
}

/// `n` trajectories with each frame drawn independently.
pub fn sample_trajectories(pred: &GaussianTrajectory, n: usize, rng: &mut impl Rng) -> Vec<Vec<[f64; 2]>> {
    (0..n)
        .map(|_| {
            (0..pred.len())
                .map(|t| {
                    let [mx, my] = pred.mu[t];
                    let [sx, sy] = pred.sigma[t];
                    let r = pred.rho[t];
                    let z1: f64 = rng.sample(StandardNormal);
                    let z2: f64 = rng.sample(StandardNormal);
                    // Cholesky factor of [[sx², r sx sy], [r sx sy, sy²]].
                    [mx + sx * z1, my + sy * (r * z1 + (1.0 - r * r).sqrt() * z2)]
                })
                .collect()
        })
        .collect()
}
