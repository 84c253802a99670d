//! History-only endpoint predictor: a small transformer encoder over the
//! agent's 15 history frames with `C` parallel endpoint heads.

use ded_autograd::{Graph, Mat, ParamId, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{TrajectoryWindow, FEATURES};
use crate::model::{Model, Normalizer};
use crate::nn::{embedding_table, Linear, TransformerBlock};
use crate::{Error, Result};

/// `softmax(Q Kᵀ / √d_k) V` on plain matrices.
pub fn attention(q: &Mat, k: &Mat, v: &Mat) -> Result<Mat> {
    if q.cols() != k.cols() || k.rows() != v.rows() || k.rows() == 0 {
        return Err(Error::usage(format!(
            "attention shapes Q {:?}, K {:?}, V {:?} do not line up",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut s = q.matmul_nt(k);
    s.scale_assign(1.0 / (q.cols() as f64).sqrt());
    Ok(s.softmax_rows().matmul(v))
}

/// One encoder block (multi-head self-attention and feed-forward, each
/// with a residual connection and layer norm) applied to `x`.
pub fn multi_head(x: &Mat, block: &TransformerBlock, store: &ParamStore) -> Result<Mat> {
    let d = block.attn.q.inputs;
    if x.cols() != d {
        return Err(Error::usage(format!("input width {} but block expects {d}", x.cols())));
    }
    let mut g = Graph::new(store);
    let xv = g.constant(x.clone());
    let y = block.encode(&mut g, xv);
    Ok(g.value(y).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointPredictor {
    pub embed: Linear,
    pub positions: ParamId,
    pub blocks: Vec<TransformerBlock>,
    /// 2·C outputs: candidate c is columns 2c, 2c+1.
    pub coords: Linear,
    pub logits: Linear,
}

/// Candidates in meters (origin-centered) with confidence logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointCandidates {
    pub points: Vec<[f64; 2]>,
    pub logits: Vec<f64>,
}

impl EndpointCandidates {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the highest logit (lowest index on ties).
    pub fn most_confident(&self) -> usize {
        let mut best = 0;
        for (i, &l) in self.logits.iter().enumerate() {
            if l > self.logits[best] {
                best = i;
            }
        }
        best
    }
}

impl EndpointPredictor {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        hist_len: usize,
        d_model: usize,
        heads: usize,
        layers: usize,
        candidates: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(candidates >= 1, "need at least one candidate");
        Self {
            embed: Linear::new(store, &format!("{name}.embed"), FEATURES, d_model, rng),
            positions: embedding_table(store, &format!("{name}.pos"), hist_len, d_model, rng),
            blocks: (0..layers)
                .map(|l| TransformerBlock::new(store, &format!("{name}.block{l}"), d_model, heads, rng))
                .collect(),
            coords: Linear::new(store, &format!("{name}.coords"), d_model, 2 * candidates, rng),
            logits: Linear::new(store, &format!("{name}.logits"), d_model, candidates, rng),
        }
    }

    pub fn candidates(&self) -> usize {
        self.logits.outputs
    }

    /// Returns (coordinates 1×2C, logits 1×C) in normalized residual units.
    pub fn forward(&self, g: &mut Graph, w: &TrajectoryWindow, norm: &Normalizer) -> Result<(Var, Var)> {
        if let Some(frame) = w.first_non_finite_frame() {
            return Err(Error::NonFinite {
                agent_id: w.agent_id,
                frame,
            });
        }
        let x = g.constant(norm.history(w));
        let mut h = self.embed.forward(g, x);
        let pos = g.param(self.positions);
        h = g.add(h, pos);
        for block in &self.blocks {
            h = block.encode(g, h);
        }
        let pooled = g.mean_rows(h);
        Ok((self.coords.forward(g, pooled), self.logits.forward(g, pooled)))
    }

    pub fn macs(&self, hist_len: usize) -> usize {
        hist_len * self.embed.macs()
            + self.blocks.iter().map(|b| b.macs(hist_len, hist_len)).sum::<usize>()
            + self.coords.macs()
            + self.logits.macs()
    }
}

/// Index of the candidate nearest `target` (lowest index on ties).
pub fn winner(points: &[[f64; 2]], target: [f64; 2]) -> usize {
    let d = |p: &[f64; 2]| (p[0] - target[0]).powi(2) + (p[1] - target[1]).powi(2);
    let mut best = 0;
    for (i, p) in points.iter().enumerate() {
        if d(p) < d(&points[best]) {
            best = i;
        }
    }
    best
}

/// Winner-takes-all loss on graph values: squared distance of the nearest
/// candidate plus a binary cross-entropy that raises the winner's
/// confidence and lowers the mean confidence of the others.
pub fn wta_loss(g: &mut Graph, coords: Var, logits: Var, target: [f64; 2]) -> Var {
    let c = g.shape(logits).1;
    let pts: Vec<[f64; 2]> = g.value(coords).data().chunks(2).map(|p| [p[0], p[1]]).collect();
    let w = winner(&pts, target);
    let chosen = g.slice_cols(coords, 2 * w, 2);
    let t = g.constant(Mat::row_vector(&target));
    let diff = g.sub(chosen, t);
    let dist = g.sum_squares(diff);
    let lw = g.slice_cols(logits, w, 1);
    let neg = g.scale(lw, -1.0);
    let pos_term = g.softplus(neg);
    let pos_term = g.sum(pos_term);
    let mut loss = g.add(dist, pos_term);
    if c > 1 {
        let sp = g.softplus(logits);
        let all = g.sum(sp);
        let own = g.softplus(lw);
        let own = g.sum(own);
        let others = g.sub(all, own);
        let others = g.scale(others, 1.0 / (c - 1) as f64);
        loss = g.add(loss, others);
    }
    loss
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// [`wta_loss`] evaluated on plain values.
pub fn endpoint_loss(c: &EndpointCandidates, gt: [f64; 2]) -> f64 {
    let w = winner(&c.points, gt);
    let p = c.points[w];
    let dist = (p[0] - gt[0]).powi(2) + (p[1] - gt[1]).powi(2);
    let mut loss = dist + softplus(-c.logits[w]);
    if c.len() > 1 {
        let others: f64 = c
            .logits
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != w)
            .map(|(_, &l)| softplus(l))
            .sum();
        loss += others / (c.len() - 1) as f64;
    }
    loss
}

/// Candidates for one window, in meters relative to its last position.
pub fn predict_endpoints(w: &TrajectoryWindow, model: &Model) -> Result<EndpointCandidates> {
    let mut g = Graph::new(&model.store);
    let (coords, logits) = model.endpoint.forward(&mut g, w, &model.norm)?;
    let points = g
        .value(coords)
        .data()
        .chunks(2)
        .map(|r| model.norm.endpoint_from_residual(w, [r[0], r[1]]))
        .collect();
    Ok(EndpointCandidates {
        points,
        logits: g.value(logits).data().to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_key_returns_its_value() {
        let q = Mat::from_rows(&[[1.0, 2.0], [-3.0, 0.5], [0.0, 0.0]]);
        let k = Mat::from_rows(&[[0.3, -0.7]]);
        let v = Mat::from_rows(&[[4.0, 5.0, 6.0]]);
        let out = attention(&q, &k, &v).unwrap();
        for r in 0..3 {
            assert_eq!(out.row(r), &[4.0, 5.0, 6.0]);
        }
    }

    #[test]
    fn zero_queries_average_values() {
        let q = Mat::zeros(2, 3);
        let k = Mat::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.0, 2.0], [5.0, 5.0, 5.0]]);
        let v = Mat::from_rows(&[[1.0, 0.0], [2.0, 3.0], [6.0, 3.0]]);
        let out = attention(&q, &k, &v).unwrap();
        for r in 0..2 {
            assert!((out.get(r, 0) - 3.0).abs() < 1e-12 && (out.get(r, 1) - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_shapes_are_usage_errors() {
        let r = attention(&Mat::zeros(2, 3), &Mat::zeros(2, 4), &Mat::zeros(2, 1));
        assert!(matches!(r, Err(Error::Usage(_))));
        let r = attention(&Mat::zeros(2, 3), &Mat::zeros(2, 3), &Mat::zeros(3, 1));
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn exact_single_candidate_pays_only_confidence() {
        let c = EndpointCandidates {
            points: vec![[1.0, 2.0]],
            logits: vec![0.4],
        };
        let expected = -(1.0 / (1.0 + (-0.4f64).exp())).ln();
        assert!((endpoint_loss(&c, [1.0, 2.0]) - expected).abs() < 1e-12);
    }

    #[test]
    fn distance_term_uses_nearest_candidate() {
        let c = EndpointCandidates {
            points: vec![[3.0, 0.0], [1.0, 0.0]],
            logits: vec![0.0, 0.0],
        };
        let conf = 2.0 * softplus(0.0);
        assert!((endpoint_loss(&c, [0.0, 0.0]) - 1.0 - conf).abs() < 1e-12);
    }

    #[test]
    fn most_confident_prefers_lowest_index_on_ties() {
        let c = EndpointCandidates {
            points: vec![[0.0; 2]; 3],
            logits: vec![1.0, 2.0, 2.0],
        };
        assert_eq!(c.most_confident(), 1);
    }
}
