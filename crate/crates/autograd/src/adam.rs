use serde::{Deserialize, Serialize};

use crate::{Gradients, Mat, ParamStore};

/// Adam with bias correction and optional global-norm gradient clipping.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    first: Vec<Mat>,
    second: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Mat> = store
            .iter()
            .map(|(_, _, m)| Mat::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn with_clip_norm(mut self, max_norm: f64) -> Self {
        self.clip_norm = Some(max_norm);
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters without a gradient keep their moments.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let clip = match self.clip_norm {
            Some(max) => {
                let norm = grads.global_norm();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let m = &mut self.first[id.0];
            let v = &mut self.second[id.0];
            let p = store.get_mut(id);
            for (((pi, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let gi = gi * clip;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Graph, ParamStore};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let w = store.add("w", Mat::row_vector(&[1.0, -2.0]));
        let mut adam = Adam::new(&store, 0.1);
        let grads = {
            let mut g = Graph::new(&store);
            let x = g.param(w);
            let l = g.sum_squares(x);
            g.backward(l)
        };
        adam.step(&mut store, &grads);
        let p = store.get(w);
        assert!((p.get(0, 0) - 0.9).abs() < 1e-9);
        assert!((p.get(0, 1) + 1.9).abs() < 1e-9);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let w = store.add("w", Mat::row_vector(&[3.0, -4.0, 0.5]));
        let mut adam = Adam::new(&store, 0.05);
        for _ in 0..2000 {
            let grads = {
                let mut g = Graph::new(&store);
                let x = g.param(w);
                let l = g.sum_squares(x);
                g.backward(l)
            };
            adam.step(&mut store, &grads);
        }
        assert!(store.get(w).sum_squares() < 1e-6);
    }
}
