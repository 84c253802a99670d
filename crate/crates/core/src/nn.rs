//! Small layer library over the autograd graph.

use ded_autograd::{Graph, Mat, ParamId, ParamStore, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

const LN_EPS: f64 = 1e-5;

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Mat {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-a..a)).collect(),
    )
}

/// `y = x W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.add(format!("{name}.w"), xavier(rng, inputs, outputs)),
            b: store.add(format!("{name}.b"), Mat::zeros(1, outputs)),
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    pub fn macs(&self) -> usize {
        self.inputs * self.outputs
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Mat::filled(1, width, 1.0)),
            beta: store.add(format!("{name}.beta"), Mat::zeros(1, width)),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let n = g.layer_norm(x, LN_EPS);
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        let y = g.mul_row(n, gamma);
        g.add_row(y, beta)
    }
}

/// LSTM with gate order input, forget, cell, output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub inputs: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(store: &mut ParamStore, name: &str, inputs: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut b = Mat::zeros(1, 4 * hidden);
        for j in hidden..2 * hidden {
            b.set(0, j, 1.0);
        }
        Self {
            wx: store.add(format!("{name}.wx"), xavier(rng, inputs, 4 * hidden)),
            wh: store.add(format!("{name}.wh"), xavier(rng, hidden, 4 * hidden)),
            b: store.add(format!("{name}.b"), b),
            inputs,
            hidden,
        }
    }

    /// Runs over the rows of `xs` (T × inputs) from zero state and returns
    /// the final hidden state (1 × hidden).
    pub fn final_hidden(&self, g: &mut Graph, xs: Var) -> Var {
        let h_dim = self.hidden;
        let steps = g.shape(xs).0;
        let (wx, wh, b) = (g.param(self.wx), g.param(self.wh), g.param(self.b));
        let projected = g.matmul(xs, wx);
        let projected = g.add_row(projected, b);
        let mut h = g.constant(Mat::zeros(1, h_dim));
        let mut c = g.constant(Mat::zeros(1, h_dim));
        for t in 0..steps {
            let xt = g.slice_rows(projected, t, 1);
            let rec = g.matmul(h, wh);
            let gates = g.add(xt, rec);
            let i = g.slice_cols(gates, 0, h_dim);
            let f = g.slice_cols(gates, h_dim, h_dim);
            let cand = g.slice_cols(gates, 2 * h_dim, h_dim);
            let o = g.slice_cols(gates, 3 * h_dim, h_dim);
            let (i, f, cand, o) = (g.sigmoid(i), g.sigmoid(f), g.tanh(cand), g.sigmoid(o));
            let keep = g.mul(f, c);
            let write = g.mul(i, cand);
            c = g.add(keep, write);
            let squashed = g.tanh(c);
            h = g.mul(o, squashed);
        }
        h
    }

    pub fn macs(&self, steps: usize) -> usize {
        steps * (self.inputs + self.hidden) * 4 * self.hidden
    }
}

/// Multi-head attention with input and output projections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut impl Rng) -> Self {
        assert!(heads >= 1 && d_model.is_multiple_of(heads), "d_model must divide by heads");
        Self {
            q: Linear::new(store, &format!("{name}.q"), d_model, d_model, rng),
            k: Linear::new(store, &format!("{name}.k"), d_model, d_model, rng),
            v: Linear::new(store, &format!("{name}.v"), d_model, d_model, rng),
            out: Linear::new(store, &format!("{name}.out"), d_model, d_model, rng),
            heads,
        }
    }

    /// Queries from `x` attend over `memory`.
    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var) -> Var {
        let q = self.q.forward(g, x);
        let k = self.k.forward(g, memory);
        let v = self.v.forward(g, memory);
        let a = g.attention(q, k, v, self.heads);
        self.out.forward(g, a)
    }

    pub fn macs(&self, queries: usize, keys: usize) -> usize {
        let d = self.q.inputs;
        2 * queries * d * d + 2 * keys * d * d + 2 * queries * keys * d
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), d_model, hidden, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, d_model, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.l1.forward(g, x);
        let h = g.relu(h);
        self.l2.forward(g, h)
    }

    pub fn macs(&self, rows: usize) -> usize {
        rows * (self.l1.macs() + self.l2.macs())
    }
}

/// Post-norm transformer block. With `memory` equal to the input it is a
/// self-attention encoder block; otherwise a cross-attention block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerBlock {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ff: FeedForward,
    pub norm2: LayerNorm,
}

impl TransformerBlock {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d_model, heads, rng),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model),
            ff: FeedForward::new(store, &format!("{name}.ff"), d_model, 2 * d_model, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var, memory: Var) -> Var {
        let a = self.attn.forward(g, x, memory);
        let x = g.add(x, a);
        let x = self.norm1.forward(g, x);
        let f = self.ff.forward(g, x);
        let x = g.add(x, f);
        self.norm2.forward(g, x)
    }

    pub fn encode(&self, g: &mut Graph, x: Var) -> Var {
        self.forward(g, x, x)
    }

    pub fn macs(&self, queries: usize, keys: usize) -> usize {
        self.attn.macs(queries, keys) + self.ff.macs(queries)
    }
}

/// Learned `rows × d` table initialized small.
pub fn embedding_table(store: &mut ParamStore, name: &str, rows: usize, d: usize, rng: &mut impl Rng) -> ParamId {
    let m = Mat::from_vec(rows, d, (0..rows * d).map(|_| rng.random_range(-0.1..0.1)).collect());
    store.add(name, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn forget_gate_bias_starts_at_one() {
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "l", 3, 2, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(store.get(lstm.b).data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn lstm_with_zero_weights_and_input_stays_at_zero() {
        let mut store = ParamStore::new();
        let lstm = Lstm::new(&mut store, "l", 6, 4, &mut ChaCha8Rng::seed_from_u64(0));
        for id in [lstm.wx, lstm.wh, lstm.b] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let mut g = Graph::new(&store);
        let x = g.constant(Mat::zeros(15, 6));
        let h = lstm.final_hidden(&mut g, x);
        assert_eq!(g.value(h).data(), &[0.0; 4]);
    }

    #[test]
    fn single_head_block_matches_composed_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut store, "m", 4, 1, &mut rng);
        let x = rand_mat(&mut rng, 5, 4);
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone());
        let y = mha.forward(&mut g, xv, xv);

        let lin = |l: &Linear, m: &Mat| m.matmul(store.get(l.w)).add_row(store.get(l.b));
        let (q, k, v) = (lin(&mha.q, &x), lin(&mha.k, &x), lin(&mha.v, &x));
        let mut s = q.matmul_nt(&k);
        s.scale_assign(0.5);
        let expected = lin(&mha.out, &s.softmax_rows().matmul(&v));
        for (a, b) in g.value(y).data().iter().zip(expected.data()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn encoder_block_is_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(&mut store, "b", 8, 2, &mut rng);
        let x = rand_mat(&mut rng, 6, 8);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let px = Mat::from_rows(&perm.map(|i| x.row(i).to_vec()));
        let run = |m: &Mat| {
            let mut g = Graph::new(&store);
            let v = g.constant(m.clone());
            let y = block.encode(&mut g, v);
            g.value(y).clone()
        };
        let (y, py) = (run(&x), run(&px));
        for (k, &i) in perm.iter().enumerate() {
            for (a, b) in py.row(k).iter().zip(y.row(i)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
