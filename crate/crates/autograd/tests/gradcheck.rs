//! Central finite-difference checks for every differentiable op.

use ded_autograd::{Graph, Mat, ParamId, ParamStore, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    Mat::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0) * scale)
            .collect(),
    )
}

/// Max relative error between analytic and central-difference gradients,
/// with the denominator floored at 1 so tiny gradients compare absolutely.
fn max_rel_error(store: &mut ParamStore, f: impl Fn(&mut Graph) -> Var) -> f64 {
    let analytic = {
        let mut g = Graph::new(store);
        let l = f(&mut g);
        g.backward(l)
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let plus = {
                let mut g = Graph::new(store);
                let l = f(&mut g);
                g.value(l).item()
            };
            store.get_mut(id).data_mut()[i] = orig - h;
            let minus = {
                let mut g = Graph::new(store);
                let l = f(&mut g);
                g.value(l).item()
            };
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let exact = analytic.get(id).map_or(0.0, |m| m.data()[i]);
            let err = (numeric - exact).abs() / numeric.abs().max(exact.abs()).max(1.0);
            worst = worst.max(err);
        }
    }
    worst
}

const TOL: f64 = 1e-4;

#[test]
fn elementwise_and_broadcast_ops() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&mut rng, 3, 4, 1.0));
        let b = store.add("b", random(&mut rng, 3, 4, 1.0));
        let r = store.add("r", random(&mut rng, 1, 4, 1.0));
        let err = max_rel_error(&mut store, |g| {
            let (a, b, r) = (g.param(a), g.param(b), g.param(r));
            let x = g.mul(a, b);
            let x = g.add_row(x, r);
            let y = g.sub(x, b);
            let y = g.mul_row(y, r);
            let s = g.sigmoid(y);
            let t = g.tanh(a);
            let u = g.silu(b);
            let v = g.softplus(x);
            let w = g.relu(y);
            let z = g.add(s, t);
            let z = g.add(z, u);
            let z = g.add(z, v);
            let z = g.add(z, w);
            let z = g.scale(z, 0.7);
            g.sum_squares(z)
        });
        assert!(err < TOL, "seed {seed}: relative error {err}");
    }
}

#[test]
fn structural_ops() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let a = store.add("a", random(&mut rng, 4, 3, 1.0));
        let b = store.add("b", random(&mut rng, 4, 2, 1.0));
        let w = store.add("w", random(&mut rng, 5, 3, 1.0));
        let err = max_rel_error(&mut store, |g| {
            let (a, b, w) = (g.param(a), g.param(b), g.param(w));
            let c = g.concat_cols(&[a, b]);
            let c = g.slice_cols(c, 1, 3);
            let top = g.slice_rows(c, 0, 2);
            let stacked = g.concat_rows(&[c, top]);
            let m = g.mean_rows(stacked);
            let others = g.mean_of_others(stacked);
            let others = g.mul(others, stacked);
            let o = g.sum(others);
            let wt = g.transpose(w);
            let y = g.matmul(stacked, wt);
            let n = g.layer_norm(y, 1e-5);
            let s = g.sum(n);
            let p = g.mul(n, n);
            let q = g.sum(p);
            let mm = g.sum_squares(m);
            let t = g.add(s, q);
            let t = g.add(t, o);
            g.add(t, mm)
        });
        assert!(err < TOL, "seed {seed}: relative error {err}");
    }
}

#[test]
fn attention_op_gradients() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut store = ParamStore::new();
        let x = store.add("x", random(&mut rng, 2, 4, 1.0));
        let mem = store.add("mem", random(&mut rng, 3, 4, 1.0));
        let wq = store.add("wq", random(&mut rng, 4, 4, 0.8));
        let heads = if seed % 2 == 0 { 1 } else { 2 };
        let err = max_rel_error(&mut store, |g| {
            let (x, mem, wq) = (g.param(x), g.param(mem), g.param(wq));
            let q = g.matmul(x, wq);
            let selfattn = g.attention(q, q, x, heads);
            let cross = g.attention(selfattn, mem, mem, heads);
            g.sum_squares(cross)
        });
        assert!(err < TOL, "seed {seed}: relative error {err}");
    }
}

#[test]
fn cross_entropy_gradients() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
        let mut store = ParamStore::new();
        let l = store.add("l", random(&mut rng, 1, 5, 3.0));
        let target = (seed as usize) % 5;
        let err = max_rel_error(&mut store, |g| {
            let l = g.param(l);
            g.cross_entropy(l, target)
        });
        assert!(err < TOL, "seed {seed}: relative error {err}");
    }
}

#[test]
fn bivariate_nll_gradients() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(300 + seed);
        let mut store = ParamStore::new();
        let mu = store.add("mu", random(&mut rng, 4, 2, 2.0));
        let raw_s = store.add("raw_s", random(&mut rng, 4, 2, 1.0));
        let raw_r = store.add("raw_r", random(&mut rng, 4, 1, 1.5));
        let target = random(&mut rng, 4, 2, 2.0);
        let err = max_rel_error(&mut store, |g| {
            let mu = g.param(mu);
            let rs = g.param(raw_s);
            let sigma = g.softplus(rs);
            let rr = g.param(raw_r);
            let rho = g.tanh(rr);
            let rho = g.scale(rho, 0.9);
            g.bivariate_nll(mu, sigma, rho, target.clone())
        });
        assert!(err < TOL, "seed {seed}: relative error {err}");
    }
}
