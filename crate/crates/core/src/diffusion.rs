//! Endpoint diffusion: noise schedule, closed-form forward process,
//! posterior and reparameterized means, the guidance-conditioned denoiser,
//! ancestral sampling and the density fitted to the sampled endpoints.
//!
//! Steps are numbered `1..=K`; `alpha_bar(0)` is 1 by convention.

use std::str::FromStr;

use ded_autograd::{Gradients, Graph, Mat, ParamStore, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::nn::Linear;
use crate::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Added to the diagonal of every fitted covariance.
pub const COV_REGULARIZATION: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Linearly spaced β over `k` steps.
pub fn make_schedule(k: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if k == 0 {
        return Err(Error::usage("diffusion needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::usage(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start} and {beta_end}"
        )));
    }
    let beta: Vec<f64> = (0..k)
        .map(|i| {
            if k == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (k - 1) as f64
            }
        })
        .collect();
    Ok(NoiseSchedule::from_betas(beta))
}

impl NoiseSchedule {
    pub fn from_betas(beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Self {
            beta,
            alpha,
            alpha_bar,
        }
    }

    pub fn steps(&self) -> usize {
        self.alpha.len()
    }

    fn check(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.steps() {
            return Err(Error::usage(format!(
                "diffusion step {k} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// α_k for `k` in `1..=K`.
    pub fn alpha(&self, k: usize) -> f64 {
        self.alpha[k - 1]
    }

    /// ᾱ_k for `k` in `0..=K`.
    pub fn alpha_bar(&self, k: usize) -> f64 {
        if k == 0 {
            1.0
        } else {
            self.alpha_bar[k - 1]
        }
    }

    /// Variance of q(Y_{k−1} | Y_k, Y_0).
    pub fn posterior_variance(&self, k: usize) -> Result<f64> {
        self.check(k)?;
        let (a, ab, ab_prev) = (self.alpha(k), self.alpha_bar(k), self.alpha_bar(k - 1));
        Ok((1.0 - ab_prev) * (1.0 - a) / (1.0 - ab))
    }
}

/// Y_k = √ᾱ_k·Y_0 + √(1−ᾱ_k)·ε.
pub fn forward_diffuse(y0: [f64; 2], k: usize, eps: [f64; 2], s: &NoiseSchedule) -> Result<[f64; 2]> {
    s.check(k)?;
    let ab = s.alpha_bar(k);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok([a * y0[0] + b * eps[0], a * y0[1] + b * eps[1]])
}

/// Mean of q(Y_{k−1} | Y_k, Y_0).
pub fn posterior_mean(yk: [f64; 2], y0: [f64; 2], k: usize, s: &NoiseSchedule) -> Result<[f64; 2]> {
    s.check(k)?;
    let (a, ab, ab_prev) = (s.alpha(k), s.alpha_bar(k), s.alpha_bar(k - 1));
    let c0 = ab_prev.sqrt() * (1.0 - a) / (1.0 - ab);
    let ck = a.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    Ok([c0 * y0[0] + ck * yk[0], c0 * y0[1] + ck * yk[1]])
}

/// Something that predicts the noise in a batch of diffused endpoints.
pub trait NoisePredictor {
    /// `yk` is n×2, all rows at step `k` under guidance `f`; returns n×2.
    fn predict(&self, yk: &Mat, k: usize, f: &[f64]) -> Result<Mat>;
}

/// μ_θ(Y_k, k, f) = (Y_k − (1−α_k)/√(1−ᾱ_k)·ε_θ) / √α_k, row-wise.
pub fn reparam_mean_batch(
    yk: &Mat,
    k: usize,
    f: &[f64],
    denoiser: &impl NoisePredictor,
    s: &NoiseSchedule,
) -> Result<Mat> {
    s.check(k)?;
    let eps = denoiser.predict(yk, k, f)?;
    if !eps.is_finite() {
        return Err(Error::Runtime(format!("denoiser produced non-finite noise at step {k}")));
    }
    let (a, ab) = (s.alpha(k), s.alpha_bar(k));
    let c = (1.0 - a) / (1.0 - ab).sqrt();
    let inv = 1.0 / a.sqrt();
    Ok(yk.zip_map(&eps, |y, e| (y - c * e) * inv))
}

pub fn reparam_mean(
    yk: [f64; 2],
    k: usize,
    f: &[f64],
    denoiser: &impl NoisePredictor,
    s: &NoiseSchedule,
) -> Result<[f64; 2]> {
    let m = reparam_mean_batch(&Mat::row_vector(&yk), k, f, denoiser, s)?;
    Ok([m.get(0, 0), m.get(0, 1)])
}

/// Sinusoidal embedding of step `k` with `width` (even) channels.
pub fn step_embedding(k: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let angle = k as f64 * freq;
        out[i] = angle.sin();
        out[half + i] = angle.cos();
    }
    out
}

/// ε_θ: three linear layers with SiLU between them, over
/// `[Y_k, step embedding, guidance]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Denoiser {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
    pub step_width: usize,
    pub guidance_width: usize,
}

impl Denoiser {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        guidance_width: usize,
        step_width: usize,
        hidden: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let l1 = Linear::new(store, &format!("{name}.l1"), 2 + step_width + guidance_width, hidden, rng);
        let l2 = Linear::new(store, &format!("{name}.l2"), hidden, hidden, rng);
        let l3 = Linear::new(store, &format!("{name}.l3"), hidden, 2, rng);
        // Start from predicting zero noise.
        store.get_mut(l3.w).data_mut().fill(0.0);
        Self {
            l1,
            l2,
            l3,
            step_width,
            guidance_width,
        }
    }

    /// Predicted noise for rows `yk` (n×2) at per-row steps `ks`, with
    /// guidance `f` (n×G).
    pub fn forward(&self, g: &mut Graph, yk: Var, ks: &[usize], f: Var) -> Var {
        let emb: Vec<Vec<f64>> = ks.iter().map(|&k| step_embedding(k, self.step_width)).collect();
        let emb = g.constant(Mat::from_rows(&emb));
        let x = g.concat_cols(&[yk, emb, f]);
        let h = self.l1.forward(g, x);
        let h = g.silu(h);
        let h = self.l2.forward(g, h);
        let h = g.silu(h);
        self.l3.forward(g, h)
    }

    /// Sum over rows of ‖ε − ε_θ(forward_diffuse(Y_0, k, ε), k, f)‖².
    pub fn loss(&self, g: &mut Graph, y0: &[[f64; 2]], ks: &[usize], eps: &[[f64; 2]], f: Var, s: &NoiseSchedule) -> Var {
        let yk: Vec<[f64; 2]> = y0
            .iter()
            .zip(ks)
            .zip(eps)
            .map(|((y, &k), e)| forward_diffuse(*y, k, *e, s).expect("step drawn in range"))
            .collect();
        let yk = g.constant(Mat::from_rows(&yk));
        let pred = self.forward(g, yk, ks, f);
        let target = g.constant(Mat::from_rows(eps));
        let diff = g.sub(target, pred);
        g.sum_squares(diff)
    }

    pub fn macs(&self) -> usize {
        self.l1.macs() + self.l2.macs() + self.l3.macs()
    }

    pub fn bind<'a>(&'a self, store: &'a ParamStore) -> BoundDenoiser<'a> {
        BoundDenoiser { net: self, store }
    }
}

/// A [`Denoiser`] paired with its parameter values.
pub struct BoundDenoiser<'a> {
    pub net: &'a Denoiser,
    pub store: &'a ParamStore,
}

impl NoisePredictor for BoundDenoiser<'_> {
    fn predict(&self, yk: &Mat, k: usize, f: &[f64]) -> Result<Mat> {
        if f.len() != self.net.guidance_width {
            return Err(Error::usage(format!(
                "guidance has {} values, denoiser expects {}",
                f.len(),
                self.net.guidance_width
            )));
        }
        let n = yk.rows();
        let mut g = Graph::new(self.store);
        let y = g.constant(yk.clone());
        let fm = Mat::from_vec(n, f.len(), f.iter().copied().cycle().take(n * f.len()).collect());
        let fv = g.constant(fm);
        let out = self.net.forward(&mut g, y, &vec![k; n], fv);
        Ok(g.value(out).clone())
    }
}

fn standard_normal_pair(rng: &mut impl Rng) -> [f64; 2] {
    [rng.sample(StandardNormal), rng.sample(StandardNormal)]
}

/// One draw of the noise-prediction loss for a single endpoint, with its
/// parameter gradients.
pub fn diffusion_loss(
    y0: [f64; 2],
    f: &[f64],
    net: &Denoiser,
    store: &ParamStore,
    s: &NoiseSchedule,
    rng: &mut impl Rng,
) -> (f64, Gradients) {
    let k = rng.random_range(1..=s.steps());
    let eps = standard_normal_pair(rng);
    let mut g = Graph::new(store);
    let fv = g.constant(Mat::row_vector(f));
    let loss = net.loss(&mut g, &[y0], &[k], &[eps], fv, s);
    (g.value(loss).item(), g.backward(loss))
}

/// Runs `m` ancestral chains from Y_K ~ N(0, I) down to Y_0 and returns
/// the final states. All chains advance together.
pub fn sample_chains(
    f: &[f64],
    m: usize,
    denoiser: &impl NoisePredictor,
    s: &NoiseSchedule,
    rng: &mut impl Rng,
) -> Result<Vec<[f64; 2]>> {
    let mut y = Mat::from_rows(&(0..m).map(|_| standard_normal_pair(rng)).collect::<Vec<_>>());
    for k in (1..=s.steps()).rev() {
        let mut mean = reparam_mean_batch(&y, k, f, denoiser, s)?;
        if k > 1 {
            let sd = s.posterior_variance(k)?.sqrt();
            for v in mean.data_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += sd * z;
            }
        }
        y = mean;
    }
    Ok((0..m).map(|i| [y.get(i, 0), y.get(i, 1)]).collect())
}

/// Samples `m` endpoints and fits `density` to them.
pub fn sample_endpoints(
    f: &[f64],
    m: usize,
    denoiser: &impl NoisePredictor,
    s: &NoiseSchedule,
    density: Density,
    rng: &mut impl Rng,
) -> Result<EndpointSampleSet> {
    if m < 2 {
        return Err(Error::usage("endpoint sampling needs at least 2 samples"));
    }
    let samples = sample_chains(f, m, denoiser, s, rng)?;
    EndpointSampleSet::fit(samples, density)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Density {
    #[default]
    Gaussian,
    Kde,
}

impl FromStr for Density {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Density::Gaussian),
            "kde" => Ok(Density::Kde),
            other => Err(Error::usage(format!("unknown density {other:?} (gaussian or kde)"))),
        }
    }
}

impl std::fmt::Display for Density {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Density::Gaussian => "gaussian",
            Density::Kde => "kde",
        })
    }
}

/// Endpoint samples with a fitted density.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointSampleSet {
    pub samples: Vec<[f64; 2]>,
    pub mean: [f64; 2],
    /// Sample covariance plus [`COV_REGULARIZATION`]·I.
    pub cov: [[f64; 2]; 2],
    /// The covariance was singular before regularization.
    pub degenerate: bool,
    pub density: Density,
    /// Isotropic kernel width for [`Density::Kde`].
    pub bandwidth: f64,
}

impl EndpointSampleSet {
    /// Two-pass mean and (M−1)-normalized covariance.
    pub fn fit(samples: Vec<[f64; 2]>, density: Density) -> Result<Self> {
        let m = samples.len();
        if m < 2 {
            return Err(Error::usage("a sample set needs at least 2 samples"));
        }
        if samples.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Runtime("non-finite endpoint sample".into()));
        }
        let n = m as f64;
        let mean = [
            samples.iter().map(|p| p[0]).sum::<f64>() / n,
            samples.iter().map(|p| p[1]).sum::<f64>() / n,
        ];
        let mut c = [[0.0; 2]; 2];
        for p in &samples {
            let d = [p[0] - mean[0], p[1] - mean[1]];
            for i in 0..2 {
                for j in 0..2 {
                    c[i][j] += d[i] * d[j];
                }
            }
        }
        for row in &mut c {
            for v in row.iter_mut() {
                *v /= n - 1.0;
            }
        }
        let det = c[0][0] * c[1][1] - c[0][1] * c[1][0];
        let scale = c[0][0].max(c[1][1]);
        let degenerate = det <= 1e-12 * scale * scale || scale <= 0.0;
        let sigma_bar = ((c[0][0] + c[1][1]) / 2.0).sqrt();
        let bandwidth = (sigma_bar * n.powf(-1.0 / 6.0)).max(COV_REGULARIZATION.sqrt());
        c[0][0] += COV_REGULARIZATION;
        c[1][1] += COV_REGULARIZATION;
        Ok(Self {
            samples,
            mean,
            cov: c,
            degenerate,
            density,
            bandwidth,
        })
    }

    /// Negative log density at `p`.
    pub fn nll(&self, p: [f64; 2]) -> f64 {
        match self.density {
            Density::Gaussian => gaussian_nll(p, self.mean, self.cov),
            Density::Kde => {
                let h2 = self.bandwidth * self.bandwidth;
                let logs: Vec<f64> = self
                    .samples
                    .iter()
                    .map(|s| {
                        let d2 = (p[0] - s[0]).powi(2) + (p[1] - s[1]).powi(2);
                        -d2 / (2.0 * h2)
                    })
                    .collect();
                let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
                LN_2PI + h2.ln() + (self.samples.len() as f64).ln() - lse
            }
        }
    }

    /// The same set with every sample mapped through `f`, refitted.
    pub fn map(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Result<Self> {
        Self::fit(self.samples.iter().map(|&p| f(p)).collect(), self.density)
    }
}

pub fn gaussian_nll(p: [f64; 2], mean: [f64; 2], cov: [[f64; 2]; 2]) -> f64 {
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let d = [p[0] - mean[0], p[1] - mean[1]];
    let quad = (cov[1][1] * d[0] * d[0] - 2.0 * cov[0][1] * d[0] * d[1] + cov[0][0] * d[1] * d[1]) / det;
    LN_2PI + 0.5 * det.ln() + 0.5 * quad
}

/// Negative log density of `point` under the set's fitted density.
pub fn endpoint_nll(point: [f64; 2], set: &EndpointSampleSet) -> f64 {
    set.nll(point)
}
