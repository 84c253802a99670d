//! The assembled forecaster: guidance encoder, endpoint diffusion, endpoint
//! predictor and trajectory decoder sharing one parameter store.
//!
//! Endpoints and trajectories are predicted as residuals over a
//! constant-velocity extrapolation of the last observed velocity, scaled by
//! [`Normalizer::residual_scale`].

use ded_autograd::{Graph, Mat, ParamStore, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Scene, TrajectoryWindow, DEFAULT_FUT_LEN, DEFAULT_HIST_LEN, FEATURES};
use crate::decode::{calibrate, decode_trajectory, top_modes, GaussianTrajectory, TrajectoryDecoder};
use crate::diffusion::{make_schedule, sample_chains, Denoiser, Density, EndpointSampleSet, NoiseSchedule};
use crate::endpoint::{wta_loss, EndpointCandidates, EndpointPredictor};
use crate::guidance::{encode_scene, GuidanceEncoder};
use crate::training::{apply_variant, EndpointSource, Variant};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hist_len: usize,
    pub fut_len: usize,
    pub temporal_width: usize,
    pub spatial_width: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub samples: usize,
    pub density: Density,
    pub denoiser_hidden: usize,
    pub step_embedding: usize,
    /// Noise draws per agent per training step.
    pub diffusion_draws: usize,
    pub ep_layers: usize,
    pub ep_heads: usize,
    pub ep_d_model: usize,
    pub candidates: usize,
    pub tp_layers: usize,
    pub tp_heads: usize,
    pub tp_d_model: usize,
    pub report_modes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hist_len: DEFAULT_HIST_LEN,
            fut_len: DEFAULT_FUT_LEN,
            temporal_width: 64,
            spatial_width: 64,
            diffusion_steps: 100,
            beta_start: 1e-4,
            beta_end: 0.05,
            samples: 100,
            density: Density::Gaussian,
            denoiser_hidden: 128,
            step_embedding: 32,
            diffusion_draws: 4,
            ep_layers: 2,
            ep_heads: 4,
            ep_d_model: 64,
            candidates: 20,
            tp_layers: 1,
            tp_heads: 4,
            tp_d_model: 32,
            report_modes: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hist_len", self.hist_len),
            ("fut_len", self.fut_len),
            ("guidance.temporal_width", self.temporal_width),
            ("guidance.spatial_width", self.spatial_width),
            ("diffusion.hidden", self.denoiser_hidden),
            ("diffusion.train_draws", self.diffusion_draws),
            ("ep.heads", self.ep_heads),
            ("ep.d_model", self.ep_d_model),
            ("ep.candidates", self.candidates),
            ("tp.heads", self.tp_heads),
            ("tp.d_model", self.tp_d_model),
            ("tp.report_modes", self.report_modes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::usage(format!("{name} must be at least 1")));
            }
        }
        if self.hist_len < 3 {
            return Err(Error::usage("history needs at least 3 frames"));
        }
        if self.samples < 2 {
            return Err(Error::usage("diffusion.samples must be at least 2"));
        }
        if self.step_embedding == 0 || !self.step_embedding.is_multiple_of(2) {
            return Err(Error::usage("diffusion.step_embedding must be even and positive"));
        }
        if !self.ep_d_model.is_multiple_of(self.ep_heads) {
            return Err(Error::usage("ep.d_model must be divisible by ep.heads"));
        }
        if !self.tp_d_model.is_multiple_of(self.tp_heads) {
            return Err(Error::usage("tp.d_model must be divisible by tp.heads"));
        }
        make_schedule(self.diffusion_steps, self.beta_start, self.beta_end)?;
        Ok(())
    }
}

/// Input and output scales fitted on the training scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    /// Divisors for `(x, y, vx, vy, ax, ay)` history features.
    pub feature_scale: [f64; FEATURES],
    /// Divisor for agent positions relative to their neighbors.
    pub offset_scale: f64,
    /// Meters per unit of endpoint and trajectory residual.
    pub residual_scale: f64,
}

const FEATURE_FLOOR: [f64; FEATURES] = [1.0, 1.0, 0.1, 0.1, 0.1, 0.1];

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            feature_scale: [1.0; FEATURES],
            offset_scale: 1.0,
            residual_scale: 1.0,
        }
    }

    /// RMS of every quantity over the given scenes, floored so that
    /// constant inputs do not blow up.
    pub fn fit(scenes: &[Scene]) -> Self {
        let windows: Vec<&TrajectoryWindow> = scenes.iter().flat_map(|s| &s.windows).collect();
        if windows.is_empty() {
            return Self::identity();
        }
        let mut sq = [0.0; FEATURES];
        let mut frames = 0usize;
        for w in &windows {
            for f in &w.history {
                for c in 0..FEATURES {
                    sq[c] += f[c] * f[c];
                }
                frames += 1;
            }
        }
        let mut feature_scale = [0.0; FEATURES];
        for c in 0..FEATURES {
            feature_scale[c] = (sq[c] / frames as f64).sqrt().max(FEATURE_FLOOR[c]);
        }
        let n = windows.len() as f64;
        let offset = windows
            .iter()
            .map(|w| (w.origin[0].powi(2) + w.origin[1].powi(2)) / 2.0)
            .sum::<f64>()
            / n;
        let residual = windows
            .iter()
            .map(|w| {
                let e = w.endpoint();
                let c = cv_endpoint(w);
                ((e[0] - c[0]).powi(2) + (e[1] - c[1]).powi(2)) / 2.0
            })
            .sum::<f64>()
            / n;
        Self {
            feature_scale,
            offset_scale: offset.sqrt().max(1.0),
            residual_scale: residual.sqrt().max(1.0),
        }
    }

    /// Scaled history features (hist_len × 6).
    pub fn history(&self, w: &TrajectoryWindow) -> Mat {
        let rows: Vec<Vec<f64>> = w
            .history
            .iter()
            .map(|f| (0..FEATURES).map(|c| f[c] / self.feature_scale[c]).collect())
            .collect();
        Mat::from_rows(&rows)
    }

    pub fn endpoint_residual(&self, w: &TrajectoryWindow, endpoint: [f64; 2]) -> [f64; 2] {
        let c = cv_endpoint(w);
        [
            (endpoint[0] - c[0]) / self.residual_scale,
            (endpoint[1] - c[1]) / self.residual_scale,
        ]
    }

    pub fn endpoint_from_residual(&self, w: &TrajectoryWindow, r: [f64; 2]) -> [f64; 2] {
        let c = cv_endpoint(w);
        [c[0] + self.residual_scale * r[0], c[1] + self.residual_scale * r[1]]
    }
}

/// Where constant velocity puts the agent at the last future frame.
pub fn cv_endpoint(w: &TrajectoryWindow) -> [f64; 2] {
    *w.constant_velocity_future().last().expect("window has a future")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub norm: Normalizer,
    pub store: ParamStore,
    pub schedule: NoiseSchedule,
    pub guidance: GuidanceEncoder,
    pub denoiser: Denoiser,
    pub endpoint: EndpointPredictor,
    pub decoder: TrajectoryDecoder,
}

/// Loss weights for the three modules.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub diffusion: f64,
    pub endpoint: f64,
    pub trajectory: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            diffusion: 1.0,
            endpoint: 1.0,
            trajectory: 1.0,
        }
    }
}

/// Per-module loss sums over the agents of one or more scenes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub diffusion: f64,
    pub endpoint: f64,
    pub trajectory: f64,
    pub total: f64,
    pub agents: usize,
}

impl LossParts {
    pub fn add(&mut self, o: &LossParts) {
        self.diffusion += o.diffusion;
        self.endpoint += o.endpoint;
        self.trajectory += o.trajectory;
        self.total += o.total;
        self.agents += o.agents;
    }

    /// Per-agent means.
    pub fn mean(&self) -> LossParts {
        let n = self.agents.max(1) as f64;
        LossParts {
            diffusion: self.diffusion / n,
            endpoint: self.endpoint / n,
            trajectory: self.trajectory / n,
            total: self.total / n,
            agents: self.agents,
        }
    }
}

/// Everything inferred for one agent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentPrediction {
    pub agent_id: i64,
    pub candidates: Option<EndpointCandidates>,
    pub distribution: Option<EndpointSampleSet>,
    /// Endpoint fed to the decoder (meters, origin-centered).
    pub endpoint: Option<[f64; 2]>,
    pub calibrated_index: Option<usize>,
    /// Best candidates by NLL when calibrating.
    pub modes: Vec<usize>,
    pub trajectory: GaussianTrajectory,
    /// One decode per endpoint candidate, when candidates are used and
    /// requested.
    pub alternatives: Vec<GaussianTrajectory>,
}

impl Model {
    pub fn new(config: ModelConfig, norm: Normalizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let guidance = GuidanceEncoder::new(&mut store, "guidance", config.temporal_width, config.spatial_width, &mut rng);
        let gw = guidance.width();
        let denoiser = Denoiser::new(&mut store, "denoiser", gw, config.step_embedding, config.denoiser_hidden, &mut rng);
        let endpoint = EndpointPredictor::new(
            &mut store,
            "endpoint",
            config.hist_len,
            config.ep_d_model,
            config.ep_heads,
            config.ep_layers,
            config.candidates,
            &mut rng,
        );
        let decoder = TrajectoryDecoder::new(
            &mut store,
            "decoder",
            config.hist_len,
            config.fut_len,
            gw,
            config.tp_d_model,
            config.tp_heads,
            config.tp_layers,
            &mut rng,
        );
        let schedule = make_schedule(config.diffusion_steps, config.beta_start, config.beta_end)?;
        Ok(Self {
            config,
            norm,
            store,
            schedule,
            guidance,
            denoiser,
            endpoint,
            decoder,
        })
    }

    /// Checks that the stored parameters have the shapes the configuration
    /// implies.
    pub fn check_consistency(&self) -> Result<()> {
        let fresh = Model::new(self.config.clone(), self.norm.clone(), 0)?;
        let same_layout = fresh.store.len() == self.store.len()
            && fresh
                .store
                .iter()
                .zip(self.store.iter())
                .all(|((_, na, a), (_, nb, b))| na == nb && a.shape() == b.shape());
        if !same_layout || fresh.schedule != self.schedule {
            return Err(Error::Data(
                "checkpoint parameters do not match its model configuration".into(),
            ));
        }
        if !self.store.is_finite() {
            return Err(Error::Data("checkpoint holds non-finite parameters".into()));
        }
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    /// Multiply-accumulate estimate for inferring one agent.
    pub fn macs_per_agent(&self, variant: Variant) -> usize {
        let c = &self.config;
        let wiring = apply_variant(variant);
        let mut macs = self.guidance.macs(1, c.hist_len)
            + self.decoder.macs(c.hist_len, c.fut_len, self.guidance.width());
        if wiring.uses_diffusion() {
            macs += c.samples * c.diffusion_steps * self.denoiser.macs();
        }
        if wiring.uses_candidates() {
            macs += self.endpoint.macs(c.hist_len);
        }
        macs
    }

    /// Builds the training loss of one scene on `g`.
    pub fn scene_loss(
        &self,
        g: &mut Graph,
        scene: &Scene,
        variant: Variant,
        weights: &LossWeights,
        rng: &mut impl Rng,
    ) -> Result<(Var, LossParts)> {
        let wiring = apply_variant(variant);
        let gis = self.guidance.encode(g, scene, &self.norm)?;
        let mut terms = Vec::new();
        let mut parts = LossParts {
            agents: scene.num_agents(),
            ..LossParts::default()
        };
        for (w, &gi) in scene.windows.iter().zip(&gis) {
            let y0 = self.norm.endpoint_residual(w, w.endpoint());
            if wiring.train_diffusion && weights.diffusion > 0.0 {
                let r = self.config.diffusion_draws;
                let ks: Vec<usize> = (0..r).map(|_| rng.random_range(1..=self.schedule.steps())).collect();
                let eps: Vec<[f64; 2]> = (0..r)
                    .map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)])
                    .collect();
                let f = g.concat_rows(&vec![gi; r]);
                let l = self.denoiser.loss(g, &vec![y0; r], &ks, &eps, f, &self.schedule);
                let l = g.scale(l, 1.0 / r as f64);
                parts.diffusion += g.value(l).item();
                terms.push(g.scale(l, weights.diffusion));
            }
            if wiring.train_endpoint && weights.endpoint > 0.0 {
                let (coords, logits) = self.endpoint.forward(g, w, &self.norm)?;
                let l = wta_loss(g, coords, logits, y0);
                parts.endpoint += g.value(l).item();
                terms.push(g.scale(l, weights.endpoint));
            }
            if weights.trajectory > 0.0 {
                let e = if wiring.endpoint_source == EndpointSource::None {
                    [0.0; 2]
                } else {
                    y0
                };
                let hist = g.constant(self.norm.history(w));
                let ev = g.constant(Mat::row_vector(&e));
                let cv = w.constant_velocity_future();
                let out = self.decoder.forward(g, hist, gi, ev, &cv, &self.norm);
                let l = g.bivariate_nll(out.mu, out.sigma, out.rho, Mat::from_rows(&w.future));
                parts.trajectory += g.value(l).item();
                terms.push(g.scale(l, weights.trajectory));
            }
        }
        let total = match terms.split_first() {
            Some((&first, rest)) => rest.iter().fold(first, |acc, &t| g.add(acc, t)),
            None => g.constant(Mat::scalar(0.0)),
        };
        parts.total = g.value(total).item();
        Ok((total, parts))
    }

    /// Endpoint distribution for one agent, in meters.
    pub fn endpoint_distribution(&self, w: &TrajectoryWindow, gi: &[f64], rng: &mut impl Rng) -> Result<EndpointSampleSet> {
        let bound = self.denoiser.bind(&self.store);
        let raw = sample_chains(gi, self.config.samples, &bound, &self.schedule, rng)?;
        let samples = raw.iter().map(|&r| self.norm.endpoint_from_residual(w, r)).collect();
        EndpointSampleSet::fit(samples, self.config.density)
    }

    /// Full inference for every agent of `scene`. Agent `i` draws its
    /// diffusion samples from stream `i` of `seed`.
    pub fn predict_scene(&self, scene: &Scene, variant: Variant, seed: u64, with_alternatives: bool) -> Result<Vec<AgentPrediction>> {
        let wiring = apply_variant(variant);
        let features = encode_scene(scene, self)?;
        let mut out = Vec::with_capacity(scene.num_agents());
        for (i, (w, gi)) in scene.windows.iter().zip(&features).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let distribution = if wiring.uses_diffusion() {
                Some(self.endpoint_distribution(w, &gi.gi, &mut rng)?)
            } else {
                None
            };
            let candidates = if wiring.uses_candidates() {
                Some(crate::endpoint::predict_endpoints(w, self)?)
            } else {
                None
            };
            let (endpoint, calibrated_index, modes) = match wiring.endpoint_source {
                EndpointSource::Calibrated => {
                    let (c, d) = (candidates.as_ref().unwrap(), distribution.as_ref().unwrap());
                    let (e, idx) = calibrate(c, d);
                    (Some(e), Some(idx), top_modes(c, d, self.config.report_modes))
                }
                EndpointSource::DiffusionMean => (Some(distribution.as_ref().unwrap().mean), None, Vec::new()),
                EndpointSource::MostConfident => {
                    let c = candidates.as_ref().unwrap();
                    (Some(c.points[c.most_confident()]), None, Vec::new())
                }
                EndpointSource::None => (None, None, Vec::new()),
            };
            let trajectory = decode_trajectory(w, gi, endpoint, self)?;
            let alternatives = match (&candidates, with_alternatives) {
                (Some(c), true) => c
                    .points
                    .iter()
                    .map(|&p| decode_trajectory(w, gi, Some(p), self))
                    .collect::<Result<Vec<_>>>()?,
                _ => Vec::new(),
            };
            out.push(AgentPrediction {
                agent_id: w.agent_id,
                candidates,
                distribution,
                endpoint,
                calibrated_index,
                modes,
                trajectory,
                alternatives,
            });
        }
        Ok(out)
    }
}
