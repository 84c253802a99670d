use ded_autograd::{Graph, ParamId};
use ded_core::data::{split_dataset, synth_scenarios, DatasetSplit, ScenarioKind, Scene};
use ded_core::decode::decode_trajectory;
use ded_core::evaluation::{evaluate, EvalMode};
use ded_core::guidance::{encode_scene, encode_temporal};
use ded_core::model::{LossWeights, Model, ModelConfig, Normalizer};
use ded_core::training::{train, Checkpoint, TrainConfig, Variant};
use ded_core::{Error, ErrorClass};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> ModelConfig {
    ModelConfig {
        temporal_width: 8,
        spatial_width: 6,
        diffusion_steps: 10,
        samples: 8,
        denoiser_hidden: 12,
        step_embedding: 8,
        diffusion_draws: 2,
        ep_layers: 1,
        ep_heads: 2,
        ep_d_model: 8,
        candidates: 3,
        tp_heads: 2,
        tp_d_model: 8,
        report_modes: 2,
        ..ModelConfig::default()
    }
}

fn tiny_split() -> DatasetSplit {
    let scenes = synth_scenarios(ScenarioKind::LaneChange, 12, 5).unwrap();
    split_dataset(&scenes, 5).unwrap()
}

fn quick_train(variant: Variant, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        variant,
        seed,
        ..TrainConfig::default()
    }
}

fn multi_agent_scene(min_agents: usize) -> Scene {
    synth_scenarios(ScenarioKind::ConstantVelocity, 40, 2)
        .unwrap()
        .into_iter()
        .find(|s| s.num_agents() >= min_agents)
        .expect("generator yields crowded scenes")
}

fn fresh_model(seed: u64, scenes: &[Scene]) -> Model {
    Model::new(tiny(), Normalizer::fit(scenes), seed).unwrap()
}

fn perturb(model: &mut Model, prefix: &str, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = model
        .store
        .iter()
        .filter(|(_, name, _)| name.starts_with(prefix))
        .map(|(id, _, _)| id)
        .collect();
    assert!(!ids.is_empty());
    for id in ids {
        for v in model.store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
}

#[test]
fn guidance_is_equivariant_under_agent_permutation() {
    let scene = multi_agent_scene(3);
    let model = fresh_model(4, std::slice::from_ref(&scene));
    let base = encode_scene(&scene, &model).unwrap();
    let n = scene.num_agents();
    for shift in 1..n {
        let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
        let mut permuted = scene.clone();
        permuted.windows = perm.iter().map(|&i| scene.windows[i].clone()).collect();
        permuted.presence_mask = perm.iter().map(|&i| scene.presence_mask[i].clone()).collect();
        let out = encode_scene(&permuted, &model).unwrap();
        for (slot, &i) in perm.iter().enumerate() {
            assert_eq!(out[slot].gi, base[i].gi);
        }
    }
}

#[test]
fn lone_agent_receives_zero_message() {
    let scene = multi_agent_scene(1);
    let lone = Scene::from_global_windows(vec![scene.windows[0].clone()]);
    let model = fresh_model(9, std::slice::from_ref(&lone));
    let gi = &encode_scene(&lone, &model).unwrap()[0];
    let temp = encode_temporal(&lone.windows[0], &model).unwrap();
    assert_eq!(gi.temp, temp);

    let w = model.store.get(model.guidance.agg.w);
    let b = model.store.get(model.guidance.agg.b);
    let (inputs, outputs) = w.shape();
    let mut x = temp.clone();
    x.resize(inputs, 0.0);
    for k in 0..outputs {
        let mut acc = b.data()[k];
        for (j, xj) in x.iter().enumerate() {
            acc += xj * w.get(j, k);
        }
        assert!((gi.spat[k] - acc.tanh()).abs() <= 1e-12);
    }
}

#[test]
fn none_variant_ignores_endpoint_modules() {
    let scene = multi_agent_scene(2);
    let mut model = fresh_model(1, std::slice::from_ref(&scene));
    perturb(&mut model, "decoder", 11);
    let before = model.predict_scene(&scene, Variant::None, 3, false).unwrap();
    perturb(&mut model, "denoiser", 12);
    perturb(&mut model, "endpoint", 13);
    let after = model.predict_scene(&scene, Variant::None, 3, false).unwrap();
    for (a, b) in before.iter().zip(&after) {
        assert_eq!(a.trajectory, b.trajectory);
        assert!(a.endpoint.is_none() && a.candidates.is_none() && a.distribution.is_none());
    }
}

#[test]
fn single_module_variants_differ_only_in_endpoint_source() {
    let scene = multi_agent_scene(2);
    let mut model = fresh_model(2, std::slice::from_ref(&scene));
    perturb(&mut model, "decoder", 21);
    perturb(&mut model, "endpoint", 22);
    let features = encode_scene(&scene, &model).unwrap();
    let no_ed = model.predict_scene(&scene, Variant::NoEd, 5, false).unwrap();
    let no_ep = model.predict_scene(&scene, Variant::NoEp, 5, false).unwrap();
    for (i, w) in scene.windows.iter().enumerate() {
        let c = no_ed[i].candidates.as_ref().unwrap();
        assert_eq!(no_ed[i].endpoint, Some(c.points[c.most_confident()]));
        assert!(no_ed[i].distribution.is_none());
        let d = no_ep[i].distribution.as_ref().unwrap();
        assert_eq!(no_ep[i].endpoint, Some(d.mean));
        assert!(no_ep[i].candidates.is_none());
        for p in [&no_ed[i], &no_ep[i]] {
            assert_eq!(p.trajectory, decode_trajectory(w, &features[i], p.endpoint, &model).unwrap());
        }
    }
}

#[test]
fn zero_diffusion_weight_leaves_denoiser_untouched() {
    let split = tiny_split();
    let mut cfg = quick_train(Variant::Full, 6);
    cfg.weights = LossWeights {
        diffusion: 0.0,
        ..LossWeights::default()
    };
    let init = fresh_model(6, &split.train);
    let out = train(&split, &tiny(), &cfg).unwrap();
    let trained = &out.checkpoint.model.store;
    let mut moved = false;
    for (id, name, m) in init.store.iter() {
        if name.starts_with("denoiser") {
            assert_eq!(trained.get(id), m, "{name} changed");
        } else if trained.get(id) != m {
            moved = true;
        }
    }
    assert!(moved);
}

#[test]
fn training_is_deterministic_across_thread_counts() {
    let split = tiny_split();
    let cfg = quick_train(Variant::Full, 8);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| train(&split, &tiny(), &cfg).unwrap())
    };
    let a = run(1);
    let b = run(3);
    assert_eq!(a.log_jsonl(), b.log_jsonl());
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
}

#[test]
fn checkpoint_survives_disk_round_trip() {
    let split = tiny_split();
    let out = train(&split, &tiny(), &quick_train(Variant::NoEp, 1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    out.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.to_bytes(), out.checkpoint.to_bytes());
}

#[test]
fn checkpoint_config_mismatch_is_a_data_error() {
    let split = tiny_split();
    let out = train(&split, &tiny(), &quick_train(Variant::Full, 1)).unwrap();
    let mut ckpt = out.checkpoint;
    ckpt.model.config.candidates += 1;
    let err = Checkpoint::from_bytes(&ckpt.to_bytes(), std::path::Path::new("m.ckpt")).unwrap_err();
    assert_eq!(err.class(), ErrorClass::Data);

    let garbage = Checkpoint::from_bytes(b"DEDCKPT\0junk", std::path::Path::new("g.ckpt")).unwrap_err();
    assert_eq!(garbage.class(), ErrorClass::Data);
}

#[test]
fn evaluation_is_repeatable_and_best_of_c_never_worse() {
    let split = tiny_split();
    let out = train(&split, &tiny(), &quick_train(Variant::Full, 2)).unwrap();
    let a = evaluate(&out.checkpoint, &split.test, EvalMode::Calibrated, 4).unwrap();
    let b = evaluate(&out.checkpoint, &split.test, EvalMode::Calibrated, 4).unwrap();
    assert_eq!(a, b);
    let best = evaluate(&out.checkpoint, &split.test, EvalMode::BestOfC, 4).unwrap();
    for (x, y) in best.rmse().iter().zip(a.rmse()) {
        assert!(*x <= y + 1e-12);
    }
}

#[test]
fn eval_rejects_unknown_mode() {
    assert!(matches!("top_k".parse::<EvalMode>(), Err(Error::Usage(_))));
}

#[test]
fn scene_loss_gradient_matches_finite_differences() {
    let scene = multi_agent_scene(2);
    let mut model = fresh_model(3, std::slice::from_ref(&scene));
    perturb(&mut model, "decoder", 31);
    let weights = LossWeights::default();
    let loss = |m: &Model| {
        let mut g = Graph::new(&m.store);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (l, _) = m.scene_loss(&mut g, &scene, Variant::Full, &weights, &mut rng).unwrap();
        g.value(l).item()
    };
    let grads = {
        let mut g = Graph::new(&model.store);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let (l, _) = model.scene_loss(&mut g, &scene, Variant::Full, &weights, &mut rng).unwrap();
        g.backward(l)
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        let n = model.store.get(id).len();
        for i in (0..n).step_by(5) {
            let orig = model.store.get(id).data()[i];
            model.store.get_mut(id).data_mut()[i] = orig + h;
            let plus = loss(&model);
            model.store.get_mut(id).data_mut()[i] = orig - h;
            let minus = loss(&model);
            model.store.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let exact = grads.get(id).map_or(0.0, |m| m.data()[i]);
            worst = worst.max((numeric - exact).abs() / numeric.abs().max(exact.abs()).max(1e-3));
        }
    }
    assert!(worst <= 1e-4, "worst relative error {worst:e}");
}
