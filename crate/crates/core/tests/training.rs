use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tracespace::model::{train, Checkpoint, Model, ModelConfig, Net, TrainConfig, TrainSet};
use tracespace::synth::{gen_scene, ground_truth, synth_episode_spec, MotionFamily, SuiteConfig};
use tracespace::{Error, NormStats, TraceSample};

fn suite(episodes: usize, moving_fraction: f64) -> SuiteConfig {
    SuiteConfig {
        episodes,
        seed: 3,
        families: vec![MotionFamily::LinearTransport, MotionFamily::PickPlace],
        grid_rows: 4,
        grid_cols: 4,
        horizon: 4,
        image_size: 32,
        episode_len: 16,
        motion_frames: 6,
        moving_fraction,
        ..SuiteConfig::default()
    }
}

fn samples(cfg: &SuiteConfig) -> Vec<TraceSample> {
    let forge = cfg.forge_config();
    cfg.episode_seeds()
        .iter()
        .enumerate()
        .map(|(i, &seed)| {
            let scene = gen_scene(&synth_episode_spec(cfg, i, seed)).unwrap();
            let (trace, truth) = ground_truth(&scene, &forge, "e", seed, "static").unwrap();
            let (e, r) = (&scene.episode, truth.ref_frame);
            TraceSample::new(
                e.images[r].clone(),
                e.depths[r].clone(),
                e.tracks.camera(r).clone(),
                trace,
                truth.instructions,
                format!("e{i}"),
            )
            .unwrap()
        })
        .collect()
}

fn model() -> ModelConfig {
    ModelConfig {
        patch_grid: 4,
        d_model: 16,
        width: 16,
        depth: 1,
        ..ModelConfig::default()
    }
}

fn config(steps: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        steps,
        seed,
        batch_size: 8,
        learning_rate: 1e-3,
        model: model(),
        ..TrainConfig::default()
    }
}

#[test]
fn validation_loss_drops_for_three_seeds() {
    let set = TrainSet::new(&samples(&suite(16, 0.3)), &model()).unwrap();
    for seed in 0..3 {
        let run = train(&set, &config(300, seed)).unwrap();
        assert!(
            run.validation_final < run.validation_initial,
            "seed {seed}: {} -> {}",
            run.validation_initial,
            run.validation_final
        );
        assert_eq!(run.checkpoint.steps, 300);
    }
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let set = TrainSet::new(&samples(&suite(8, 0.3)), &model()).unwrap();
    let a = train(&set, &config(40, 5)).unwrap().checkpoint.to_bytes();
    let b = train(&set, &config(40, 5)).unwrap().checkpoint.to_bytes();
    let c = train(&set, &config(40, 6)).unwrap().checkpoint.to_bytes();
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn diverging_run_keeps_the_checkpoint_reached() {
    let set = TrainSet::new(&samples(&suite(8, 0.3)), &model()).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e30,
        grad_clip: 0.0,
        ..config(50, 0)
    };
    let abort = train(&set, &cfg).unwrap_err();
    assert!(matches!(abort.error, Error::NonFiniteLoss { .. }), "{}", abort.error);
    let partial = abort.partial.expect("partial checkpoint");
    assert!(partial.steps >= 1 && partial.steps < 50);
    assert_eq!(partial.params.len(), Net::<f32>::new(&model(), set.shape).unwrap().num_params());
}

#[test]
fn static_data_gives_near_zero_samples() {
    let data = samples(&suite(8, 0.0));
    assert!(data.iter().all(|s| s.trace.points() == tracespace::ScreenTrace::constant(*s.trace.grid(), s.trace.frames(), &s.trace.first_frame()).unwrap().points()));
    let set = TrainSet::new(&data, &model()).unwrap();
    let run = train(&set, &config(1500, 0)).unwrap();
    let m = Model::from_checkpoint(run.checkpoint).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for s in &data[..4] {
        let cond = m.condition(&s.image, &s.depth, &s.instructions[0]).unwrap();
        let inc = m.ode_sample(&cond, 100, 1.0, &mut rng).unwrap();
        let std = inc.standardized(m.stats());
        let rms = (std.iter().map(|v| v * v).sum::<f64>() / std.len() as f64).sqrt();
        assert!(rms < 0.05, "standardized rms {rms}");
    }
}

#[test]
fn zero_increment_model_keeps_the_initial_grid() {
    let data = samples(&suite(1, 0.3));
    let shape = TrainSet::new(&data, &model()).unwrap().shape;
    let net = Net::<f32>::new(&model(), shape).unwrap();
    // Zero spread with zero mean maps every sampled value to a zero increment.
    let ck = Checkpoint {
        model: model(),
        train: config(1, 0),
        shape,
        stats: NormStats {
            mean: [0.0; 3],
            std: [0.0; 3],
        },
        steps: 0,
        params: net.random_params(&mut ChaCha8Rng::seed_from_u64(2), 0.3),
    };
    let m = Model::from_checkpoint(ck).unwrap();
    let s = &data[0];
    let pred = m
        .predict_trace(&s.image, &s.depth, "push it", 10, 2.0, &mut ChaCha8Rng::seed_from_u64(3))
        .unwrap();
    let grid = pred.grid();
    for (k, [x, y]) in grid.positions().iter().enumerate() {
        let (u, v) = s.depth.pixel_at(*x, *y).unwrap();
        let expect = [*x, *y, f64::from(s.depth.get(u, v))];
        assert_eq!(pred.point(k, 0), expect);
        assert!(pred.path(k).all(|p| p == expect));
    }
}
