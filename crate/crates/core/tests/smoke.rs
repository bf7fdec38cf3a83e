use radarflow_core::losses::LossConfig;
use radarflow_core::model::NetConfig;
use radarflow_core::pipeline::{
    run_eval, run_generate, run_training, DataConfig, OptimizerConfig, OptimizerKind, Predictor,
    RunConfig,
};
use radarflow_core::synthworld::ScenarioConfig;

fn tiny_cfg() -> RunConfig {
    let net = NetConfig::tiny();
    let scenario = ScenarioConfig {
        n_actors: [1, 2],
        points_per_actor: [2, 5],
        n_clutter: [6, 8],
        max_range: 20.0,
        actor_speed: [1.0, 6.0],
        target_points: Some(12),
        clip_len: net.clip_len,
        ..ScenarioConfig::default()
    };
    RunConfig {
        seed: 11,
        net,
        loss: LossConfig::default(),
        scenario,
        optimizer: OptimizerConfig {
            kind: OptimizerKind::Adaptive,
            learning_rate: 3e-3,
            decay_per_epoch: 0.95,
            steps: 30,
            batch_clips: 1,
            clip_norm: 5.0,
            checkpoint_every: 10,
            od_steps: 30,
            od_learning_rate: 3e-3,
        },
        data: DataConfig { train_sequences: 4, test_sequences: 2, resolution_ratio: 2.5 },
    }
}

#[test]
fn train_eval_smoke() {
    let cfg = tiny_cfg();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    run_generate(&cfg, &data).unwrap();
    let t0 = std::time::Instant::now();
    let outcome = run_training(&cfg, &data, &out).unwrap();
    println!("30 steps in {:.2?} ({:.0} ms/step), final loss {:.4}", t0.elapsed(), t0.elapsed().as_millis() as f64 / 30.0, outcome.final_loss);
    assert!(outcome.final_loss.is_finite());
    let rep = run_eval(&cfg, &data, Some(&outcome.checkpoint_path), "test", Predictor::Model, None).unwrap();
    println!("eval EPE {:?} MEPE {:?}", rep.epe, rep.mepe);
    let zero = run_eval(&cfg, &data, None, "test", Predictor::ZeroFlow, None).unwrap();
    println!("zero-flow EPE {:?} MEPE {:?}", zero.epe, zero.mepe);
    let gt = run_eval(&cfg, &data, None, "test", Predictor::GroundTruth, None).unwrap();
    assert!(gt.epe.unwrap() < 1e-12);
    assert_eq!(gt.acc_s.unwrap(), 100.0);
}
