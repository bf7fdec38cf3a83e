use radarflow_core::losses::LossConfig;
use radarflow_core::model::NetConfig;
use radarflow_core::pipeline::{
    run_eval, run_generate, run_training, DataConfig, OptimizerConfig, OptimizerKind, Predictor,
    RunConfig,
};
use radarflow_core::synthworld::ScenarioConfig;

#[test]
#[ignore]
fn overfit_probe() {
    let net = NetConfig::tiny();
    let scenario = ScenarioConfig {
        n_actors: [2, 2],
        points_per_actor: [5, 5],
        n_clutter: [2, 2],
        max_range: 20.0,
        actor_speed: [1.0, 6.0],
        ego_speed: [0.0, 2.0],
        target_points: Some(12),
        clip_len: net.clip_len,
        rrv_noise: 0.0,
        ..ScenarioConfig::default()
    };
    let cfg = RunConfig {
        seed: 11,
        net,
        loss: LossConfig { delta: 0.15, eps_chamfer: 1.0, ..LossConfig::default() },
        scenario,
        optimizer: OptimizerConfig {
            kind: OptimizerKind::Adaptive,
            learning_rate: 1e-3,
            decay_per_epoch: 0.999,
            steps: 2000,
            batch_clips: 8,
            clip_norm: 5.0,
            checkpoint_every: 500,
            od_steps: 100,
            od_learning_rate: 3e-3,
        },
        data: DataConfig { train_sequences: 8, test_sequences: 1, resolution_ratio: 2.5 },
    };
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("run");
    run_generate(&cfg, &data).unwrap();
    let t0 = std::time::Instant::now();
    let outcome = run_training(&cfg, &data, &out).unwrap();
    println!("2000 steps in {:.1?}, final loss {:.4}", t0.elapsed(), outcome.final_loss);
    // recompute the training objective on the final checkpoint state
    {
        use radarflow_core::losses::CameraModel;
        use radarflow_core::tape::Tape;
        let (store, net2, stub) = radarflow_core::pipeline::load_trained_model(&cfg, &outcome.checkpoint_path).unwrap();
        let seqs = radarflow_core::pipeline::load_split(&data, "train").unwrap();
        let camera = CameraModel::synthetic_default();
        let mut fg2 = 0.0;
        for seq in &seqs {
            let mut tape = Tape::new();
            let out = radarflow_core::pipeline::clip_loss(&mut tape, &net2, &stub, &store, &cfg, &seq.frames, &camera).unwrap();
            for r in &out.reports { fg2 += r.fg[1]; }
        }
        println!("clip_loss-on-checkpoint fg_level2 mean = {:.4}", fg2 / 16.0);
    }
    // evaluate on the SAME train clips (overfit check)
    let model = run_eval(&cfg, &data, Some(&outcome.checkpoint_path), "train", Predictor::Model, None).unwrap();
    let zero = run_eval(&cfg, &data, None, "train", Predictor::ZeroFlow, None).unwrap();
    println!("train MEPE model {:?} vs zero-flow {:?} -> ratio {:.3}",
        model.mepe, zero.mepe, model.mepe.unwrap() / zero.mepe.unwrap());
    println!("train SEPE model {:?} vs zero {:?}", model.sepe, zero.sepe);
    // loss curve summary
    let log = std::fs::read_to_string(&outcome.log_path).unwrap();
    let losses: Vec<f64> = log.lines().map(|l| {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        v["loss"].as_f64().unwrap()
    }).collect();
    for c in [0, 200, 500, 1000, 1500, 1999] {
        println!("loss[{c}] = {:.4}", losses[c.min(losses.len()-1)]);
    }
    // windowed means to remove clip-difficulty noise
    for w in [(0,100), (900,1000), (1900,2000)] {
        let m: f64 = losses[w.0..w.1].iter().sum::<f64>() / 100.0;
        println!("mean loss[{}..{}] = {:.4}", w.0, w.1, m);
    }
    let last: serde_json::Value = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    for r in last["reports"].as_array().unwrap().iter().take(2) {
        println!("final terms: sc={} ss={} rd={} fg={} bg={}", r["sc"], r["ss"], r["rd"], r["fg"], r["bg"]);
    }
    let gn: Vec<f64> = log.lines().map(|l| {
        let v: serde_json::Value = serde_json::from_str(l).unwrap();
        v["grad_norm"].as_f64().unwrap()
    }).collect();
    for w in [(0,100), (900,1000), (1900,2000)] {
        let m: f64 = gn[w.0..w.1].iter().sum::<f64>() / 100.0;
        println!("mean grad_norm[{}..{}] = {:.4}", w.0, w.1, m);
    }
}
