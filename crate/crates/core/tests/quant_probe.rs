use radarflow_core::losses::{CameraModel, LossConfig};
use radarflow_core::model::NetConfig;
use radarflow_core::pipeline::{objective_build, run_generate, clip_loss, DataConfig, OptimizerConfig, RunConfig};
use radarflow_core::synthworld::ScenarioConfig;
use radarflow_core::tape::Tape;
use radarflow_core::params::{save_archive, load_archive};

#[test]
#[ignore]
fn quantization_effect() {
    let net_cfg = NetConfig::tiny();
    let scenario = ScenarioConfig {
        n_actors: [2, 2], points_per_actor: [5, 5], n_clutter: [2, 2],
        max_range: 20.0, actor_speed: [1.0, 6.0], ego_speed: [0.0, 2.0],
        target_points: Some(12), clip_len: net_cfg.clip_len,
        ..ScenarioConfig::default()
    };
    let cfg = RunConfig {
        seed: 11, net: net_cfg,
        loss: LossConfig { delta: 0.15, eps_chamfer: 1.0, ..LossConfig::default() },
        scenario,
        optimizer: OptimizerConfig::default(),
        data: DataConfig { train_sequences: 8, test_sequences: 0, resolution_ratio: 2.5 },
    };
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run_generate(&cfg, &data).unwrap();
    let seqs = radarflow_core::pipeline::load_split(&data, "train").unwrap();
    let (mut store, net, stub) = objective_build(&cfg).unwrap();
    store.freeze_prefix("od.");
    let camera = CameraModel::synthetic_default();
    let mut acc: std::collections::BTreeMap<String, radarflow_core::tape::Value> = Default::default();
    for step in 0..600 {
        let lr = 1e-3;
        let mut tape = Tape::new();
        let mut total = None;
        for seq in &seqs {
            let out = clip_loss(&mut tape, &net, &stub, &store, &cfg, &seq.frames, &camera).unwrap();
            total = Some(match total { Some(a) => tape.add(a, out.loss), None => out.loss });
        }
        let loss = total.unwrap();
        if step % 200 == 0 { println!("step {step}: loss {:.4}", tape.scalar(loss)); }
        let grads = tape.backward(loss);
        store.zero_grads();
        store.accumulate(&tape, &grads);
        for name in store.names() {
            if store.get(&name).frozen { continue; }
            let grad = store.get(&name).grad.clone();
            let a = acc.entry(name.clone()).or_insert_with(|| (&grad * &grad).into_dyn());
            ndarray::Zip::from(&mut *a).and(&grad).for_each(|x, &g| { *x = 0.99 * *x + 0.01 * g * g; });
            let e = store.get_mut(&name);
            ndarray::Zip::from(&mut e.value).and(&grad).and(&*a).for_each(|v, &g, &x| { *v -= lr * g / (x.sqrt() + 1e-8); });
        }
    }
    let fg_of = |store: &radarflow_core::params::ParamStore| {
        let mut fg2 = 0.0;
        for seq in &seqs {
            let mut tape = Tape::new();
            let out = clip_loss(&mut tape, &net, &stub, store, &cfg, &seq.frames, &camera).unwrap();
            for r in &out.reports { fg2 += r.fg[1]; }
        }
        fg2 / 16.0
    };
    println!("in-memory fg_level2 = {:.4}", fg_of(&store));
    let path = dir.path().join("ckpt.bin");
    save_archive(&path, &store, 1).unwrap();
    let (loaded, _) = load_archive(&path, None).unwrap();
    println!("after f32 roundtrip fg_level2 = {:.4}", fg_of(&loaded));
}
