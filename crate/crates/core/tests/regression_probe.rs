use radarflow_core::losses::{background_loss, foreground_loss};
use radarflow_core::model::NetConfig;
use radarflow_core::pipeline::{objective_build, run_generate, DataConfig, OptimizerConfig, RunConfig};
use radarflow_core::synthworld::ScenarioConfig;
use radarflow_core::tape::Tape;
use radarflow_core::params::ParamStore;
use std::collections::BTreeMap;

#[test]
#[ignore]
fn pure_fg_bg_regression() {
    let net_cfg = NetConfig::tiny();
    let scenario = ScenarioConfig {
        n_actors: [2, 2],
        points_per_actor: [5, 5],
        n_clutter: [2, 2],
        max_range: 20.0,
        actor_speed: [1.0, 6.0],
        ego_speed: [0.0, 2.0],
        target_points: Some(12),
        clip_len: net_cfg.clip_len,
        ..ScenarioConfig::default()
    };
    let cfg = RunConfig {
        seed: 11,
        net: net_cfg,
        loss: radarflow_core::losses::LossConfig::default(),
        scenario,
        optimizer: OptimizerConfig::default(),
        data: DataConfig { train_sequences: 8, test_sequences: 0, resolution_ratio: 2.5 },
    };
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run_generate(&cfg, &data).unwrap();
    let seqs = radarflow_core::pipeline::load_split(&data, "train").unwrap();
    let (mut store, net, stub) = objective_build(&cfg).unwrap();
    // freeze od (untrained) to mimic stage separation
    store.freeze_prefix("od.");

    let mut acc: BTreeMap<String, radarflow_core::tape::Value> = BTreeMap::new();
    let sgd = std::env::var("PROBE_SGD").is_ok();
    let full_batch = std::env::var("PROBE_FULL").is_ok();
    for step in 0..2000 {
        let lr = if sgd { 1e-2 * 0.999f64.powi(step as i32) } else { 1e-3 * 0.998f64.powi(step as i32) };
        if full_batch {
            // full-batch: every clip, every step; per-level fg reporting
            let mut tape = Tape::new();
            let mut total = None;
            let mut fg_l = vec![0.0f64; 2];
            for seq in seqs.iter() {
                let mut carry = None;
                for t in 0..seq.frames.len() - 1 {
                    let pair = radarflow_core::pipeline::prepare_pair(cfg.net.variant, &seq.frames[t], &seq.frames[t + 1]);
                    let pyramid = stub.pyramid(&store, &seq.frames[t + 1]);
                    let out = net.forward(&mut tape, &store, &pair.p_used, &seq.frames[t + 1], carry.as_ref(), &pyramid).unwrap();
                    for (l, flow) in out.level_flows.iter().enumerate() {
                        let idx = &out.level_indices[l];
                        let mask: Vec<bool> = idx.iter().map(|&i| pair.p_used.moving_mask[i]).collect();
                        let sm: Vec<bool> = mask.iter().map(|m| !m).collect();
                        let gt = {
                            let mut g = ndarray::Array2::zeros((idx.len(), 3));
                            for (r, &i) in idx.iter().enumerate() { for c in 0..3 { g[[r, c]] = pair.p_used.gt_flow.vectors[[i, c]]; } }
                            g
                        };
                        let fg = foreground_loss(&mut tape, *flow, &gt, &mask);
                        fg_l[l] += tape.scalar(fg);
                        let bgz = ndarray::Array2::zeros((idx.len(), 3));
                        let bg = background_loss(&mut tape, *flow, &bgz, &sm);
                        let bg = tape.scale(bg, 0.5);
                        let sum = tape.add(fg, bg);
                        total = Some(match total { Some(a) => tape.add(a, sum), None => sum });
                    }
                    carry = Some(out.new_hidden);
                }
            }
            let loss = total.unwrap();
            if step % 100 == 0 || step == 499 {
                println!("fb step {step}: loss {:.4} | fg level1 {:.4} level2 {:.4}", tape.scalar(loss), fg_l[0] / 16.0, fg_l[1] / 16.0);
            }
            let grads = tape.backward(loss);
            store.zero_grads();
            store.accumulate(&tape, &grads);
            adaptive_step(&mut store, &mut acc, lr);
            if step == 499 { return; }
            continue;
        }
        let seq = &seqs[step % seqs.len()];
        let mut tape = Tape::new();
        let mut total = None;
        let mut carry = None;
        for t in 0..seq.frames.len() - 1 {
            let pair = radarflow_core::pipeline::prepare_pair(cfg.net.variant, &seq.frames[t], &seq.frames[t + 1]);
            let pyramid = stub.pyramid(&store, &seq.frames[t + 1]);
            let out = net.forward(&mut tape, &store, &pair.p_used, &seq.frames[t + 1], carry.as_ref(), &pyramid).unwrap();
            for (l, flow) in out.level_flows.iter().enumerate() {
                let idx = &out.level_indices[l];
                let mask: Vec<bool> = idx.iter().map(|&i| pair.p_used.moving_mask[i]).collect();
                let sm: Vec<bool> = mask.iter().map(|m| !m).collect();
                let gt = {
                    let mut g = ndarray::Array2::zeros((idx.len(), 3));
                    for (r, &i) in idx.iter().enumerate() { for c in 0..3 { g[[r, c]] = pair.p_used.gt_flow.vectors[[i, c]]; } }
                    g
                };
                let fg = foreground_loss(&mut tape, *flow, &gt, &mask);
                let bgz = ndarray::Array2::zeros((idx.len(), 3));
                let bg = background_loss(&mut tape, *flow, &bgz, &sm);
                let bg = tape.scale(bg, 0.5);
                let sum = tape.add(fg, bg);
                total = Some(match total { Some(a) => tape.add(a, sum), None => sum });
            }
            carry = Some(out.new_hidden);
        }
        let loss = total.unwrap();
        let lv = tape.scalar(loss);
        if step % 250 == 0 || step == 1999 { println!("step {step}: fg+bg loss {lv:.4}"); }
        let grads = tape.backward(loss);
        store.zero_grads();
        store.accumulate(&tape, &grads);
        if sgd {
            let norm = store.global_grad_norm();
            let scale = if norm > 5.0 { 5.0 / norm } else { 1.0 };
            for name in store.names() {
                if store.get(&name).frozen { continue; }
                let grad = store.get(&name).grad.clone() * scale;
                let e = store.get_mut(&name);
                ndarray::Zip::from(&mut e.value).and(&grad).for_each(|v, &g| { *v -= lr * g; });
            }
        } else {
            adaptive_step(&mut store, &mut acc, lr);
        }
    }
}

fn adaptive_step(store: &mut ParamStore, acc: &mut BTreeMap<String, radarflow_core::tape::Value>, lr: f64) {
    for name in store.names() {
        if store.get(&name).frozen { continue; }
        let grad = store.get(&name).grad.clone();
        let a = acc.entry(name.clone()).or_insert_with(|| (&grad * &grad).into_dyn());
        ndarray::Zip::from(&mut *a).and(&grad).for_each(|x, &g| { *x = 0.99 * *x + 0.01 * g * g; });
        let e = store.get_mut(&name);
        ndarray::Zip::from(&mut e.value).and(&grad).and(&*a).for_each(|v, &g, &x| { *v -= lr * g / (x.sqrt() + 1e-8); });
    }
}
