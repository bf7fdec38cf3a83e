//! Staged training: stage 1 fits and freezes the detector stub, stage 2
//! trains the scene-flow parameters on mini-clips. Fully deterministic under
//! the run seed; resuming from a checkpoint continues the exact trajectory.

use crate::error::{CoreError, Result};
use crate::losses::CameraModel;
use crate::odstub::{train_od_proxy, PARAM_PREFIX as OD_PREFIX};
use crate::params::{load_archive, save_archive, ParamStore};
use crate::pipeline::objective::{build_model, clip_loss};
use crate::pipeline::{data::load_split, OptimizerKind, RunConfig};
use crate::synthworld::RadarFrame;
use crate::tape::{Tape, Value};
use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

pub struct TrainOutcome {
    pub steps_run: usize,
    pub final_loss: f64,
    pub checkpoint_path: PathBuf,
    pub log_path: PathBuf,
    pub od_hash_before: u64,
    pub od_hash_after: u64,
}

#[derive(Serialize)]
struct LogRecord<'a> {
    step: usize,
    epoch: usize,
    lr: f64,
    loss: f64,
    grad_norm: f64,
    reports: &'a [crate::losses::LossReport],
}

/// Momentum-free optimizer state: running mean of squared gradients.
#[derive(Default)]
struct Optimizer {
    acc: BTreeMap<String, Value>,
}

impl Optimizer {
    fn step(
        &mut self,
        store: &mut ParamStore,
        kind: OptimizerKind,
        lr: f64,
        clip_norm: f64,
    ) {
        let norm = store.global_grad_norm();
        let scale = if norm > clip_norm { clip_norm / norm } else { 1.0 };
        for name in store.names() {
            if store.get(&name).frozen {
                continue;
            }
            let grad = store.get(&name).grad.clone() * scale;
            match kind {
                OptimizerKind::Sgd => {
                    let e = store.get_mut(&name);
                    ndarray::Zip::from(&mut e.value).and(&grad).for_each(|v, &g| {
                        *v -= lr * g;
                    });
                }
                OptimizerKind::Adaptive => {
                    // first encounter seeds the accumulator at g^2, so the
                    // earliest steps are lr-sized instead of 10x overshoots
                    let acc = self
                        .acc
                        .entry(name.clone())
                        .or_insert_with(|| (&grad * &grad).into_dyn());
                    ndarray::Zip::from(&mut *acc).and(&grad).for_each(|a, &g| {
                        *a = 0.99 * *a + 0.01 * g * g;
                    });
                    let e = store.get_mut(&name);
                    ndarray::Zip::from(&mut e.value).and(&grad).and(&*acc).for_each(
                        |v, &g, &a| {
                            *v -= lr * g / (a.sqrt() + 1e-8);
                        },
                    );
                }
            }
        }
    }

    fn export(&self, into: &mut ParamStore) {
        for (name, value) in &self.acc {
            let key = format!("opt.{name}");
            if into.contains(&key) {
                into.set_value(&key, value.clone());
            } else {
                into.insert(&key, value.clone());
            }
        }
    }

    fn import(store: &ParamStore) -> Optimizer {
        let mut opt = Optimizer::default();
        for (name, e) in store.iter() {
            if let Some(param) = name.strip_prefix("opt.") {
                opt.acc.insert(param.to_string(), e.value.clone());
            }
        }
        opt
    }
}

/// FNV-1a over the exact value bytes of every `od.` parameter.
pub fn od_param_hash(store: &ParamStore) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for (name, e) in store.iter() {
        if !name.starts_with(OD_PREFIX) {
            continue;
        }
        for b in name.as_bytes() {
            hash ^= *b as u64;
            hash = hash.wrapping_mul(0x100000001b3);
        }
        for v in e.value.iter() {
            for b in v.to_le_bytes() {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        }
    }
    hash
}

fn checkpoint_with_meta(store: &ParamStore, opt: &Optimizer, step: usize) -> ParamStore {
    let mut full = store.clone();
    opt.export(&mut full);
    let meta = ArrayD::from_elem(IxDyn(&[1]), step as f64);
    if full.contains("meta.step") {
        full.set_value("meta.step", meta);
    } else {
        full.insert("meta.step", meta);
    }
    full
}

fn strip_meta(loaded: ParamStore) -> (ParamStore, Optimizer, usize) {
    let step = loaded.get("meta.step").value[[0]] as usize;
    let opt = Optimizer::import(&loaded);
    let mut store = ParamStore::new();
    for (name, e) in loaded.iter() {
        if name.starts_with("opt.") || name.starts_with("meta.") {
            continue;
        }
        store.insert(name, e.value.clone());
        store.get_mut(name).frozen = e.frozen;
    }
    (store, opt, step)
}

/// Copy values (and frozen flags) from `src` into matching entries of `dst`.
fn adopt_values(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    for (name, e) in src.iter() {
        if !dst.contains(name) {
            return Err(CoreError::Checkpoint(format!(
                "checkpoint entry {name} does not exist in this architecture"
            )));
        }
        dst.set_value(name, e.value.clone());
        dst.get_mut(name).frozen = e.frozen;
    }
    Ok(())
}

pub fn run_training(cfg: &RunConfig, data_root: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let sequences = load_split(data_root, "train")?;
    if sequences.is_empty() {
        return Err(CoreError::Config("training split is empty".into()));
    }
    let camera = CameraModel::synthetic_default();
    let (mut store, net, stub) = build_model(cfg)?;
    let fingerprint = cfg.net_fingerprint();

    // stage 1: detector stub on the occupancy/class proxy, then frozen
    let od_path = out_dir.join("od_stub.bin");
    if od_path.exists() {
        let (od_store, _) = load_archive(&od_path, Some(fingerprint))?;
        adopt_values(&mut store, &od_store)?;
    } else {
        let frames: Vec<&RadarFrame> = sequences.iter().flat_map(|s| s.frames.iter()).collect();
        train_od_proxy(
            &stub,
            &mut store,
            &frames,
            cfg.optimizer.od_steps,
            cfg.optimizer.od_learning_rate,
        )?;
        let mut od_only = ParamStore::new();
        for (name, e) in store.iter() {
            if name.starts_with(OD_PREFIX) {
                od_only.insert(name, e.value.clone());
                od_only.get_mut(name).frozen = e.frozen;
            }
        }
        save_archive(&od_path, &od_only, fingerprint)?;
    }
    let od_hash_before = od_param_hash(&store);

    // stage 2: scene-flow training on mini-clips
    let latest_path = out_dir.join("checkpoint_latest.bin");
    let mut optimizer = Optimizer::default();
    let mut start_step = 0usize;
    if latest_path.exists() {
        let (loaded, _) = load_archive(&latest_path, Some(fingerprint))?;
        let (params, opt, step) = strip_meta(loaded);
        adopt_values(&mut store, &params)?;
        optimizer = opt;
        start_step = step;
    }

    let log_path = out_dir.join("train_log.jsonl");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;

    let n_clips = sequences.len();
    let batch = cfg.optimizer.batch_clips.min(n_clips);
    let epoch_len = (n_clips / batch).max(1);
    let mut final_loss = f64::NAN;

    for step in start_step..cfg.optimizer.steps {
        let epoch = step / epoch_len;
        let lr = cfg.optimizer.learning_rate * cfg.optimizer.decay_per_epoch.powi(epoch as i32);
        // stateless shuffle: the clip order depends only on (seed, epoch)
        let mut order: Vec<usize> = (0..n_clips).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37));
        order.shuffle(&mut rng);
        let pos = (step % epoch_len) * batch;
        let clip_ids: Vec<usize> = (0..batch).map(|j| order[(pos + j) % n_clips]).collect();

        let mut tape = Tape::new();
        let mut batch_loss = None;
        let mut reports = Vec::new();
        for &ci in &clip_ids {
            let out =
                clip_loss(&mut tape, &net, &stub, &store, cfg, &sequences[ci].frames, &camera)?;
            reports.extend(out.reports);
            batch_loss = Some(match batch_loss {
                Some(acc) => tape.add(acc, out.loss),
                None => out.loss,
            });
        }
        let loss = tape.scale(batch_loss.unwrap(), 1.0 / batch as f64);
        let loss_value = tape.scalar(loss);
        if !loss_value.is_finite() {
            let dump = serde_json::json!({
                "step": step,
                "clips": clip_ids,
                "reports": reports,
            });
            let dump_path = out_dir.join("diagnostic_dump.json");
            std::fs::write(&dump_path, serde_json::to_string_pretty(&dump).unwrap())?;
            return Err(CoreError::Training(format!(
                "loss became non-finite at step {step}; batch dumped to {}",
                dump_path.display()
            )));
        }

        let grads = tape.backward(loss);
        store.zero_grads();
        store.accumulate(&tape, &grads);
        let grad_norm = store.global_grad_norm();
        optimizer.step(&mut store, cfg.optimizer.kind, lr, cfg.optimizer.clip_norm);

        let record =
            LogRecord { step, epoch, lr, loss: loss_value, grad_norm, reports: &reports };
        writeln!(log, "{}", serde_json::to_string(&record).unwrap())?;
        final_loss = loss_value;

        let due = (step + 1) % cfg.optimizer.checkpoint_every == 0;
        if due || step + 1 == cfg.optimizer.steps {
            let full = checkpoint_with_meta(&store, &optimizer, step + 1);
            save_archive(&latest_path, &full, fingerprint)?;
        }
    }

    let od_hash_after = od_param_hash(&store);
    if od_hash_before != od_hash_after {
        return Err(CoreError::Training(
            "frozen detector parameters changed during stage 2".into(),
        ));
    }

    let final_path = out_dir.join("checkpoint_final.bin");
    let full = checkpoint_with_meta(&store, &optimizer, cfg.optimizer.steps);
    save_archive(&final_path, &full, fingerprint)?;
    Ok(TrainOutcome {
        steps_run: cfg.optimizer.steps.saturating_sub(start_step),
        final_loss,
        checkpoint_path: final_path,
        log_path,
        od_hash_before,
        od_hash_after,
    })
}

/// Load a trained checkpoint into a freshly built model.
pub fn load_trained(
    cfg: &RunConfig,
    checkpoint: &Path,
) -> Result<(ParamStore, crate::model::SceneFlowNet, crate::odstub::OdStub)> {
    let (mut store, net, stub) = build_model(cfg)?;
    let (loaded, _) = load_archive(checkpoint, Some(cfg.net_fingerprint()))?;
    let (params, _, _) = strip_meta(loaded);
    adopt_values(&mut store, &params)?;
    Ok((store, net, stub))
}
