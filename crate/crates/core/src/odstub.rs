//! Stand-in for the object-detection branch: a pillar-style BEV feature
//! extractor with a small downsampling CNN that emits one feature map per
//! hierarchy level. It is trained on a per-cell occupancy-plus-class heatmap
//! proxy and then frozen; the scene-flow branch consumes its maps as
//! constants.

use crate::blocks::{Conv2dLayer, Mlp, LEAKY_SLOPE};
use crate::error::Result;
use crate::geometry::{voxelize_2d, GridSpec};
use crate::params::ParamStore;
use crate::synthworld::{RadarFrame, CLASS_CLUTTER};
use crate::tape::{NodeId, Tape};
use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const PARAM_PREFIX: &str = "od.";
/// occupancy + car/pedestrian/cyclist/truck heat channels
pub const HEATMAP_CHANNELS: usize = 5;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct OdStubConfig {
    pub base_grid: GridSpec,
    /// feature channels of every pyramid map
    pub channels: usize,
    pub mlp_hidden: usize,
}

impl Default for OdStubConfig {
    fn default() -> Self {
        OdStubConfig {
            base_grid: GridSpec::new([-40.0, -40.0], 2.5, [32, 32]).unwrap(),
            channels: 32,
            mlp_hidden: 32,
        }
    }
}

/// One BEV feature map with its grid geometry.
#[derive(Clone, Debug)]
pub struct BevMap {
    pub grid: GridSpec,
    pub field: Array3<f64>,
}

/// Feature maps for scene-flow levels 2..=L; coarser as the level rises.
#[derive(Clone, Debug)]
pub struct BevPyramid {
    pub levels: BTreeMap<usize, BevMap>,
}

impl BevPyramid {
    pub fn get(&self, level: usize) -> &BevMap {
        self.levels
            .get(&level)
            .unwrap_or_else(|| panic!("no BEV map for level {level}"))
    }
}

pub struct OdStub {
    pub cfg: OdStubConfig,
    point_mlp: Mlp,
    level_convs: Vec<Conv2dLayer>,
    heat_head: Conv2dLayer,
    levels: usize,
}

impl OdStub {
    /// Registers all detector parameters under the `od.` prefix.
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: &OdStubConfig,
        levels: usize,
    ) -> Self {
        assert!(levels >= 2);
        let c = cfg.channels;
        let point_mlp =
            Mlp::register(store, rng, "od.point", &[5, cfg.mlp_hidden, c]);
        let mut level_convs = Vec::new();
        for l in 2..=levels {
            let stride = if l == 2 { 1 } else { 2 };
            level_convs.push(Conv2dLayer::register(
                store,
                rng,
                &format!("od.conv{l}"),
                3,
                c,
                c,
                stride,
            ));
        }
        let heat_head = Conv2dLayer::register(store, rng, "od.heat", 1, c, HEATMAP_CHANNELS, 1);
        OdStub { cfg: cfg.clone(), point_mlp, level_convs, heat_head, levels }
    }

    /// Per-point MLP features max-pooled into pillars on the base grid.
    /// Pillars with no points stay zero.
    pub fn pillar_features(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frame: &RadarFrame,
    ) -> NodeId {
        let [h, w] = self.cfg.base_grid.shape;
        let cells = voxelize_2d(&frame.cloud.positions, &self.cfg.base_grid);
        let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, c) in cells.iter().enumerate() {
            if let Some(cell) = c {
                groups.entry(*cell).or_default().push(i);
            }
        }
        if groups.is_empty() {
            return tape.zeros(&[h, w, self.cfg.channels]);
        }
        let n = frame.len();
        let mut input = Array2::zeros((n, 5));
        for i in 0..n {
            for c in 0..3 {
                input[[i, c]] = frame.cloud.positions[[i, c]];
            }
            input[[i, 3]] = frame.cloud.rrv[i];
            input[[i, 4]] = frame.cloud.rcs[i];
        }
        let input = tape.constant(input.into_dyn());
        let feats = self.point_mlp.forward(tape, store, input);
        let mut rows = Vec::with_capacity(groups.len());
        let mut cell_list = Vec::with_capacity(groups.len());
        for (cell, points) in &groups {
            let sel = tape.gather_rows(feats, points);
            let pooled = tape.max_axis(sel, 0);
            rows.push(tape.reshape(pooled, &[1, self.cfg.channels]));
            cell_list.push(*cell);
        }
        let stacked = tape.concat(0, &rows);
        tape.scatter_cells(stacked, &cell_list, h, w)
    }

    /// Full pyramid as tape nodes (used while training the stub).
    pub fn pyramid_nodes(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frame: &RadarFrame,
    ) -> Vec<(usize, NodeId, GridSpec)> {
        let mut field = self.pillar_features(tape, store, frame);
        let mut grid = self.cfg.base_grid.clone();
        let mut out = Vec::new();
        for (i, conv) in self.level_convs.iter().enumerate() {
            let level = i + 2;
            let pre = conv.forward(tape, store, field);
            field = tape.leaky_relu(pre, LEAKY_SLOPE);
            if conv.stride > 1 {
                let shape = tape.shape(field);
                grid = GridSpec::new(grid.origin, grid.cell_size * 2.0, [shape[0], shape[1]])
                    .expect("halved grid stays valid");
            }
            out.push((level, field, grid.clone()));
        }
        out
    }

    /// Frozen-value pyramid for the scene-flow branch: runs on a scratch tape
    /// and returns plain arrays.
    pub fn pyramid(&self, store: &ParamStore, frame: &RadarFrame) -> BevPyramid {
        let mut tape = Tape::new();
        let nodes = self.pyramid_nodes(&mut tape, store, frame);
        let mut levels = BTreeMap::new();
        for (level, node, grid) in nodes {
            let field = tape
                .value(node)
                .clone()
                .into_dimensionality::<ndarray::Ix3>()
                .expect("pyramid maps are 3-d");
            levels.insert(level, BevMap { grid, field });
        }
        BevPyramid { levels }
    }

    /// Occupancy + class heatmap logits at the level-2 resolution.
    pub fn heatmap_logits(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        frame: &RadarFrame,
    ) -> NodeId {
        let nodes = self.pyramid_nodes(tape, store, frame);
        let (_, base, _) = nodes[0];
        self.heat_head.forward(tape, store, base)
    }

    pub fn heatmap_grid(&self) -> GridSpec {
        self.cfg.base_grid.clone()
    }

    pub fn n_levels(&self) -> usize {
        self.levels
    }
}

/// Per-cell proxy target: channel 0 flags any actor point in the cell,
/// channels 1..=4 flag the classes present.
pub fn heatmap_target(frame: &RadarFrame, grid: &GridSpec) -> Array3<f64> {
    let [h, w] = grid.shape;
    let mut target = Array3::zeros((h, w, HEATMAP_CHANNELS));
    let cells = voxelize_2d(&frame.cloud.positions, grid);
    for (i, cell) in cells.iter().enumerate() {
        if let Some((ch, cw)) = cell {
            let class = frame.class_id[i];
            if class != CLASS_CLUTTER {
                target[[*ch, *cw, 0]] = 1.0;
                target[[*ch, *cw, class as usize]] = 1.0;
            }
        }
    }
    target
}

/// Sigmoid BCE between heatmap logits and the proxy target, averaged.
pub fn heatmap_loss(tape: &mut Tape, logits: NodeId, target: &Array3<f64>) -> NodeId {
    let probs = tape.sigmoid(logits);
    let probs = tape.clamp(probs, 1e-7, 1.0 - 1e-7);
    let t = tape.constant(target.clone().into_dyn());
    let log_p = tape.ln(probs);
    let pos = tape.mul(t, log_p);
    let neg_p = tape.neg(probs);
    let one_minus_p = tape.offset(neg_p, 1.0);
    let log_q = tape.ln(one_minus_p);
    let neg_t = tape.neg(t);
    let one_minus_t = tape.offset(neg_t, 1.0);
    let negterm = tape.mul(one_minus_t, log_q);
    let sum = tape.add(pos, negterm);
    let mean = tape.mean_all(sum);
    tape.neg(mean)
}

/// Stage-1 training: fit the stub on the heatmap proxy over the given frames,
/// then freeze every `od.` parameter. Returns the per-step loss history.
pub fn train_od_proxy(
    stub: &OdStub,
    store: &mut ParamStore,
    frames: &[&RadarFrame],
    steps: usize,
    lr: f64,
) -> Result<Vec<f64>> {
    let mut history = Vec::with_capacity(steps);
    let mut sq_acc: BTreeMap<String, crate::tape::Value> = BTreeMap::new();
    for step in 0..steps {
        let frame = frames[step % frames.len()];
        let mut tape = Tape::new();
        let logits = stub.heatmap_logits(&mut tape, store, frame);
        let target = heatmap_target(frame, &stub.heatmap_grid());
        let loss = heatmap_loss(&mut tape, logits, &target);
        history.push(tape.scalar(loss));
        let grads = tape.backward(loss);
        store.zero_grads();
        store.accumulate(&tape, &grads);
        // adaptive, momentum-free step on the od parameters
        for name in store.names() {
            if !name.starts_with(PARAM_PREFIX) {
                continue;
            }
            let grad = store.get(&name).grad.clone();
            let acc = sq_acc
                .entry(name.clone())
                .or_insert_with(|| ndarray::ArrayD::zeros(grad.raw_dim()));
            ndarray::Zip::from(&mut *acc).and(&grad).for_each(|a, &g| {
                *a = 0.99 * *a + 0.01 * g * g;
            });
            let e = store.get_mut(&name);
            ndarray::Zip::from(&mut e.value).and(&grad).and(&*acc).for_each(|v, &g, &a| {
                *v -= lr * g / (a.sqrt() + 1e-8);
            });
        }
    }
    store.freeze_prefix(PARAM_PREFIX);
    Ok(history)
}
