//! Traffic-field encoder and decoder.
//!
//! The encoder refreshes a grid-shaped scene representation from the frozen
//! detector map (conv-adapted, GRU-updated across levels), paints the coarse
//! flow onto the grid through per-cell attention pooling, fuses the two
//! streams with spatial attention and applies stacked axial attention for a
//! global receptive field. The decoder lets each point cross-attend to its
//! nearest grid cells.

use crate::blocks::{
    Attention, AttentionSpec, AxialBlock, CellAttention, Conv2dLayer, ConvGru, Linear,
    SpatialFusion,
};
use crate::error::{CoreError, Result};
use crate::geometry::{knn_positions, voxelize_2d};
use crate::model::levels::LevelSet;
use crate::model::{value2, NetConfig};
use crate::odstub::BevMap;
use crate::params::ParamStore;
use crate::tape::{NodeId, ResizePlan, Tape};
use ndarray::{Array2, Array3};
use rand::Rng;
use std::collections::BTreeMap;

pub struct TvfEncoder {
    adapt: Conv2dLayer,
    gru: Option<ConvGru>,
    paint: CellAttention,
    paint_proj: Linear,
    fusion: SpatialFusion,
    axial: Vec<AxialBlock>,
}

impl TvfEncoder {
    /// `has_prev` marks levels whose predecessor already produced a field;
    /// the first traffic level adapts the detector map directly.
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        cfg: &NetConfig,
        has_prev: bool,
    ) -> Self {
        let dt = cfg.tvf_channels;
        let paint_in = cfg.point_channels + cfg.embed_channels;
        TvfEncoder {
            adapt: Conv2dLayer::register(store, rng, &format!("{prefix}.adapt"), 3, cfg.od.channels, dt, 1),
            gru: has_prev.then(|| ConvGru::register(store, rng, &format!("{prefix}.gru"), dt)),
            paint: CellAttention::register(store, rng, &format!("{prefix}.paint"), paint_in, cfg.embed_channels),
            paint_proj: Linear::register(store, rng, &format!("{prefix}.proj"), paint_in, dt),
            fusion: SpatialFusion::register(store, rng, &format!("{prefix}.fuse"), dt),
            axial: (0..cfg.axial_blocks)
                .map(|i| AxialBlock::register(store, rng, &format!("{prefix}.ax{i}"), dt))
                .collect(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prev_level: &LevelSet,
        flow_prev: NodeId,
        embed_prev: NodeId,
        od_map: &BevMap,
        prev_tvf: Option<NodeId>,
        cfg: &NetConfig,
    ) -> Result<NodeId> {
        let [h, w] = cfg.grid.shape;

        // scene update: adapt the detector features to the field shape, then
        // refresh the carried representation
        let od = tape.constant(od_map.field.clone().into_dyn());
        let adapted = self.adapt.forward(tape, store, od);
        let od_shape = od_map.field.dim();
        let x_in = if od_shape.0 == h && od_shape.1 == w {
            adapted
        } else {
            tape.resize2d(adapted, ResizePlan::new(od_shape.0, od_shape.1, h, w))
        };
        let x_traffic = match (prev_tvf, &self.gru) {
            (Some(prev), Some(gru)) => gru.step(tape, store, x_in, prev),
            (None, _) => x_in,
            (Some(_), None) => {
                return Err(CoreError::Invariant(
                    "traffic field carried into a level without a scene-update GRU".into(),
                ))
            }
        };

        // flow painting: warp the previous level's points by their own flow,
        // pool per grid cell, project to field channels
        let flow_values = value2(tape, flow_prev);
        let warped = &prev_level.positions + &flow_values;
        let cells = voxelize_2d(&warped, &cfg.grid);
        let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        for (i, cell) in cells.iter().enumerate() {
            // out-of-grid points are excluded from painting, not clamped
            if let Some(c) = cell {
                groups.entry(*c).or_default().push(i);
            }
        }
        let x_motion = if groups.is_empty() {
            tape.zeros(&[h, w, cfg.tvf_channels])
        } else {
            let feats = tape.concat(1, &[prev_level.feat, embed_prev]);
            let cell_points: Vec<Vec<usize>> = groups.values().cloned().collect();
            let cell_list: Vec<(usize, usize)> = groups.keys().copied().collect();
            let pooled = self.paint.forward(tape, store, feats, &cell_points);
            let projected = self.paint_proj.forward(tape, store, pooled);
            tape.scatter_cells(projected, &cell_list, h, w)
        };

        let mut field = self.fusion.forward(tape, store, x_traffic, x_motion);
        for block in &self.axial {
            field = block.forward(tape, store, field);
        }
        Ok(field)
    }
}

/// Grid-to-point cross-attention restricted to the nearest field cells of
/// each warped point.
pub struct TvfDecoder {
    attn: Attention,
}

impl TvfDecoder {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        cfg: &NetConfig,
    ) -> Self {
        let d = cfg.embed_channels;
        let q_in = cfg.point_channels + d;
        let mut spec = AttentionSpec::new(q_in, cfg.tvf_channels, d, d);
        if cfg.positional_encoding {
            spec = spec.with_pe(2);
        }
        TvfDecoder { attn: Attention::register(store, rng, &format!("{prefix}.attn"), spec) }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        tvf: NodeId,
        query: NodeId,
        p_warp: NodeId,
        p_warp_values: &Array2<f64>,
        cfg: &NetConfig,
    ) -> Result<NodeId> {
        let [h, w] = cfg.grid.shape;
        let n_cells = h * w;
        if cfg.k_tvf > n_cells {
            return Err(CoreError::Size(format!(
                "k_tvf {} exceeds the {n_cells}-cell field",
                cfg.k_tvf
            )));
        }
        let centers = cell_centers(cfg);
        let xy = p_warp_values.slice(ndarray::s![.., 0..2]).to_owned();
        let idx = knn_positions(&xy, &centers, cfg.k_tvf)?;
        let flat = tape.reshape(tvf, &[n_cells, cfg.tvf_channels]);
        let cells = tape.gather_neighbors(flat, &idx);
        let rel = if cfg.positional_encoding {
            let n = xy.nrows();
            let sel = Array3::from_shape_fn((n, cfg.k_tvf, 2), |(i, j, c)| {
                centers[[idx[[i, j]], c]]
            });
            let sel = tape.constant(sel.into_dyn());
            // xy of the warped point, kept differentiable through the warp
            let take_xy = tape.constant(
                ndarray::arr2(&[[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]).into_dyn(),
            );
            let xy_node = tape.matmul(p_warp, take_xy);
            let repeated = tape.repeat_mid(xy_node, cfg.k_tvf);
            Some(tape.sub(sel, repeated))
        } else {
            None
        };
        Ok(self.attn.forward_per_point(tape, store, query, cells, cells, rel))
    }
}

pub(crate) fn cell_centers(cfg: &NetConfig) -> Array2<f64> {
    let [h, w] = cfg.grid.shape;
    let mut centers = Array2::zeros((h * w, 2));
    for hh in 0..h {
        for ww in 0..w {
            let c = cfg.grid.cell_center(hh, ww);
            centers[[hh * w + ww, 0]] = c[0];
            centers[[hh * w + ww, 1]] = c[1];
        }
    }
    centers
}
