//! Multi-scale point encoder, point-level double attention and the flow head.

use crate::blocks::{Attention, AttentionSpec, Linear, Mlp, LEAKY_SLOPE};
use crate::error::{CoreError, Result};
use crate::geometry::{farthest_point_sampling, knn_positions, PointCloud};
use crate::model::NetConfig;
use crate::params::ParamStore;
use crate::tape::{NodeId, Tape};
use ndarray::{Array2, Array3};
use rand::Rng;

/// One hierarchy level of one cloud: subset indices, their positions and the
/// per-point feature node.
pub struct LevelSet {
    pub indices: Vec<usize>,
    pub positions: Array2<f64>,
    pub feat: NodeId,
}

impl LevelSet {
    pub fn len(&self) -> usize {
        self.positions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Farthest-point-sampled levels with set-abstraction features: each level's
/// points aggregate an MLP of (neighbor feature, relative offset) over their
/// k nearest neighbors in the next finer level, max-pooled.
pub struct MultiScaleEncoder {
    sa: Vec<Mlp>,
}

impl MultiScaleEncoder {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        cfg: &NetConfig,
    ) -> Self {
        let c = cfg.point_channels;
        let sa = (1..=cfg.levels)
            .map(|l| Mlp::register(store, rng, &format!("{prefix}.l{l}"), &[c + 3, c, c]))
            .collect();
        MultiScaleEncoder { sa }
    }

    pub fn build(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        positions: &Array2<f64>,
        low_feat: NodeId,
        cfg: &NetConfig,
    ) -> Result<Vec<LevelSet>> {
        let n = positions.nrows();
        let levels = cfg.levels;
        let sizes: Vec<usize> = (1..=levels).map(|l| cfg.level_size(l, n)).collect();
        if sizes[0] == 0 {
            return Err(CoreError::Size("too few points for the coarsest level".into()));
        }

        // one greedy ordering serves every sub-level: its prefixes are
        // farthest-point sets of each size
        let sub_max = sizes[levels - 2];
        let ordering = if sub_max == n {
            (0..n).collect::<Vec<_>>()
        } else {
            let cloud = PointCloud::from_positions(positions.clone())?;
            farthest_point_sampling(&cloud, sub_max, 0)?
        };

        // level L first (full set), then coarser levels from the level above
        let mut out: Vec<Option<LevelSet>> = (0..levels).map(|_| None).collect();
        let full_indices: Vec<usize> = (0..n).collect();
        let full_feat = self.abstract_level(
            tape,
            store,
            levels - 1,
            positions,
            positions,
            low_feat,
            cfg,
        )?;
        out[levels - 1] = Some(LevelSet {
            indices: full_indices,
            positions: positions.clone(),
            feat: full_feat,
        });
        for l in (1..levels).rev() {
            let indices: Vec<usize> = if sizes[l - 1] == n {
                (0..n).collect()
            } else {
                ordering[..sizes[l - 1]].to_vec()
            };
            let level_positions = select_rows(positions, &indices);
            let finer = out[l].as_ref().unwrap();
            let feat = self.abstract_level(
                tape,
                store,
                l - 1,
                &level_positions,
                &finer.positions,
                finer.feat,
                cfg,
            )?;
            out[l - 1] = Some(LevelSet { indices, positions: level_positions, feat });
        }
        Ok(out.into_iter().map(Option::unwrap).collect())
    }

    fn abstract_level(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sa_index: usize,
        level_positions: &Array2<f64>,
        source_positions: &Array2<f64>,
        source_feat: NodeId,
        cfg: &NetConfig,
    ) -> Result<NodeId> {
        let k = cfg.k_self.min(source_positions.nrows());
        let idx = knn_positions(level_positions, source_positions, k)?;
        let gathered = tape.gather_neighbors(source_feat, &idx);
        let rel = relative_offsets(source_positions, &idx, level_positions);
        let rel = tape.constant(rel.into_dyn());
        let cat = tape.concat(2, &[gathered, rel]);
        let enc = self.sa[sa_index].forward3(tape, store, cat);
        let enc = tape.leaky_relu(enc, LEAKY_SLOPE);
        Ok(tape.max_axis(enc, 1))
    }
}

/// source[idx[i,j]] - base[i] as an (n, k, 3) array.
pub(crate) fn relative_offsets(
    source: &Array2<f64>,
    idx: &Array2<usize>,
    base: &Array2<f64>,
) -> Array3<f64> {
    let (n, k) = idx.dim();
    Array3::from_shape_fn((n, k, 3), |(i, j, c)| source[[idx[[i, j]], c]] - base[[i, c]])
}

fn select_rows(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), a.ncols()));
    for (i, &r) in idx.iter().enumerate() {
        out.row_mut(i).assign(&a.row(r));
    }
    out
}

/// Cross-attention to neighbors in Q, then self-attention over the matching
/// embeddings of neighbors in P. No direction vector enters the attention
/// inputs; geometry arrives only through relative positional encoding.
pub struct PointLevelEmbedding {
    cross: Attention,
    selfa: Attention,
}

impl PointLevelEmbedding {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        cfg: &NetConfig,
    ) -> Self {
        let c = cfg.point_channels;
        let d = cfg.embed_channels;
        let mut cross_spec = AttentionSpec::new(c, c, d, d);
        let mut self_spec = AttentionSpec::new(d, d, d, d);
        if cfg.positional_encoding {
            cross_spec = cross_spec.with_pe(3);
            self_spec = self_spec.with_pe(3);
        }
        PointLevelEmbedding {
            cross: Attention::register(store, rng, &format!("{prefix}.cross"), cross_spec),
            selfa: Attention::register(store, rng, &format!("{prefix}.self"), self_spec),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        p_warp: NodeId,
        p_warp_values: &Array2<f64>,
        base_positions: &Array2<f64>,
        p_feat: NodeId,
        q_level: &LevelSet,
        cfg: &NetConfig,
    ) -> Result<NodeId> {
        let m = q_level.len();
        if cfg.k_cross > m {
            return Err(CoreError::Size(format!(
                "k_cross {} exceeds target level size {m}",
                cfg.k_cross
            )));
        }
        let idx_q = knn_positions(p_warp_values, &q_level.positions, cfg.k_cross)?;
        let keys = tape.gather_neighbors(q_level.feat, &idx_q);
        let rel_q = if cfg.positional_encoding {
            // offsets to warped positions stay differentiable through the warp
            let q_sel = gather_positions(&q_level.positions, &idx_q);
            let q_sel = tape.constant(q_sel.into_dyn());
            let repeated = tape.repeat_mid(p_warp, cfg.k_cross);
            Some(tape.sub(q_sel, repeated))
        } else {
            None
        };
        let e_cross = self.cross.forward_per_point(tape, store, p_feat, keys, keys, rel_q);

        let k_self = cfg.k_self.min(base_positions.nrows());
        let idx_p = knn_positions(base_positions, base_positions, k_self)?;
        let keys2 = tape.gather_neighbors(e_cross, &idx_p);
        let rel_p = cfg.positional_encoding.then(|| {
            let rel = relative_offsets(base_positions, &idx_p, base_positions);
            tape.constant(rel.into_dyn())
        });
        Ok(self.selfa.forward_per_point(tape, store, e_cross, keys2, keys2, rel_p))
    }
}

fn gather_positions(source: &Array2<f64>, idx: &Array2<usize>) -> Array3<f64> {
    let (n, k) = idx.dim();
    Array3::from_shape_fn((n, k, 3), |(i, j, c)| source[[idx[[i, j]], c]])
}

/// Combines the available embeddings with one neighbor self-attention pass,
/// reduces to C channels and predicts a residual on the interpolated coarse
/// flow.
pub struct FlowHead {
    attn: Attention,
    reduce: Linear,
    flow: Linear,
}

impl FlowHead {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        concat_dim: usize,
        cfg: &NetConfig,
    ) -> Self {
        let c = cfg.point_channels;
        let d = cfg.embed_channels;
        let mut spec = AttentionSpec::new(concat_dim, concat_dim, d, d);
        if cfg.positional_encoding {
            spec = spec.with_pe(3);
        }
        let head = FlowHead {
            attn: Attention::register(store, rng, &format!("{prefix}.attn"), spec),
            reduce: Linear::register(store, rng, &format!("{prefix}.reduce"), d, c),
            flow: Linear::register(store, rng, &format!("{prefix}.flow"), c, 3),
        };
        // zero-initialized flow projection: every level starts out predicting
        // the interpolated coarse flow (zero at the coarsest level)
        store.set_value(
            &format!("{prefix}.flow.w"),
            ndarray::ArrayD::zeros(ndarray::IxDyn(&[c, 3])),
        );
        head
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        parts: &[NodeId],
        positions: &Array2<f64>,
        coarse_flow: Option<NodeId>,
        cfg: &NetConfig,
    ) -> Result<(NodeId, NodeId)> {
        let cat = if parts.len() == 1 { parts[0] } else { tape.concat(1, parts) };
        let k = cfg.k_self.min(positions.nrows());
        let idx = knn_positions(positions, positions, k)?;
        let keys = tape.gather_neighbors(cat, &idx);
        let rel = cfg.positional_encoding.then(|| {
            let rel = relative_offsets(positions, &idx, positions);
            tape.constant(rel.into_dyn())
        });
        let embed = self.attn.forward_per_point(tape, store, cat, keys, keys, rel);
        let hidden = self.reduce.forward(tape, store, embed);
        let hidden = tape.leaky_relu(hidden, LEAKY_SLOPE);
        let delta = self.flow.forward(tape, store, hidden);
        let flow = match coarse_flow {
            Some(coarse) => tape.add(delta, coarse),
            None => delta,
        };
        Ok((flow, embed))
    }
}
