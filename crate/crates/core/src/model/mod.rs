//! The hierarchical scene-flow network: multi-scale point encoder, per-level
//! point and traffic embeddings, traffic-field encoder/decoder, flow head,
//! temporal point GRU and the ego-motion/motion-segmentation heads.

mod heads;
mod levels;
mod temporal;
mod tvf;

pub use heads::{ego_motion_head, ego_transform_value, EgoHead, SegHead, SEG_THRESHOLD};
pub use levels::{LevelSet, MultiScaleEncoder, PointLevelEmbedding};
pub use temporal::PointGru;
pub use tvf::{TvfDecoder, TvfEncoder};

use crate::blocks::Mlp;
use crate::error::{CoreError, Result};
use crate::geometry::{interpolation_weights, GridSpec};
use crate::odstub::{BevPyramid, OdStubConfig};
use crate::params::ParamStore;
use crate::synthworld::RadarFrame;
use crate::tape::{NodeId, Tape};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// How ego-motion information is used (availability per the variant table).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// ego-motion supervises an ego head at train time; heads run at test
    Ego,
    /// ego-motion is a known input; frames arrive compensated, no heads
    Superego,
    /// no ego-motion anywhere
    NoEgo,
}

/// Which loss set trains the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// self-supervised + fg/bg + seg/ego/optical
    Cross,
    /// self-supervised + fg/bg only
    CrossPlus,
    /// self-supervised losses only
    #[serde(rename = "self")]
    SelfSup,
    /// exact ground-truth foreground regression, no self-supervised terms
    Full,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct NetConfig {
    /// hierarchy depth L
    pub levels: usize,
    /// per-level downsampling factor
    pub gamma: usize,
    /// point feature channels C
    pub point_channels: usize,
    /// flow embedding channels D
    pub embed_channels: usize,
    /// traffic-field channels
    pub tvf_channels: usize,
    /// stacked axial attention blocks
    pub axial_blocks: usize,
    /// cross-attention neighbors in Q
    pub k_cross: usize,
    /// traffic-field cells a point attends to (5, 9 or 13)
    pub k_tvf: usize,
    /// self-attention / set-abstraction neighbors
    pub k_self: usize,
    /// temporal GRU neighbors
    pub k_temporal: usize,
    /// mini-clip length T
    pub clip_len: usize,
    pub grid: GridSpec,
    pub variant: Variant,
    pub supervision: Supervision,
    /// single-head attention is what this crate implements
    pub attention_heads: usize,
    pub positional_encoding: bool,
    /// multiplier applied to coordinate channels before the input MLP, so
    /// desk-scale ranges enter the network at unit order
    pub input_scale: f64,
    pub od: OdStubConfig,
    pub param_seed: u64,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(CoreError::Config("levels must be at least 2".into()));
        }
        if self.gamma < 1 {
            return Err(CoreError::Config("gamma must be at least 1".into()));
        }
        if !matches!(self.k_tvf, 5 | 9 | 13) {
            return Err(CoreError::Config("k_tvf must be one of 5, 9, 13".into()));
        }
        if self.clip_len < 2 {
            return Err(CoreError::Config("clip_len must be at least 2".into()));
        }
        if self.attention_heads != 1 {
            return Err(CoreError::Config("only single-head attention is supported".into()));
        }
        let ok = match self.variant {
            Variant::Ego => matches!(self.supervision, Supervision::Cross | Supervision::Full),
            Variant::Superego => matches!(self.supervision, Supervision::CrossPlus),
            Variant::NoEgo => {
                matches!(self.supervision, Supervision::CrossPlus | Supervision::SelfSup)
            }
        };
        if !ok {
            return Err(CoreError::Config(format!(
                "variant {:?} does not admit supervision {:?}",
                self.variant, self.supervision
            )));
        }
        Ok(())
    }

    /// Point count of level `l` (1-based) for a full set of `n` points.
    pub fn level_size(&self, l: usize, n: usize) -> usize {
        if l == self.levels {
            return n;
        }
        let div = self.gamma.pow((self.levels - l) as u32);
        (n / div).max(1)
    }

    /// Tiny configuration used by the gradient and overfit suites.
    pub fn tiny() -> NetConfig {
        NetConfig {
            levels: 2,
            gamma: 2,
            point_channels: 8,
            embed_channels: 16,
            tvf_channels: 8,
            axial_blocks: 1,
            k_cross: 3,
            k_tvf: 9,
            k_self: 3,
            k_temporal: 2,
            clip_len: 3,
            grid: GridSpec::new([-24.0, -24.0], 12.0, [4, 4]).unwrap(),
            variant: Variant::Superego,
            supervision: Supervision::CrossPlus,
            attention_heads: 1,
            positional_encoding: true,
            input_scale: 0.05,
            od: OdStubConfig {
                base_grid: GridSpec::new([-24.0, -24.0], 6.0, [8, 8]).unwrap(),
                channels: 6,
                mlp_hidden: 6,
            },
            param_seed: 0,
        }
    }

    /// Desk-scale default: small enough to train on a CPU in minutes.
    pub fn desk() -> NetConfig {
        NetConfig {
            levels: 3,
            gamma: 2,
            point_channels: 16,
            embed_channels: 32,
            tvf_channels: 16,
            axial_blocks: 2,
            k_cross: 6,
            k_tvf: 9,
            k_self: 6,
            k_temporal: 4,
            clip_len: 5,
            grid: GridSpec::new([-40.0, -40.0], 5.0, [16, 16]).unwrap(),
            variant: Variant::Superego,
            supervision: Supervision::CrossPlus,
            attention_heads: 1,
            positional_encoding: true,
            input_scale: 0.05,
            od: OdStubConfig {
                base_grid: GridSpec::new([-40.0, -40.0], 2.5, [32, 32]).unwrap(),
                channels: 12,
                mlp_hidden: 12,
            },
            param_seed: 0,
        }
    }
}

/// Differentiable hidden state carried across frame pairs inside a clip.
pub struct HiddenCarry {
    pub node: NodeId,
    pub positions: Array2<f64>,
}

pub struct ForwardOutput {
    /// per level: indices into the full P cloud
    pub level_indices: Vec<Vec<usize>>,
    /// per level: flow prediction node (n_l x 3)
    pub level_flows: Vec<NodeId>,
    /// per level: flow embedding node (n_l x D)
    pub level_embeds: Vec<NodeId>,
    /// final flow over the full set, after the ego correction when it runs
    pub flow_full: NodeId,
    pub flow_before_correction: NodeId,
    /// moving probability per point (ego variant only)
    pub seg_probs: Option<NodeId>,
    /// predicted ego rotation and translation nodes (ego variant only)
    pub ego_rt: Option<(NodeId, NodeId)>,
    pub new_hidden: HiddenCarry,
}

/// The assembled network. Construction registers every parameter with a
/// deterministic seed; forward passes only read the store.
pub struct SceneFlowNet {
    pub cfg: NetConfig,
    low_mlp: Mlp,
    temporal: PointGru,
    encoder: MultiScaleEncoder,
    point_level: Vec<PointLevelEmbedding>,
    tvf_enc: Vec<TvfEncoder>,
    tvf_dec: Vec<TvfDecoder>,
    flow_heads: Vec<levels::FlowHead>,
    seg_head: Option<SegHead>,
}

impl SceneFlowNet {
    pub fn new(cfg: NetConfig, store: &mut ParamStore) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.param_seed);
        let c = cfg.point_channels;
        let d = cfg.embed_channels;
        let low_mlp = Mlp::register(store, &mut rng, "net.low", &[5, c, c]);
        let temporal = PointGru::register(store, &mut rng, "net.gru", c);
        let encoder = MultiScaleEncoder::register(store, &mut rng, "net.sa", &cfg);
        let mut point_level = Vec::new();
        let mut flow_heads = Vec::new();
        let mut tvf_enc = Vec::new();
        let mut tvf_dec = Vec::new();
        for l in 1..=cfg.levels {
            point_level.push(PointLevelEmbedding::register(
                store,
                &mut rng,
                &format!("net.l{l}.point"),
                &cfg,
            ));
            let concat_dim = if l == 1 { d } else { 3 * d };
            flow_heads.push(levels::FlowHead::register(
                store,
                &mut rng,
                &format!("net.l{l}.head"),
                concat_dim,
                &cfg,
            ));
            if l >= 2 {
                tvf_enc.push(TvfEncoder::register(
                    store,
                    &mut rng,
                    &format!("net.l{l}.tvf"),
                    &cfg,
                    l > 2,
                ));
                tvf_dec.push(TvfDecoder::register(
                    store,
                    &mut rng,
                    &format!("net.l{l}.dec"),
                    &cfg,
                ));
            }
        }
        let seg_head = matches!(cfg.variant, Variant::Ego)
            .then(|| SegHead::register(store, &mut rng, "net.seg", d));
        Ok(SceneFlowNet {
            cfg,
            low_mlp,
            temporal,
            encoder,
            point_level,
            tvf_enc,
            tvf_dec,
            flow_heads,
            seg_head,
        })
    }

    /// Low-level 5D features (coordinates, RRV, RCS) through the input MLP.
    fn low_features(&self, tape: &mut Tape, store: &ParamStore, frame: &RadarFrame) -> NodeId {
        let n = frame.len();
        let scale = self.cfg.input_scale;
        let mut input = Array2::zeros((n, 5));
        for i in 0..n {
            for c in 0..3 {
                input[[i, c]] = scale * frame.cloud.positions[[i, c]];
            }
            input[[i, 3]] = frame.cloud.rrv[i];
            input[[i, 4]] = frame.cloud.rcs[i];
        }
        let input = tape.constant(input.into_dyn());
        self.low_mlp.forward(tape, store, input)
    }

    /// One frame-pair forward pass. `prev` carries the previous cloud and its
    /// hidden features inside a mini-clip; `pyramid` holds the frozen
    /// detector maps computed from `q`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        p: &RadarFrame,
        q: &RadarFrame,
        prev: Option<&HiddenCarry>,
        pyramid: &BevPyramid,
    ) -> Result<ForwardOutput> {
        let cfg = &self.cfg;
        let min_points = cfg.gamma.pow((cfg.levels - 1) as u32);
        if p.len() < min_points || q.len() < min_points {
            return Err(CoreError::Size(format!(
                "need at least {min_points} points for {} levels at gamma {}",
                cfg.levels, cfg.gamma
            )));
        }

        // 1. point feature extraction
        let p_low = self.low_features(tape, store, p);
        let q_low = self.low_features(tape, store, q);

        // 2. low-level temporal module; both clouds aggregate from the
        // previous frame's hidden state, the new hidden is keyed to P
        let (p_feat0, q_feat0, new_hidden) = match prev {
            Some(carry) => {
                let pf = self.temporal.step(
                    tape,
                    store,
                    p_low,
                    &p.cloud.positions,
                    &carry.positions,
                    carry.node,
                    cfg.k_temporal,
                )?;
                let qf = self.temporal.step(
                    tape,
                    store,
                    q_low,
                    &q.cloud.positions,
                    &carry.positions,
                    carry.node,
                    cfg.k_temporal,
                )?;
                let hidden = HiddenCarry { node: pf, positions: p.cloud.positions.clone() };
                (pf, qf, hidden)
            }
            None => {
                let hidden = HiddenCarry { node: p_low, positions: p.cloud.positions.clone() };
                (p_low, q_low, hidden)
            }
        };

        // 3. multi-scale point-patch features
        let p_levels = self.encoder.build(tape, store, &p.cloud.positions, p_feat0, cfg)?;
        let q_levels = self.encoder.build(tape, store, &q.cloud.positions, q_feat0, cfg)?;

        // 4. coarsest level: point-only flow
        let mut level_flows: Vec<NodeId> = Vec::with_capacity(cfg.levels);
        let mut level_embeds: Vec<NodeId> = Vec::with_capacity(cfg.levels);
        let l1 = &p_levels[0];
        let p1_node = tape.constant(l1.positions.clone().into_dyn());
        let e_point1 = self.point_level[0].forward(
            tape,
            store,
            p1_node,
            &l1.positions,
            &l1.positions,
            l1.feat,
            &q_levels[0],
            cfg,
        )?;
        let (f1, e1) = self.flow_heads[0].forward(
            tape,
            store,
            &[e_point1],
            &l1.positions,
            None,
            cfg,
        )?;
        level_flows.push(f1);
        level_embeds.push(e1);

        // 5. coarse-to-fine refinement with the traffic field
        let mut prev_tvf: Option<NodeId> = None;
        for l in 2..=cfg.levels {
            let li = l - 1; // vec index of level l
            let prev_level = &p_levels[li - 1];
            let cur = &p_levels[li];
            let coarse_flow = level_flows[li - 1];
            let coarse_embed = level_embeds[li - 1];

            // traffic-field encoding from the previous level's state
            let od_map = pyramid.get(l);
            let tvf = self.tvf_enc[li - 1].forward(
                tape,
                store,
                prev_level,
                coarse_flow,
                coarse_embed,
                od_map,
                prev_tvf,
                cfg,
            )?;

            // upsample flow and embeddings to this level's points
            let (idx, w) =
                interpolation_weights(&prev_level.positions, &cur.positions, interp_k(prev_level))?;
            let flow_up = interp_node(tape, coarse_flow, &idx, &w);
            let embed_up = interp_node(tape, coarse_embed, &idx, &w);

            let cur_pos_node = tape.constant(cur.positions.clone().into_dyn());
            let p_warp = tape.add(cur_pos_node, flow_up);
            let p_warp_values = value2(tape, p_warp);

            let e_point = self.point_level[li].forward(
                tape,
                store,
                p_warp,
                &p_warp_values,
                &cur.positions,
                cur.feat,
                &q_levels[li],
                cfg,
            )?;

            let query = tape.concat(1, &[embed_up, cur.feat]);
            let e_traffic = self.tvf_dec[li - 1].forward(
                tape,
                store,
                tvf,
                query,
                p_warp,
                &p_warp_values,
                cfg,
            )?;

            let (f, e) = self.flow_heads[li].forward(
                tape,
                store,
                &[e_point, embed_up, e_traffic],
                &cur.positions,
                Some(flow_up),
                cfg,
            )?;
            level_flows.push(f);
            level_embeds.push(e);
            prev_tvf = Some(tvf);
        }

        // 6. static-point correction via the ego head
        let flow_before_correction = *level_flows.last().unwrap();
        let full = &p_levels[cfg.levels - 1];
        let (flow_full, seg_probs, ego_rt) = match (&self.seg_head, cfg.variant) {
            (Some(seg), Variant::Ego) => {
                let e_last = *level_embeds.last().unwrap();
                let s = seg.forward(tape, store, e_last);
                let neg_s = tape.neg(s);
                let weights = tape.offset(neg_s, 1.0);
                let pos_node = tape.constant(full.positions.clone().into_dyn());
                let warped = tape.add(pos_node, flow_before_correction);
                let (r, t) = ego_motion_head(tape, pos_node, warped, weights)?;
                // rigid flow for points the mask calls static
                let rt = tape.transpose(r);
                let rotated = tape.matmul(pos_node, rt);
                let moved = tape.add_row(rotated, t);
                let ego_flow = tape.sub(moved, pos_node);
                let s_values = tape.value(s).clone();
                let n = full.positions.nrows();
                let mask = Array2::from_shape_fn((n, 1), |(i, _)| {
                    if s_values[[i, 0]] > heads::SEG_THRESHOLD {
                        1.0
                    } else {
                        0.0
                    }
                });
                let m = tape.constant(mask.into_dyn());
                let keep = tape.mul_last1(flow_before_correction, m);
                let neg_m = tape.neg(m);
                let inv = tape.offset(neg_m, 1.0);
                let replace = tape.mul_last1(ego_flow, inv);
                let corrected = tape.add(keep, replace);
                (corrected, Some(s), Some((r, t)))
            }
            _ => (flow_before_correction, None, None),
        };

        Ok(ForwardOutput {
            level_indices: p_levels.iter().map(|l| l.indices.clone()).collect(),
            level_flows,
            level_embeds,
            flow_full,
            flow_before_correction,
            seg_probs,
            ego_rt,
            new_hidden,
        })
    }
}

fn interp_k(level: &LevelSet) -> usize {
    level.positions.nrows().min(3)
}

/// Linear interpolation of per-source values with constant weights:
/// out[i] = sum_j w[i,j] src[idx[i,j]].
pub(crate) fn interp_node(
    tape: &mut Tape,
    source: NodeId,
    idx: &ndarray::Array2<usize>,
    weights: &Array2<f64>,
) -> NodeId {
    let gathered = tape.gather_neighbors(source, idx);
    let w = tape.constant(weights.clone().insert_axis(ndarray::Axis(2)).into_dyn());
    let weighted = tape.mul_last1(gathered, w);
    tape.sum_axis(weighted, 1)
}

pub(crate) fn value2(tape: &Tape, id: NodeId) -> Array2<f64> {
    tape.value(id)
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .expect("expected 2-d node")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::odstub::OdStub;
    use crate::synthworld::{simulate_sequence, ScenarioConfig};

    fn tiny_scenario(seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            n_actors: [1, 2],
            points_per_actor: [2, 5],
            n_clutter: [6, 8],
            max_range: 20.0,
            target_points: Some(12),
            pos_noise: 0.0,
            rrv_noise: 0.0,
            rcs_noise: 0.0,
            clip_len: 3,
            seed,
            ..ScenarioConfig::default()
        }
    }

    fn build_tiny() -> (NetConfig, ParamStore, SceneFlowNet, OdStub) {
        let cfg = NetConfig::tiny();
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(99);
        let stub = OdStub::register(&mut store, &mut rng, &cfg.od, cfg.levels);
        let net = SceneFlowNet::new(cfg.clone(), &mut store).unwrap();
        (cfg, store, net, stub)
    }

    #[test]
    fn config_validation_rules() {
        let mut cfg = NetConfig::tiny();
        cfg.k_tvf = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = NetConfig::tiny();
        cfg.levels = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = NetConfig::tiny();
        cfg.variant = Variant::Superego;
        cfg.supervision = Supervision::Cross;
        assert!(cfg.validate().is_err());
        let mut cfg = NetConfig::tiny();
        cfg.variant = Variant::Ego;
        cfg.supervision = Supervision::Cross;
        assert!(cfg.validate().is_ok());
        let mut cfg = NetConfig::tiny();
        cfg.attention_heads = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn level_sizes_follow_gamma_schedule() {
        let mut cfg = NetConfig::tiny();
        cfg.levels = 4;
        cfg.gamma = 2;
        assert_eq!(cfg.level_size(1, 256), 32);
        assert_eq!(cfg.level_size(2, 256), 64);
        assert_eq!(cfg.level_size(3, 256), 128);
        assert_eq!(cfg.level_size(4, 256), 256);
        // gamma = 1: all levels share the full count
        cfg.gamma = 1;
        for l in 1..=4 {
            assert_eq!(cfg.level_size(l, 100), 100);
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let (cfg, store, net, stub) = build_tiny();
        let frames = simulate_sequence(&tiny_scenario(7)).unwrap();
        let run = || {
            let mut tape = Tape::new();
            let pyramid = stub.pyramid(&store, &frames[1]);
            let out = net
                .forward(&mut tape, &store, &frames[0], &frames[1], None, &pyramid)
                .unwrap();
            (
                tape.value(out.flow_full).clone(),
                out.level_indices.iter().map(|i| i.len()).collect::<Vec<_>>(),
            )
        };
        let (flow_a, sizes) = run();
        let (flow_b, _) = run();
        assert_eq!(flow_a, flow_b, "same inputs and params must be bit-identical");
        assert_eq!(sizes, vec![6, 12]);
        assert_eq!(flow_a.shape(), &[12, 3]);

        // per-level flow shapes follow the gamma schedule
        let mut tape = Tape::new();
        let pyramid = stub.pyramid(&store, &frames[1]);
        let out = net
            .forward(&mut tape, &store, &frames[0], &frames[1], None, &pyramid)
            .unwrap();
        for (l, flow) in out.level_flows.iter().enumerate() {
            assert_eq!(
                tape.shape(*flow),
                &[cfg.level_size(l + 1, 12), 3],
                "level {} flow shape",
                l + 1
            );
            assert_eq!(tape.shape(out.level_embeds[l]), &[cfg.level_size(l + 1, 12), 16]);
        }
    }

    #[test]
    fn too_few_points_is_a_size_error() {
        let mut cfg = NetConfig::tiny();
        cfg.levels = 4; // needs at least gamma^3 = 8 points
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(1);
        let stub = OdStub::register(&mut store, &mut rng, &cfg.od, cfg.levels);
        let net = SceneFlowNet::new(cfg, &mut store).unwrap();
        let frames = simulate_sequence(&ScenarioConfig {
            target_points: Some(5),
            n_actors: [0, 0],
            ..tiny_scenario(3)
        })
        .unwrap();
        let mut tape = Tape::new();
        let pyramid = stub.pyramid(&store, &frames[1]);
        let err = net.forward(&mut tape, &store, &frames[0], &frames[1], None, &pyramid);
        assert!(matches!(err, Err(CoreError::Size(_))));
    }

    #[test]
    fn hidden_carry_threads_through_pairs() {
        let (_, store, net, stub) = build_tiny();
        let frames = simulate_sequence(&tiny_scenario(11)).unwrap();
        let mut tape = Tape::new();
        let py1 = stub.pyramid(&store, &frames[1]);
        let out1 = net
            .forward(&mut tape, &store, &frames[0], &frames[1], None, &py1)
            .unwrap();
        let py2 = stub.pyramid(&store, &frames[2]);
        let out2 = net
            .forward(&mut tape, &store, &frames[1], &frames[2], Some(&out1.new_hidden), &py2)
            .unwrap();
        assert_eq!(tape.shape(out2.flow_full), &[frames[1].len(), 3]);
        // the second pair's hidden is keyed to its P frame
        assert_eq!(out2.new_hidden.positions, frames[1].cloud.positions);
    }
}
