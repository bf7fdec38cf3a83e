//! Assembling the training objective for one frame pair and one mini-clip.
//!
//! Variant semantics: the compensated variant receives frames aligned into
//! the next scan's coordinates (static ground truth becomes zero), the ego
//! variant sees raw frames and trains its heads against odometry, and the
//! plain variant sees raw frames with odometry-derived background labels
//! withheld entirely.

use crate::error::Result;
use crate::geometry::{transform_positions, SE3Transform};
use crate::losses::{
    self, background_loss, foreground_loss, optical_flow_loss, radial_displacement, seg_loss,
    soft_chamfer, spatial_smoothness, CameraModel, LossReport, LossTerms,
};
use crate::model::{ForwardOutput, HiddenCarry, SceneFlowNet, Supervision, Variant};
use crate::odstub::OdStub;
use crate::params::ParamStore;
use crate::pipeline::RunConfig;
use crate::synthworld::{derive_pseudo_labels, ego_compensate, relative_ego_motion, RadarFrame};
use crate::tape::{NodeId, Tape};
use ndarray::Array2;

/// A frame pair after variant-specific preprocessing.
pub struct PreparedPair {
    pub p_used: RadarFrame,
    pub omega: SE3Transform,
    pub compensated: bool,
}

/// Apply the variant's ego-motion handling to a raw frame pair.
pub fn prepare_pair(variant: Variant, p: &RadarFrame, q: &RadarFrame) -> PreparedPair {
    let omega = relative_ego_motion(p, q);
    match variant {
        Variant::Superego => PreparedPair {
            p_used: ego_compensate(p, &omega),
            omega,
            compensated: true,
        },
        Variant::Ego | Variant::NoEgo => {
            PreparedPair { p_used: p.clone(), omega, compensated: false }
        }
    }
}

/// Carry the hidden state into the current pair's coordinate system.
pub fn align_hidden(carry: HiddenCarry, pair: &PreparedPair) -> HiddenCarry {
    if pair.compensated {
        HiddenCarry {
            node: carry.node,
            positions: transform_positions(&pair.omega, &carry.positions),
        }
    } else {
        carry
    }
}

/// Build every loss term the supervision mode needs for one forward output.
pub fn pair_loss_terms(
    tape: &mut Tape,
    cfg: &RunConfig,
    out: &ForwardOutput,
    pair: &PreparedPair,
    q: &RadarFrame,
    camera: &CameraModel,
) -> Result<LossTerms> {
    let supervision = cfg.net.supervision;
    let p_used = &pair.p_used;
    let mut terms = LossTerms::default();

    let use_selfsup = !matches!(supervision, Supervision::Full);
    let use_fgbg = !matches!(supervision, Supervision::SelfSup);
    let use_cross = matches!(supervision, Supervision::Cross);
    let use_heads = matches!(cfg.net.variant, Variant::Ego)
        && matches!(supervision, Supervision::Cross | Supervision::Full);

    if use_selfsup {
        let pos = tape.constant(p_used.cloud.positions.clone().into_dyn());
        let warped = tape.add(pos, out.flow_full);
        let warped_values = crate::model::value2(tape, warped);
        let (sc, warn) =
            soft_chamfer(tape, warped, &warped_values, &q.cloud.positions, &cfg.loss)?;
        terms.sc = Some(sc);
        terms.chamfer_all_discarded = warn;
        terms.ss =
            Some(spatial_smoothness(tape, out.flow_full, &p_used.cloud.positions, &cfg.loss)?);
        // the radial constraint sees the total apparent motion; under
        // compensation that is the ego displacement plus the residual flow
        let rd_flow = if pair.compensated {
            let raw = &pair.p_used; // compensated positions
            let disp = {
                // displacement already applied by compensation: omega p - p,
                // expressed against the original positions
                let orig = invert_positions(&pair.omega, &raw.cloud.positions);
                &raw.cloud.positions - &orig
            };
            let d = tape.constant(disp.into_dyn());
            tape.add(d, out.flow_full)
        } else {
            out.flow_full
        };
        let rd_positions = if pair.compensated {
            invert_positions(&pair.omega, &p_used.cloud.positions)
        } else {
            p_used.cloud.positions.clone()
        };
        terms.rd = Some(radial_displacement(
            tape,
            rd_flow,
            &rd_positions,
            &p_used.cloud.rrv,
            &cfg.loss,
        ));
    }

    if use_fgbg {
        let labels = derive_pseudo_labels(
            p_used,
            &pair.omega,
            pair.compensated,
            cfg.scenario.seg_rrv_threshold,
        );
        for (l, flow) in out.level_flows.iter().enumerate() {
            let idx = &out.level_indices[l];
            let mask: Vec<bool> = idx.iter().map(|&i| p_used.moving_mask[i]).collect();
            let static_mask: Vec<bool> = mask.iter().map(|m| !m).collect();
            let fg_gt = select_rows(&labels.fg_flow.vectors, idx);
            let bg_gt = select_rows(&labels.bg_flow.vectors, idx);
            terms.fg.push(foreground_loss(tape, *flow, &fg_gt, &mask));
            terms.bg.push(background_loss(tape, *flow, &bg_gt, &static_mask));
        }
        if use_heads {
            if let Some(seg_probs) = out.seg_probs {
                let labels_seg = derive_pseudo_labels(
                    p_used,
                    &pair.omega,
                    false,
                    cfg.scenario.seg_rrv_threshold,
                );
                terms.seg = Some(seg_loss(tape, seg_probs, &labels_seg.seg_mask));
            }
            if let Some((r, t)) = out.ego_rt {
                terms.ego =
                    Some(losses::ego_loss(tape, r, t, &pair.omega, &p_used.cloud.positions));
            }
        }
        if use_cross && matches!(cfg.net.variant, Variant::Ego) {
            terms.opt = Some(optical_flow_loss(
                tape,
                &p_used.cloud.positions,
                out.flow_full,
                camera,
                &p_used.gt_flow.vectors,
                &p_used.moving_mask,
            )?);
        }
    }

    Ok(terms)
}

fn invert_positions(omega: &SE3Transform, compensated: &Array2<f64>) -> Array2<f64> {
    transform_positions(&omega.inverse(), compensated)
}

fn select_rows(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), a.ncols()));
    for (i, &r) in idx.iter().enumerate() {
        out.row_mut(i).assign(&a.row(r));
    }
    out
}

pub struct ClipLossOutput {
    pub loss: NodeId,
    pub reports: Vec<LossReport>,
}

/// Total training loss of one mini-clip: the sum over its frame pairs, with
/// the hidden state carried differentiably between pairs.
pub fn clip_loss(
    tape: &mut Tape,
    net: &SceneFlowNet,
    stub: &OdStub,
    store: &ParamStore,
    cfg: &RunConfig,
    frames: &[RadarFrame],
    camera: &CameraModel,
) -> Result<ClipLossOutput> {
    assert!(frames.len() >= 2, "a clip needs at least one frame pair");
    let mut total: Option<NodeId> = None;
    let mut reports = Vec::new();
    let mut carry: Option<HiddenCarry> = None;
    for t in 0..frames.len() - 1 {
        let pair = prepare_pair(cfg.net.variant, &frames[t], &frames[t + 1]);
        let aligned = carry.take().map(|c| align_hidden(c, &pair));
        let pyramid = stub.pyramid(store, &frames[t + 1]);
        let out = net.forward(
            tape,
            store,
            &pair.p_used,
            &frames[t + 1],
            aligned.as_ref(),
            &pyramid,
        )?;
        let terms = pair_loss_terms(tape, cfg, &out, &pair, &frames[t + 1], camera)?;
        let (pair_total, report) =
            losses::total_loss(tape, &terms, &cfg.loss, cfg.net.supervision);
        reports.push(report);
        total = Some(match total {
            Some(acc) => tape.add(acc, pair_total),
            None => pair_total,
        });
        carry = Some(out.new_hidden);
    }
    Ok(ClipLossOutput { loss: total.unwrap(), reports })
}

/// Network + detector stub registered into one fresh store.
pub fn build_model(cfg: &RunConfig) -> Result<(ParamStore, SceneFlowNet, OdStub)> {
    use rand::SeedableRng;
    let mut store = ParamStore::new();
    let mut od_rng = rand_chacha::ChaCha20Rng::seed_from_u64(cfg.net.param_seed ^ 0x0d);
    let stub = OdStub::register(&mut store, &mut od_rng, &cfg.net.od, cfg.net.levels);
    let net = SceneFlowNet::new(cfg.net.clone(), &mut store)?;
    Ok((store, net, stub))
}
