//! The weakly-supervised objective: three self-supervised losses (soft
//! Chamfer, spatial smoothness, radial displacement), per-level
//! foreground/background pseudo-ground-truth losses, and the cross-modal
//! terms (motion segmentation, ego motion, optical flow through a synthetic
//! pinhole camera). Every loss builds on the tape so its gradients flow into
//! the flow predictions and heads.

use crate::error::{CoreError, Result};
use crate::geometry::{gaussian_kde, knn_positions, SE3Transform};
use crate::model::Supervision;
use crate::tape::{NodeId, Tape};
use nalgebra::{Matrix3, Vector3};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct LossConfig {
    /// KDE density threshold below which Chamfer terms are discarded
    pub delta: f64,
    /// hinge slack on squared nearest-neighbor distances
    pub eps_chamfer: f64,
    /// RBF width of the smoothness kernel
    pub alpha: f64,
    pub lambda_bg: f64,
    pub lambda_opt: f64,
    /// radar frame interval
    pub dt: f64,
    /// smoothness neighbors (excluding the point itself)
    pub k_smooth: usize,
    pub kde_bandwidth: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            delta: 0.05,
            eps_chamfer: 1e-3,
            alpha: 0.5,
            lambda_bg: 0.5,
            lambda_opt: 0.1,
            dt: 0.1,
            k_smooth: 4,
            kde_bandwidth: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all_positive = self.delta > 0.0
            && self.eps_chamfer > 0.0
            && self.alpha > 0.0
            && self.lambda_bg > 0.0
            && self.lambda_opt > 0.0
            && self.dt > 0.0
            && self.k_smooth > 0
            && self.kde_bandwidth > 0.0;
        if !all_positive {
            return Err(CoreError::Config("loss parameters must be positive".into()));
        }
        Ok(())
    }
}

/// Pinhole camera used to synthesize pseudo optical flow and to evaluate the
/// point-to-ray loss.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CameraModel {
    pub intrinsics: Matrix3<f64>,
    /// sensor-to-camera transform
    pub extrinsics: SE3Transform,
    pub width: f64,
    pub height: f64,
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if self.intrinsics[(0, 0)] <= 0.0 || self.intrinsics[(1, 1)] <= 0.0 {
            return Err(CoreError::Invariant("focal lengths must be positive".into()));
        }
        self.extrinsics.validate()
    }

    /// Forward-looking camera: sensor x becomes the optical axis.
    pub fn synthetic_default() -> CameraModel {
        let r = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
        CameraModel {
            intrinsics: Matrix3::new(500.0, 0.0, 320.0, 0.0, 500.0, 240.0, 0.0, 0.0, 1.0),
            extrinsics: SE3Transform::from_rt(r, Vector3::new(0.0, 0.0, 0.0)).unwrap(),
            width: 640.0,
            height: 480.0,
        }
    }

    /// Pixel of a sensor-frame point, or None when it sits behind the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<[f64; 2]> {
        let cam = self.extrinsics.apply_point(p);
        if cam.z <= 1e-9 {
            return None;
        }
        let fx = self.intrinsics[(0, 0)];
        let fy = self.intrinsics[(1, 1)];
        let cx = self.intrinsics[(0, 2)];
        let cy = self.intrinsics[(1, 2)];
        Some([fx * cam.x / cam.z + cx, fy * cam.y / cam.z + cy])
    }

    /// Ray through a pixel in sensor coordinates: (origin, unit direction).
    pub fn pixel_ray(&self, pixel: [f64; 2]) -> (Vector3<f64>, Vector3<f64>) {
        let fx = self.intrinsics[(0, 0)];
        let fy = self.intrinsics[(1, 1)];
        let cx = self.intrinsics[(0, 2)];
        let cy = self.intrinsics[(1, 2)];
        let dir_cam = Vector3::new((pixel[0] - cx) / fx, (pixel[1] - cy) / fy, 1.0);
        let inv = self.extrinsics.inverse();
        let origin = inv.translation();
        let dir = (inv.rotation() * dir_cam).normalize();
        (origin, dir)
    }
}

/// Row norms with a zero-safe sqrt: (n, 3) -> (n,).
fn row_norms(tape: &mut Tape, rows: NodeId) -> NodeId {
    let sq = tape.mul(rows, rows);
    let sums = tape.sum_axis(sq, 1);
    tape.sqrt_guard(sums)
}

/// Symmetric soft Chamfer between the warped cloud and Q. Points whose KDE
/// density is at or below delta are discarded by the indicator; squared
/// nearest-neighbor distances pass through a hinge at eps. Returns the loss
/// node and a warning flag that fires when every point was discarded.
pub fn soft_chamfer(
    tape: &mut Tape,
    p_warp: NodeId,
    p_warp_values: &Array2<f64>,
    q_values: &Array2<f64>,
    cfg: &LossConfig,
) -> Result<(NodeId, bool)> {
    if p_warp_values.nrows() == 0 || q_values.nrows() == 0 {
        return Err(CoreError::Size("soft_chamfer needs nonempty clouds".into()));
    }
    // densities are evaluated per cloud and act as hard gates
    let nu_p = gaussian_kde(p_warp_values, cfg.kde_bandwidth)?;
    let nu_q = gaussian_kde(q_values, cfg.kde_bandwidth)?;
    let keep_p: Vec<usize> = (0..p_warp_values.nrows()).filter(|&i| nu_p[i] > cfg.delta).collect();
    let keep_q: Vec<usize> = (0..q_values.nrows()).filter(|&i| nu_q[i] > cfg.delta).collect();
    if keep_p.is_empty() && keep_q.is_empty() {
        return Ok((tape.zeros(&[1]), true));
    }

    let mut terms = Vec::new();
    if !keep_p.is_empty() {
        let kept = tape.gather_rows(p_warp, &keep_p);
        let kept_values = select_rows(p_warp_values, &keep_p);
        let nn = knn_positions(&kept_values, q_values, 1)?;
        let targets = select_rows(q_values, &nn.column(0).to_vec());
        let t = tape.constant(targets.into_dyn());
        let diff = tape.sub(kept, t);
        terms.push(hinge_sq_sum(tape, diff, cfg.eps_chamfer));
    }
    if !keep_q.is_empty() {
        let kept_q = select_rows(q_values, &keep_q);
        let nn = knn_positions(&kept_q, p_warp_values, 1)?;
        let matched = tape.gather_rows(p_warp, &nn.column(0).to_vec());
        let t = tape.constant(kept_q.into_dyn());
        let diff = tape.sub(t, matched);
        terms.push(hinge_sq_sum(tape, diff, cfg.eps_chamfer));
    }
    let total = if terms.len() == 2 { tape.add(terms[0], terms[1]) } else { terms[0] };
    Ok((total, false))
}

fn hinge_sq_sum(tape: &mut Tape, diff: NodeId, eps: f64) -> NodeId {
    let sq = tape.mul(diff, diff);
    let d2 = tape.sum_axis(sq, 1);
    let shifted = tape.offset(d2, -eps);
    let hinged = tape.relu(shifted);
    tape.sum_all(hinged)
}

fn select_rows(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((idx.len(), a.ncols()));
    for (i, &r) in idx.iter().enumerate() {
        out.row_mut(i).assign(&a.row(r));
    }
    out
}

/// k nearest neighbors of each point among the *other* points.
fn knn_excluding_self(positions: &Array2<f64>, k: usize) -> Result<Array2<usize>> {
    let n = positions.nrows();
    if k + 1 > n {
        return Err(CoreError::Size(format!(
            "k_smooth {k} needs at least {} points, got {n}",
            k + 1
        )));
    }
    let idx = knn_positions(positions, positions, k + 1)?;
    let mut out = Array2::zeros((n, k));
    for i in 0..n {
        let mut slot = 0;
        let mut dropped_self = false;
        for j in 0..k + 1 {
            let cand = idx[[i, j]];
            if cand == i && !dropped_self {
                dropped_self = true;
                continue;
            }
            if slot < k {
                out[[i, slot]] = cand;
                slot += 1;
            }
        }
    }
    Ok(out)
}

/// RBF-weighted flow-difference penalty; kernel weights over every
/// (point, neighbor) pair are normalized together with a softmax.
pub fn spatial_smoothness(
    tape: &mut Tape,
    flow: NodeId,
    positions: &Array2<f64>,
    cfg: &LossConfig,
) -> Result<NodeId> {
    let n = positions.nrows();
    let k = cfg.k_smooth.min(n - 1).max(1);
    let idx = knn_excluding_self(positions, k)?;
    // constant softmax-normalized kernel weights
    let mut logits = Vec::with_capacity(n * k);
    for i in 0..n {
        for j in 0..k {
            let mut d2 = 0.0;
            for c in 0..3 {
                let diff = positions[[i, c]] - positions[[idx[[i, j]], c]];
                d2 += diff * diff;
            }
            logits.push(-d2 / cfg.alpha);
        }
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
    let weights = Array2::from_shape_fn((n, k), |(i, j)| (logits[i * k + j] - m).exp() / z);

    let neighbor_flow = tape.gather_neighbors(flow, &idx);
    let own = tape.repeat_mid(flow, k);
    let diff = tape.sub(own, neighbor_flow);
    let sq = tape.mul(diff, diff);
    let d2 = tape.sum_axis(sq, 2);
    let w = tape.constant(weights.into_dyn());
    let weighted = tape.mul(d2, w);
    Ok(tape.sum_all(weighted))
}

/// | f_i . p_i/|p_i| - RRV_i dt | summed over points; points at the origin
/// are skipped (their radial direction is undefined).
pub fn radial_displacement(
    tape: &mut Tape,
    flow: NodeId,
    positions: &Array2<f64>,
    rrv: &Array1<f64>,
    cfg: &LossConfig,
) -> NodeId {
    let n = positions.nrows();
    let mut radial = Array2::zeros((n, 3));
    let mut target = Array1::zeros(n);
    for i in 0..n {
        let norm: f64 =
            (0..3).map(|c| positions[[i, c]] * positions[[i, c]]).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue; // zero row erases the whole term
        }
        for c in 0..3 {
            radial[[i, c]] = positions[[i, c]] / norm;
        }
        target[i] = rrv[i] * cfg.dt;
    }
    let u = tape.constant(radial.into_dyn());
    let proj = tape.mul(flow, u);
    let proj = tape.sum_axis(proj, 1);
    let t = tape.constant(target.into_dyn());
    let residual = tape.sub(proj, t);
    let absres = tape.abs(residual);
    tape.sum_all(absres)
}

/// Mean flow error over the masked rows, or zero when the mask is empty.
fn masked_mean_norm(
    tape: &mut Tape,
    pred: NodeId,
    target: &Array2<f64>,
    rows: &[usize],
) -> NodeId {
    if rows.is_empty() {
        return tape.zeros(&[1]);
    }
    let p = tape.gather_rows(pred, rows);
    let t = tape.constant(select_rows(target, rows).into_dyn());
    let diff = tape.sub(p, t);
    let norms = row_norms(tape, diff);
    let s = tape.sum_all(norms);
    tape.scale(s, 1.0 / rows.len() as f64)
}

/// Mean L2 error against the pseudo ground truth over moving points.
pub fn foreground_loss(
    tape: &mut Tape,
    pred_flow: NodeId,
    pseudo_gt: &Array2<f64>,
    moving_mask: &[bool],
) -> NodeId {
    let rows: Vec<usize> =
        (0..moving_mask.len()).filter(|&i| moving_mask[i]).collect();
    masked_mean_norm(tape, pred_flow, pseudo_gt, &rows)
}

/// Mean L2 error against the background pseudo ground truth over static
/// points (odometry displacement, or zero after compensation).
pub fn background_loss(
    tape: &mut Tape,
    pred_flow: NodeId,
    pseudo_gt: &Array2<f64>,
    static_mask: &[bool],
) -> NodeId {
    let rows: Vec<usize> =
        (0..static_mask.len()).filter(|&i| static_mask[i]).collect();
    masked_mean_norm(tape, pred_flow, pseudo_gt, &rows)
}

/// Nonnegative binary cross-entropy against the pseudo mask, halved.
/// Probabilities are clamped away from 0 and 1.
pub fn seg_loss(tape: &mut Tape, probs: NodeId, pseudo_mask: &[bool]) -> NodeId {
    let n = pseudo_mask.len();
    let t = Array2::from_shape_fn((n, 1), |(i, _)| if pseudo_mask[i] { 1.0 } else { 0.0 });
    let t = tape.constant(t.into_dyn());
    let s = tape.clamp(probs, 1e-7, 1.0 - 1e-7);
    let log_s = tape.ln(s);
    let pos = tape.mul(t, log_s);
    let neg_s = tape.neg(s);
    let om_s = tape.offset(neg_s, 1.0);
    let log_om = tape.ln(om_s);
    let neg_t = tape.neg(t);
    let om_t = tape.offset(neg_t, 1.0);
    let neg = tape.mul(om_t, log_om);
    let sum = tape.add(pos, neg);
    let mean = tape.mean_all(sum);
    let nl = tape.neg(mean);
    tape.scale(nl, 0.5)
}

/// Mean norm of (GT - predicted) rigid motion applied to every point.
pub fn ego_loss(
    tape: &mut Tape,
    r_pred: NodeId,
    t_pred: NodeId,
    omega_gt: &SE3Transform,
    positions: &Array2<f64>,
) -> NodeId {
    let n = positions.nrows();
    let gt_moved = crate::geometry::transform_positions(omega_gt, positions);
    let gt = tape.constant(gt_moved.into_dyn());
    let p = tape.constant(positions.clone().into_dyn());
    let rt = tape.transpose(r_pred);
    let rotated = tape.matmul(p, rt);
    let moved = tape.add_row(rotated, t_pred);
    let diff = tape.sub(gt, moved);
    let norms = row_norms(tape, diff);
    let s = tape.sum_all(norms);
    tape.scale(s, 1.0 / n as f64)
}

/// Mean point-to-ray distance between warped moving points and the rays
/// traced from their optical-flow-warped pixels. Pseudo optical flow comes
/// from projecting the ground-truth scene flow through the camera. Points
/// behind the camera (before or after warping by the ground truth) are
/// excluded.
pub fn optical_flow_loss(
    tape: &mut Tape,
    positions: &Array2<f64>,
    pred_flow: NodeId,
    camera: &CameraModel,
    gt_flow: &Array2<f64>,
    moving_mask: &[bool],
) -> Result<NodeId> {
    let n = positions.nrows();
    let mut rows = Vec::new();
    let mut origins = Vec::new();
    let mut dirs = Vec::new();
    for i in 0..n {
        if !moving_mask[i] {
            continue;
        }
        let p = Vector3::new(positions[[i, 0]], positions[[i, 1]], positions[[i, 2]]);
        let target = p + Vector3::new(gt_flow[[i, 0]], gt_flow[[i, 1]], gt_flow[[i, 2]]);
        let (Some(pix), Some(pix_next)) = (camera.project(&p), camera.project(&target)) else {
            continue;
        };
        // pseudo optical flow: displacement of the projected pixel
        let opt = [pix_next[0] - pix[0], pix_next[1] - pix[1]];
        let (o, d) = camera.pixel_ray([pix[0] + opt[0], pix[1] + opt[1]]);
        rows.push(i);
        origins.push(o);
        dirs.push(d);
    }
    if rows.is_empty() {
        return Ok(tape.zeros(&[1]));
    }
    let m = rows.len();
    let warped_all = {
        let p = tape.constant(positions.clone().into_dyn());
        tape.add(p, pred_flow)
    };
    let warped = tape.gather_rows(warped_all, &rows);
    let o = Array2::from_shape_fn((m, 3), |(i, c)| origins[i][c]);
    let d = Array2::from_shape_fn((m, 3), |(i, c)| dirs[i][c]);
    let o = tape.constant(o.into_dyn());
    let d = tape.constant(d.into_dyn());
    let v = tape.sub(warped, o);
    let vd = tape.mul(v, d);
    let vdots = tape.sum_axis(vd, 1);
    let vdots = tape.reshape(vdots, &[m, 1]);
    let along = tape.mul_last1(d, vdots);
    let perp = tape.sub(v, along);
    let dist = row_norms(tape, perp);
    let s = tape.sum_all(dist);
    Ok(tape.scale(s, 1.0 / m as f64))
}

/// Scalar term values of one training step, serialized into the training log.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub sc: Option<f64>,
    pub ss: Option<f64>,
    pub rd: Option<f64>,
    pub fg: Vec<f64>,
    pub bg: Vec<f64>,
    pub seg: Option<f64>,
    pub ego: Option<f64>,
    pub opt: Option<f64>,
    pub chamfer_all_discarded: bool,
    pub total: f64,
}

impl LossReport {
    /// Recombine the reported terms the way the total was built.
    pub fn recombined(&self, cfg: &LossConfig) -> f64 {
        let mut acc = 0.0;
        acc += self.sc.unwrap_or(0.0) + self.ss.unwrap_or(0.0) + self.rd.unwrap_or(0.0);
        for (fg, bg) in self.fg.iter().zip(self.bg.iter()) {
            acc += fg + cfg.lambda_bg * bg;
        }
        acc += self.seg.unwrap_or(0.0) + self.ego.unwrap_or(0.0);
        acc += self.lambda_opt_times_opt(cfg);
        acc
    }

    fn lambda_opt_times_opt(&self, cfg: &LossConfig) -> f64 {
        self.opt.map(|o| cfg.lambda_opt * o).unwrap_or(0.0)
    }
}

/// Loss nodes assembled by the caller; per-level fg/bg run in level order.
#[derive(Clone, Debug, Default)]
pub struct LossTerms {
    pub sc: Option<NodeId>,
    pub ss: Option<NodeId>,
    pub rd: Option<NodeId>,
    pub fg: Vec<NodeId>,
    pub bg: Vec<NodeId>,
    pub seg: Option<NodeId>,
    pub ego: Option<NodeId>,
    pub opt: Option<NodeId>,
    pub chamfer_all_discarded: bool,
}

/// Combine the terms the supervision mode asks for:
/// self-supervised trio + per-level (fg + lambda_bg bg), plus seg/ego and
/// lambda_opt opt in cross mode. Full mode keeps only fg/bg/seg/ego with
/// exact ground truth standing in for the pseudo labels.
pub fn total_loss(
    tape: &mut Tape,
    terms: &LossTerms,
    cfg: &LossConfig,
    supervision: Supervision,
) -> (NodeId, LossReport) {
    let use_selfsup = !matches!(supervision, Supervision::Full);
    let use_fgbg = !matches!(supervision, Supervision::SelfSup);
    let use_cross = matches!(supervision, Supervision::Cross);
    let use_heads_full = matches!(supervision, Supervision::Full);

    let mut report = LossReport { chamfer_all_discarded: terms.chamfer_all_discarded, ..Default::default() };
    let mut total = tape.zeros(&[1]);
    if use_selfsup {
        for (slot, node) in [
            (&mut report.sc, terms.sc),
            (&mut report.ss, terms.ss),
            (&mut report.rd, terms.rd),
        ] {
            if let Some(n) = node {
                *slot = Some(tape.scalar(n));
                total = tape.add(total, n);
            }
        }
    }
    if use_fgbg {
        for (l, fg) in terms.fg.iter().enumerate() {
            report.fg.push(tape.scalar(*fg));
            total = tape.add(total, *fg);
            if let Some(bg) = terms.bg.get(l) {
                report.bg.push(tape.scalar(*bg));
                let weighted = tape.scale(*bg, cfg.lambda_bg);
                total = tape.add(total, weighted);
            }
        }
    }
    if use_cross || use_heads_full {
        if let Some(seg) = terms.seg {
            report.seg = Some(tape.scalar(seg));
            total = tape.add(total, seg);
        }
        if let Some(ego) = terms.ego {
            report.ego = Some(tape.scalar(ego));
            total = tape.add(total, ego);
        }
    }
    if use_cross {
        if let Some(opt) = terms.opt {
            report.opt = Some(tape.scalar(opt));
            let weighted = tape.scale(opt, cfg.lambda_opt);
            total = tape.add(total, weighted);
        }
    }
    report.total = tape.scalar(total);
    (total, report)
}
