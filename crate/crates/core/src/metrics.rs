//! Evaluation metrics: end-point error with strict/relaxed accuracies,
//! resolution-normalized variants split by motion state, magnitude and
//! direction errors, per-class bucketing, and ego-motion errors.
//!
//! Accuracy thresholds: strict counts points with EPE < 0.05 m or relative
//! error < 5 %; relaxed uses 0.1 m / 10 %. The relative clause is skipped
//! for zero-norm ground truth. Empty buckets report as absent, never zero.

use crate::geometry::SE3Transform;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const STRICT_EPE: f64 = 0.05;
pub const STRICT_REL: f64 = 0.05;
pub const RELAXED_EPE: f64 = 0.1;
pub const RELAXED_REL: f64 = 0.1;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub epe: Option<f64>,
    /// percent of points under the strict threshold
    pub acc_s: Option<f64>,
    pub acc_r: Option<f64>,
    pub rne: Option<f64>,
    pub mrne: Option<f64>,
    pub srne: Option<f64>,
    pub mepe: Option<f64>,
    pub mage: Option<f64>,
    pub dire: Option<f64>,
    /// strict/relaxed accuracy over moving points only
    pub moving_acc_s: Option<f64>,
    pub moving_acc_r: Option<f64>,
    pub sepe: Option<f64>,
    pub avg_epe: Option<f64>,
    pub rte: Option<f64>,
    pub rae_deg: Option<f64>,
    pub n_points: usize,
    pub n_moving: usize,
    pub n_static: usize,
    pub per_class_mrne: BTreeMap<String, f64>,
    pub per_class_counts: BTreeMap<String, usize>,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.9}"),
        None => String::new(),
    }
}

impl MetricReport {
    /// The report table: a fixed header row and one value row.
    pub fn to_csv(&self) -> String {
        let header = "EPE,AccS,AccR,RNE,MRNE,SRNE,MEPE,MagE,DirE,SEPE,AvgEPE,RTE,RAE";
        let row = [
            self.epe, self.acc_s, self.acc_r, self.rne, self.mrne, self.srne, self.mepe,
            self.mage, self.dire, self.sepe, self.avg_epe, self.rte, self.rae_deg,
        ]
        .iter()
        .map(|v| fmt_opt(*v))
        .collect::<Vec<_>>()
        .join(",");
        format!("{header}\n{row}\n")
    }

    /// Per-class moving-point table.
    pub fn per_class_csv(&self) -> String {
        let mut out = String::from("class,MRNE,count\n");
        for (class, v) in &self.per_class_mrne {
            let count = self.per_class_counts.get(class).copied().unwrap_or(0);
            out.push_str(&format!("{class},{v:.9},{count}\n"));
        }
        out
    }
}

/// Point-level evaluation rows gathered across frames; metrics are computed
/// once at the end so frame boundaries do not bias the means.
#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    epe: Vec<f64>,
    gt_norm: Vec<f64>,
    pred_norm: Vec<f64>,
    cos_angle: Vec<Option<f64>>,
    ratio: Vec<f64>,
    moving: Vec<bool>,
    class_id: Vec<u8>,
    ego: Vec<(SE3Transform, SE3Transform)>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        MetricAccumulator::default()
    }

    pub fn push_frame(
        &mut self,
        pred: &Array2<f64>,
        gt: &Array2<f64>,
        moving: &[bool],
        class_id: &[u8],
        ratio: &Array1<f64>,
    ) {
        let n = pred.nrows();
        assert_eq!(gt.nrows(), n);
        for i in 0..n {
            let mut d2 = 0.0;
            let mut gn = 0.0;
            let mut pn = 0.0;
            let mut dot = 0.0;
            for c in 0..3 {
                let diff = pred[[i, c]] - gt[[i, c]];
                d2 += diff * diff;
                gn += gt[[i, c]] * gt[[i, c]];
                pn += pred[[i, c]] * pred[[i, c]];
                dot += pred[[i, c]] * gt[[i, c]];
            }
            let gn = gn.sqrt();
            let pn = pn.sqrt();
            self.epe.push(d2.sqrt());
            self.gt_norm.push(gn);
            self.pred_norm.push(pn);
            self.cos_angle.push(if gn > 0.0 && pn > 0.0 {
                Some((dot / (gn * pn)).clamp(-1.0, 1.0))
            } else {
                None
            });
            self.ratio.push(ratio[i]);
            self.moving.push(moving[i]);
            self.class_id.push(class_id[i]);
        }
    }

    pub fn push_ego(&mut self, pred: SE3Transform, gt: SE3Transform) {
        self.ego.push((pred, gt));
    }

    pub fn report(&self) -> MetricReport {
        let n = self.epe.len();
        let mut rep = MetricReport { n_points: n, ..Default::default() };
        if n > 0 {
            rep.epe = Some(mean(&self.epe));
            rep.acc_s = Some(self.accuracy(STRICT_EPE, STRICT_REL, None));
            rep.acc_r = Some(self.accuracy(RELAXED_EPE, RELAXED_REL, None));
            rep.rne = Some(mean_of(self.epe.iter().zip(&self.ratio).map(|(e, r)| e / r)));
        }
        let moving_idx: Vec<usize> = (0..n).filter(|&i| self.moving[i]).collect();
        let static_idx: Vec<usize> = (0..n).filter(|&i| !self.moving[i]).collect();
        rep.n_moving = moving_idx.len();
        rep.n_static = static_idx.len();
        if !moving_idx.is_empty() {
            rep.mrne = Some(mean_of(
                moving_idx.iter().map(|&i| self.epe[i] / self.ratio[i]),
            ));
            rep.mepe = Some(mean_of(moving_idx.iter().map(|&i| self.epe[i])));
            rep.mage = Some(mean_of(
                moving_idx.iter().map(|&i| (self.pred_norm[i] - self.gt_norm[i]).abs()),
            ));
            let angles: Vec<f64> = moving_idx
                .iter()
                .filter_map(|&i| self.cos_angle[i].map(f64::acos))
                .collect();
            if !angles.is_empty() {
                rep.dire = Some(mean(&angles));
            }
            rep.moving_acc_s = Some(self.accuracy(STRICT_EPE, STRICT_REL, Some(true)));
            rep.moving_acc_r = Some(self.accuracy(RELAXED_EPE, RELAXED_REL, Some(true)));
        }
        if !static_idx.is_empty() {
            rep.srne = Some(mean_of(
                static_idx.iter().map(|&i| self.epe[i] / self.ratio[i]),
            ));
            rep.sepe = Some(mean_of(static_idx.iter().map(|&i| self.epe[i])));
        }
        if let (Some(m), Some(s)) = (rep.mepe, rep.sepe) {
            rep.avg_epe = Some(0.5 * (m + s));
        }

        let mut class_sums: BTreeMap<u8, (f64, usize)> = BTreeMap::new();
        for &i in &moving_idx {
            let e = class_sums.entry(self.class_id[i]).or_insert((0.0, 0));
            e.0 += self.epe[i] / self.ratio[i];
            e.1 += 1;
        }
        for (class, (sum, count)) in class_sums {
            let name = crate::synthworld::class_name(class).to_string();
            rep.per_class_mrne.insert(name.clone(), sum / count as f64);
            rep.per_class_counts.insert(name, count);
        }

        if !self.ego.is_empty() {
            let mut rte = 0.0;
            let mut rae = 0.0;
            for (pred, gt) in &self.ego {
                let (t, a) = ego_metrics(pred, gt);
                rte += t;
                rae += a;
            }
            rep.rte = Some(rte / self.ego.len() as f64);
            rep.rae_deg = Some(rae / self.ego.len() as f64);
        }
        rep
    }

    fn accuracy(&self, abs_thresh: f64, rel_thresh: f64, moving_only: Option<bool>) -> f64 {
        let mut hit = 0usize;
        let mut count = 0usize;
        for i in 0..self.epe.len() {
            if let Some(want) = moving_only {
                if self.moving[i] != want {
                    continue;
                }
            }
            count += 1;
            let absolute = self.epe[i] < abs_thresh;
            let relative = self.gt_norm[i] > 0.0 && self.epe[i] / self.gt_norm[i] < rel_thresh;
            if absolute || relative {
                hit += 1;
            }
        }
        if count == 0 {
            return 0.0;
        }
        100.0 * hit as f64 / count as f64
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn mean_of(it: impl Iterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in it {
        sum += v;
        count += 1;
    }
    sum / count as f64
}

/// Convenience for single-shot evaluation of one frame.
pub fn overall_metrics(
    pred: &Array2<f64>,
    gt: &Array2<f64>,
    ratio: &Array1<f64>,
) -> (f64, f64, f64, f64) {
    let mut acc = MetricAccumulator::new();
    let n = pred.nrows();
    acc.push_frame(pred, gt, &vec![false; n], &vec![0; n], ratio);
    let rep = acc.report();
    (rep.epe.unwrap(), rep.acc_s.unwrap(), rep.acc_r.unwrap(), rep.rne.unwrap())
}

/// Translation error and rotation-angle error (degrees) between rigid
/// transforms, both expressed in the same frame.
pub fn ego_metrics(pred: &SE3Transform, gt: &SE3Transform) -> (f64, f64) {
    let rte = (pred.translation() - gt.translation()).norm();
    let rel = gt.rotation().transpose() * pred.rotation();
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    (rte, cos.acos().to_degrees())
}
