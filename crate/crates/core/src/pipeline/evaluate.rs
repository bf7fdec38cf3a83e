//! Evaluation over a dataset split with variant-appropriate preprocessing.

use crate::error::Result;
use crate::metrics::{MetricAccumulator, MetricReport};
use crate::model::{ego_transform_value, HiddenCarry, Variant};
use crate::pipeline::objective::{align_hidden, build_model, prepare_pair};
use crate::pipeline::train::load_trained;
use crate::pipeline::{data::load_split, RunConfig};
use crate::tape::Tape;
use ndarray::{Array1, Array2};
use std::path::Path;

/// What produces the flow under evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Predictor {
    /// the trained network from a checkpoint
    Model,
    /// all-zero flow (a common floor for compensated data)
    ZeroFlow,
    /// the ground truth itself (sanity ceiling)
    GroundTruth,
}

/// Evaluate a split and write `metrics.csv`, `per_class.csv` and
/// `report.json` into `report_dir`.
pub fn run_eval(
    cfg: &RunConfig,
    data_root: &Path,
    checkpoint: Option<&Path>,
    split: &str,
    predictor: Predictor,
    report_dir: Option<&Path>,
) -> Result<MetricReport> {
    cfg.validate()?;
    let sequences = load_split(data_root, split)?;
    let (store, net, stub) = match (predictor, checkpoint) {
        (Predictor::Model, Some(path)) => load_trained(cfg, path)?,
        _ => build_model(cfg)?,
    };

    let mut acc = MetricAccumulator::new();
    for seq in &sequences {
        let mut carry: Option<HiddenCarry> = None;
        let mut tape = Tape::new();
        for t in 0..seq.frames.len() - 1 {
            let pair = prepare_pair(cfg.net.variant, &seq.frames[t], &seq.frames[t + 1]);
            let n = pair.p_used.len();
            let ratio = Array1::from_elem(n, cfg.data.resolution_ratio);
            let pred: Array2<f64> = match predictor {
                Predictor::ZeroFlow => Array2::zeros((n, 3)),
                Predictor::GroundTruth => pair.p_used.gt_flow.vectors.clone(),
                Predictor::Model => {
                    let aligned = carry.take().map(|c| align_hidden(c, &pair));
                    let pyramid = stub.pyramid(&store, &seq.frames[t + 1]);
                    let out = net.forward(
                        &mut tape,
                        &store,
                        &pair.p_used,
                        &seq.frames[t + 1],
                        aligned.as_ref(),
                        &pyramid,
                    )?;
                    if matches!(cfg.net.variant, Variant::Ego) {
                        if let Some((r, tn)) = out.ego_rt {
                            acc.push_ego(ego_transform_value(&tape, r, tn), pair.omega.clone());
                        }
                    }
                    carry = Some(out.new_hidden);
                    crate::model::value2(&tape, out.flow_full)
                }
            };
            acc.push_frame(
                &pred,
                &pair.p_used.gt_flow.vectors,
                &pair.p_used.moving_mask,
                &pair.p_used.class_id,
                &ratio,
            );
        }
    }
    let report = acc.report();
    if let Some(dir) = report_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.csv"), report.to_csv())?;
        std::fs::write(dir.join("per_class.csv"), report.per_class_csv())?;
        let json = serde_json::to_string_pretty(&report)
            .map_err(|e| crate::error::CoreError::Format(e.to_string()))?;
        std::fs::write(dir.join("report.json"), json)?;
    }
    Ok(report)
}
