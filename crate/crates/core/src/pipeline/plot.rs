//! Static BEV arrow-field figures, one SVG per frame.

use crate::error::Result;
use crate::pipeline::infer::flow_from_bytes;
use crate::pipeline::{data::load_split, RunConfig};
use ndarray::Array2;
use std::fmt::Write as _;
use std::path::Path;

/// Render one bird's-eye arrow field. Points are dots; each arrow runs from
/// the point to its flow target. Zero flow degenerates to a zero-length line.
pub fn arrow_field_svg(
    positions: &Array2<f64>,
    flow: &Array2<f64>,
    moving: &[bool],
    extent: f64,
) -> String {
    let size = 800.0;
    let scale = size / (2.0 * extent);
    let map = |x: f64, y: f64| {
        // sensor x is forward (up in the figure), y is left
        let px = size / 2.0 - y * scale;
        let py = size - (x + extent) * scale;
        (px, py)
    };
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#
    );
    let _ = writeln!(svg, r##"<rect width="{size}" height="{size}" fill="#10141a"/>"##);
    for i in 0..positions.nrows() {
        let (x0, y0) = map(positions[[i, 0]], positions[[i, 1]]);
        let (x1, y1) = map(
            positions[[i, 0]] + flow[[i, 0]],
            positions[[i, 1]] + flow[[i, 1]],
        );
        let color = if moving.get(i).copied().unwrap_or(false) { "#ff7043" } else { "#64b5f6" };
        let _ = writeln!(
            svg,
            r##"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y1:.2}" stroke="{color}" stroke-width="1.4"/>"##
        );
        let _ = writeln!(svg, r##"<circle cx="{x0:.2}" cy="{y0:.2}" r="2.0" fill="{color}"/>"##);
    }
    svg.push_str("</svg>\n");
    svg
}

/// Emit arrow-field figures for a split. When `flows_dir` is given, arrows
/// use the inferred flow files; otherwise the ground truth is drawn.
pub fn run_plot(
    cfg: &RunConfig,
    data_root: &Path,
    flows_dir: Option<&Path>,
    split: &str,
    out_dir: &Path,
) -> Result<usize> {
    let sequences = load_split(data_root, split)?;
    std::fs::create_dir_all(out_dir)?;
    let extent = cfg.scenario.max_range;
    let mut written = 0usize;
    for seq in &sequences {
        for (t, frame) in seq.frames.iter().enumerate() {
            let flow = match flows_dir {
                Some(dir) => {
                    let path = dir.join(&seq.dir).join(format!("flow_{t:04}.bin"));
                    if !path.exists() {
                        continue; // the last frame of a clip has no pair
                    }
                    let bytes = std::fs::read(&path)?;
                    flow_from_bytes(&bytes)?.1
                }
                None => frame.gt_flow.vectors.clone(),
            };
            let svg = arrow_field_svg(
                &frame.cloud.positions,
                &flow,
                &frame.moving_mask,
                extent,
            );
            let name = format!("{}_frame_{t:04}.svg", seq.dir);
            std::fs::write(out_dir.join(name), svg)?;
            written += 1;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_flow_arrows_degenerate_to_points() {
        let positions = ndarray::arr2(&[[5.0, 1.0, 0.0], [10.0, -2.0, 0.5]]);
        let flow = Array2::zeros((2, 3));
        let svg = arrow_field_svg(&positions, &flow, &[false, true], 20.0);
        for line in svg.lines().filter(|l| l.starts_with("<line")) {
            let grab = |key: &str| {
                let start = line.find(key).unwrap() + key.len() + 2;
                let rest = &line[start..];
                let end = rest.find('"').unwrap();
                rest[..end].to_string()
            };
            assert_eq!(grab("x1"), grab("x2"));
            assert_eq!(grab("y1"), grab("y2"));
        }
    }

    #[test]
    fn nonzero_flow_draws_displaced_arrows() {
        let positions = ndarray::arr2(&[[5.0, 1.0, 0.0]]);
        let flow = ndarray::arr2(&[[1.0, 0.0, 0.0]]);
        let svg = arrow_field_svg(&positions, &flow, &[true], 20.0);
        let line = svg.lines().find(|l| l.starts_with("<line")).unwrap();
        assert!(line.contains("stroke=\"#ff7043\""));
        // forward motion points up in the figure: y2 < y1
        let grab = |key: &str| {
            let start = line.find(key).unwrap() + key.len() + 2;
            let rest = &line[start..];
            let end = rest.find('"').unwrap();
            rest[..end].parse::<f64>().unwrap()
        };
        assert!(grab("y2") < grab("y1"));
        assert_eq!(grab("x1"), grab("x2"));
    }
}
