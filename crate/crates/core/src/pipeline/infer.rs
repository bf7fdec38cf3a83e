//! Inference: write predicted flow fields in the dataset's binary layout.

use crate::error::{CoreError, Result};
use crate::model::HiddenCarry;
use crate::pipeline::objective::{align_hidden, prepare_pair};
use crate::pipeline::train::load_trained;
use crate::pipeline::{data::load_split, RunConfig};
use crate::tape::Tape;
use ndarray::Array2;
use std::io::Write;
use std::path::Path;

const FLOW_MAGIC: &[u8; 4] = b"RFLW";
const FLOW_VERSION: u32 = 1;

/// Header (magic, version, count, frame index) + n x 3 f32 LE vectors.
pub fn flow_to_bytes(frame_index: u32, flow: &Array2<f64>) -> Vec<u8> {
    let n = flow.nrows();
    let mut buf = Vec::with_capacity(16 + 12 * n);
    buf.extend_from_slice(FLOW_MAGIC);
    buf.extend_from_slice(&FLOW_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&frame_index.to_le_bytes());
    for v in flow.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    buf
}

pub fn flow_from_bytes(bytes: &[u8]) -> Result<(u32, Array2<f64>)> {
    if bytes.len() < 16 || &bytes[0..4] != FLOW_MAGIC {
        return Err(CoreError::Format("bad flow record".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FLOW_VERSION {
        return Err(CoreError::Format(format!("unsupported flow version {version}")));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let frame_index = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if bytes.len() != 16 + 12 * n {
        return Err(CoreError::Format("flow record size mismatch".into()));
    }
    let mut flow = Array2::zeros((n, 3));
    for (i, chunk) in bytes[16..].chunks_exact(4).enumerate() {
        flow[[i / 3, i % 3]] = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
    }
    Ok((frame_index, flow))
}

/// Predict flow for every frame pair of a split; one flow file per source
/// frame, mirroring the dataset directory layout.
pub fn run_infer(
    cfg: &RunConfig,
    data_root: &Path,
    checkpoint: &Path,
    split: &str,
    out_dir: &Path,
) -> Result<usize> {
    cfg.validate()?;
    let sequences = load_split(data_root, split)?;
    let (store, net, stub) = load_trained(cfg, checkpoint)?;
    let mut written = 0usize;
    for seq in &sequences {
        let seq_dir = out_dir.join(&seq.dir);
        std::fs::create_dir_all(&seq_dir)?;
        let mut carry: Option<HiddenCarry> = None;
        let mut tape = Tape::new();
        for t in 0..seq.frames.len() - 1 {
            let pair = prepare_pair(cfg.net.variant, &seq.frames[t], &seq.frames[t + 1]);
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
            carry = Some(out.new_hidden);
            let flow = crate::model::value2(&tape, out.flow_full);
            let path = seq_dir.join(format!("flow_{t:04}.bin"));
            let mut f = std::fs::File::create(path)?;
            f.write_all(&flow_to_bytes(t as u32, &flow))?;
            written += 1;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flow_record_roundtrip_and_errors() {
        let flow = ndarray::arr2(&[[0.25, -1.5, 3.0], [0.0, 0.5, -0.125]]);
        let bytes = flow_to_bytes(7, &flow);
        let (idx, back) = flow_from_bytes(&bytes).unwrap();
        assert_eq!(idx, 7);
        assert_eq!(back, flow);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(flow_from_bytes(&bad).is_err());
        assert!(flow_from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
