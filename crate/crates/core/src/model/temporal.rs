//! Temporal update on low-level point features. Each current point pulls the
//! hidden features of its nearest neighbors in the previous cloud through
//! inverse-distance weighting, then a gated recurrent update mixes them with
//! the fresh features. The update gate keeps the old state, matching the
//! scene-update convention.

use crate::blocks::Linear;
use crate::error::Result;
use crate::geometry::interpolation_weights;
use crate::model::interp_node;
use crate::params::ParamStore;
use crate::tape::{NodeId, Tape};
use ndarray::Array2;
use rand::Rng;

pub struct PointGru {
    wz: Linear,
    uz: Linear,
    wr: Linear,
    ur: Linear,
    wh: Linear,
    uh: Linear,
}

impl PointGru {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        channels: usize,
    ) -> Self {
        let lin = |store: &mut ParamStore, rng: &mut _, name: String| {
            Linear::register(store, rng, &name, channels, channels)
        };
        PointGru {
            wz: lin(store, rng, format!("{prefix}.wz")),
            uz: lin(store, rng, format!("{prefix}.uz")),
            wr: lin(store, rng, format!("{prefix}.wr")),
            ur: lin(store, rng, format!("{prefix}.ur")),
            wh: lin(store, rng, format!("{prefix}.wh")),
            uh: lin(store, rng, format!("{prefix}.uh")),
        }
    }

    /// x: fresh features of the current cloud (n x C); hidden: features keyed
    /// to `prev_positions`. Returns the updated features, which double as the
    /// hidden state for the next pair.
    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        positions: &Array2<f64>,
        prev_positions: &Array2<f64>,
        hidden: NodeId,
        k: usize,
    ) -> Result<NodeId> {
        let k = k.min(prev_positions.nrows()).max(1);
        let (idx, weights) = interpolation_weights(prev_positions, positions, k)?;
        let h_agg = interp_node(tape, hidden, &idx, &weights);

        let zx = self.wz.forward(tape, store, x);
        let zh = self.uz.forward(tape, store, h_agg);
        let z_pre = tape.add(zx, zh);
        let z = tape.sigmoid(z_pre);

        let rx = self.wr.forward(tape, store, x);
        let rh = self.ur.forward(tape, store, h_agg);
        let r_pre = tape.add(rx, rh);
        let r = tape.sigmoid(r_pre);

        let gated = tape.mul(r, h_agg);
        let hx = self.wh.forward(tape, store, x);
        let hh = self.uh.forward(tape, store, gated);
        let h_pre = tape.add(hx, hh);
        let candidate = tape.tanh(h_pre);

        let keep = tape.mul(z, h_agg);
        let neg_z = tape.neg(z);
        let inv_z = tape.offset(neg_z, 1.0);
        let fresh = tape.mul(inv_z, candidate);
        Ok(tape.add(keep, fresh))
    }
}
