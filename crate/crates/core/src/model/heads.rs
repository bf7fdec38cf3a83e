//! Motion-segmentation head and the differentiable weighted-Kabsch ego head.

use crate::blocks::Mlp;
use crate::error::{CoreError, Result};
use crate::params::ParamStore;
use crate::tape::{NodeId, Tape};
use rand::Rng;

/// Three-layer MLP followed by a sigmoid; outputs a moving probability per
/// point. The binary mask uses a 0.5 threshold.
pub struct SegHead {
    mlp: Mlp,
}

pub const SEG_THRESHOLD: f64 = 0.5;

impl SegHead {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        d_in: usize,
    ) -> Self {
        let h1 = d_in.max(2);
        let h2 = (d_in / 2).max(2);
        SegHead { mlp: Mlp::register(store, rng, prefix, &[d_in, h1, h2, 1]) }
    }

    /// embeddings (n, D) -> probabilities (n, 1)
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, embed: NodeId) -> NodeId {
        let logits = self.mlp.forward(tape, store, embed);
        tape.sigmoid(logits)
    }
}

/// Marker type for the ego pathway (the actual computation is the free
/// function below, which composes tape ops).
pub struct EgoHead;

/// Weighted Kabsch alignment between `p` and `p_warp` on the tape. Weights
/// are per-point (n, 1); moving points should carry low weight. Returns the
/// rotation (3, 3) and translation (3,) nodes.
///
/// Degenerate geometry (effectively collinear or weightless input) is
/// rejected before the SVD op is recorded.
pub fn ego_motion_head(
    tape: &mut Tape,
    p: NodeId,
    p_warp: NodeId,
    weights: NodeId,
) -> Result<(NodeId, NodeId)> {
    let n = tape.shape(p)[0];
    if n < 3 {
        return Err(CoreError::DegenerateGeometry(format!(
            "rigid alignment needs at least 3 points, got {n}"
        )));
    }
    let w_sum = tape.sum_all(weights);
    if tape.scalar(w_sum) <= 1e-9 {
        return Err(CoreError::DegenerateGeometry(
            "total alignment weight is zero".into(),
        ));
    }
    let w_norm = tape.div_by_scalar(weights, w_sum);

    let p_weighted = tape.mul_last1(p, w_norm);
    let mu_p = tape.sum_axis(p_weighted, 0);
    let q_weighted = tape.mul_last1(p_warp, w_norm);
    let mu_q = tape.sum_axis(q_weighted, 0);

    let neg_mu_p = tape.neg(mu_p);
    let p_centered = tape.add_row(p, neg_mu_p);
    let neg_mu_q = tape.neg(mu_q);
    let q_centered = tape.add_row(p_warp, neg_mu_q);

    // H = sum_i w_i q_c[i] p_c[i]^T
    let qw = tape.mul_last1(q_centered, w_norm);
    let qt = tape.transpose(qw);
    let cov = tape.matmul(qt, p_centered);

    // reject rank-deficient covariance before recording the SVD op
    {
        let h = tape.value(cov);
        let m = nalgebra::Matrix3::from_fn(|r, c| h[[r, c]]);
        let svals = nalgebra::SVD::new(m, false, false).singular_values;
        let mut s: Vec<f64> = svals.iter().copied().collect();
        s.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if s[1] <= s[0].max(1e-12) * 1e-9 {
            return Err(CoreError::DegenerateGeometry(
                "covariance is rank deficient (points effectively collinear)".into(),
            ));
        }
    }

    let r = tape.rotation_from_cov(cov);
    let mu_p_col = tape.reshape(mu_p, &[3, 1]);
    let r_mu_p = tape.matmul(r, mu_p_col);
    let r_mu_p = tape.reshape(r_mu_p, &[3]);
    let t = tape.sub(mu_q, r_mu_p);
    Ok((r, t))
}

/// Evaluate the rigid transform nodes into an SE3 value.
pub fn ego_transform_value(tape: &Tape, r: NodeId, t: NodeId) -> crate::geometry::SE3Transform {
    let rv = tape.value(r);
    let tv = tape.value(t);
    let rot = nalgebra::Matrix3::from_fn(|i, j| rv[[i, j]]);
    let tr = nalgebra::Vector3::new(tv[[0]], tv[[1]], tv[[2]]);
    crate::geometry::SE3Transform::from_rt(rot, tr)
        .expect("kabsch output satisfies the SE3 invariants")
}
