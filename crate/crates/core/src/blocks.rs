//! Learnable building blocks: linear maps, MLPs, single-head attention with
//! optional relative positional encoding, 2D convolution, a convolutional
//! GRU cell, spatial attention fusion, axial attention and per-cell
//! point-to-grid attention pooling.
//!
//! Every block registers its parameters under a name prefix in a
//! [`ParamStore`] and runs forward on a [`Tape`], so analytic gradients come
//! from the same code path that computes values.

use crate::params::ParamStore;
use crate::tape::{NodeId, Tape};
use ndarray::Array2;
use rand::Rng;

/// Negative-side slope shared by every rectifier in the crate.
pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct Linear {
    pub prefix: String,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        d_in: usize,
        d_out: usize,
    ) -> Self {
        store.insert_uniform(&format!("{prefix}.w"), &[d_in, d_out], d_in, rng);
        store.insert_zeros(&format!("{prefix}.b"), &[d_out]);
        Linear { prefix: prefix.to_string(), d_in, d_out }
    }

    /// x: (n, d_in) -> (n, d_out)
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let w = store.bind(tape, &format!("{}.w", self.prefix));
        let b = store.bind(tape, &format!("{}.b", self.prefix));
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    /// x: (n, k, d_in) -> (n, k, d_out), applied per (n, k) entry.
    pub fn forward3(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let shape = tape.shape(x).to_vec();
        let (n, k) = (shape[0], shape[1]);
        let flat = tape.reshape(x, &[n * k, self.d_in]);
        let y = self.forward(tape, store, flat);
        tape.reshape(y, &[n, k, self.d_out])
    }
}

/// Affine layers with a leaky rectifier between (not after) layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` is the full chain, input first: [d_in, h1, .., d_out].
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        widths: &[usize],
    ) -> Self {
        assert!(widths.len() >= 2, "mlp needs at least one layer");
        let layers = (0..widths.len() - 1)
            .map(|i| {
                Linear::register(store, rng, &format!("{prefix}.l{i}"), widths[i], widths[i + 1])
            })
            .collect();
        Mlp { layers }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h);
            if i + 1 < self.layers.len() {
                h = tape.leaky_relu(h, LEAKY_SLOPE);
            }
        }
        h
    }

    pub fn forward3(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let shape = tape.shape(x).to_vec();
        let (n, k) = (shape[0], shape[1]);
        let flat = tape.reshape(x, &[n * k, shape[2]]);
        let y = self.forward(tape, store, flat);
        let d_out = self.layers.last().unwrap().d_out;
        tape.reshape(y, &[n, k, d_out])
    }

    pub fn d_out(&self) -> usize {
        self.layers.last().unwrap().d_out
    }
}

/// Shapes and switches for one single-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct AttentionSpec {
    /// query input width
    pub d_model: usize,
    /// key/value input width
    pub d_kv: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub positional_encoding: bool,
    /// relative-offset dimensionality (2 on the BEV grid, 3 in space)
    pub pe_input: usize,
    pub pe_hidden: usize,
}

impl AttentionSpec {
    pub fn new(d_model: usize, d_kv: usize, d_k: usize, d_v: usize) -> Self {
        AttentionSpec {
            d_model,
            d_kv,
            d_k,
            d_v,
            positional_encoding: false,
            pe_input: 3,
            pe_hidden: d_k,
        }
    }

    pub fn with_pe(mut self, pe_input: usize) -> Self {
        self.positional_encoding = true;
        self.pe_input = pe_input;
        self
    }
}

/// Single-head attention. The positional-encoding MLP maps relative offsets
/// to the key/value input width and is added to both before projection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub spec: AttentionSpec,
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    pe: Option<Mlp>,
}

impl Attention {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        spec: AttentionSpec,
    ) -> Self {
        let q_proj = Linear::register(store, rng, &format!("{prefix}.q"), spec.d_model, spec.d_k);
        let k_proj = Linear::register(store, rng, &format!("{prefix}.k"), spec.d_kv, spec.d_k);
        let v_proj = Linear::register(store, rng, &format!("{prefix}.v"), spec.d_kv, spec.d_v);
        let pe = spec.positional_encoding.then(|| {
            Mlp::register(
                store,
                rng,
                &format!("{prefix}.pe"),
                &[spec.pe_input, spec.pe_hidden, spec.d_kv],
            )
        });
        Attention { spec, q_proj, k_proj, v_proj, pe }
    }

    /// Every query attends over one shared key/value set.
    /// q: (n, d_model), keys/values: (m, d_kv), rel_pos: (m, pe_input).
    pub fn forward_shared(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: NodeId,
        keys: NodeId,
        values: NodeId,
        rel_pos: Option<NodeId>,
    ) -> NodeId {
        let (keys, values) = self.encode_positions(tape, store, keys, values, rel_pos);
        let qp = self.q_proj.forward(tape, store, q);
        let kp = self.k_proj.forward(tape, store, keys);
        let vp = self.v_proj.forward(tape, store, values);
        let kt = tape.transpose(kp);
        let scores = tape.matmul(qp, kt);
        let scores = tape.scale(scores, 1.0 / (self.spec.d_k as f64).sqrt());
        let weights = tape.softmax_last(scores);
        tape.matmul(weights, vp)
    }

    /// Each query row attends over its own neighbor set.
    /// q: (n, d_model), keys/values: (n, k, d_kv), rel_pos: (n, k, pe_input).
    pub fn forward_per_point(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        q: NodeId,
        keys: NodeId,
        values: NodeId,
        rel_pos: Option<NodeId>,
    ) -> NodeId {
        let (keys, values) = self.encode_positions(tape, store, keys, values, rel_pos);
        let qp = self.q_proj.forward(tape, store, q);
        let kp = self.k_proj.forward3(tape, store, keys);
        let vp = self.v_proj.forward3(tape, store, values);
        let scores = tape.attn_scores(qp, kp);
        let scores = tape.scale(scores, 1.0 / (self.spec.d_k as f64).sqrt());
        let weights = tape.softmax_last(scores);
        tape.attn_apply(weights, vp)
    }

    fn encode_positions(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        keys: NodeId,
        values: NodeId,
        rel_pos: Option<NodeId>,
    ) -> (NodeId, NodeId) {
        match (&self.pe, rel_pos) {
            (Some(pe), Some(rp)) => {
                let enc = if tape.shape(rp).len() == 3 {
                    pe.forward3(tape, store, rp)
                } else {
                    pe.forward(tape, store, rp)
                };
                (tape.add(keys, enc), tape.add(values, enc))
            }
            (None, None) => (keys, values),
            (Some(_), None) => panic!("attention expects rel_pos when positional encoding is on"),
            (None, Some(_)) => panic!("attention got rel_pos but positional encoding is off"),
        }
    }
}

/// 2D convolution layer with bias; odd kernel, zero "same" padding.
#[derive(Clone, Debug)]
pub struct Conv2dLayer {
    pub prefix: String,
    pub kernel: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
}

impl Conv2dLayer {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        stride: usize,
    ) -> Self {
        assert!(kernel % 2 == 1, "odd kernels only");
        store.insert_uniform(
            &format!("{prefix}.w"),
            &[kernel, kernel, c_in, c_out],
            kernel * kernel * c_in,
            rng,
        );
        store.insert_zeros(&format!("{prefix}.b"), &[c_out]);
        Conv2dLayer { prefix: prefix.to_string(), kernel, c_in, c_out, stride }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> NodeId {
        let w = store.bind(tape, &format!("{}.w", self.prefix));
        let b = store.bind(tape, &format!("{}.b", self.prefix));
        let y = tape.conv2d(x, w, self.stride);
        tape.add_row(y, b)
    }
}

/// Convolutional GRU cell. The update gate keeps the old state:
/// out = z (.) hidden + (1 - z) (.) candidate.
#[derive(Clone, Debug)]
pub struct ConvGru {
    pub w_r: Conv2dLayer,
    pub u_r: Conv2dLayer,
    pub w_z: Conv2dLayer,
    pub u_z: Conv2dLayer,
    pub w_g: Conv2dLayer,
    pub u_g: Conv2dLayer,
}

impl ConvGru {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        channels: usize,
    ) -> Self {
        let conv = |store: &mut ParamStore, rng: &mut _, name: String| {
            Conv2dLayer::register(store, rng, &name, 3, channels, channels, 1)
        };
        ConvGru {
            w_r: conv(store, rng, format!("{prefix}.wr")),
            u_r: conv(store, rng, format!("{prefix}.ur")),
            w_z: conv(store, rng, format!("{prefix}.wz")),
            u_z: conv(store, rng, format!("{prefix}.uz")),
            w_g: conv(store, rng, format!("{prefix}.wg")),
            u_g: conv(store, rng, format!("{prefix}.ug")),
        }
    }

    pub fn step(&self, tape: &mut Tape, store: &ParamStore, input: NodeId, hidden: NodeId) -> NodeId {
        assert_eq!(tape.shape(input), tape.shape(hidden), "conv_gru: shape mismatch");
        let rx = self.w_r.forward(tape, store, input);
        let rh = self.u_r.forward(tape, store, hidden);
        let r_pre = tape.add(rx, rh);
        let r = tape.sigmoid(r_pre);

        let zx = self.w_z.forward(tape, store, input);
        let zh = self.u_z.forward(tape, store, hidden);
        let z_pre = tape.add(zx, zh);
        let z = tape.sigmoid(z_pre);

        let gated = tape.mul(r, hidden);
        let gx = self.w_g.forward(tape, store, input);
        let gh = self.u_g.forward(tape, store, gated);
        let g_pre = tape.add(gx, gh);
        let candidate = tape.tanh(g_pre);

        let keep = tape.mul(z, hidden);
        let neg_z = tape.neg(z);
        let one_minus_z = tape.offset(neg_z, 1.0);
        let fresh = tape.mul(one_minus_z, candidate);
        tape.add(keep, fresh)
    }
}

/// Pixel-wise convex blend of two fields; the weight map comes from a
/// sigmoid-normalized convolution of their concatenation.
#[derive(Clone, Debug)]
pub struct SpatialFusion {
    conv: Conv2dLayer,
}

impl SpatialFusion {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        channels: usize,
    ) -> Self {
        SpatialFusion {
            conv: Conv2dLayer::register(store, rng, &format!("{prefix}.w"), 3, 2 * channels, 1, 1),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        traffic: NodeId,
        motion: NodeId,
    ) -> NodeId {
        assert_eq!(tape.shape(traffic), tape.shape(motion), "fusion: shape mismatch");
        let both = tape.concat(2, &[traffic, motion]);
        let logits = self.conv.forward(tape, store, both);
        let w = tape.sigmoid(logits);
        let weighted_traffic = tape.mul_last1(traffic, w);
        let neg_w = tape.neg(w);
        let inv_w = tape.offset(neg_w, 1.0);
        let weighted_motion = tape.mul_last1(motion, inv_w);
        tape.add(weighted_traffic, weighted_motion)
    }
}

/// One axial attention block: column-wise self-attention, then row-wise
/// self-attention on that result, summed.
#[derive(Clone, Debug)]
pub struct AxialBlock {
    pub col: Attention,
    pub row: Attention,
    pub channels: usize,
}

impl AxialBlock {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        channels: usize,
    ) -> Self {
        let spec = AttentionSpec::new(channels, channels, channels, channels);
        AxialBlock {
            col: Attention::register(store, rng, &format!("{prefix}.col"), spec.clone()),
            row: Attention::register(store, rng, &format!("{prefix}.row"), spec),
            channels,
        }
    }

    /// field: (h, w, d) -> (h, w, d)
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, field: NodeId) -> NodeId {
        let shape = tape.shape(field).to_vec();
        let (h, w, d) = (shape[0], shape[1], shape[2]);
        let flat = tape.reshape(field, &[h * w, d]);

        // column pass: cells of column w0 are rows {h0 * w + w0}
        let mut col_parts = Vec::with_capacity(w);
        for w0 in 0..w {
            let idx: Vec<usize> = (0..h).map(|h0| h0 * w + w0).collect();
            let cells = tape.gather_rows(flat, &idx);
            let out = self.col.forward_shared(tape, store, cells, cells, cells, None);
            col_parts.push(out);
        }
        let col_cat = tape.concat(0, &col_parts);
        // col_cat row ordering is (w0, h0); restore row-major (h0, w0)
        let perm: Vec<usize> = (0..h * w).map(|i| (i % w) * h + i / w).collect();
        let field_h = tape.gather_rows(col_cat, &perm);

        // row pass on the column result; rows are contiguous in row-major
        let mut row_parts = Vec::with_capacity(h);
        for h0 in 0..h {
            let idx: Vec<usize> = (0..w).map(|w0| h0 * w + w0).collect();
            let cells = tape.gather_rows(field_h, &idx);
            let out = self.row.forward_shared(tape, store, cells, cells, cells, None);
            row_parts.push(out);
        }
        let field_w = tape.concat(0, &row_parts);

        let sum = tape.add(field_h, field_w);
        tape.reshape(sum, &[h, w, d])
    }
}

/// Attention pooling of point features inside each nonempty grid cell,
/// composed with a per-channel sigmoid gate from the cell-mean feature.
/// Returns one row per nonempty cell, in the order of `cell_points`.
#[derive(Clone, Debug)]
pub struct CellAttention {
    q_proj: Linear,
    k_proj: Linear,
    gate: Linear,
    pub d_in: usize,
    pub d_k: usize,
}

impl CellAttention {
    pub fn register(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        d_in: usize,
        d_k: usize,
    ) -> Self {
        CellAttention {
            q_proj: Linear::register(store, rng, &format!("{prefix}.q"), d_in, d_k),
            k_proj: Linear::register(store, rng, &format!("{prefix}.k"), d_in, d_k),
            gate: Linear::register(store, rng, &format!("{prefix}.g"), d_in, d_in),
            d_in,
            d_k,
        }
    }

    /// features: (n, d_in); cell_points[m] lists the point rows of cell m.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: NodeId,
        cell_points: &[Vec<usize>],
    ) -> NodeId {
        assert!(!cell_points.is_empty(), "no cells to pool");
        let mut rows = Vec::with_capacity(cell_points.len());
        for points in cell_points {
            assert!(!points.is_empty(), "empty cells are excluded upstream");
            let feats = tape.gather_rows(features, points);
            let total = tape.sum_axis(feats, 0);
            let mean_flat = tape.scale(total, 1.0 / points.len() as f64);
            let mean = tape.reshape(mean_flat, &[1, self.d_in]);
            let q = self.q_proj.forward(tape, store, mean);
            let k = self.k_proj.forward(tape, store, feats);
            let kt = tape.transpose(k);
            let scores = tape.matmul(q, kt);
            let scores = tape.scale(scores, 1.0 / (self.d_k as f64).sqrt());
            let weights = tape.softmax_last(scores);
            let pooled = tape.matmul(weights, feats);
            let gate_logits = self.gate.forward(tape, store, mean);
            let gate = tape.sigmoid(gate_logits);
            rows.push(tape.mul(gate, pooled));
        }
        tape.concat(0, &rows)
    }
}

/// Convenience: turn an f64 matrix into a tape leaf.
pub fn leaf2(tape: &mut Tape, m: Array2<f64>) -> NodeId {
    tape.leaf(m.into_dyn())
}
