//! Reverse-mode automatic differentiation on dynamically shaped f64 arrays.
//!
//! The model, the losses and the training loop all build one [`Tape`] per
//! forward evaluation. Ops compute eagerly; [`Tape::backward`] walks the
//! recorded nodes in reverse and accumulates gradients. Index-valued
//! computations (nearest neighbours, voxel assignment, argmax) are done
//! outside the tape on current values and enter ops as constants, so the
//! differentiated path is exactly the piecewise-smooth part of the program.

use ndarray::{Array1, Array2, ArrayD, ArrayViewD, Axis, Dimension, IxDyn};

pub type Value = ArrayD<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

/// Per-output-cell resampling plan: list of (row, col, weight) source taps.
#[derive(Clone, Debug)]
pub struct ResizePlan {
    pub out_h: usize,
    pub out_w: usize,
    pub taps: Vec<Vec<(usize, usize, f64)>>,
}

impl ResizePlan {
    /// Downsampling averages whole source bins; upsampling takes the nearest
    /// source cell. Both are linear maps with constant coefficients.
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        let mut taps = Vec::with_capacity(out_h * out_w);
        for oh in 0..out_h {
            for ow in 0..out_w {
                let mut cell = Vec::new();
                if in_h >= out_h && in_w >= out_w {
                    let h0 = oh * in_h / out_h;
                    let h1 = ((oh + 1) * in_h / out_h).max(h0 + 1);
                    let w0 = ow * in_w / out_w;
                    let w1 = ((ow + 1) * in_w / out_w).max(w0 + 1);
                    let norm = 1.0 / ((h1 - h0) * (w1 - w0)) as f64;
                    for ih in h0..h1 {
                        for iw in w0..w1 {
                            cell.push((ih, iw, norm));
                        }
                    }
                } else {
                    let ih = (oh * in_h / out_h).min(in_h - 1);
                    let iw = (ow * in_w / out_w).min(in_w - 1);
                    cell.push((ih, iw, 1.0));
                }
                taps.push(cell);
            }
        }
        ResizePlan { out_h, out_w, taps }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId),
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Reshape(NodeId),
    Concat { axis: usize, parts: Vec<NodeId> },
    GatherRows { src: NodeId, idx: Vec<usize> },
    GatherNeighbors { src: NodeId, idx: Array2<usize> },
    Repeat { src: NodeId },
    SumAll(NodeId),
    SumAxis { src: NodeId, axis: usize },
    MaxAxis { src: NodeId, axis: usize },
    Sigmoid(NodeId),
    Tanh(NodeId),
    LeakyRelu(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    SqrtGuard(NodeId),
    Abs(NodeId),
    Clamp(NodeId, f64, f64),
    SoftmaxLast(NodeId),
    AttnScores { q: NodeId, k: NodeId },
    AttnApply { w: NodeId, v: NodeId },
    AddRow { a: NodeId, b: NodeId },
    MulLast1 { a: NodeId, b: NodeId },
    DivByScalar { a: NodeId, s: NodeId },
    Conv2d { input: NodeId, kernel: NodeId, stride: usize },
    Resize2d { src: NodeId, plan: ResizePlan },
    ScatterCells { rows: NodeId, cells: Vec<(usize, usize)> },
    RotationFromCov { cov: NodeId },
}

struct Node {
    value: Value,
    op: Op,
}

/// Gradients of one scalar output with respect to every tape node.
pub struct Gradients {
    grads: Vec<Option<Value>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Value> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_bindings: Vec<(String, NodeId)>,
}

fn view2(v: &Value) -> ndarray::ArrayView2<'_, f64> {
    v.view().into_dimensionality().expect("expected 2-d value")
}

fn view3(v: &Value) -> ndarray::ArrayView3<'_, f64> {
    v.view().into_dimensionality().expect("expected 3-d value")
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Value {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        v.iter().next().copied().unwrap()
    }

    pub fn param_bindings(&self) -> &[(String, NodeId)] {
        &self.param_bindings
    }

    fn push(&mut self, value: Value, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    /// Differentiable input node.
    pub fn leaf(&mut self, value: Value) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Non-differentiable input node.
    pub fn constant(&mut self, value: Value) -> NodeId {
        self.push(value, Op::Constant)
    }

    pub fn constant2(&mut self, value: Array2<f64>) -> NodeId {
        self.constant(value.into_dyn())
    }

    pub fn constant1(&mut self, value: Array1<f64>) -> NodeId {
        self.constant(value.into_dyn())
    }

    pub fn zeros(&mut self, shape: &[usize]) -> NodeId {
        self.constant(ArrayD::zeros(IxDyn(shape)))
    }

    /// Leaf that tracks a named parameter; gradients are routed back to the
    /// owning store after `backward`.
    pub fn bind_param(&mut self, name: &str, value: Value) -> NodeId {
        let id = self.leaf(value);
        self.param_bindings.push((name.to_string(), id));
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -self.value(a).clone();
        self.push(v, Op::Neg(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn offset(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = self.value(a) + c;
        self.push(v, Op::Offset(a))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = view2(self.value(a)).dot(&view2(self.value(b)));
        self.push(v.into_dyn(), Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = view2(self.value(a)).t().to_owned();
        self.push(v.into_dyn(), Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let v = self
            .value(a)
            .clone()
            .into_shape(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(v, Op::Reshape(a))
    }

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<ArrayViewD<'_, f64>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        self.push(v, Op::Concat { axis, parts: parts.to_vec() })
    }

    /// out[i, :] = src[idx[i], :]
    pub fn gather_rows(&mut self, src: NodeId, idx: &[usize]) -> NodeId {
        let s = view2(self.value(src));
        let mut out = Array2::zeros((idx.len(), s.ncols()));
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).assign(&s.row(r));
        }
        self.push(out.into_dyn(), Op::GatherRows { src, idx: idx.to_vec() })
    }

    /// out[i, j, :] = src[idx[i, j], :]
    pub fn gather_neighbors(&mut self, src: NodeId, idx: &Array2<usize>) -> NodeId {
        let s = view2(self.value(src));
        let (n, k) = idx.dim();
        let d = s.ncols();
        let mut out = ndarray::Array3::zeros((n, k, d));
        for i in 0..n {
            for j in 0..k {
                out.slice_mut(ndarray::s![i, j, ..]).assign(&s.row(idx[[i, j]]));
            }
        }
        self.push(out.into_dyn(), Op::GatherNeighbors { src, idx: idx.clone() })
    }

    /// out[i, j, :] = src[i, :] for j in 0..k
    pub fn repeat_mid(&mut self, src: NodeId, k: usize) -> NodeId {
        let s = view2(self.value(src));
        let (n, d) = s.dim();
        let mut out = ndarray::Array3::zeros((n, k, d));
        for i in 0..n {
            for j in 0..k {
                out.slice_mut(ndarray::s![i, j, ..]).assign(&s.row(i));
            }
        }
        self.push(out.into_dyn(), Op::Repeat { src })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum();
        self.push(ArrayD::from_elem(IxDyn(&[1]), s), Op::SumAll(a))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        let v = self.value(a).sum_axis(Axis(axis));
        self.push(v, Op::SumAxis { src: a, axis })
    }

    pub fn max_axis(&mut self, a: NodeId, axis: usize) -> NodeId {
        let v = self.value(a).fold_axis(Axis(axis), f64::NEG_INFINITY, |m, x| m.max(*x));
        self.push(v, Op::MaxAxis { src: a, axis })
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> NodeId {
        let v = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    /// sqrt with zero subgradient at exactly zero, so vanishing norms do not
    /// produce NaN during training.
    pub fn sqrt_guard(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::sqrt);
        self.push(v, Op::SqrtGuard(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Softmax over the last axis (any rank).
    pub fn softmax_last(&mut self, a: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        let last = v.ndim() - 1;
        for mut lane in v.lanes_mut(Axis(last)) {
            let m = lane.fold(f64::NEG_INFINITY, |acc, x| acc.max(*x));
            lane.mapv_inplace(|x| (x - m).exp());
            let s = lane.sum();
            lane.mapv_inplace(|x| x / s);
        }
        self.push(v, Op::SoftmaxLast(a))
    }

    /// scores[i, j] = q[i, :] . k[i, j, :]
    pub fn attn_scores(&mut self, q: NodeId, k: NodeId) -> NodeId {
        let qv = view2(self.value(q));
        let kv = view3(self.value(k));
        let (n, kk, d) = kv.dim();
        assert_eq!(qv.dim(), (n, d), "attn_scores: query/key shape mismatch");
        let mut out = Array2::zeros((n, kk));
        for i in 0..n {
            for j in 0..kk {
                let mut s = 0.0;
                for c in 0..d {
                    s += qv[[i, c]] * kv[[i, j, c]];
                }
                out[[i, j]] = s;
            }
        }
        self.push(out.into_dyn(), Op::AttnScores { q, k })
    }

    /// out[i, :] = sum_j w[i, j] * v[i, j, :]
    pub fn attn_apply(&mut self, w: NodeId, v: NodeId) -> NodeId {
        let wv = view2(self.value(w));
        let vv = view3(self.value(v));
        let (n, kk, d) = vv.dim();
        assert_eq!(wv.dim(), (n, kk), "attn_apply: weight shape mismatch");
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            for j in 0..kk {
                for c in 0..d {
                    out[[i, c]] += wv[[i, j]] * vv[[i, j, c]];
                }
            }
        }
        self.push(out.into_dyn(), Op::AttnApply { w, v })
    }

    /// a: (.., d), b: (d,) broadcast over all leading axes.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let bv = self.value(b).clone();
        let d = bv.len();
        let av = self.value(a);
        assert_eq!(*av.shape().last().unwrap(), d, "add_row: trailing dim mismatch");
        let mut v = av.clone();
        for mut lane in v.lanes_mut(Axis(av.ndim() - 1)) {
            for (x, y) in lane.iter_mut().zip(bv.iter()) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow { a, b })
    }

    /// a: (.., d), b: (.., 1) with identical leading axes.
    pub fn mul_last1(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).clone();
        let bv = self.value(b);
        assert_eq!(*bv.shape().last().unwrap(), 1, "mul_last1: b must end in 1");
        let d = *av.shape().last().unwrap();
        let mut v = av;
        let flat_b: Vec<f64> = bv.iter().copied().collect();
        for (lane, w) in v.lanes_mut(Axis(v.ndim() - 1)).into_iter().zip(flat_b.iter()) {
            let mut lane = lane;
            for x in lane.iter_mut() {
                *x *= w;
            }
        }
        debug_assert!(d > 0);
        self.push(v, Op::MulLast1 { a, b })
    }

    /// Elementwise division by a single-element node.
    pub fn div_by_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let sv = self.scalar(s);
        let v = self.value(a) / sv;
        self.push(v, Op::DivByScalar { a, s })
    }

    /// Cross-correlation with zero "same" padding of (k-1)/2; odd kernels only.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize) -> NodeId {
        let x = view3(self.value(input));
        let w = self
            .value(kernel)
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("conv2d: kernel must be 4-d");
        let (h, wd, cin) = x.dim();
        let (kh, kw, kcin, cout) = w.dim();
        assert_eq!(cin, kcin, "conv2d: channel mismatch");
        assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d: odd kernels only");
        let (ph, pw) = (kh / 2, kw / 2);
        let oh = (h + 2 * ph - kh) / stride + 1;
        let ow = (wd + 2 * pw - kw) / stride + 1;
        let mut out = ndarray::Array3::zeros((oh, ow, cout));
        for i in 0..oh {
            for j in 0..ow {
                for a in 0..kh {
                    let ih = (i * stride + a) as isize - ph as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for b in 0..kw {
                        let iw = (j * stride + b) as isize - pw as isize;
                        if iw < 0 || iw >= wd as isize {
                            continue;
                        }
                        for ci in 0..cin {
                            let xv = x[[ih as usize, iw as usize, ci]];
                            if xv == 0.0 {
                                continue;
                            }
                            for co in 0..cout {
                                out[[i, j, co]] += xv * w[[a, b, ci, co]];
                            }
                        }
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::Conv2d { input, kernel, stride })
    }

    pub fn resize2d(&mut self, src: NodeId, plan: ResizePlan) -> NodeId {
        let s = view3(self.value(src));
        let c = s.dim().2;
        let mut out = ndarray::Array3::zeros((plan.out_h, plan.out_w, c));
        for oh in 0..plan.out_h {
            for ow in 0..plan.out_w {
                for &(ih, iw, wt) in &plan.taps[oh * plan.out_w + ow] {
                    for ch in 0..c {
                        out[[oh, ow, ch]] += wt * s[[ih, iw, ch]];
                    }
                }
            }
        }
        self.push(out.into_dyn(), Op::Resize2d { src, plan })
    }

    /// rows: (m, d) placed at `cells[m]` on an h x w grid, zeros elsewhere.
    pub fn scatter_cells(&mut self, rows: NodeId, cells: &[(usize, usize)], h: usize, w: usize) -> NodeId {
        let r = view2(self.value(rows));
        assert_eq!(r.nrows(), cells.len());
        let d = r.ncols();
        let mut out = ndarray::Array3::zeros((h, w, d));
        for (m, &(ch, cw)) in cells.iter().enumerate() {
            out.slice_mut(ndarray::s![ch, cw, ..]).assign(&r.row(m));
        }
        self.push(out.into_dyn(), Op::ScatterCells { rows, cells: cells.to_vec() })
    }

    /// Optimal rotation aligning weighted centered source points to targets,
    /// from their 3x3 cross-covariance. Backward differentiates through the
    /// SVD; near-equal singular value pairs get a clamped denominator.
    pub fn rotation_from_cov(&mut self, cov: NodeId) -> NodeId {
        let h = self.value(cov);
        let (_u, _s, _v, r) = kabsch_rotation_parts(h);
        self.push(r, Op::RotationFromCov { cov })
    }

    /// Accumulated gradients of the (single-element) node `loss`.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        let mut grads: Vec<Option<Value>> = vec![None; self.nodes.len()];
        assert_eq!(self.value(loss).len(), 1, "backward: loss must be scalar");
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), 1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf | Op::Constant => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    self.accum(&mut grads, *a, ga);
                    self.accum(&mut grads, *b, gb);
                }
                Op::Neg(a) => self.accum(&mut grads, *a, -g),
                Op::Scale(a, c) => self.accum(&mut grads, *a, &g * *c),
                Op::Offset(a) => self.accum(&mut grads, *a, g),
                Op::Matmul(a, b) => {
                    let gv = view2(&g);
                    let av = view2(self.value(*a));
                    let bv = view2(self.value(*b));
                    let ga = gv.dot(&bv.t()).into_dyn();
                    let gb = av.t().dot(&gv).into_dyn();
                    self.accum(&mut grads, *a, ga);
                    self.accum(&mut grads, *b, gb);
                }
                Op::Transpose(a) => {
                    let gt = view2(&g).t().to_owned().into_dyn();
                    self.accum(&mut grads, *a, gt);
                }
                Op::Reshape(a) => {
                    let target = self.value(*a).raw_dim();
                    let gr = g.into_shape(target).expect("reshape backward");
                    self.accum(&mut grads, *a, gr);
                }
                Op::Concat { axis, parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(*p).shape()[*axis];
                        let piece = g
                            .slice_axis(Axis(*axis), ndarray::Slice::from(offset..offset + len))
                            .to_owned();
                        self.accum(&mut grads, *p, piece);
                        offset += len;
                    }
                }
                Op::GatherRows { src, idx } => {
                    let mut gs = ArrayD::zeros(self.value(*src).raw_dim());
                    {
                        let mut gs2 = gs.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
                        let gv = view2(&g);
                        for (i, &r) in idx.iter().enumerate() {
                            let mut row = gs2.row_mut(r);
                            row += &gv.row(i);
                        }
                    }
                    self.accum(&mut grads, *src, gs);
                }
                Op::GatherNeighbors { src, idx } => {
                    let mut gs = ArrayD::zeros(self.value(*src).raw_dim());
                    {
                        let mut gs2 = gs.view_mut().into_dimensionality::<ndarray::Ix2>().unwrap();
                        let gv = view3(&g);
                        let (n, k, d) = gv.dim();
                        for i in 0..n {
                            for j in 0..k {
                                let r = idx[[i, j]];
                                for c in 0..d {
                                    gs2[[r, c]] += gv[[i, j, c]];
                                }
                            }
                        }
                    }
                    self.accum(&mut grads, *src, gs);
                }
                Op::Repeat { src } => {
                    let gs = g.sum_axis(Axis(1));
                    self.accum(&mut grads, *src, gs);
                }
                Op::SumAll(a) => {
                    let gv = g.iter().next().copied().unwrap();
                    let ga = ArrayD::from_elem(self.value(*a).raw_dim(), gv);
                    self.accum(&mut grads, *a, ga);
                }
                Op::SumAxis { src, axis } => {
                    let target = self.value(*src).raw_dim();
                    let expanded = g.insert_axis(Axis(*axis));
                    let gb = expanded.broadcast(target.clone()).unwrap().to_owned();
                    self.accum(&mut grads, *src, gb);
                }
                Op::MaxAxis { src, axis } => {
                    let sv = self.value(*src);
                    let mut gs = ArrayD::zeros(sv.raw_dim());
                    let out = &self.nodes[i].value;
                    // route gradient to the first occurrence of the max
                    let n_along = sv.shape()[*axis];
                    for (out_idx, out_val) in out.indexed_iter() {
                        let gval = g[&out_idx];
                        if gval == 0.0 {
                            continue;
                        }
                        for j in 0..n_along {
                            let mut full = out_idx.as_array_view().to_vec();
                            full.insert(*axis, j);
                            if sv[IxDyn(&full)] == *out_val {
                                gs[IxDyn(&full)] += gval;
                                break;
                            }
                        }
                    }
                    self.accum(&mut grads, *src, gs);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    let ga = &g * &(y * &(1.0 - y));
                    self.accum(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let ga = &g * &(1.0 - y * y);
                    self.accum(&mut grads, *a, ga);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.value(*a);
                    let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { *slope });
                    self.accum(&mut grads, *a, &g * &mask);
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let mask = x.mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    self.accum(&mut grads, *a, &g * &mask);
                }
                Op::Exp(a) => {
                    let y = &self.nodes[i].value;
                    self.accum(&mut grads, *a, &g * y);
                }
                Op::Ln(a) => {
                    let x = self.value(*a);
                    self.accum(&mut grads, *a, &g / x);
                }
                Op::SqrtGuard(a) => {
                    let x = self.value(*a);
                    let y = &self.nodes[i].value;
                    let mut ga = g.clone();
                    ndarray::Zip::from(&mut ga).and(x).and(y).for_each(|gi, &xi, &yi| {
                        *gi = if xi > 0.0 { *gi * 0.5 / yi } else { 0.0 };
                    });
                    self.accum(&mut grads, *a, ga);
                }
                Op::Abs(a) => {
                    let x = self.value(*a);
                    let sign = x.mapv(|v| {
                        if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    self.accum(&mut grads, *a, &g * &sign);
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.value(*a);
                    let mask = x.mapv(|v| if v > *lo && v < *hi { 1.0 } else { 0.0 });
                    self.accum(&mut grads, *a, &g * &mask);
                }
                Op::SoftmaxLast(a) => {
                    let y = &self.nodes[i].value;
                    let mut ga = g.clone();
                    let last = y.ndim() - 1;
                    for (mut glane, ylane) in
                        ga.lanes_mut(Axis(last)).into_iter().zip(y.lanes(Axis(last)))
                    {
                        let dot: f64 = glane.iter().zip(ylane.iter()).map(|(a, b)| a * b).sum();
                        for (gi, yi) in glane.iter_mut().zip(ylane.iter()) {
                            *gi = yi * (*gi - dot);
                        }
                    }
                    self.accum(&mut grads, *a, ga);
                }
                Op::AttnScores { q, k } => {
                    let qv = view2(self.value(*q));
                    let kv = view3(self.value(*k));
                    let gv = view2(&g);
                    let (n, kk, d) = kv.dim();
                    let mut gq = Array2::zeros((n, d));
                    let mut gk = ndarray::Array3::zeros((n, kk, d));
                    for i2 in 0..n {
                        for j in 0..kk {
                            let gij = gv[[i2, j]];
                            if gij == 0.0 {
                                continue;
                            }
                            for c in 0..d {
                                gq[[i2, c]] += gij * kv[[i2, j, c]];
                                gk[[i2, j, c]] += gij * qv[[i2, c]];
                            }
                        }
                    }
                    self.accum(&mut grads, *q, gq.into_dyn());
                    self.accum(&mut grads, *k, gk.into_dyn());
                }
                Op::AttnApply { w, v } => {
                    let wv = view2(self.value(*w));
                    let vv = view3(self.value(*v));
                    let gv = view2(&g);
                    let (n, kk, d) = vv.dim();
                    let mut gw = Array2::zeros((n, kk));
                    let mut gvv = ndarray::Array3::zeros((n, kk, d));
                    for i2 in 0..n {
                        for j in 0..kk {
                            let mut acc = 0.0;
                            for c in 0..d {
                                acc += gv[[i2, c]] * vv[[i2, j, c]];
                                gvv[[i2, j, c]] += wv[[i2, j]] * gv[[i2, c]];
                            }
                            gw[[i2, j]] = acc;
                        }
                    }
                    self.accum(&mut grads, *w, gw.into_dyn());
                    self.accum(&mut grads, *v, gvv.into_dyn());
                }
                Op::AddRow { a, b } => {
                    let d = self.value(*b).len();
                    let mut gb = Array1::<f64>::zeros(d);
                    for lane in g.lanes(Axis(g.ndim() - 1)) {
                        for (acc, x) in gb.iter_mut().zip(lane.iter()) {
                            *acc += x;
                        }
                    }
                    self.accum(&mut grads, *a, g);
                    self.accum(&mut grads, *b, gb.into_dyn());
                }
                Op::MulLast1 { a, b } => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let mut ga = g.clone();
                    let flat_b: Vec<f64> = bv.iter().copied().collect();
                    for (mut lane, w) in
                        ga.lanes_mut(Axis(ga.ndim() - 1)).into_iter().zip(flat_b.iter())
                    {
                        for x in lane.iter_mut() {
                            *x *= w;
                        }
                    }
                    let mut gb = ArrayD::zeros(bv.raw_dim());
                    {
                        let gb_flat = gb.as_slice_memory_order_mut().unwrap();
                        for ((lane_g, lane_a), acc) in g
                            .lanes(Axis(g.ndim() - 1))
                            .into_iter()
                            .zip(av.lanes(Axis(av.ndim() - 1)))
                            .zip(gb_flat.iter_mut())
                        {
                            *acc = lane_g.iter().zip(lane_a.iter()).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accum(&mut grads, *a, ga);
                    self.accum(&mut grads, *b, gb);
                }
                Op::DivByScalar { a, s } => {
                    let sv = self.scalar(*s);
                    let av = self.value(*a);
                    let ga = &g / sv;
                    let gs = -(&g * av).sum() / (sv * sv);
                    self.accum(&mut grads, *a, ga);
                    self.accum(&mut grads, *s, ArrayD::from_elem(IxDyn(&[1]), gs));
                }
                Op::Conv2d { input, kernel, stride } => {
                    let x = view3(self.value(*input));
                    let w = self
                        .value(*kernel)
                        .view()
                        .into_dimensionality::<ndarray::Ix4>()
                        .unwrap();
                    let gv = view3(&g);
                    let (h, wd, cin) = x.dim();
                    let (kh, kw, _, cout) = w.dim();
                    let (ph, pw) = (kh / 2, kw / 2);
                    let (oh, ow, _) = gv.dim();
                    let mut gx = ndarray::Array3::zeros((h, wd, cin));
                    let mut gw = ndarray::Array4::zeros(w.dim());
                    for i2 in 0..oh {
                        for j in 0..ow {
                            for a in 0..kh {
                                let ih = (i2 * stride + a) as isize - ph as isize;
                                if ih < 0 || ih >= h as isize {
                                    continue;
                                }
                                for b in 0..kw {
                                    let iw = (j * stride + b) as isize - pw as isize;
                                    if iw < 0 || iw >= wd as isize {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        let xv = x[[ih as usize, iw as usize, ci]];
                                        for co in 0..cout {
                                            let go = gv[[i2, j, co]];
                                            gx[[ih as usize, iw as usize, ci]] +=
                                                go * w[[a, b, ci, co]];
                                            gw[[a, b, ci, co]] += go * xv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accum(&mut grads, *input, gx.into_dyn());
                    self.accum(&mut grads, *kernel, gw.into_dyn());
                }
                Op::Resize2d { src, plan } => {
                    let mut gs = ArrayD::zeros(self.value(*src).raw_dim());
                    {
                        let mut gs3 = gs.view_mut().into_dimensionality::<ndarray::Ix3>().unwrap();
                        let gv = view3(&g);
                        let c = gv.dim().2;
                        for oh in 0..plan.out_h {
                            for ow in 0..plan.out_w {
                                for &(ih, iw, wt) in &plan.taps[oh * plan.out_w + ow] {
                                    for ch in 0..c {
                                        gs3[[ih, iw, ch]] += wt * gv[[oh, ow, ch]];
                                    }
                                }
                            }
                        }
                    }
                    self.accum(&mut grads, *src, gs);
                }
                Op::ScatterCells { rows, cells } => {
                    let gv = view3(&g);
                    let d = gv.dim().2;
                    let mut gr = Array2::zeros((cells.len(), d));
                    for (m, &(ch, cw)) in cells.iter().enumerate() {
                        for c in 0..d {
                            gr[[m, c]] = gv[[ch, cw, c]];
                        }
                    }
                    self.accum(&mut grads, *rows, gr.into_dyn());
                }
                Op::RotationFromCov { cov } => {
                    let h = self.value(*cov);
                    let gh = kabsch_rotation_backward(h, &g);
                    self.accum(&mut grads, *cov, gh);
                }
            }
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Value>], id: NodeId, g: Value) {
        match &mut grads[id.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }
}

/// SVD pieces of a 3x3 covariance, singular values sorted descending, plus
/// the proper rotation R = U diag(1, 1, det(U V^T)) V^T.
fn kabsch_rotation_parts(
    h: &Value,
) -> (nalgebra::Matrix3<f64>, nalgebra::Vector3<f64>, nalgebra::Matrix3<f64>, Value) {
    let hv = view2(h);
    assert_eq!(hv.dim(), (3, 3), "rotation_from_cov: expected 3x3");
    let m = nalgebra::Matrix3::from_fn(|r, c| hv[[r, c]]);
    let svd = nalgebra::SVD::new(m, true, true);
    let mut u = svd.u.unwrap();
    let mut vt = svd.v_t.unwrap();
    let mut s = svd.singular_values;
    // sort descending
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap());
    let (su, svt, ss) = (u, vt, s);
    for (dst, &src) in order.iter().enumerate() {
        u.set_column(dst, &su.column(src).into_owned());
        vt.set_row(dst, &svt.row(src).into_owned());
        s[dst] = ss[src];
    }
    let v = vt.transpose();
    let d = (u.determinant() * v.determinant()).signum();
    let dm = nalgebra::Matrix3::from_diagonal(&nalgebra::Vector3::new(1.0, 1.0, d));
    let r = u * dm * v.transpose();
    let mut out = Array2::zeros((3, 3));
    for i in 0..3 {
        for j in 0..3 {
            out[[i, j]] = r[(i, j)];
        }
    }
    (u, s, v, out.into_dyn())
}

/// dL/dH for R = kabsch_rotation(H), given dL/dR.
fn kabsch_rotation_backward(h: &Value, r_bar: &Value) -> Value {
    let (u, s, v, _r) = kabsch_rotation_parts(h);
    let d = (u.determinant() * v.determinant()).signum();
    let dd = [1.0, 1.0, d];
    let rb = view2(r_bar);
    let rbm = nalgebra::Matrix3::from_fn(|r, c| rb[[r, c]]);
    let g = u.transpose() * rbm * v;
    let mut p_bar = nalgebra::Matrix3::zeros();
    for a in 0..3 {
        for b in 0..3 {
            if a == b {
                continue;
            }
            let denom = s[b] * s[b] - s[a] * s[a];
            let f = if denom.abs() < 1e-12 {
                if denom >= 0.0 { 1e12 } else { -1e12 }
            } else {
                1.0 / denom
            };
            let a_ab = g[(a, b)] * dd[b];
            let b_ab = -g[(a, b)] * dd[a];
            p_bar[(a, b)] += f * (a_ab * s[b] + b_ab * s[a]);
            p_bar[(b, a)] += f * (a_ab * s[a] + b_ab * s[b]);
        }
    }
    let h_bar = u * p_bar * v.transpose();
    let mut out = Array2::zeros((3, 3));
    for i in 0..3 {
        for j in 0..3 {
            out[[i, j]] = h_bar[(i, j)];
        }
    }
    out.into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{fd_grad, max_rel_err};
    use ndarray::{arr1, arr2, Array3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randv(shape: &[usize], rng: &mut ChaCha8Rng) -> Value {
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// FD-checks d(sum f(x))/dx for a graph builder.
    fn check_unary(shape: &[usize], build: impl Fn(&mut Tape, NodeId) -> NodeId, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x0 = randv(shape, &mut rng);
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = build(&mut tape, x);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        let analytic = grads.get(x).unwrap().clone();
        let numeric = fd_grad(
            &mut |v: &Value| {
                let mut t = Tape::new();
                let xi = t.leaf(v.clone());
                let yi = build(&mut t, xi);
                let l = t.sum_all(yi);
                t.scalar(l)
            },
            &x0,
            1e-6,
        );
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < tol, "max rel err {err}");
    }

    #[test]
    fn elementwise_and_reductions_match_fd() {
        check_unary(&[3, 4], |t, x| t.sigmoid(x), 1e-7);
        check_unary(&[3, 4], |t, x| t.tanh(x), 1e-7);
        check_unary(&[3, 4], |t, x| t.leaky_relu(x, 0.1), 1e-6);
        check_unary(&[5], |t, x| t.exp(x), 1e-7);
        check_unary(&[2, 3], |t, x| {
            let y = t.mul(x, x);
            t.sum_axis(y, 1)
        }, 1e-7);
        // weight the softmax so the loss is not the constant row count
        check_unary(&[4, 3], |t, x| {
            let y = t.softmax_last(x);
            let w = t.constant2(arr2(&[
                [0.9, -0.3, 0.4],
                [0.2, 1.5, -0.7],
                [-1.1, 0.6, 0.3],
                [0.5, -0.2, 1.0],
            ]));
            t.mul(y, w)
        }, 1e-6);
        check_unary(&[3, 3], |t, x| {
            let s = t.sum_all(x);
            let s2 = t.offset(s, 7.0);
            t.div_by_scalar(x, s2)
        }, 1e-6);
    }

    #[test]
    fn max_axis_matches_fd_on_separated_values() {
        // max is non-smooth at ties; use well-separated entries
        let x0 = arr2(&[[0.3, -0.7, 1.2, 0.05, -0.4], [2.0, 0.4, -1.3, 0.9, 0.1]]).into_dyn();
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = tape.max_axis(x, 1);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        let numeric = fd_grad(
            &mut |v: &Value| {
                let mut t = Tape::new();
                let xi = t.leaf(v.clone());
                let yi = t.max_axis(xi, 1);
                let l = t.sum_all(yi);
                t.scalar(l)
            },
            &x0,
            1e-6,
        );
        assert!(max_rel_err(grads.get(x).unwrap(), &numeric) < 1e-7);
    }

    #[test]
    fn matmul_and_gather_match_fd() {
        check_unary(&[3, 4], |t, x| {
            let w = t.constant2(arr2(&[[0.3, -0.2], [0.1, 0.5], [-0.4, 0.2], [0.7, -0.1]]));
            t.matmul(x, w)
        }, 1e-7);
        check_unary(&[5, 3], |t, x| {
            let idx = ndarray::arr2(&[[0usize, 2], [4, 4], [1, 0]]);
            t.gather_neighbors(x, &idx)
        }, 1e-7);
        check_unary(&[4, 2], |t, x| t.gather_rows(x, &[3, 3, 0, 1]), 1e-7);
        check_unary(&[3, 2], |t, x| t.repeat_mid(x, 4), 1e-7);
    }

    #[test]
    fn attention_primitives_match_fd() {
        check_unary(&[3, 4], |t, x| {
            let idx = ndarray::arr2(&[[0usize, 1], [2, 0], [1, 1]]);
            let k = t.gather_neighbors(x, &idx);
            let s = t.attn_scores(x, k);
            let sm = t.softmax_last(s);
            t.attn_apply(sm, k)
        }, 1e-6);
    }

    #[test]
    fn conv_and_grid_ops_match_fd() {
        check_unary(&[4, 5, 2], |t, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let k = randv(&[3, 3, 2, 3], &mut rng);
            let k = t.leaf(k);
            t.conv2d(x, k, 1)
        }, 1e-6);
        check_unary(&[4, 4, 2], |t, x| {
            let k = t.constant(ArrayD::from_elem(IxDyn(&[3, 3, 2, 2]), 0.21));
            t.conv2d(x, k, 2)
        }, 1e-6);
        check_unary(&[6, 6, 2], |t, x| t.resize2d(x, ResizePlan::new(6, 6, 3, 3)), 1e-6);
        check_unary(&[2, 2, 3], |t, x| t.resize2d(x, ResizePlan::new(2, 2, 5, 5)), 1e-6);
        check_unary(&[3, 2], |t, x| t.scatter_cells(x, &[(0, 1), (2, 2), (1, 0)], 4, 3), 1e-7);
    }

    #[test]
    fn conv2d_kernel_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = randv(&[4, 4, 2], &mut rng);
        let k0 = randv(&[3, 3, 2, 2], &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(x0.clone());
        let k = tape.leaf(k0.clone());
        let y = tape.conv2d(x, k, 1);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss);
        let analytic = grads.get(k).unwrap().clone();
        let numeric = fd_grad(
            &mut |v: &Value| {
                let mut t = Tape::new();
                let xi = t.constant(x0.clone());
                let ki = t.leaf(v.clone());
                let yi = t.conv2d(xi, ki, 1);
                let l = t.sum_all(yi);
                t.scalar(l)
            },
            &k0,
            1e-6,
        );
        assert!(max_rel_err(&analytic, &numeric) < 1e-7);
    }

    #[test]
    fn rotation_from_cov_matches_fd() {
        // generic covariance with well-separated singular values
        let h0 = arr2(&[[2.0, 0.3, -0.1], [0.2, 1.1, 0.4], [-0.3, 0.2, 0.6]]).into_dyn();
        let weights = arr2(&[[0.7, -0.2, 0.5], [0.1, 0.9, -0.3], [0.4, 0.2, 0.8]]).into_dyn();
        let w = weights.clone();
        let mut tape = Tape::new();
        let h = tape.leaf(h0.clone());
        let r = tape.rotation_from_cov(h);
        let wn = tape.constant(w.clone());
        let p = tape.mul(r, wn);
        let loss = tape.sum_all(p);
        let grads = tape.backward(loss);
        let analytic = grads.get(h).unwrap().clone();
        let numeric = fd_grad(
            &mut |v: &Value| {
                let mut t = Tape::new();
                let hi = t.leaf(v.clone());
                let ri = t.rotation_from_cov(hi);
                let wi = t.constant(w.clone());
                let pi = t.mul(ri, wi);
                let l = t.sum_all(pi);
                t.scalar(l)
            },
            &h0,
            1e-6,
        );
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-5, "rotation backward err {err}");
    }

    #[test]
    fn rotation_from_cov_is_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let h0 = randv(&[3, 3], &mut rng);
            let mut tape = Tape::new();
            let h = tape.leaf(h0);
            let r = tape.rotation_from_cov(h);
            let rv = view2(tape.value(r));
            let m = nalgebra::Matrix3::from_fn(|a, b| rv[[a, b]]);
            let err = (m.transpose() * m - nalgebra::Matrix3::identity()).norm();
            assert!(err < 1e-9);
            assert!((m.determinant() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn concat_and_row_ops_match_fd() {
        check_unary(&[3, 2], |t, x| {
            let other = t.constant2(arr2(&[[1.0, 2.0, 3.0], [0.5, -1.0, 0.2], [0.0, 0.1, 0.4]]));
            t.concat(1, &[x, other])
        }, 1e-7);
        check_unary(&[3], |t, x| {
            let a = t.constant2(arr2(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]));
            t.add_row(a, x)
        }, 1e-7);
        check_unary(&[4, 1], |t, x| {
            let a = t.constant2(arr2(&[
                [1.0, 2.0],
                [3.0, -1.0],
                [0.5, 0.5],
                [2.0, 0.0],
            ]));
            t.mul_last1(a, x)
        }, 1e-7);
        check_unary(&[2, 3, 1], |t, x| {
            let a = t.constant(Array3::from_shape_fn((2, 3, 2), |(i, j, k)| {
                (i + 2 * j + k) as f64 * 0.3
            }).into_dyn());
            t.mul_last1(a, x)
        }, 1e-7);
    }

    #[test]
    fn abs_clamp_sqrt_match_fd() {
        check_unary(&[6], |t, x| {
            let y = t.offset(x, 0.3);
            t.abs(y)
        }, 1e-6);
        check_unary(&[6], |t, x| t.clamp(x, -0.5, 0.5), 1e-6);
        check_unary(&[5], |t, x| {
            let y = t.mul(x, x);
            let y = t.offset(y, 0.1);
            t.sqrt_guard(y)
        }, 1e-6);
        check_unary(&[4], |t, x| {
            let y = t.sigmoid(x);
            let y = t.clamp(y, 1e-7, 1.0 - 1e-7);
            t.ln(y)
        }, 1e-6);
    }

    #[test]
    fn scalar_helpers() {
        let mut tape = Tape::new();
        let x = tape.constant1(arr1(&[1.0, 2.0, 3.0]));
        let s = tape.sum_all(x);
        assert_eq!(tape.scalar(s), 6.0);
        let m = tape.mean_all(x);
        assert!((tape.scalar(m) - 2.0).abs() < 1e-15);
    }
}
