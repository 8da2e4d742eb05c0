//! Minimal reverse-mode automatic differentiation over f64 ndarray tensors.
//!
//! A [`Graph`] is a single-use tape: builder methods evaluate eagerly and
//! append one node per tensor operation, [`Graph::backward`] then walks the
//! tape once in reverse. Node ids are creation-ordered, which is already a
//! topological order, so no explicit sorting is needed.
//!
//! Conventions: feature maps are `[B, C, H, W]`, feature vectors `[B, D]`,
//! losses are 0-dimensional scalars. Only same-shape elementwise ops are
//! provided; broadcasting is intentionally absent.

mod conv;

use std::ops::{AddAssign, SubAssign};

use ndarray::{Array1, Array2, ArrayD, Axis, Ix2, Ix4, IxDyn};

/// Probabilities are floored at this value before any logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

const BN_EPS: f64 = 1e-5;

/// Index of a node on the tape.
pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Relu(NodeId),
    Tanh(NodeId),
    Abs(NodeId),
    Square(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddConst(NodeId),
    CurveStep { img: NodeId, map: NodeId },
    Conv2d { x: NodeId, w: NodeId, b: NodeId, stride: usize },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Concat1(Vec<NodeId>),
    Slice1 { x: NodeId, start: usize },
    AvgPool { x: NodeId, k: usize },
    MeanChannels(NodeId),
    MeanSpatial(NodeId),
    DiffX(NodeId),
    DiffY(NodeId),
    MeanAll(NodeId),
    SumAll(NodeId),
    Softmax(NodeId),
    NllFromProbs { probs: NodeId, labels: Vec<usize> },
    LogClamped(NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Array2<f64>,
        inv_std: Array1<f64>,
        training: bool,
    },
    Dropout { x: NodeId, mask: Array2<f64> },
}

struct Node {
    value: ArrayD<f64>,
    grad: Option<ArrayD<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Single-use eager tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    /// The value of a 0-dimensional node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = &self.nodes[id].value;
        assert_eq!(v.ndim(), 0, "node is not a scalar");
        *v.first().unwrap()
    }

    /// Gradient accumulated on a leaf after [`Graph::backward`].
    ///
    /// `None` means no gradient path reached the leaf.
    pub fn grad(&self, id: NodeId) -> Option<&ArrayD<f64>> {
        self.nodes[id].grad.as_ref()
    }

    fn push(&mut self, value: ArrayD<f64>, needs_grad: bool, op: Op) -> NodeId {
        // every node value is kept in standard layout: kernels slice raw
        // buffers, and ndarray ops like concatenate return strided results
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().to_owned()
        };
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        self.nodes.len() - 1
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    /// A differentiable input (parameter) node.
    pub fn leaf(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    /// A node that never receives gradient.
    pub fn constant(&mut self, value: ArrayD<f64>) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Copies a node's value into a fresh constant, cutting the gradient
    /// path (used for the distillation teacher).
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id].value.clone();
        self.constant(v)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|a| a.max(0.0));
        self.push(v, self.needs(x), Op::Relu(x))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(f64::tanh);
        self.push(v, self.needs(x), Op::Tanh(x))
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(f64::abs);
        self.push(v, self.needs(x), Op::Abs(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|a| a * a);
        self.push(v, self.needs(x), Op::Square(x))
    }

    fn assert_same_shape(&self, a: NodeId, b: NodeId, what: &str) {
        assert_eq!(
            self.nodes[a].value.shape(),
            self.nodes[b].value.shape(),
            "{what}: shape mismatch"
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "add");
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, self.needs(a) || self.needs(b), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "sub");
        let v = &self.nodes[a].value - &self.nodes[b].value;
        self.push(v, self.needs(a) || self.needs(b), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape(a, b, "mul");
        let v = &self.nodes[a].value * &self.nodes[b].value;
        self.push(v, self.needs(a) || self.needs(b), Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.nodes[x].value.mapv(|a| a * c);
        self.push(v, self.needs(x), Op::Scale(x, c))
    }

    pub fn add_const(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = self.nodes[x].value.mapv(|a| a + c);
        self.push(v, self.needs(x), Op::AddConst(x))
    }

    /// One quadratic curve adjustment `I + A ⊙ I ⊙ (1 − I)`.
    pub fn curve_step(&mut self, img: NodeId, map: NodeId) -> NodeId {
        self.assert_same_shape(img, map, "curve_step");
        let i = &self.nodes[img].value;
        let a = &self.nodes[map].value;
        let mut v = i.clone();
        ndarray::Zip::from(&mut v).and(i).and(a).for_each(|o, &iv, &av| {
            *o = iv + av * iv * (1.0 - iv);
        });
        self.push(v, self.needs(img) || self.needs(map), Op::CurveStep { img, map })
    }

    /// Same-padded convolution; `x` is `[B, Cin, H, W]`, `w` is
    /// `[Cout, Cin, k, k]` with odd `k`, `b` is `[Cout]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().expect("conv input 4d");
        let wv = self.nodes[w].value.view().into_dimensionality::<Ix4>().expect("conv weight 4d");
        let bv = self.nodes[b].value.view().into_dimensionality::<ndarray::Ix1>().expect("conv bias 1d");
        let out = conv::forward(&xv, &wv, &bv.to_owned(), stride);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(out.into_dyn(), needs, Op::Conv2d { x, w, b, stride })
    }

    /// Fully-connected layer `x · wᵀ + b`; `x` is `[B, Din]`, `w` is
    /// `[Dout, Din]`, `b` is `[Dout]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix2>().expect("linear input 2d");
        let wv = self.nodes[w].value.view().into_dimensionality::<Ix2>().expect("linear weight 2d");
        assert_eq!(xv.ncols(), wv.ncols(), "linear: input dim mismatch");
        let bv = &self.nodes[b].value;
        let mut y = xv.dot(&wv.t());
        for mut row in y.rows_mut() {
            for (o, bb) in row.iter_mut().zip(bv.iter()) {
                *o += bb;
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(y.into_dyn(), needs, Op::Linear { x, w, b })
    }

    /// Concatenation along axis 1 (channels for 4-d, features for 2-d).
    pub fn concat1(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat shapes");
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(v, needs, Op::Concat1(parts.to_vec()))
    }

    /// Slice `start..end` along axis 1: feature columns of a `[B, D]`
    /// node or channels of a `[B, C, H, W]` node.
    pub fn slice1(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let xv = &self.nodes[x].value;
        assert!(start < end && end <= xv.shape()[1], "slice range");
        let v = xv
            .slice_axis(Axis(1), ndarray::Slice::from(start..end))
            .to_owned();
        self.push(v, self.needs(x), Op::Slice1 { x, start })
    }

    /// Non-overlapping k×k mean pooling; trailing partial regions are
    /// ignored.
    pub fn avg_pool(&mut self, x: NodeId, k: usize) -> NodeId {
        assert!(k >= 1);
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().expect("pool input 4d");
        let (bsz, c, h, w) = xv.dim();
        let (ho, wo) = (h / k, w / k);
        assert!(ho >= 1 && wo >= 1, "image smaller than one pooling region");
        let mut out = ndarray::Array4::zeros((bsz, c, ho, wo));
        let inv = 1.0 / (k * k) as f64;
        for bi in 0..bsz {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for yy in 0..k {
                            for xx in 0..k {
                                acc += xv[[bi, ci, oy * k + yy, ox * k + xx]];
                            }
                        }
                        out[[bi, ci, oy, ox]] = acc * inv;
                    }
                }
            }
        }
        self.push(out.into_dyn(), self.needs(x), Op::AvgPool { x, k })
    }

    /// Mean over the channel axis: `[B, C, H, W]` → `[B, 1, H, W]`.
    pub fn mean_channels(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().expect("mean_channels 4d");
        let (bsz, _, h, w) = xv.dim();
        let v = xv.mean_axis(Axis(1)).unwrap().into_shape_with_order((bsz, 1, h, w)).unwrap();
        self.push(v.into_dyn(), self.needs(x), Op::MeanChannels(x))
    }

    /// Mean over the spatial axes: `[B, C, H, W]` → `[B, C]`. Doubles as
    /// global average pooling.
    pub fn mean_spatial(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().expect("mean_spatial 4d");
        let (bsz, c, h, w) = xv.dim();
        let mut out = Array2::zeros((bsz, c));
        let inv = 1.0 / (h * w) as f64;
        for bi in 0..bsz {
            for ci in 0..c {
                out[[bi, ci]] = xv.index_axis(Axis(0), bi).index_axis(Axis(0), ci).sum() * inv;
            }
        }
        self.push(out.into_dyn(), self.needs(x), Op::MeanSpatial(x))
    }

    /// Forward difference along the last (width) axis of a 4-d node.
    pub fn diff_x(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().expect("diff 4d");
        let w = xv.dim().3;
        assert!(w >= 2, "diff_x needs width >= 2");
        let v = &xv.slice(ndarray::s![.., .., .., 1..]) - &xv.slice(ndarray::s![.., .., .., ..w - 1]);
        self.push(v.into_dyn(), self.needs(x), Op::DiffX(x))
    }

    /// Forward difference along the height axis of a 4-d node.
    pub fn diff_y(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().expect("diff 4d");
        let h = xv.dim().2;
        assert!(h >= 2, "diff_y needs height >= 2");
        let v = &xv.slice(ndarray::s![.., .., 1.., ..]) - &xv.slice(ndarray::s![.., .., ..h - 1, ..]);
        self.push(v.into_dyn(), self.needs(x), Op::DiffY(x))
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let m = self.nodes[x].value.mean().expect("mean of empty tensor");
        self.push(ArrayD::from_elem(IxDyn(&[]), m), self.needs(x), Op::MeanAll(x))
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.nodes[x].value.sum();
        self.push(ArrayD::from_elem(IxDyn(&[]), s), self.needs(x), Op::SumAll(x))
    }

    /// Row-wise softmax of a `[B, C]` node (max-shifted for stability).
    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix2>().expect("softmax 2d");
        let mut out = xv.to_owned();
        for mut row in out.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out.into_dyn(), self.needs(x), Op::Softmax(x))
    }

    /// Mean negative log probability of the true class over the batch,
    /// with probabilities floored at [`PROB_FLOOR`].
    pub fn nll_from_probs(&mut self, probs: NodeId, labels: &[usize]) -> NodeId {
        let pv = self.nodes[probs].value.view().into_dimensionality::<Ix2>().expect("nll 2d");
        assert_eq!(pv.nrows(), labels.len(), "nll: batch size mismatch");
        let classes = pv.ncols();
        let mut acc = 0.0;
        for (row, &label) in pv.rows().into_iter().zip(labels) {
            assert!(label < classes, "label {label} out of range {classes}");
            acc -= row[label].max(PROB_FLOOR).ln();
        }
        let v = ArrayD::from_elem(IxDyn(&[]), acc / labels.len() as f64);
        self.push(v, self.needs(probs), Op::NllFromProbs { probs, labels: labels.to_vec() })
    }

    /// `ln(max(x, PROB_FLOOR))` elementwise.
    pub fn log_clamped(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x].value.mapv(|a| a.max(PROB_FLOOR).ln());
        self.push(v, self.needs(x), Op::LogClamped(x))
    }

    /// Batch normalization of `[B, D]` features.
    ///
    /// In training mode the batch statistics are used (and differentiated
    /// through); in evaluation mode the supplied running statistics are
    /// treated as constants.
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running: Option<(&Array1<f64>, &Array1<f64>)>,
    ) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix2>().expect("batch_norm 2d");
        let (bsz, d) = xv.dim();
        let training = running.is_none();
        let (mean, var) = match running {
            Some((rm, rv)) => (rm.clone(), rv.clone()),
            None => {
                assert!(bsz >= 2, "training-mode batch norm needs a batch");
                let mean = xv.mean_axis(Axis(0)).unwrap();
                let mut var = Array1::zeros(d);
                for row in xv.rows() {
                    for (vi, (&v, &m)) in row.iter().zip(mean.iter()).enumerate() {
                        var[vi] += (v - m) * (v - m);
                    }
                }
                var.mapv_inplace(|v| v / bsz as f64);
                (mean, var)
            }
        };
        let inv_std = var.mapv(|v| 1.0 / (v + BN_EPS).sqrt());
        let mut xhat = xv.to_owned();
        for mut row in xhat.rows_mut() {
            for ((v, &m), &s) in row.iter_mut().zip(mean.iter()).zip(inv_std.iter()) {
                *v = (*v - m) * s;
            }
        }
        let g = &self.nodes[gamma].value;
        let bta = &self.nodes[beta].value;
        let mut out = xhat.clone();
        for mut row in out.rows_mut() {
            for ((v, &gv), &bv) in row.iter_mut().zip(g.iter()).zip(bta.iter()) {
                *v = *v * gv + bv;
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out.into_dyn(),
            needs,
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, training },
        )
    }

    /// Inverted dropout with a caller-supplied keep mask (entries 0 or
    /// 1/(1−p)); identity in evaluation mode is simply not building this op.
    pub fn dropout(&mut self, x: NodeId, mask: Array2<f64>) -> NodeId {
        let xv = self.nodes[x].value.view().into_dimensionality::<Ix2>().expect("dropout 2d");
        assert_eq!(xv.dim(), mask.dim(), "dropout mask shape");
        let v = (&xv * &mask).into_dyn();
        self.push(v, self.needs(x), Op::Dropout { x, mask })
    }

    fn add_grad(&mut self, id: NodeId, delta: ArrayD<f64>) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut self.nodes[id].grad {
            Some(g) => *g += &delta,
            slot @ None => {
                // keep stored grads in standard layout so callers can slice
                let delta = if delta.is_standard_layout() {
                    delta
                } else {
                    delta.as_standard_layout().to_owned()
                };
                *slot = Some(delta);
            }
        }
    }

    /// Reverse pass from a scalar loss. Leaf gradients remain readable via
    /// [`Graph::grad`]; intermediate gradients are dropped as they are
    /// consumed.
    pub fn backward(&mut self, loss: NodeId) {
        assert!(!self.backward_done, "backward may run once per graph");
        self.backward_done = true;
        assert_eq!(self.nodes[loss].value.ndim(), 0, "loss must be scalar");
        if !self.nodes[loss].needs_grad {
            return;
        }
        self.nodes[loss].grad = Some(ArrayD::from_elem(IxDyn(&[]), 1.0));
        for id in (0..=loss).rev() {
            if matches!(self.nodes[id].op, Op::Leaf) {
                continue;
            }
            let Some(gy) = self.nodes[id].grad.take() else {
                continue;
            };
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => unreachable!(),
                Op::Relu(x) => {
                    let d = ndarray::Zip::from(&gy)
                        .and(&self.nodes[x].value)
                        .map_collect(|&g, &xv| if xv > 0.0 { g } else { 0.0 });
                    self.add_grad(x, d);
                }
                Op::Tanh(x) => {
                    let d = ndarray::Zip::from(&gy)
                        .and(&self.nodes[id].value)
                        .map_collect(|&g, &y| g * (1.0 - y * y));
                    self.add_grad(x, d);
                }
                Op::Abs(x) => {
                    let d = ndarray::Zip::from(&gy)
                        .and(&self.nodes[x].value)
                        .map_collect(|&g, &xv| g * xv.signum() * if xv == 0.0 { 0.0 } else { 1.0 });
                    self.add_grad(x, d);
                }
                Op::Square(x) => {
                    let d = ndarray::Zip::from(&gy)
                        .and(&self.nodes[x].value)
                        .map_collect(|&g, &xv| 2.0 * xv * g);
                    self.add_grad(x, d);
                }
                Op::Add(a, b) => {
                    if self.needs(a) {
                        self.add_grad(a, gy.clone());
                    }
                    if self.needs(b) {
                        self.add_grad(b, gy);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(a) {
                        self.add_grad(a, gy.clone());
                    }
                    if self.needs(b) {
                        self.add_grad(b, gy.mapv(|g| -g));
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(a) {
                        let d = &gy * &self.nodes[b].value;
                        self.add_grad(a, d);
                    }
                    if self.needs(b) {
                        let d = &gy * &self.nodes[a].value;
                        self.add_grad(b, d);
                    }
                }
                Op::Scale(x, c) => self.add_grad(x, gy.mapv(|g| g * c)),
                Op::AddConst(x) => self.add_grad(x, gy),
                Op::CurveStep { img, map } => {
                    if self.needs(img) {
                        let d = ndarray::Zip::from(&gy)
                            .and(&self.nodes[img].value)
                            .and(&self.nodes[map].value)
                            .map_collect(|&g, &i, &a| g * (1.0 + a * (1.0 - 2.0 * i)));
                        self.add_grad(img, d);
                    }
                    if self.needs(map) {
                        let d = ndarray::Zip::from(&gy)
                            .and(&self.nodes[img].value)
                            .map_collect(|&g, &i| g * i * (1.0 - i));
                        self.add_grad(map, d);
                    }
                }
                Op::Conv2d { x, w, b, stride } => {
                    let xv = self.nodes[x].value.view().into_dimensionality::<Ix4>().unwrap();
                    let wv = self.nodes[w].value.view().into_dimensionality::<Ix4>().unwrap();
                    let gyv = gy.view().into_dimensionality::<Ix4>().unwrap();
                    let (dx, dw, db) = conv::backward(&xv, &wv, &gyv, stride);
                    if self.needs(x) {
                        self.add_grad(x, dx.into_dyn());
                    }
                    if self.needs(w) {
                        self.add_grad(w, dw.into_dyn());
                    }
                    if self.needs(b) {
                        self.add_grad(b, db.into_dyn());
                    }
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = {
                        let xv = self.nodes[x].value.view().into_dimensionality::<Ix2>().unwrap();
                        let wv = self.nodes[w].value.view().into_dimensionality::<Ix2>().unwrap();
                        let gyv = gy.view().into_dimensionality::<Ix2>().unwrap();
                        (
                            self.needs(x).then(|| gyv.dot(&wv)),
                            self.needs(w).then(|| gyv.t().dot(&xv)),
                            self.needs(b).then(|| gyv.sum_axis(Axis(0))),
                        )
                    };
                    if let Some(dx) = dx {
                        self.add_grad(x, dx.into_dyn());
                    }
                    if let Some(dw) = dw {
                        self.add_grad(w, dw.into_dyn());
                    }
                    if let Some(db) = db {
                        self.add_grad(b, db.into_dyn());
                    }
                }
                Op::Concat1(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let width = self.nodes[p].value.shape()[1];
                        if self.needs(p) {
                            let d = gy
                                .slice_axis(Axis(1), ndarray::Slice::from(start..start + width))
                                .to_owned();
                            self.add_grad(p, d);
                        }
                        start += width;
                    }
                }
                Op::Slice1 { x, start } => {
                    let mut d = ArrayD::zeros(self.nodes[x].value.raw_dim());
                    let width = gy.shape()[1];
                    d.slice_axis_mut(Axis(1), ndarray::Slice::from(start..start + width))
                        .assign(&gy);
                    self.add_grad(x, d);
                }
                Op::AvgPool { x, k } => {
                    let gyv = gy.view().into_dimensionality::<Ix4>().unwrap();
                    let (bsz, c, ho, wo) = gyv.dim();
                    let mut d = ArrayD::zeros(self.nodes[x].value.raw_dim());
                    let mut dv = d.view_mut().into_dimensionality::<Ix4>().unwrap();
                    let inv = 1.0 / (k * k) as f64;
                    for bi in 0..bsz {
                        for ci in 0..c {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let g = gyv[[bi, ci, oy, ox]] * inv;
                                    for yy in 0..k {
                                        for xx in 0..k {
                                            dv[[bi, ci, oy * k + yy, ox * k + xx]] += g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.add_grad(x, d);
                }
                Op::MeanChannels(x) => {
                    let shape = self.nodes[x].value.raw_dim();
                    let c = shape[1];
                    let gyv = gy.view().into_dimensionality::<Ix4>().unwrap();
                    let mut d = ArrayD::zeros(shape.clone());
                    let mut dv = d.view_mut().into_dimensionality::<Ix4>().unwrap();
                    let inv = 1.0 / c as f64;
                    for ci in 0..c {
                        dv.slice_mut(ndarray::s![.., ci..ci + 1, .., ..])
                            .assign(&gyv.mapv(|g| g * inv));
                    }
                    self.add_grad(x, d);
                }
                Op::MeanSpatial(x) => {
                    let shape = self.nodes[x].value.raw_dim();
                    let (h, w) = (shape[2], shape[3]);
                    let gyv = gy.view().into_dimensionality::<Ix2>().unwrap();
                    let inv = 1.0 / (h * w) as f64;
                    let mut d = ArrayD::zeros(shape.clone());
                    let mut dv = d.view_mut().into_dimensionality::<Ix4>().unwrap();
                    for bi in 0..shape[0] {
                        for ci in 0..shape[1] {
                            dv.slice_mut(ndarray::s![bi, ci, .., ..]).fill(gyv[[bi, ci]] * inv);
                        }
                    }
                    self.add_grad(x, d);
                }
                Op::DiffX(x) => {
                    let w = self.nodes[x].value.shape()[3];
                    let mut d = ArrayD::zeros(self.nodes[x].value.raw_dim());
                    {
                        let mut dv = d.view_mut().into_dimensionality::<Ix4>().unwrap();
                        let gyv = gy.view().into_dimensionality::<Ix4>().unwrap();
                        dv.slice_mut(ndarray::s![.., .., .., 1..]).add_assign(&gyv);
                        dv.slice_mut(ndarray::s![.., .., .., ..w - 1]).sub_assign(&gyv);
                    }
                    self.add_grad(x, d);
                }
                Op::DiffY(x) => {
                    let h = self.nodes[x].value.shape()[2];
                    let mut d = ArrayD::zeros(self.nodes[x].value.raw_dim());
                    {
                        let mut dv = d.view_mut().into_dimensionality::<Ix4>().unwrap();
                        let gyv = gy.view().into_dimensionality::<Ix4>().unwrap();
                        dv.slice_mut(ndarray::s![.., .., 1.., ..]).add_assign(&gyv);
                        dv.slice_mut(ndarray::s![.., .., ..h - 1, ..]).sub_assign(&gyv);
                    }
                    self.add_grad(x, d);
                }
                Op::MeanAll(x) => {
                    let n = self.nodes[x].value.len() as f64;
                    let g = *gy.first().unwrap() / n;
                    let d = ArrayD::from_elem(self.nodes[x].value.raw_dim(), g);
                    self.add_grad(x, d);
                }
                Op::SumAll(x) => {
                    let g = *gy.first().unwrap();
                    let d = ArrayD::from_elem(self.nodes[x].value.raw_dim(), g);
                    self.add_grad(x, d);
                }
                Op::Softmax(x) => {
                    let p = self.nodes[id].value.view().into_dimensionality::<Ix2>().unwrap();
                    let gyv = gy.view().into_dimensionality::<Ix2>().unwrap();
                    let mut d = Array2::zeros(p.dim());
                    for ((mut drow, prow), grow) in
                        d.rows_mut().into_iter().zip(p.rows()).zip(gyv.rows())
                    {
                        let dot: f64 = prow.iter().zip(grow.iter()).map(|(&a, &b)| a * b).sum();
                        for ((dv, &pv), &gv) in drow.iter_mut().zip(prow.iter()).zip(grow.iter()) {
                            *dv = pv * (gv - dot);
                        }
                    }
                    self.add_grad(x, d.into_dyn());
                }
                Op::NllFromProbs { probs, labels } => {
                    let g = *gy.first().unwrap();
                    let pv = self.nodes[probs].value.view().into_dimensionality::<Ix2>().unwrap();
                    let mut d = Array2::zeros(pv.dim());
                    let inv_b = 1.0 / labels.len() as f64;
                    for (bi, &label) in labels.iter().enumerate() {
                        let p = pv[[bi, label]];
                        if p >= PROB_FLOOR {
                            d[[bi, label]] = -g * inv_b / p;
                        }
                    }
                    self.add_grad(probs, d.into_dyn());
                }
                Op::LogClamped(x) => {
                    let d = ndarray::Zip::from(&gy)
                        .and(&self.nodes[x].value)
                        .map_collect(|&g, &xv| if xv >= PROB_FLOOR { g / xv } else { 0.0 });
                    self.add_grad(x, d);
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, training } => {
                    let (db, dg, dx) = {
                        let gyv = gy.view().into_dimensionality::<Ix2>().unwrap();
                        let (bsz, d) = gyv.dim();
                        let gv = &self.nodes[gamma].value;
                        let db = self.needs(beta).then(|| gyv.sum_axis(Axis(0)));
                        let dg = self.needs(gamma).then(|| (&gyv * &xhat).sum_axis(Axis(0)));
                        let dx = self.needs(x).then(|| {
                            let mut dxhat = gyv.to_owned();
                            for mut row in dxhat.rows_mut() {
                                for (v, &gvv) in row.iter_mut().zip(gv.iter()) {
                                    *v *= gvv;
                                }
                            }
                            if training {
                                let sum_dxhat = dxhat.sum_axis(Axis(0));
                                let sum_dxhat_xhat = (&dxhat * &xhat).sum_axis(Axis(0));
                                let mut dx = Array2::zeros((bsz, d));
                                let inv_b = 1.0 / bsz as f64;
                                for bi in 0..bsz {
                                    for di in 0..d {
                                        dx[[bi, di]] = inv_std[di]
                                            * inv_b
                                            * (bsz as f64 * dxhat[[bi, di]]
                                                - sum_dxhat[di]
                                                - xhat[[bi, di]] * sum_dxhat_xhat[di]);
                                    }
                                }
                                dx
                            } else {
                                let mut dx = dxhat;
                                for mut row in dx.rows_mut() {
                                    for (v, &s) in row.iter_mut().zip(inv_std.iter()) {
                                        *v *= s;
                                    }
                                }
                                dx
                            }
                        });
                        (db, dg, dx)
                    };
                    if let Some(db) = db {
                        self.add_grad(beta, db.into_dyn());
                    }
                    if let Some(dg) = dg {
                        self.add_grad(gamma, dg.into_dyn());
                    }
                    if let Some(dx) = dx {
                        self.add_grad(x, dx.into_dyn());
                    }
                }
                Op::Dropout { x, mask } => {
                    let gyv = gy.view().into_dimensionality::<Ix2>().unwrap();
                    let d = (&gyv * &mask).into_dyn();
                    self.add_grad(x, d);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array2, Array4};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of a scalar-valued graph against the
    /// analytic gradients of its leaf inputs.
    fn fd_check<F>(build: F, inputs: &[ArrayD<f64>], step: f64, tol: f64)
    where
        F: Fn(&mut Graph, &[NodeId]) -> NodeId,
    {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|v| g.leaf(v.clone())).collect();
        let loss = build(&mut g, &ids);
        let base_needs = g.nodes[loss].needs_grad;
        assert!(base_needs);
        g.backward(loss);

        let eval = |perturbed: &[ArrayD<f64>]| -> f64 {
            let mut g2 = Graph::new();
            let ids: Vec<NodeId> = perturbed.iter().map(|v| g2.leaf(v.clone())).collect();
            let l = build(&mut g2, &ids);
            g2.scalar_value(l)
        };

        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for (i, input) in inputs.iter().enumerate() {
            let analytic = g.grad(ids[i]).cloned().unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
            let n = input.len();
            for _ in 0..n.min(24) {
                let flat = rng.random_range(0..n);
                let mut plus: Vec<ArrayD<f64>> = inputs.to_vec();
                let mut minus: Vec<ArrayD<f64>> = inputs.to_vec();
                plus[i].as_slice_mut().unwrap()[flat] += step;
                minus[i].as_slice_mut().unwrap()[flat] -= step;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let a = analytic.as_slice().unwrap()[flat];
                let denom = a.abs().max(fd.abs()).max(1e-6);
                assert!(
                    ((a - fd) / denom).abs() < tol,
                    "input {i} flat {flat}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    fn rand4(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize), lo: f64, hi: f64) -> ArrayD<f64> {
        Array4::from_shape_fn(shape, |_| rng.random_range(lo..hi)).into_dyn()
    }

    fn rand2(rng: &mut ChaCha8Rng, shape: (usize, usize), lo: f64, hi: f64) -> ArrayD<f64> {
        Array2::from_shape_fn(shape, |_| rng.random_range(lo..hi)).into_dyn()
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand4(&mut rng, (2, 3, 4, 3), -1.0, 1.0);
        let b = rand4(&mut rng, (2, 3, 4, 3), -1.0, 1.0);
        fd_check(
            |g, ids| {
                let s = g.add(ids[0], ids[1]);
                let m = g.mul(s, ids[0]);
                let d = g.sub(m, ids[1]);
                let sq = g.square(d);
                let t = g.tanh(sq);
                let sc = g.scale(t, 0.7);
                let ac = g.add_const(sc, 0.1);
                g.mean_all(ac)
            },
            &[a, b],
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn relu_and_abs_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // keep values away from the kinks at 0
        let a = Array4::from_shape_fn((2, 2, 3, 3), |_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random::<bool>() { v } else { -v }
        })
        .into_dyn();
        fd_check(
            |g, ids| {
                let r = g.relu(ids[0]);
                let ab = g.abs(ids[0]);
                let s = g.add(r, ab);
                g.sum_all(s)
            },
            &[a],
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn curve_step_matches_finite_differences_and_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = rand4(&mut rng, (1, 3, 4, 4), 0.05, 0.95);
        let map = rand4(&mut rng, (1, 3, 4, 4), -0.9, 0.9);
        fd_check(
            |g, ids| {
                let c = g.curve_step(ids[0], ids[1]);
                let c2 = g.curve_step(c, ids[1]);
                g.mean_all(c2)
            },
            &[img.clone(), map],
            1e-5,
            1e-6,
        );

        let mut g = Graph::new();
        let i = g.leaf(img.clone());
        let zero = g.constant(ArrayD::zeros(img.raw_dim()));
        let out = g.curve_step(i, zero);
        assert_eq!(g.value(out), &img);
    }

    #[test]
    fn conv_and_linear_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand4(&mut rng, (2, 2, 5, 4), -1.0, 1.0);
        let w = rand4(&mut rng, (3, 2, 3, 3), -0.5, 0.5);
        let b = Array1::from_shape_fn(3, |_| rng.random_range(-0.2..0.2)).into_dyn();
        fd_check(
            |g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2], 2);
                let r = g.relu(y);
                let p = g.mean_spatial(r);
                g.sum_all(p)
            },
            &[x, w, b],
            1e-5,
            1e-5,
        );

        let x = rand2(&mut rng, (3, 4), -1.0, 1.0);
        let w = rand2(&mut rng, (2, 4), -0.5, 0.5);
        let b = Array1::from_shape_fn(2, |_| rng.random_range(-0.2..0.2)).into_dyn();
        fd_check(
            |g, ids| {
                let y = g.linear(ids[0], ids[1], ids[2]);
                let t = g.tanh(y);
                g.mean_all(t)
            },
            &[x, w, b],
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn reductions_and_pooling_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand4(&mut rng, (2, 3, 8, 8), -1.0, 1.0);
        fd_check(
            |g, ids| {
                let mc = g.mean_channels(ids[0]);
                let p = g.avg_pool(mc, 4);
                let dx = g.diff_x(p);
                let dy = g.diff_y(p);
                let ax = g.abs(dx);
                let ay = g.abs(dy);
                let sx = g.sum_all(ax);
                let sy = g.sum_all(ay);
                let tot = g.add(sx, sy);
                let ms = g.mean_spatial(ids[0]);
                let m = g.mean_all(ms);
                g.add(tot, m)
            },
            &[x],
            1e-5,
            1e-5,
        );
    }

    #[test]
    fn softmax_nll_and_kl_pieces_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = rand2(&mut rng, (3, 5), -2.0, 2.0);
        let labels = vec![0usize, 3, 2];
        fd_check(
            |g, ids| {
                let p = g.softmax(ids[0]);
                g.nll_from_probs(p, &labels)
            },
            &[logits.clone()],
            1e-5,
            1e-6,
        );

        // teacher ⊙ log(student) with clamped log
        let teacher = {
            let mut t = rand2(&mut rng, (3, 5), 0.01, 1.0);
            let tv = t.view_mut().into_dimensionality::<Ix2>().unwrap();
            let mut tv = tv;
            for mut row in tv.rows_mut() {
                let s: f64 = row.sum();
                row.mapv_inplace(|v| v / s);
            }
            t
        };
        fd_check(
            move |g, ids| {
                let p = g.softmax(ids[0]);
                let lp = g.log_clamped(p);
                let t = g.constant(teacher.clone());
                let prod = g.mul(t, lp);
                let s = g.sum_all(prod);
                g.scale(s, -1.0)
            },
            &[logits],
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn concat_and_slice_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = rand2(&mut rng, (2, 3), -1.0, 1.0);
        let b = rand2(&mut rng, (2, 4), -1.0, 1.0);
        fd_check(
            |g, ids| {
                let cat = g.concat1(&[ids[0], ids[1]]);
                let left = g.slice1(cat, 1, 5);
                let sq = g.square(left);
                g.sum_all(sq)
            },
            &[a, b],
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn batch_norm_and_dropout_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand2(&mut rng, (4, 3), -1.0, 1.0);
        let gamma = Array1::from_shape_fn(3, |_| rng.random_range(0.5..1.5)).into_dyn();
        let beta = Array1::from_shape_fn(3, |_| rng.random_range(-0.3..0.3)).into_dyn();
        let mask = Array2::from_shape_fn((4, 3), |_| if rng.random::<f64>() < 0.5 { 0.0 } else { 2.0 });
        fd_check(
            {
                let mask = mask.clone();
                move |g, ids| {
                    let y = g.batch_norm(ids[0], ids[1], ids[2], None);
                    let d = g.dropout(y, mask.clone());
                    let sq = g.square(d);
                    g.mean_all(sq)
                }
            },
            &[x.clone(), gamma.clone(), beta.clone()],
            1e-5,
            1e-5,
        );

        // eval mode: running stats are constants
        let rm = Array1::from_shape_fn(3, |_| rng.random_range(-0.2..0.2));
        let rv = Array1::from_shape_fn(3, |_| rng.random_range(0.5..1.5));
        fd_check(
            move |g, ids| {
                let y = g.batch_norm(ids[0], ids[1], ids[2], Some((&rm, &rv)));
                let sq = g.square(y);
                g.mean_all(sq)
            },
            &[x, gamma, beta],
            1e-5,
            1e-6,
        );
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[2, 2]), 0.5));
        let d = g.detach(x);
        let y = g.mul(d, d);
        let loss = g.sum_all(y);
        // loss depends only on the detached copy, so nothing needs grad
        assert!(!g.nodes[loss].needs_grad);
        g.backward(loss);
        assert!(g.grad(x).is_none());
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[3]), 2.0));
        let a = g.square(x); // x²
        let s1 = g.sum_all(a);
        let s2 = g.sum_all(x);
        let loss = g.add(s1, s2); // Σ x² + Σ x → d/dx = 2x + 1 = 5
        g.backward(loss);
        for &v in g.grad(x).unwrap() {
            assert!((v - 5.0).abs() < 1e-12);
        }
    }
}
