use super::conv::{self, ConvGeometry};
use super::{Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: usize,
        geo: ConvGeometry,
    },
    Relu(usize),
    MaxPool2 {
        input: usize,
        argmax: Vec<usize>,
    },
    Upsample2(usize),
    Concat {
        a: usize,
        b: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    MulScalar(usize, T),
    Square(usize),
    Mean(usize),
    Sum(usize),
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input, weight, bias, ..
            } => vec![*input, *weight, *bias],
            Op::Relu(a) | Op::Upsample2(a) | Op::MulScalar(a, _) | Op::Square(a) | Op::Mean(a) | Op::Sum(a) => {
                vec![*a]
            }
            Op::MaxPool2 { input, .. } => vec![*input],
            Op::Concat { a, b } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Wengert tape. Operations append nodes whose inputs are always earlier
/// nodes, so recording order is a valid topological order and backward is a
/// single reverse sweep.
///
/// Leaves created with `requires_grad` own a gradient accumulator that starts
/// at zero and is added to by every [`Graph::backward`] call until
/// [`Graph::zero_grad`].
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let leaf_grad = match op {
            Op::Leaf if requires_grad => Some(Tensor::zeros(value.shape())),
            _ => None,
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(leaf_grad);
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads[v.0].as_ref()
    }

    /// Distance of the recorded point from the nearest non-differentiable
    /// configuration: the smallest `|v|` at a ReLU input and the smallest gap
    /// between the largest and second-largest value of a pooling window.
    /// Only nodes downstream of a `requires_grad` leaf are considered.
    /// Ties between exact zeros are skipped: after a ReLU they can only split
    /// by crossing the ReLU kink, which is already counted. Infinite when the
    /// graph has neither op.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in self.nodes.iter().filter(|n| n.requires_grad) {
            match &node.op {
                Op::Relu(a) => {
                    for v in self.nodes[*a].value.data() {
                        margin = margin.min(v.as_f64().abs());
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    let src = self.nodes[*input].value.data();
                    let [_, _, _, w] = self.nodes[*input].value.dims4("maxpool2").expect("checked at record time");
                    for &best in argmax {
                        let (row, col) = ((best / w) & !1, (best % w) & !1);
                        let corner = row * w + col;
                        for idx in [corner, corner + 1, corner + w, corner + w + 1] {
                            if idx != best && !(src[idx] == T::zero() && src[best] == T::zero()) {
                                margin = margin.min((src[best] - src[idx]).as_f64());
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    pub fn zero_grad(&mut self) {
        for g in self.leaf_grads.iter_mut().flatten() {
            g.data_mut().fill(T::zero());
        }
    }

    fn req(&self, inputs: &[Var]) -> bool {
        inputs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 2-D cross-correlation. `weight` is (out_ch, in_ch, k, k), `bias` is
    /// (out_ch).
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var, TensorError> {
        const OP: &str = "conv2d";
        let [n, c, h, w] = self.value(input).dims4(OP)?;
        let wshape = self.value(weight).shape().to_vec();
        let &[o, wc, kh, kw] = wshape.as_slice() else {
            return Err(TensorError::Rank {
                op: OP,
                expected: 4,
                found: wshape.len(),
            });
        };
        if wc != c {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "input channels",
                expected: wc,
                found: c,
            });
        }
        if kw != kh {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "kernel width",
                expected: kh,
                found: kw,
            });
        }
        let bshape = self.value(bias).shape();
        if bshape.len() != 1 || bshape[0] != o {
            return Err(TensorError::ShapeMismatch {
                op: OP,
                dim: "bias length",
                expected: o,
                found: self.value(bias).numel(),
            });
        }
        if stride == 0 {
            return Err(TensorError::ZeroStride { op: OP });
        }
        for extent in [h, w] {
            if kh > extent + 2 * padding {
                return Err(TensorError::KernelTooLarge {
                    op: OP,
                    kernel: kh,
                    extent: extent + 2 * padding,
                });
            }
        }
        let geo = ConvGeometry {
            batch: n,
            in_ch: c,
            height: h,
            width: w,
            out_ch: o,
            kernel: kh,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kh) / stride + 1,
        };
        let data = conv::forward(
            &geo,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![n, o, geo.out_h, geo.out_w], data)?;
        let rg = self.req(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                geo,
            },
            rg,
        ))
    }

    /// Elementwise `max(0, v)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.req(&[x]);
        self.push(value, Op::Relu(x.0), rg)
    }

    /// 2×2 non-overlapping max pooling. Ties go to the first element in
    /// row-major order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.value(x).dims4("maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(TensorError::OddSpatial {
                op: "maxpool2",
                height: h,
                width: w,
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.req(&[x]);
        Ok(self.push(value, Op::MaxPool2 { input: x.0, argmax }, rg))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var, TensorError> {
        let [n, c, h, w] = self.value(x).dims4("upsample_nearest2")?;
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for plane in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(plane * oh + y) * ow + xx] = src[(plane * h + y / 2) * w + xx / 2];
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.req(&[x]);
        Ok(self.push(value, Op::Upsample2(x.0), rg))
    }

    /// Stacks `a` and `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        const OP: &str = "concat_channels";
        let [na, ca, ha, wa] = self.value(a).dims4(OP)?;
        let [nb, cb, hb, wb] = self.value(b).dims4(OP)?;
        for (dim, e, f) in [("batch", na, nb), ("height", ha, hb), ("width", wa, wb)] {
            if e != f {
                return Err(TensorError::ShapeMismatch {
                    op: OP,
                    dim,
                    expected: e,
                    found: f,
                });
            }
        }
        let plane = ha * wa;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(na * (ca + cb) * plane);
        for i in 0..na {
            out.extend_from_slice(&da[i * ca * plane..(i + 1) * ca * plane]);
            out.extend_from_slice(&db[i * cb * plane..(i + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![na, ca + cb, ha, wa], out)?;
        let rg = self.req(&[a, b]);
        Ok(self.push(value, Op::Concat { a: a.0, b: b.0 }, rg))
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, bool), TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::new(ta.shape().to_vec(), data)?
        } else if tb.rank() == 0 {
            let s = tb.data()[0];
            ta.map(|x| f(x, s))
        } else if ta.rank() == 0 {
            let s = ta.data()[0];
            tb.map(|y| f(s, y))
        } else {
            let (ra, rb) = (ta.rank(), tb.rank());
            if ra != rb {
                return Err(TensorError::Rank {
                    op,
                    expected: ra,
                    found: rb,
                });
            }
            let (e, found) = ta
                .shape()
                .iter()
                .zip(tb.shape())
                .find(|(x, y)| x != y)
                .map(|(x, y)| (*x, *y))
                .unwrap_or((ta.numel(), tb.numel()));
            return Err(TensorError::ShapeMismatch {
                op,
                dim: "extent",
                expected: e,
                found,
            });
        };
        Ok((value, self.req(&[a, b])))
    }

    /// Elementwise sum; a rank-0 operand is broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (value, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (value, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(value, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (value, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a.0, b.0), rg))
    }

    pub fn mul_scalar(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        let rg = self.req(&[x]);
        self.push(value, Op::MulScalar(x.0, s), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let rg = self.req(&[x]);
        self.push(value, Op::Square(x.0), rg)
    }

    /// Sum of all elements as a rank-0 tensor, accumulated in storage order.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.req(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x.0), rg)
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = T::from_f64(t.numel() as f64);
        let s: T = t.data().iter().copied().sum();
        let rg = self.req(&[x]);
        self.push(Tensor::scalar(s / n), Op::Mean(x.0), rg)
    }

    /// Reverse sweep from a rank-0 `loss`, adding into leaf accumulators.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lv = self.value(loss);
        if lv.rank() != 0 {
            return Err(TensorError::NotScalar {
                shape: lv.shape().to_vec(),
            });
        }
        let mut local: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        local[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let wants = |j: usize| self.nodes[j].requires_grad;
            match &node.op {
                Op::Leaf => {
                    if let Some(acc) = self.leaf_grads[i].as_mut() {
                        for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                            *a += *v;
                        }
                    }
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geo,
                } => {
                    let need = [wants(*input), wants(*weight), wants(*bias)];
                    let grads = conv::backward(
                        geo,
                        self.nodes[*input].value.data(),
                        self.nodes[*weight].value.data(),
                        &g,
                        need,
                    );
                    if let Some(d) = grads.input {
                        accumulate(&mut local, *input, d);
                    }
                    if let Some(d) = grads.weight {
                        accumulate(&mut local, *weight, d);
                    }
                    if let Some(d) = grads.bias {
                        accumulate(&mut local, *bias, d);
                    }
                }
                Op::Relu(a) => {
                    let x = self.nodes[*a].value.data();
                    let d = g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    accumulate(&mut local, *a, d);
                }
                Op::MaxPool2 { input, argmax } => {
                    let mut d = vec![T::zero(); self.nodes[*input].value.numel()];
                    for (&idx, &gv) in argmax.iter().zip(&g) {
                        d[idx] += gv;
                    }
                    accumulate(&mut local, *input, d);
                }
                Op::Upsample2(a) => {
                    let [n, c, h, w] = self.nodes[*a].value.dims4("upsample_nearest2")?;
                    let (oh, ow) = (2 * h, 2 * w);
                    let mut d = vec![T::zero(); n * c * h * w];
                    for plane in 0..n * c {
                        for y in 0..oh {
                            for x in 0..ow {
                                d[(plane * h + y / 2) * w + x / 2] += g[(plane * oh + y) * ow + x];
                            }
                        }
                    }
                    accumulate(&mut local, *a, d);
                }
                Op::Concat { a, b } => {
                    let [n, ca, h, w] = self.nodes[*a].value.dims4("concat_channels")?;
                    let cb = self.nodes[*b].value.dims4("concat_channels")?[1];
                    let plane = h * w;
                    let mut da = Vec::with_capacity(n * ca * plane);
                    let mut db = Vec::with_capacity(n * cb * plane);
                    for s in 0..n {
                        let off = s * (ca + cb) * plane;
                        da.extend_from_slice(&g[off..off + ca * plane]);
                        db.extend_from_slice(&g[off + ca * plane..off + (ca + cb) * plane]);
                    }
                    if wants(*a) {
                        accumulate(&mut local, *a, da);
                    }
                    if wants(*b) {
                        accumulate(&mut local, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    if wants(a) {
                        let d = self.reduce_to(a, g.clone());
                        accumulate(&mut local, a, d);
                    }
                    if wants(b) {
                        let d = self.reduce_to(b, g);
                        accumulate(&mut local, b, d);
                    }
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    if wants(a) {
                        let d = self.reduce_to(a, g.clone());
                        accumulate(&mut local, a, d);
                    }
                    if wants(b) {
                        let neg = g.iter().map(|&v| -v).collect();
                        let d = self.reduce_to(b, neg);
                        accumulate(&mut local, b, d);
                    }
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let other_times = |other: usize| -> Vec<T> {
                        let o = self.nodes[other].value.data();
                        if o.len() == g.len() {
                            g.iter().zip(o).map(|(&gv, &ov)| gv * ov).collect()
                        } else {
                            g.iter().map(|&gv| gv * o[0]).collect()
                        }
                    };
                    if wants(a) {
                        let d = self.reduce_to(a, other_times(b));
                        accumulate(&mut local, a, d);
                    }
                    if wants(b) {
                        let d = self.reduce_to(b, other_times(a));
                        accumulate(&mut local, b, d);
                    }
                }
                Op::MulScalar(a, s) => {
                    let d = g.iter().map(|&v| v * *s).collect();
                    accumulate(&mut local, *a, d);
                }
                Op::Square(a) => {
                    let x = self.nodes[*a].value.data();
                    let two = T::from_f64(2.0);
                    let d = g.iter().zip(x).map(|(&gv, &xv)| two * xv * gv).collect();
                    accumulate(&mut local, *a, d);
                }
                Op::Mean(a) => {
                    let n = self.nodes[*a].value.numel();
                    let share = g[0] / T::from_f64(n as f64);
                    accumulate(&mut local, *a, vec![share; n]);
                }
                Op::Sum(a) => {
                    let n = self.nodes[*a].value.numel();
                    accumulate(&mut local, *a, vec![g[0]; n]);
                }
            }
        }
        Ok(())
    }

    /// Sums a full-size gradient down to a broadcast rank-0 operand.
    fn reduce_to(&self, target: usize, g: Vec<T>) -> Vec<T> {
        if self.nodes[target].value.numel() == g.len() {
            g
        } else {
            vec![g.iter().copied().sum()]
        }
    }

    /// Ids of the nodes feeding `v`, in recording order.
    pub fn inputs_of(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs().into_iter().map(Var).collect()
    }
}

fn accumulate<T: Scalar>(local: &mut [Option<Vec<T>>], idx: usize, d: Vec<T>) {
    match &mut local[idx] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(&d) {
                *a += *v;
            }
        }
        slot @ None => *slot = Some(d),
    }
}
