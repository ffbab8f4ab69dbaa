use super::kernels::{self, ConvGeom, Mat};
use super::Tensor;
use crate::error::{invalid, shape_err, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    SumAxis0(Var),
    BroadcastAxis0(Var),
    SumAxis1(Var),
    BroadcastAxis1(Var),
    Sum(Var),
    Expand(Var),
    Reshape(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    RowNorms(Var),
    MulRows(Var, Var),
    SafeRecip(Var),
    StopGradient(Var),
    StraightThrough(Var, Var),
    Softmax(Var),
    CrossEntropy(Var, Vec<usize>),
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    AddChannelBias(Var, Var),
    MeanPool2x2(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2x(Var),
    ChannelsLast(Var),
    ChannelsFirst(Var),
    EmbeddingLookup {
        table: Var,
        indices: Vec<usize>,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Add(..) => "add",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::SumAxis0(_) => "sum_axis0",
            Op::BroadcastAxis0(_) => "broadcast_axis0",
            Op::SumAxis1(_) => "sum_axis1",
            Op::BroadcastAxis1(_) => "broadcast_axis1",
            Op::Sum(_) => "sum",
            Op::Expand(_) => "expand",
            Op::Reshape(_) => "reshape",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(_) => "tanh",
            Op::RowNorms(_) => "row_norms",
            Op::MulRows(..) => "mul_rows",
            Op::SafeRecip(_) => "safe_recip",
            Op::StopGradient(_) => "stop_gradient",
            Op::StraightThrough(..) => "straight_through",
            Op::Softmax(_) => "softmax",
            Op::CrossEntropy(..) => "cross_entropy",
            Op::Conv2d { .. } => "conv2d",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::MeanPool2x2(_) => "mean_pool2x2",
            Op::MaxPool { .. } => "max_pool",
            Op::Upsample2x(_) => "upsample2x",
            Op::ChannelsLast(_) => "channels_last",
            Op::ChannelsFirst(_) => "channels_first",
            Op::EmbeddingLookup { .. } => "embedding_lookup",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRowBias(a, b)
            | Op::Mul(a, b)
            | Op::MulRows(a, b)
            | Op::StraightThrough(a, b)
            | Op::AddChannelBias(a, b) => vec![*a, *b],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::SumAxis0(a)
            | Op::BroadcastAxis0(a)
            | Op::SumAxis1(a)
            | Op::BroadcastAxis1(a)
            | Op::Sum(a)
            | Op::Expand(a)
            | Op::Reshape(a)
            | Op::Relu(a)
            | Op::LeakyRelu(a, _)
            | Op::Tanh(a)
            | Op::RowNorms(a)
            | Op::SafeRecip(a)
            | Op::StopGradient(a)
            | Op::Softmax(a)
            | Op::CrossEntropy(a, _)
            | Op::MeanPool2x2(a)
            | Op::Upsample2x(a)
            | Op::ChannelsLast(a)
            | Op::ChannelsFirst(a) => vec![*a],
            Op::MaxPool { x, .. } => vec![*x],
            Op::EmbeddingLookup { table, .. } => vec![*table],
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node {
    pub op: Op,
    pub value: Tensor,
    pub requires_grad: bool,
}

/// Ordered record of every operation in a forward pass.
///
/// Nodes are appended in evaluation order, so node indices are a topological
/// order. A tape is single-threaded; build one per step.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A differentiable leaf (parameter or input under study).
    pub fn var(&mut self, t: Tensor) -> Var {
        self.push_raw(Op::Leaf, t, true)
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(Op::Leaf, t, false)
    }

    fn push_raw(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let rg = match &op {
            Op::StopGradient(_) => false,
            Op::StraightThrough(e, _) => self.nodes[e.0].requires_grad,
            _ => op.inputs().iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.push_raw(op, value, rg)
    }

    fn rank2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, format!("expected a matrix, got {s:?}"))),
        }
    }

    fn rank4(&self, op: &'static str, v: Var) -> Result<[usize; 4]> {
        match self.shape(v) {
            [b, c, h, w] => Ok([*b, *c, *h, *w]),
            s => Err(shape_err(op, format!("expected [B,C,H,W], got {s:?}"))),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn unary(&mut self, v: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(v).map(f);
        self.push(op, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rank2("matmul", a)?;
        let (k2, n) = self.rank2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            Mat::new(self.value(a).data(), m, k),
            Mat::new(self.value(b).data(), k, n),
            &mut out,
            0.0,
        );
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.rank2("transpose", a)?;
        let data = kernels::transpose(self.value(a).data(), m, n);
        let value = Tensor::new(vec![n, m], data)?;
        Ok(self.push(Op::Transpose(a), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// `a[m,n] + bias[n]` broadcast over rows.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.rank2("add_row_bias", a)?;
        if self.shape(bias) != [n] {
            return Err(shape_err(
                "add_row_bias",
                format!("bias {:?} for {:?}", self.shape(bias), self.shape(a)),
            ));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(a).clone();
        for row in value.data_mut().chunks_mut(n) {
            for (x, bb) in row.iter_mut().zip(&b) {
                *x += bb;
            }
        }
        Ok(self.push(Op::AddRowBias(a, bias), value))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let mut value = self.value(a).clone();
        for (x, y) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *x *= y;
        }
        Ok(self.push(Op::Mul(a, b), value))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    /// `[m,n] -> [n]`, summing over rows.
    pub fn sum_axis0(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.rank2("sum_axis0", a)?;
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks(n) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        Ok(self.push(Op::SumAxis0(a), Tensor::from_vec(out)))
    }

    /// `[n] -> [m,n]`, repeating the vector as every row.
    pub fn broadcast_axis0(&mut self, a: Var, m: usize) -> Result<Var> {
        let [n] = *self.shape(a) else {
            return Err(shape_err("broadcast_axis0", format!("{:?}", self.shape(a))));
        };
        let src = self.value(a).data();
        let data: Vec<f64> = (0..m).flat_map(|_| src.iter().copied()).collect();
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::BroadcastAxis0(a), value))
    }

    /// `[m,n] -> [m]`, summing each row.
    pub fn sum_axis1(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.rank2("sum_axis1", a)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(n)
            .map(|r| r.iter().sum())
            .collect();
        Ok(self.push(Op::SumAxis1(a), Tensor::from_vec(out)))
    }

    /// `[m] -> [m,n]`, repeating each entry along its row.
    pub fn broadcast_axis1(&mut self, a: Var, n: usize) -> Result<Var> {
        let [m] = *self.shape(a) else {
            return Err(shape_err("broadcast_axis1", format!("{:?}", self.shape(a))));
        };
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .flat_map(|&v| std::iter::repeat_n(v, n))
            .collect();
        let value = Tensor::new(vec![m, n], data)?;
        Ok(self.push(Op::BroadcastAxis1(a), value))
    }

    /// Sum of all entries as a `[1]` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Broadcasts a `[1]` tensor to `shape`.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) != [1] {
            return Err(shape_err("expand", format!("{:?}", self.shape(a))));
        }
        let value = Tensor::full(shape, self.value(a).item());
        Ok(self.push(Op::Expand(a), value))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(a)
            .clone()
            .reshape(shape)
            .map_err(|e| shape_err("reshape", e.to_string()))?;
        Ok(self.push(Op::Reshape(a), value))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > 0.0 { x } else { slope * x })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// Euclidean norm of each row, `[m,n] -> [m]`.
    pub fn row_norms(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.rank2("row_norms", a)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(n)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        Ok(self.push(Op::RowNorms(a), Tensor::from_vec(out)))
    }

    /// Euclidean norm of the whole tensor as `[1]`. Subgradient 0 at the origin.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let flat = self.reshape(a, &[1, n])?;
        let norms = self.row_norms(flat)?;
        self.reshape(norms, &[1])
    }

    /// `x[m,n] * v[m]`, scaling row `i` by `v[i]`.
    pub fn mul_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        let (m, n) = self.rank2("mul_rows", x)?;
        if self.shape(v) != [m] {
            return Err(shape_err(
                "mul_rows",
                format!("{:?} by {:?}", self.shape(x), self.shape(v)),
            ));
        }
        let s = self.value(v).data().to_vec();
        let mut value = self.value(x).clone();
        for (row, k) in value.data_mut().chunks_mut(n).zip(s) {
            row.iter_mut().for_each(|e| *e *= k);
        }
        Ok(self.push(Op::MulRows(x, v), value))
    }

    /// Reciprocal with `1/0 := 0`.
    pub fn safe_recip(&mut self, a: Var) -> Var {
        self.unary(a, Op::SafeRecip(a), |x| if x == 0.0 { 0.0 } else { 1.0 / x })
    }

    /// Identity forward, zero derivative backward.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(Op::StopGradient(a), value)
    }

    /// Forward value is exactly `q`; backward routes the incoming gradient
    /// to `e` unchanged and nothing to `q`. Same semantics as
    /// `e + stop_gradient(q - e)` without the rounding of the round trip.
    pub fn straight_through(&mut self, e: Var, q: Var) -> Result<Var> {
        self.same_shape("straight_through", e, q)?;
        let value = self.value(q).clone();
        Ok(self.push(Op::StraightThrough(e, q), value))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = kernels::softmax_rows(t.data(), t.cols());
        let value = Tensor {
            shape: t.shape().to_vec(),
            data,
        };
        self.push(Op::Softmax(a), value)
    }

    /// Mean cross-entropy of `logits[B,C]` against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (b, c) = self.rank2("cross_entropy", logits)?;
        if labels.len() != b {
            return Err(shape_err(
                "cross_entropy",
                format!("{b} rows but {} labels", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(invalid(format!("label {bad} out of range for {c} classes")));
        }
        let x = self.value(logits).data();
        let mut loss = 0.0;
        for (row, &y) in x.chunks(c).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        let value = Tensor::scalar(loss / b as f64);
        Ok(self.push(Op::CrossEntropy(logits, labels.to_vec()), value))
    }

    /// 2-D convolution (cross-correlation) of `x[B,C,H,W]` with `w[O,C,kh,kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let [b, c, h, wd] = self.rank4("conv2d", x)?;
        let [o, c2, kh, kw] = self.rank4("conv2d", w)?;
        if c != c2 {
            return Err(shape_err(
                "conv2d",
                format!("input {:?} kernel {:?}", self.shape(x), self.shape(w)),
            ));
        }
        let geom = ConvGeom::new(c, h, wd, kh, kw, stride, pad).ok_or_else(|| {
            shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} stride {stride} pad {pad} on {h}x{wd}"),
            )
        })?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b,
            o,
            &geom,
        );
        let value = Tensor::new(vec![b, o, geom.out_h, geom.out_w], out)?;
        Ok(self.push(Op::Conv2d { x, w, geom }, value))
    }

    /// Convolution with "same" padding for odd square kernels.
    pub fn conv2d_same(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        let k = self.shape(w).get(2).copied().unwrap_or(1);
        self.conv2d(x, w, stride, k / 2)
    }

    /// `x[B,C,H,W] + bias[C]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let [_, c, h, w] = self.rank4("add_channel_bias", x)?;
        if self.shape(bias) != [c] {
            return Err(shape_err(
                "add_channel_bias",
                format!("bias {:?} for {:?}", self.shape(bias), self.shape(x)),
            ));
        }
        let bv = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for (i, plane) in value.data_mut().chunks_mut(h * w).enumerate() {
            let k = bv[i % c];
            plane.iter_mut().for_each(|v| *v += k);
        }
        Ok(self.push(Op::AddChannelBias(x, bias), value))
    }

    /// 2x2 average pooling with stride 2; odd trailing rows/columns are dropped.
    pub fn mean_pool2x2(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.rank4("mean_pool2x2", x)?;
        if h < 2 || w < 2 {
            return Err(shape_err("mean_pool2x2", format!("{:?}", self.shape(x))));
        }
        let out = kernels::mean_pool2x2(self.value(x).data(), b * c, h, w);
        let value = Tensor::new(vec![b, c, h / 2, w / 2], out)?;
        Ok(self.push(Op::MeanPool2x2(x), value))
    }

    /// Non-overlapping `kh x kw` max pooling.
    pub fn max_pool(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let [b, c, h, w] = self.rank4("max_pool", x)?;
        if kh == 0 || kw == 0 || h < kh || w < kw {
            return Err(shape_err(
                "max_pool",
                format!("window {kh}x{kw} on {:?}", self.shape(x)),
            ));
        }
        let (out, argmax) = kernels::max_pool(self.value(x).data(), b * c, h, w, kh, kw);
        let value = Tensor::new(vec![b, c, h / kh, w / kw], out)?;
        Ok(self.push(Op::MaxPool { x, argmax }, value))
    }

    /// Max over the full spatial extent, `[B,C,H,W] -> [B,C]`.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.rank4("max_pool", x)?;
        let pooled = self.max_pool(x, h, w)?;
        self.reshape(pooled, &[b, c])
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.rank4("upsample2x", x)?;
        let out = kernels::upsample2x(self.value(x).data(), b * c, h, w);
        let value = Tensor::new(vec![b, c, 2 * h, 2 * w], out)?;
        Ok(self.push(Op::Upsample2x(x), value))
    }

    /// `[B,C,H,W] -> [B*H*W, C]`.
    pub fn channels_last(&mut self, x: Var) -> Result<Var> {
        let [b, c, h, w] = self.rank4("channels_last", x)?;
        let out = kernels::channels_last(self.value(x).data(), b, c, h * w);
        let value = Tensor::new(vec![b * h * w, c], out)?;
        Ok(self.push(Op::ChannelsLast(x), value))
    }

    /// `[B*H*W, C] -> [B,C,H,W]`.
    pub fn channels_first(&mut self, x: Var, b: usize, h: usize, w: usize) -> Result<Var> {
        let (rows, c) = self.rank2("channels_first", x)?;
        if rows != b * h * w {
            return Err(shape_err(
                "channels_first",
                format!("{rows} rows cannot form [{b},_,{h},{w}]"),
            ));
        }
        let out = kernels::channels_first(self.value(x).data(), b, c, h * w);
        let value = Tensor::new(vec![b, c, h, w], out)?;
        Ok(self.push(Op::ChannelsFirst(x), value))
    }

    /// Gathers rows of `table[K,d]`.
    pub fn embedding_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (k, d) = self.rank2("embedding_lookup", table)?;
        if indices.is_empty() {
            return Err(invalid("embedding_lookup needs at least one index"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(invalid(format!("index {bad} out of range for {k} rows")));
        }
        let t = self.value(table);
        let data: Vec<f64> = indices.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let value = Tensor::new(vec![indices.len(), d], data)?;
        Ok(self.push(
            Op::EmbeddingLookup {
                table,
                indices: indices.to_vec(),
            },
            value,
        ))
    }

    /// Dense layer `x[m,k] W[k,n] + b[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }
}
