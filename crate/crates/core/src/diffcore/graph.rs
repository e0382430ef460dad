use super::array::Array;
use super::kernels::{self, ConvGeom, CoordMap};
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Relu,
    Exp,
    Neg,
    Log,
    Abs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Resample {
    Down2Avg,
    Up2Bilinear,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Conv2d { input: Var, kernel: Var, geom: ConvGeom, cols: Vec<f32> },
    AddBias(Var, Var),
    MulMap(Var, Var),
    GridSample(Var, Var),
    Resample(Resample, Var),
    Concat(Vec<Var>),
    Narrow { input: Var, offset: usize },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanSpatial(Var),
    RepeatSpatial(Var),
    SoftmaxChannels(Var),
    Moments { input: Var, map: CoordMap, eps: f32 },
    Heatmaps { kp: Var, map: CoordMap },
    AffinePoints(Var, [f32; 6]),
    Matmul(Var, Var),
    Transpose(Var),
    L2NormalizeRows(Var),
    CrossEntropy { logits: Var, labels: Vec<usize> },
    BatchHardTriplet { dist: Var, picks: Vec<Option<(usize, usize)>>, valid: usize },
}

#[derive(Debug)]
struct Node {
    value: Array,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// Tape of recorded operations. Nodes are appended in evaluation order, so the
/// node list is already a topological order and backward walks it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn binary_shapes(op: &'static str, a: &Array, b: &Array) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || b.len() == 1 {
        Ok(a.shape().to_vec())
    } else if a.len() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::shape(op, format!("cannot broadcast {:?} with {:?}", a.shape(), b.shape())))
    }
}

fn matrix_dims(op: &'static str, a: &Array) -> Result<(usize, usize)> {
    match a.shape() {
        &[m, n] => Ok((m, n)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a node after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<Array> {
        let n = &self.nodes[v.0];
        n.grad
            .as_ref()
            .map(|g| Array::new(n.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, op_name: &'static str, value: Array, inputs: &[Var], op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn dims3(&self, op: &'static str, v: Var) -> Result<(usize, usize, usize)> {
        match self.shape(v) {
            &[c, h, w] => Ok((c, h, w)),
            s => Err(Error::shape(op, format!("expected c x h x w, got {s:?}"))),
        }
    }

    pub fn unary(&mut self, op: Unary, x: Var) -> Result<Var> {
        let f: fn(f32) -> f32 = match op {
            Unary::Sigmoid => sigmoid,
            Unary::Relu => |v| v.max(0.0),
            Unary::Exp => f32::exp,
            Unary::Neg => |v| -v,
            Unary::Log => f32::ln,
            Unary::Abs => f32::abs,
        };
        let value = self.value(x).map(f);
        let name = match op {
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::Exp => "exp",
            Unary::Neg => "neg",
            Unary::Log => "log",
            Unary::Abs => "abs",
        };
        self.push(name, value, &[x], Op::Unary(op, x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Neg, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    /// Elementwise binary op; shapes must match or one side must hold a single value.
    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        };
        let (va, vb) = (self.value(a), self.value(b));
        let shape = binary_shapes(name, va, vb)?;
        let n: usize = shape.iter().product();
        let f: fn(f32, f32) -> f32 = match op {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
        };
        let da = va.data();
        let db = vb.data();
        let data: Vec<f32> = (0..n)
            .map(|i| f(da[if da.len() == 1 { 0 } else { i }], db[if db.len() == 1 { 0 } else { i }]))
            .collect();
        self.push(name, Array::new(shape, data)?, &[a, b], Op::Binary(op, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let value = self.value(x).map(|v| v * factor);
        self.push("scale", value, &[x], Op::Scale(x, factor))
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        self.push("add_scalar", value, &[x], Op::AddScalar(x))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), stride, padding)?;
        let (out, cols) = kernels::conv2d_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        let value = Array::new(vec![geom.c_out, geom.h_out, geom.w_out], out)?;
        let needs_cols = self.requires_grad(kernel);
        let cols = if needs_cols { cols } else { Vec::new() };
        self.push("conv2d", value, &[input, kernel], Op::Conv2d { input, kernel, geom, cols })
    }

    /// Adds a per-channel bias `[c]` to a `c x h x w` input.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (c, h, w) = self.dims3("add_bias", x)?;
        if self.value(bias).len() != c {
            return Err(Error::shape("add_bias", format!("bias {:?} for {c} channels", self.shape(bias))));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for (ch, plane) in value.data_mut().chunks_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|v| *v += b[ch]);
        }
        self.push("add_bias", value, &[x, bias], Op::AddBias(x, bias))
    }

    /// Multiplies every channel of `x: c x h x w` by the single-channel map `m: 1 x h x w`.
    pub fn mul_map(&mut self, x: Var, m: Var) -> Result<Var> {
        let (_, h, w) = self.dims3("mul_map", x)?;
        let (mc, mh, mw) = self.dims3("mul_map", m)?;
        if mc != 1 || mh != h || mw != w {
            return Err(Error::shape(
                "mul_map",
                format!("map {:?} incompatible with {:?}", self.shape(m), self.shape(x)),
            ));
        }
        let md = self.value(m).data().to_vec();
        let mut value = self.value(x).clone();
        for plane in value.data_mut().chunks_mut(h * w) {
            plane.iter_mut().zip(&md).for_each(|(v, s)| *v *= s);
        }
        self.push("mul_map", value, &[x, m], Op::MulMap(x, m))
    }

    /// Bilinear warp of `input: c x h x w` by `flow: 2 x h x w` (x then y displacement, pixels).
    pub fn grid_sample(&mut self, input: Var, flow: Var) -> Result<Var> {
        let (c, h, w) = self.dims3("grid_sample", input)?;
        let fs = self.shape(flow);
        if fs != [2, h, w] {
            return Err(Error::shape("grid_sample", format!("flow {fs:?} for input {:?}", self.shape(input))));
        }
        if !self.value(flow).is_finite() {
            return Err(Error::NonFinite { op: "grid_sample flow" });
        }
        let out = kernels::grid_sample_forward(self.value(input).data(), c, h, w, self.value(flow).data());
        self.push("grid_sample", Array::new(vec![c, h, w], out)?, &[input, flow], Op::GridSample(input, flow))
    }

    pub fn resample(&mut self, x: Var, mode: Resample) -> Result<Var> {
        let (c, h, w) = self.dims3("resample", x)?;
        let (data, shape) = match mode {
            Resample::Down2Avg => {
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(Error::shape("down2_avg", format!("odd spatial dims {h}x{w}")));
                }
                (kernels::down2_forward(self.value(x).data(), c, h, w), vec![c, h / 2, w / 2])
            }
            Resample::Up2Bilinear => (kernels::up2_forward(self.value(x).data(), c, h, w), vec![c, 2 * h, 2 * w]),
        };
        self.push("resample", Array::new(shape, data)?, &[x], Op::Resample(mode, x))
    }

    pub fn down2(&mut self, x: Var) -> Result<Var> {
        self.resample(x, Resample::Down2Avg)
    }

    pub fn up2(&mut self, x: Var) -> Result<Var> {
        self.resample(x, Resample::Up2Bilinear)
    }

    /// Concatenates along the leading axis; trailing dims must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of zero inputs".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s[1..] != tail[..] {
                return Err(Error::shape("concat", format!("{s:?} vs trailing {tail:?}")));
            }
            lead += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        self.push("concat", Array::new(shape, data)?, xs, Op::Concat(xs.to_vec()))
    }

    /// Contiguous slice of the flat data, viewed with `shape`.
    pub fn narrow(&mut self, x: Var, offset: usize, shape: &[usize]) -> Result<Var> {
        let len: usize = shape.iter().product();
        let src = self.value(x).data();
        if offset + len > src.len() {
            return Err(Error::shape("narrow", format!("{offset}+{len} exceeds {}", src.len())));
        }
        let value = Array::new(shape.to_vec(), src[offset..offset + len].to_vec())?;
        self.push("narrow", value, &[x], Op::Narrow { input: x, offset })
    }

    /// Channels `[start, start + count)` of a `c x h x w` input.
    pub fn channels(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let (c, h, w) = self.dims3("channels", x)?;
        if start + count > c {
            return Err(Error::shape("channels", format!("[{start}, {}) of {c}", start + count)));
        }
        self.narrow(x, start * h * w, &[count, h, w])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push("reshape", value, &[x], Op::Reshape(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Array::scalar(s), &[x], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).mean();
        self.push("mean", Array::scalar(s), &[x], Op::Mean(x))
    }

    /// `c x h x w -> [c]` spatial average.
    pub fn mean_spatial(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.dims3("mean_spatial", x)?;
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f32>() / (h * w) as f32)
            .collect();
        self.push("mean_spatial", Array::new(vec![c], data)?, &[x], Op::MeanSpatial(x))
    }

    /// `[c] -> c x h x w`, each channel constant.
    pub fn repeat_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let src = self.value(x).data().to_vec();
        let c = src.len();
        let mut data = Vec::with_capacity(c * h * w);
        for v in src {
            data.extend(std::iter::repeat(v).take(h * w));
        }
        self.push("repeat_spatial", Array::new(vec![c, h, w], data)?, &[x], Op::RepeatSpatial(x))
    }

    /// Softmax across the channel axis at every pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.dims3("softmax_channels", x)?;
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0; c * hw];
        for i in 0..hw {
            let m = (0..c).map(|ch| src[ch * hw + i]).fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0;
            for ch in 0..c {
                let e = (src[ch * hw + i] - m).exp();
                out[ch * hw + i] = e;
                z += e;
            }
            for ch in 0..c {
                out[ch * hw + i] /= z;
            }
        }
        self.push("softmax_channels", Array::new(vec![c, h, w], out)?, &[x], Op::SoftmaxChannels(x))
    }

    /// Per-channel normalized first and second spatial moments of a positive
    /// activation map `k x h x w`, returned as `k x 5` rows `[px, py, sxx, sxy, syy]`.
    pub fn spatial_moments(&mut self, act: Var, map: CoordMap, eps: f32) -> Result<Var> {
        let (k, h, w) = self.dims3("spatial_moments", act)?;
        if self.value(act).data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument("spatial_moments needs nonnegative activations".into()));
        }
        let out = kernels::moments_forward(self.value(act).data(), k, h, w, map, eps)?;
        self.push(
            "spatial_moments",
            Array::new(vec![k, 5], out)?,
            &[act],
            Op::Moments { input: act, map, eps },
        )
    }

    /// Gaussian heatmaps `k x h x w` from `k x 5` keypoint rows.
    pub fn heatmaps(&mut self, kp: Var, h: usize, w: usize, map: CoordMap) -> Result<Var> {
        let k = match self.shape(kp) {
            &[k, 5] => k,
            s => return Err(Error::shape("heatmaps", format!("keypoints must be k x 5, got {s:?}"))),
        };
        let out = kernels::heatmaps_forward(self.value(kp).data(), k, h, w, map)?;
        self.push("heatmaps", Array::new(vec![k, h, w], out)?, &[kp], Op::Heatmaps { kp, map })
    }

    /// Applies `[a b c; d e f]` to each row `(x, y)` of a `k x 2` point set.
    pub fn affine_points(&mut self, pts: Var, m: [f32; 6]) -> Result<Var> {
        let k = match self.shape(pts) {
            &[k, 2] => k,
            s => return Err(Error::shape("affine_points", format!("expected k x 2, got {s:?}"))),
        };
        let src = self.value(pts).data();
        let mut out = Vec::with_capacity(2 * k);
        for p in src.chunks(2) {
            out.push(m[0] * p[0] + m[1] * p[1] + m[2]);
            out.push(m[3] * p[0] + m[4] * p[1] + m[5]);
        }
        self.push("affine_points", Array::new(vec![k, 2], out)?, &[pts], Op::AffinePoints(pts, m))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} times {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        self.push("matmul", Array::new(vec![m, n], out)?, &[a, b], Op::Matmul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = matrix_dims("transpose", self.value(x))?;
        let src = self.value(x).data();
        let data = (0..m * n).map(|i| src[(i % m) * n + i / m]).collect();
        self.push("transpose", Array::new(vec![n, m], data)?, &[x], Op::Transpose(x))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (_, n) = matrix_dims("l2_normalize_rows", self.value(x))?;
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(n) {
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
        }
        self.push("l2_normalize_rows", value, &[x], Op::L2NormalizeRows(x))
    }

    /// Mean softmax cross-entropy of `logits: m x n` against one label per row.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, n) = matrix_dims("cross_entropy", self.value(logits))?;
        if labels.len() != m {
            return Err(Error::shape("cross_entropy", format!("{} labels for {m} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::InvalidArgument(format!("label {bad} outside 0..{n}")));
        }
        let src = self.value(logits).data();
        let mut total = 0.0f64;
        for (row, &l) in src.chunks(n).zip(labels) {
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let lse = mx as f64 + row.iter().map(|&v| ((v - mx) as f64).exp()).sum::<f64>().ln();
            total += lse - row[l] as f64;
        }
        let value = Array::scalar((total / m as f64) as f32);
        self.push(
            "cross_entropy",
            value,
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
        )
    }

    /// Batch-hard triplet loss over a `b x b` distance matrix: for every anchor
    /// with at least one positive and one negative, `relu(max_pos d - min_neg d + margin)`,
    /// averaged over those anchors. Returns `None` when no anchor qualifies.
    pub fn batch_hard_triplet(&mut self, dist: Var, labels: &[usize], margin: f32) -> Result<Option<Var>> {
        let (b, b2) = matrix_dims("batch_hard_triplet", self.value(dist))?;
        if b != b2 || labels.len() != b {
            return Err(Error::shape(
                "batch_hard_triplet",
                format!("{b}x{b2} distances with {} labels", labels.len()),
            ));
        }
        let d = self.value(dist).data();
        let mut picks = Vec::with_capacity(b);
        let mut total = 0.0f32;
        let mut valid = 0usize;
        for a in 0..b {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..b {
                if j == a {
                    continue;
                }
                let v = d[a * b + j];
                if labels[j] == labels[a] {
                    if pos.map_or(true, |p| v > d[a * b + p]) {
                        pos = Some(j);
                    }
                } else if neg.map_or(true, |q| v < d[a * b + q]) {
                    neg = Some(j);
                }
            }
            match (pos, neg) {
                (Some(p), Some(q)) => {
                    valid += 1;
                    let l = d[a * b + p] - d[a * b + q] + margin;
                    if l > 0.0 {
                        total += l;
                        picks.push(Some((p, q)));
                    } else {
                        picks.push(None);
                    }
                }
                _ => picks.push(None),
            }
        }
        if valid == 0 {
            return Ok(None);
        }
        let value = Array::scalar(total / valid as f32);
        self.push(
            "batch_hard_triplet",
            value,
            &[dist],
            Op::BatchHardTriplet {
                dist,
                picks,
                valid,
            },
        )
        .map(Some)
    }

    /// Reverse pass from a scalar `loss`. Leaf gradients accumulate across calls;
    /// interior gradients are recomputed each call.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        for n in self.nodes.iter_mut() {
            if !matches!(n.op, Op::Leaf) {
                n.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            self.backprop_node(i, &g);
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    /// Clears every accumulated gradient.
    pub fn zero_grad(&mut self) {
        for n in self.nodes.iter_mut() {
            n.grad = None;
        }
    }

    fn accumulate(&mut self, v: Var, g: &[f32]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g.to_vec()),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&mut self, i: usize, g: &[f32]) {
        let out = &self.nodes[i].value;
        let updates: Vec<(Var, Vec<f32>)> = match &self.nodes[i].op {
            Op::Leaf => Vec::new(),
            Op::Unary(u, x) => {
                let xv = self.nodes[x.0].value.data();
                let y = out.data();
                let d: Vec<f32> = match u {
                    Unary::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    Unary::Relu => g.iter().zip(xv).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
                    Unary::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                    Unary::Neg => g.iter().map(|g| -g).collect(),
                    Unary::Log => g.iter().zip(xv).map(|(g, x)| g / x).collect(),
                    Unary::Abs => g
                        .iter()
                        .zip(xv)
                        .map(|(g, x)| if *x > 0.0 { *g } else if *x < 0.0 { -*g } else { 0.0 })
                        .collect(),
                };
                vec![(*x, d)]
            }
            Op::Binary(op, a, b) => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a.0].value.data();
                let bv = self.nodes[b.0].value.data();
                let n = g.len();
                let pick = |s: &[f32], i: usize| s[if s.len() == 1 { 0 } else { i }];
                let reduce = |len: usize, full: Vec<f32>| {
                    if len == 1 && n != 1 {
                        vec![full.iter().sum()]
                    } else {
                        full
                    }
                };
                let (ga, gb): (Vec<f32>, Vec<f32>) = match op {
                    Binary::Add => (g.to_vec(), g.to_vec()),
                    Binary::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
                    Binary::Mul => (
                        (0..n).map(|i| g[i] * pick(bv, i)).collect(),
                        (0..n).map(|i| g[i] * pick(av, i)).collect(),
                    ),
                };
                vec![(a, reduce(av.len(), ga)), (b, reduce(bv.len(), gb))]
            }
            Op::Scale(x, f) => vec![(*x, g.iter().map(|v| v * f).collect())],
            Op::AddScalar(x) => vec![(*x, g.to_vec())],
            Op::Conv2d { input, kernel, geom, cols } => {
                let mut ups = Vec::new();
                if self.wants(*kernel) {
                    let mut dk = vec![0.0; self.nodes[kernel.0].value.len()];
                    kernels::conv2d_backward_kernel(g, cols, geom, &mut dk);
                    ups.push((*kernel, dk));
                }
                if self.wants(*input) {
                    let mut dx = vec![0.0; self.nodes[input.0].value.len()];
                    kernels::conv2d_backward_input(g, self.nodes[kernel.0].value.data(), geom, &mut dx);
                    ups.push((*input, dx));
                }
                ups
            }
            Op::AddBias(x, b) => {
                let c = self.nodes[b.0].value.len();
                let hw = g.len() / c;
                let db = g.chunks(hw).map(|p| p.iter().sum()).collect();
                vec![(*x, g.to_vec()), (*b, db)]
            }
            Op::MulMap(x, m) => {
                let xv = self.nodes[x.0].value.data();
                let mv = self.nodes[m.0].value.data();
                let hw = mv.len();
                let dx = g.iter().enumerate().map(|(i, g)| g * mv[i % hw]).collect();
                let mut dm = vec![0.0; hw];
                for (i, gv) in g.iter().enumerate() {
                    dm[i % hw] += gv * xv[i];
                }
                vec![(*x, dx), (*m, dm)]
            }
            Op::GridSample(input, flow) => {
                let s = self.nodes[input.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut di = self.wants(*input).then(|| vec![0.0; c * h * w]);
                let mut df = self.wants(*flow).then(|| vec![0.0; 2 * h * w]);
                kernels::grid_sample_backward(
                    self.nodes[input.0].value.data(),
                    c,
                    h,
                    w,
                    self.nodes[flow.0].value.data(),
                    g,
                    di.as_deref_mut(),
                    df.as_deref_mut(),
                );
                let mut ups = Vec::new();
                if let Some(d) = di {
                    ups.push((*input, d));
                }
                if let Some(d) = df {
                    ups.push((*flow, d));
                }
                ups
            }
            Op::Resample(mode, x) => {
                let s = self.nodes[x.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; c * h * w];
                match mode {
                    Resample::Down2Avg => kernels::down2_backward(g, c, h, w, &mut dx),
                    Resample::Up2Bilinear => kernels::up2_backward(g, c, h, w, &mut dx),
                }
                vec![(*x, dx)]
            }
            Op::Concat(xs) => {
                let mut off = 0;
                let mut ups = Vec::new();
                for &x in xs {
                    let n = self.nodes[x.0].value.len();
                    ups.push((x, g[off..off + n].to_vec()));
                    off += n;
                }
                ups
            }
            Op::Narrow { input, offset } => {
                let mut dx = vec![0.0; self.nodes[input.0].value.len()];
                dx[*offset..*offset + g.len()].copy_from_slice(g);
                vec![(*input, dx)]
            }
            Op::Reshape(x) => vec![(*x, g.to_vec())],
            Op::Sum(x) => vec![(*x, vec![g[0]; self.nodes[x.0].value.len()])],
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                vec![(*x, vec![g[0] / n as f32; n])]
            }
            Op::MeanSpatial(x) => {
                let n = self.nodes[x.0].value.len();
                let hw = n / g.len();
                vec![(*x, (0..n).map(|i| g[i / hw] / hw as f32).collect())]
            }
            Op::RepeatSpatial(x) => {
                let c = self.nodes[x.0].value.len();
                let hw = g.len() / c;
                vec![(*x, g.chunks(hw).map(|p| p.iter().sum()).collect())]
            }
            Op::SoftmaxChannels(x) => {
                let s = out.shape();
                let (c, hw) = (s[0], s[1] * s[2]);
                let y = out.data();
                let mut dx = vec![0.0; c * hw];
                for i in 0..hw {
                    let dot: f32 = (0..c).map(|ch| y[ch * hw + i] * g[ch * hw + i]).sum();
                    for ch in 0..c {
                        dx[ch * hw + i] = y[ch * hw + i] * (g[ch * hw + i] - dot);
                    }
                }
                vec![(*x, dx)]
            }
            Op::Moments { input, map, eps } => {
                let s = self.nodes[input.0].value.shape();
                let (k, h, w) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; k * h * w];
                kernels::moments_backward(
                    self.nodes[input.0].value.data(),
                    out.data(),
                    k,
                    h,
                    w,
                    *map,
                    *eps,
                    g,
                    &mut dx,
                );
                vec![(*input, dx)]
            }
            Op::Heatmaps { kp, map } => {
                let s = out.shape();
                let (k, h, w) = (s[0], s[1], s[2]);
                let mut dk = vec![0.0; k * 5];
                kernels::heatmaps_backward(self.nodes[kp.0].value.data(), out.data(), k, h, w, *map, g, &mut dk);
                vec![(*kp, dk)]
            }
            Op::AffinePoints(x, m) => {
                let dx = g
                    .chunks(2)
                    .flat_map(|p| [m[0] * p[0] + m[3] * p[1], m[1] * p[0] + m[4] * p[1]])
                    .collect();
                vec![(*x, dx)]
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].value.shape()[0], self.nodes[a.0].value.shape()[1]);
                let n = self.nodes[b.0].value.shape()[1];
                let mut ups = Vec::new();
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g, false, self.nodes[b.0].value.data(), true, &mut da, 0.0);
                    ups.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, self.nodes[a.0].value.data(), true, g, false, &mut db, 0.0);
                    ups.push((*b, db));
                }
                ups
            }
            Op::Transpose(x) => {
                let (m, n) = (out.shape()[0], out.shape()[1]);
                // out is m x n, input is n x m
                let dx = (0..m * n).map(|i| g[(i % m) * n + i / m]).collect();
                vec![(*x, dx)]
            }
            Op::L2NormalizeRows(x) => {
                let xv = self.nodes[x.0].value.data();
                let n = out.shape()[1];
                let y = out.data();
                let mut dx = vec![0.0; xv.len()];
                for r in 0..xv.len() / n {
                    let row = &xv[r * n..(r + 1) * n];
                    let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[r * n + j] = (gr[j] - yr[j] * dot) / norm;
                    }
                }
                vec![(*x, dx)]
            }
            Op::CrossEntropy { logits, labels } => {
                let v = &self.nodes[logits.0].value;
                let (m, n) = (v.shape()[0], v.shape()[1]);
                let mut dx = vec![0.0; m * n];
                for (r, row) in v.data().chunks(n).enumerate() {
                    let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                    let z: f32 = row.iter().map(|&v| (v - mx).exp()).sum();
                    for j in 0..n {
                        let p = (row[j] - mx).exp() / z;
                        let t = if j == labels[r] { 1.0 } else { 0.0 };
                        dx[r * n + j] = g[0] * (p - t) / m as f32;
                    }
                }
                vec![(*logits, dx)]
            }
            Op::BatchHardTriplet { dist, picks, valid } => {
                let b = picks.len();
                let mut dd = vec![0.0; b * b];
                let scale = g[0] / *valid as f32;
                for (a, pick) in picks.iter().enumerate() {
                    if let Some((p, q)) = pick {
                        dd[a * b + p] += scale;
                        dd[a * b + q] -= scale;
                    }
                }
                vec![(*dist, dd)]
            }
        };
        for (v, d) in updates {
            self.accumulate(v, &d);
        }
    }
}
