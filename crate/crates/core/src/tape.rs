//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every forward op appends one node holding its result value. `backward`
//! replays the nodes in exact reverse order, accumulating gradients
//! additively into operands that require them.

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization epsilon shared by batch and group normalization.
pub const NORM_EPS: f32 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddBias(Var, Var),
    Relu(Var),
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
    },
    SliceDim1 {
        x: Var,
        start: usize,
    },
    ConcatDim1(Vec<Var>),
    Reshape(Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    Normalize {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        inv_std: Vec<f32>,
        layout: NormLayout,
    },
    AssembleColumns {
        parts: Vec<(Var, Vec<usize>)>,
    },
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    stride: usize,
    pad: usize,
    groups: usize,
}

/// Which elements share one normalization statistic.
#[derive(Clone, Copy, Debug)]
enum NormLayout {
    /// Per channel over batch and space, statistics from the batch.
    BatchTrain,
    /// Per channel, statistics supplied from outside (no gradient through them).
    Frozen,
    /// Per (sample, channel group) over the group's channels and space.
    Group(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics produced by a training-mode batch-norm forward.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f32>,
    /// Unbiased variance estimate, used for running-statistic updates.
    pub var: Vec<f32>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; absent entries received no gradient.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient of `v`, or zeros of the right shape when no path reached it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn raw(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k || stride == 0 {
        None
    } else {
        Some((padded - k) / stride + 1)
    }
}

/// Output positions `o` whose input coordinate `o*stride + k - pad` lies in `[0, size)`.
fn valid_range(out: usize, size: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o*stride + k - pad <= size - 1
    let hi = if size + pad < k + 1 {
        0
    } else {
        ((size + pad - k - 1) / stride + 1).min(out)
    };
    (lo.min(hi), hi)
}

/// Geometry of one convolution group, for unfolding input patches into
/// rows of a `[cin_g·kh·kw, ho·wo]` matrix.
struct ConvDims {
    cin_g: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn new(sx: &[usize], sw: &[usize], geom: ConvGeom, ho: usize, wo: usize) -> Self {
        Self {
            cin_g: sw[1],
            h: sx[2],
            w: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride: geom.stride,
            pad: geom.pad,
            ho,
            wo,
        }
    }

    /// `col[(ic, ki, kj), (oh, ow)] = x[ic, oh·s + ki − p, ow·s + kj − p]`,
    /// zero where the patch overhangs the padding.
    fn im2col(&self, x: &[f32], col: &mut [f32]) {
        let plane = self.ho * self.wo;
        col.fill(0.0);
        for ic in 0..self.cin_g {
            let xin = &x[ic * self.h * self.w..(ic + 1) * self.h * self.w];
            for ki in 0..self.kh {
                let (oh0, oh1) = valid_range(self.ho, self.h, ki, self.stride, self.pad);
                for kj in 0..self.kw {
                    let (ow0, ow1) = valid_range(self.wo, self.w, kj, self.stride, self.pad);
                    let r = (ic * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[r * plane..(r + 1) * plane];
                    for oh in oh0..oh1 {
                        let ih = oh * self.stride + ki - self.pad;
                        let irow = &xin[ih * self.w..(ih + 1) * self.w];
                        let orow = &mut dst[oh * self.wo..(oh + 1) * self.wo];
                        if self.stride == 1 {
                            orow[ow0..ow1].copy_from_slice(&irow[ow0 + kj - self.pad..ow1 + kj - self.pad]);
                        } else {
                            for ow in ow0..ow1 {
                                orow[ow] = irow[ow * self.stride + kj - self.pad];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvDims::im2col`]: scatter-adds patch rows back into `x`.
    fn col2im(&self, col: &[f32], x: &mut [f32]) {
        let plane = self.ho * self.wo;
        for ic in 0..self.cin_g {
            let xin = &mut x[ic * self.h * self.w..(ic + 1) * self.h * self.w];
            for ki in 0..self.kh {
                let (oh0, oh1) = valid_range(self.ho, self.h, ki, self.stride, self.pad);
                for kj in 0..self.kw {
                    let (ow0, ow1) = valid_range(self.wo, self.w, kj, self.stride, self.pad);
                    let r = (ic * self.kh + ki) * self.kw + kj;
                    let src = &col[r * plane..(r + 1) * plane];
                    for oh in oh0..oh1 {
                        let ih = oh * self.stride + ki - self.pad;
                        let irow = &mut xin[ih * self.w..(ih + 1) * self.w];
                        let crow = &src[oh * self.wo..(oh + 1) * self.wo];
                        if self.stride == 1 {
                            let dst = &mut irow[ow0 + kj - self.pad..ow1 + kj - self.pad];
                            for (d, &c) in dst.iter_mut().zip(&crow[ow0..ow1]) {
                                *d += c;
                            }
                        } else {
                            for ow in ow0..ow1 {
                                irow[ow * self.stride + kj - self.pad] += crow[ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `y += a·x`
fn axpy(y: &mut [f32], a: f32, x: &[f32]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

/// Dot product with eight interleaved partial sums (vectorizable, fixed order).
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
}

fn lane_sum(a: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let chunks = a.chunks_exact(8);
    let tail: f32 = chunks.remainder().iter().sum();
    for x in chunks {
        for i in 0..8 {
            lanes[i] += x[i];
        }
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7])) + tail
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        value.ensure_finite("leaf input")?;
        Ok(self.push_raw(value, Op::Leaf, requires_grad))
    }

    /// Leaf that never receives gradient (inputs, labels masks, frozen references).
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    fn same_shape(&self, a: Var, b: Var, name: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!(
                "{name}: operand shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul: cannot multiply {:?} by {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = da[i * k + p];
                for (o, bv) in row.iter_mut().zip(&db[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        self.push(value, Op::MatMul(a, b), &[a, b], "matmul")
    }

    /// `x · wᵀ + b` with `x: [N, F]`, `w: [O, F]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(shape_err!("linear: input {:?} does not match weight {:?}", sx, sw));
        }
        let (n, f, o) = (sx[0], sx[1], sw[0]);
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(shape_err!("linear: bias {:?} for {o} outputs", self.shape(b)));
            }
        }
        let (dx, dw) = (self.value(x).data(), self.value(w).data());
        let mut out = vec![0.0f32; n * o];
        for i in 0..n {
            let xr = &dx[i * f..(i + 1) * f];
            for j in 0..o {
                let wr = &dw[j * f..(j + 1) * f];
                out[i * o + j] = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let db = self.value(b).data();
            for row in out.chunks_mut(o) {
                for (v, bv) in row.iter_mut().zip(db) {
                    *v += bv;
                }
            }
        }
        let value = Tensor::new(vec![n, o], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Linear { x, w, b }, &inputs, "linear")
    }

    /// 2-D convolution over NCHW input with square zero padding and `groups`
    /// channel groups. Weight shape is `[Cout, Cin/groups, KH, KW]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(shape_err!("conv2d: input {:?} / weight {:?} must be rank 4", sx, sw));
        }
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, cin_g, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::Config(format!(
                "conv2d: channels in={cin} out={cout} not divisible by groups={groups}"
            )));
        }
        if cin / groups != cin_g {
            return Err(shape_err!(
                "conv2d: weight expects {cin_g} input channels per group, input gives {}",
                cin / groups
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(shape_err!("conv2d: bias {:?} for {cout} outputs", self.shape(b)));
            }
        }
        let (ho, wo) = match (conv_out(h, kh, stride, pad), conv_out(wd, kw, stride, pad)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(shape_err!(
                    "conv2d: kernel {kh}x{kw} stride {stride} pad {pad} does not fit {h}x{wd}"
                ))
            }
        };
        let cout_g = cout / groups;
        let geom = ConvGeom {
            stride,
            pad,
            groups,
        };
        let dims = ConvDims::new(sx.as_slice(), sw.as_slice(), geom, ho, wo);
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        let bias = b.map(|b| self.value(b).data());
        let plane = ho * wo;
        let rows = cin_g * kh * kw;
        let mut out = vec![0.0f32; n * cout * plane];
        let mut col = vec![0.0f32; rows * plane];
        for ni in 0..n {
            for g in 0..groups {
                let xin = &xd[(ni * cin + g * cin_g) * h * wd..(ni * cin + (g + 1) * cin_g) * h * wd];
                dims.im2col(xin, &mut col);
                for oc in g * cout_g..(g + 1) * cout_g {
                    let orow = &mut out[(ni * cout + oc) * plane..(ni * cout + oc + 1) * plane];
                    if let Some(bd) = bias {
                        orow.fill(bd[oc]);
                    }
                    let wrow = &wdat[oc * rows..(oc + 1) * rows];
                    for (r, &wv) in wrow.iter().enumerate() {
                        axpy(orow, wv, &col[r * plane..(r + 1) * plane]);
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, cout, ho, wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Conv2d { x, w, b, geom }, &inputs, "conv2d")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Result<Var> {
        if !s.is_finite() {
            return Err(Error::Numeric(format!("scale by non-finite factor {s}")));
        }
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Scale(a, s), &[a], "scale")
    }

    /// Adds a per-channel bias `b: [C]` to `x: [N, C, ...]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() < 2 || self.shape(b) != [sx[1]] {
            return Err(shape_err!("add_bias: bias {:?} for input {:?}", self.shape(b), sx));
        }
        let c = sx[1];
        let inner: usize = sx[2..].iter().product();
        let bd = self.value(b).data();
        let mut data = self.value(x).data().to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            let bv = bd[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let value = Tensor::new(sx.to_vec(), data)?;
        self.push(value, Op::AddBias(x, b), &[x, b], "add_bias")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(value, Op::Relu(a), &[a], "relu")
    }

    /// Max pooling without padding; ties resolve to the first maximum in scan order.
    pub fn maxpool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || k == 0 || stride == 0 || s[2] < k || s[3] < k {
            return Err(shape_err!("maxpool2d: window {k} stride {stride} on {:?}", s));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ho = (h - k) / stride + 1;
        let wo = (w - k) / stride + 1;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = base + oh * stride * w + ow * stride;
                    for ki in 0..k {
                        for kj in 0..k {
                            let idx = base + (oh * stride + ki) * w + ow * stride + kj;
                            if xd[idx] > xd[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        self.push(value, Op::MaxPool2d { x, argmax }, &[x], "maxpool2d")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total: f64 = self.value(a).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(total as f32), Op::Sum(a), &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(shape_err!("mean of an empty tensor"));
        }
        let total: f64 = t.data().iter().map(|&v| v as f64).sum();
        let value = Tensor::scalar((total / t.numel() as f64) as f32);
        self.push(value, Op::Mean(a), &[a], "mean")
    }

    /// Mean cross-entropy of `logits: [N, C]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(shape_err!(
                "softmax_cross_entropy: logits {:?} with {} labels",
                s,
                labels.len()
            ));
        }
        let (n, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(shape_err!("softmax_cross_entropy: label {bad} out of range for {c} classes"));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0f32; n * c];
        let mut loss = 0.0f64;
        for i in 0..n {
            let row = &ld[i * c..(i + 1) * c];
            let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for &v in row {
                z += ((v - max) as f64).exp();
            }
            for j in 0..c {
                probs[i * c + j] = (((row[j] - max) as f64).exp() / z) as f32;
            }
            loss += z.ln() - (row[labels[i]] - max) as f64;
        }
        let value = Tensor::scalar((loss / n as f64) as f32);
        let op = Op::SoftmaxCrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(value, op, &[logits], "softmax_cross_entropy")
    }

    pub fn slice_dim1(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_dim1(start, len)?;
        self.push(value, Op::SliceDim1 { x, start }, &[x], "slice")
    }

    pub fn concat_dim1(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_dim1(&tensors)?;
        self.push(value, Op::ConcatDim1(parts.to_vec()), parts, "concat")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), &[x], "reshape")
    }

    /// Selects entries along dimension 0.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let value = self.value(x).gather_rows(rows)?;
        let op = Op::GatherRows {
            x,
            rows: rows.to_vec(),
        };
        self.push(value, op, &[x], "gather_rows")
    }

    /// Flattens `[N, ...]` into `[N, F]`.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.is_empty() {
            return Err(shape_err!("flatten of a scalar"));
        }
        let shape = vec![s[0], s[1..].iter().product()];
        self.reshape(x, shape)
    }

    fn check_affine(&self, x: Var, gamma: Var, beta: Var, name: &str) -> Result<usize> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(shape_err!("{name}: input {:?} must have a channel dimension", s));
        }
        let c = s[1];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!(
                "{name}: scale {:?} / shift {:?} for {c} channels",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        Ok(c)
    }

    /// Training-mode batch normalization. Returns the output and the batch
    /// statistics for running-average updates.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats)> {
        let c = self.check_affine(x, gamma, beta, "batch_norm")?;
        let s = self.shape(x).to_vec();
        let n = s[0];
        let inner: usize = s[2..].iter().product();
        let count = n * inner;
        if count < 2 {
            return Err(shape_err!("batch_norm: need more than one value per channel, got {:?}", s));
        }
        let xd = self.value(x).data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                mean[ci] += xd[base..base + inner].iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * inner;
                var[ci] += xd[base..base + inner]
                    .iter()
                    .map(|&v| (v as f64 - mean[ci]).powi(2))
                    .sum::<f64>();
            }
        }
        let inv_std: Vec<f32> = var
            .iter()
            .map(|&v| (1.0 / (v / count as f64 + NORM_EPS as f64).sqrt()) as f32)
            .collect();
        let stats = BatchStats {
            mean: mean.iter().map(|&m| m as f32).collect(),
            var: var.iter().map(|&v| (v / (count - 1) as f64) as f32).collect(),
        };
        let shift: Vec<f32> = stats.mean.clone();
        let out = self.normalize(x, gamma, beta, &shift, inv_std, NormLayout::BatchTrain)?;
        Ok((out, stats))
    }

    /// Batch normalization with stored statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f32],
        running_var: &[f32],
    ) -> Result<Var> {
        let c = self.check_affine(x, gamma, beta, "batch_norm")?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(shape_err!("batch_norm: running statistics do not cover {c} channels"));
        }
        let inv_std = running_var
            .iter()
            .map(|&v| (1.0 / (v as f64 + NORM_EPS as f64).sqrt()) as f32)
            .collect();
        self.normalize(x, gamma, beta, running_mean, inv_std, NormLayout::Frozen)
    }

    /// Group normalization: statistics per (sample, channel group) over the
    /// group's channels and all spatial positions.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let c = self.check_affine(x, gamma, beta, "group_norm")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        let s = self.shape(x).to_vec();
        let n = s[0];
        let inner: usize = s[2..].iter().product();
        let span = (c / groups) * inner;
        let xd = self.value(x).data();
        let mut mean = Vec::with_capacity(n * groups);
        let mut inv_std = Vec::with_capacity(n * groups);
        for chunk in xd.chunks(span) {
            let m = chunk.iter().map(|&v| v as f64).sum::<f64>() / span as f64;
            let v = chunk.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / span as f64;
            mean.push(m as f32);
            inv_std.push((1.0 / (v + NORM_EPS as f64).sqrt()) as f32);
        }
        self.normalize(x, gamma, beta, &mean, inv_std, NormLayout::Group(groups))
    }

    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        shift: &[f32],
        inv_std: Vec<f32>,
        layout: NormLayout,
    ) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = s[1];
        let inner: usize = s[2..].iter().product();
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut xhat = vec![0.0f32; xd.len()];
        let mut out = vec![0.0f32; xd.len()];
        for (plane, (xs, (hs, os))) in xd
            .chunks(inner)
            .zip(xhat.chunks_mut(inner).zip(out.chunks_mut(inner)))
            .enumerate()
        {
            let ci = plane % c;
            let stat = match layout {
                NormLayout::BatchTrain | NormLayout::Frozen => ci,
                NormLayout::Group(g) => (plane / c) * g + ci / (c / g),
            };
            let (m, is) = (shift[stat], inv_std[stat]);
            for ((xv, hv), ov) in xs.iter().zip(hs.iter_mut()).zip(os.iter_mut()) {
                *hv = (xv - m) * is;
                *ov = gd[ci] * *hv + bd[ci];
            }
        }
        let value = Tensor::new(s, out)?;
        let op = Op::Normalize {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            layout,
        };
        self.push(value, op, &[x, gamma, beta], "normalize")
    }

    /// Places the columns of each part `[N, k]` at the given class indices of
    /// an `[N, total]` output; columns no part covers hold `fill`.
    pub fn assemble_columns(&mut self, parts: &[(Var, Vec<usize>)], total: usize, fill: f32) -> Result<Var> {
        let n = match parts.first() {
            Some((v, _)) => self.shape(*v)[0],
            None => return Err(Error::Usage("assemble_columns with no parts".into())),
        };
        let mut out = vec![fill; n * total];
        let mut seen = vec![false; total];
        for (v, cols) in parts {
            let s = self.shape(*v);
            if s.len() != 2 || s[0] != n || s[1] != cols.len() {
                return Err(shape_err!(
                    "assemble_columns: part {:?} does not match {} columns over {n} rows",
                    s,
                    cols.len()
                ));
            }
            for &col in cols {
                if col >= total || seen[col] {
                    return Err(shape_err!("assemble_columns: column {col} invalid or duplicated"));
                }
                seen[col] = true;
            }
            let d = self.value(*v).data();
            let k = cols.len();
            for i in 0..n {
                for (j, &col) in cols.iter().enumerate() {
                    out[i * total + col] = d[i * k + j];
                }
            }
        }
        let value = Tensor::new(vec![n, total], out)?;
        let inputs: Vec<Var> = parts.iter().map(|(v, _)| *v).collect();
        let op = Op::AssembleColumns {
            parts: parts.to_vec(),
        };
        self.push(value, op, &inputs, "assemble_columns")
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 || self.value(loss).rank() > 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad || idx == loss.0 {
                self.backward_node(node, &gy, &mut grads);
            }
            grads[idx] = Some(gy);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f32>>], v: Var, f: impl FnOnce(&mut [f32])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn backward_node(&self, node: &Node, gy: &[f32], grads: &mut [Option<Vec<f32>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            let row = &db[p * n..(p + 1) * n];
                            ga[i * k + p] += gy[i * n..(i + 1) * n].iter().zip(row).map(|(g, b)| g * b).sum::<f32>();
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let av = da[i * k + p];
                            for (g, y) in gb[p * n..(p + 1) * n].iter_mut().zip(&gy[i * n..(i + 1) * n]) {
                                *g += av * y;
                            }
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (n, f, o) = (sx[0], sx[1], sw[0]);
                let (dx, dw) = (self.value(*x).data(), self.value(*w).data());
                self.accumulate(grads, *x, |gx| {
                    for i in 0..n {
                        let gr = &mut gx[i * f..(i + 1) * f];
                        for j in 0..o {
                            let g = gy[i * o + j];
                            for (a, wv) in gr.iter_mut().zip(&dw[j * f..(j + 1) * f]) {
                                *a += g * wv;
                            }
                        }
                    }
                });
                self.accumulate(grads, *w, |gw| {
                    for i in 0..n {
                        let xr = &dx[i * f..(i + 1) * f];
                        for j in 0..o {
                            let g = gy[i * o + j];
                            for (a, xv) in gw[j * f..(j + 1) * f].iter_mut().zip(xr) {
                                *a += g * xv;
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    self.accumulate(grads, *b, |gb| {
                        for row in gy.chunks(o) {
                            for (a, g) in gb.iter_mut().zip(row) {
                                *a += g;
                            }
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(*x, *w, *b, *geom, gy, grads),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, gy));
                self.accumulate(grads, *b, |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, gy));
                self.accumulate(grads, *b, |g| g.iter_mut().zip(gy).for_each(|(a, y)| *a -= y));
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |g| {
                    for ((gv, y), bv) in g.iter_mut().zip(gy).zip(db) {
                        *gv += y * bv;
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for ((gv, y), av) in g.iter_mut().zip(gy).zip(da) {
                        *gv += y * av;
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |g| g.iter_mut().zip(gy).for_each(|(gv, y)| *gv += y * s));
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, |g| add_into(g, gy));
                let s = self.shape(*x);
                let c = s[1];
                let inner: usize = s[2..].iter().product();
                self.accumulate(grads, *b, |g| {
                    for (i, chunk) in gy.chunks(inner).enumerate() {
                        g[i % c] += chunk.iter().sum::<f32>();
                    }
                });
            }
            Op::Relu(a) => {
                let da = self.value(*a).data();
                self.accumulate(grads, *a, |g| {
                    for ((gv, y), av) in g.iter_mut().zip(gy).zip(da) {
                        if *av > 0.0 {
                            *gv += y;
                        }
                    }
                });
            }
            Op::MaxPool2d { x, argmax } => {
                self.accumulate(grads, *x, |g| {
                    for (y, &src) in gy.iter().zip(argmax) {
                        g[src] += y;
                    }
                });
            }
            Op::Sum(a) => {
                let y = gy[0];
                self.accumulate(grads, *a, |g| g.iter_mut().for_each(|gv| *gv += y));
            }
            Op::Mean(a) => {
                let y = gy[0] / self.value(*a).numel() as f32;
                self.accumulate(grads, *a, |g| g.iter_mut().for_each(|gv| *gv += y));
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let c = self.shape(*logits)[1];
                let n = labels.len();
                let y = gy[0] / n as f32;
                self.accumulate(grads, *logits, |g| {
                    for i in 0..n {
                        for j in 0..c {
                            let target = if j == labels[i] { 1.0 } else { 0.0 };
                            g[i * c + j] += y * (probs[i * c + j] - target);
                        }
                    }
                });
            }
            Op::SliceDim1 { x, start } => {
                let sx = self.shape(*x);
                let len = node.value.shape()[1];
                let inner: usize = sx[2..].iter().product();
                let row = sx[1] * inner;
                self.accumulate(grads, *x, |g| {
                    for (ni, part) in gy.chunks(len * inner).enumerate() {
                        let base = ni * row + start * inner;
                        add_into(&mut g[base..base + len * inner], part);
                    }
                });
            }
            Op::ConcatDim1(parts) => {
                let s = node.value.shape();
                let inner: usize = s[2..].iter().product();
                let row = s[1] * inner;
                let mut offset = 0;
                for p in parts {
                    let width = self.shape(*p)[1] * inner;
                    self.accumulate(grads, *p, |g| {
                        for (ni, gp) in g.chunks_mut(width).enumerate() {
                            let base = ni * row + offset;
                            add_into(gp, &gy[base..base + width]);
                        }
                    });
                    offset += width;
                }
            }
            Op::Reshape(x) => self.accumulate(grads, *x, |g| add_into(g, gy)),
            Op::GatherRows { x, rows } => {
                let inner: usize = self.shape(*x)[1..].iter().product();
                self.accumulate(grads, *x, |g| {
                    for (chunk, &r) in gy.chunks(inner.max(1)).zip(rows) {
                        add_into(&mut g[r * inner..(r + 1) * inner], chunk);
                    }
                });
            }
            Op::Normalize {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                layout,
            } => self.normalize_backward(*x, *gamma, *beta, xhat, inv_std, *layout, gy, grads),
            Op::AssembleColumns { parts } => {
                let total = node.value.shape()[1];
                for (v, cols) in parts {
                    let k = cols.len();
                    self.accumulate(grads, *v, |g| {
                        for (i, row) in g.chunks_mut(k).enumerate() {
                            for (j, &col) in cols.iter().enumerate() {
                                row[j] += gy[i * total + col];
                            }
                        }
                    });
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        gy: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (n, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, cin_g, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        let ConvGeom { stride, pad, groups } = geom;
        let ho = conv_out(h, kh, stride, pad).unwrap();
        let wo = conv_out(wd, kw, stride, pad).unwrap();
        let dims = ConvDims::new(&sx, &sw, geom, ho, wo);
        let cout_g = cout / groups;
        let plane = ho * wo;
        let rows = cin_g * kh * kw;
        let xd = self.value(x).data();
        let wdat = self.value(w).data();
        if let Some(b) = b {
            self.accumulate(grads, b, |gb| {
                for ni in 0..n {
                    for (oc, g) in gb.iter_mut().enumerate() {
                        let base = (ni * cout + oc) * plane;
                        *g += lane_sum(&gy[base..base + plane]);
                    }
                }
            });
        }
        let mut col = vec![0.0f32; rows * plane];
        self.accumulate(grads, w, |gw| {
            for ni in 0..n {
                for g in 0..groups {
                    let xin = &xd[(ni * cin + g * cin_g) * h * wd..(ni * cin + (g + 1) * cin_g) * h * wd];
                    dims.im2col(xin, &mut col);
                    for oc in g * cout_g..(g + 1) * cout_g {
                        let grow = &gy[(ni * cout + oc) * plane..(ni * cout + oc + 1) * plane];
                        let gwrow = &mut gw[oc * rows..(oc + 1) * rows];
                        for (r, gwv) in gwrow.iter_mut().enumerate() {
                            *gwv += dot(grow, &col[r * plane..(r + 1) * plane]);
                        }
                    }
                }
            }
        });
        self.accumulate(grads, x, |gx| {
            for ni in 0..n {
                for g in 0..groups {
                    col.fill(0.0);
                    for oc in g * cout_g..(g + 1) * cout_g {
                        let grow = &gy[(ni * cout + oc) * plane..(ni * cout + oc + 1) * plane];
                        let wrow = &wdat[oc * rows..(oc + 1) * rows];
                        for (r, &wv) in wrow.iter().enumerate() {
                            axpy(&mut col[r * plane..(r + 1) * plane], wv, grow);
                        }
                    }
                    let gin = &mut gx[(ni * cin + g * cin_g) * h * wd..(ni * cin + (g + 1) * cin_g) * h * wd];
                    dims.col2im(&col, gin);
                }
            }
        });
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[f32],
        inv_std: &[f32],
        layout: NormLayout,
        gy: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let s = self.shape(x);
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let gd = self.value(gamma).data();
        self.accumulate(grads, beta, |gb| {
            for (plane, chunk) in gy.chunks(inner).enumerate() {
                gb[plane % c] += chunk.iter().sum::<f32>();
            }
        });
        self.accumulate(grads, gamma, |gg| {
            for (plane, (g, h)) in gy.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                gg[plane % c] += g.iter().zip(h).map(|(a, b)| a * b).sum::<f32>();
            }
        });
        if !self.nodes[x.0].requires_grad {
            return;
        }
        // dxhat = dy * gamma; for statistics estimated from the normalized set S:
        // dx = inv_std * (dxhat - mean_S(dxhat) - xhat * mean_S(dxhat * xhat))
        let stat_of = |plane: usize| match layout {
            NormLayout::BatchTrain | NormLayout::Frozen => plane % c,
            NormLayout::Group(g) => (plane / c) * g + (plane % c) / (c / g),
        };
        let nstats = inv_std.len();
        let mut sum_d = vec![0.0f64; nstats];
        let mut sum_dh = vec![0.0f64; nstats];
        let mut count = vec![0usize; nstats];
        if !matches!(layout, NormLayout::Frozen) {
            for (plane, (g, h)) in gy.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                let st = stat_of(plane);
                let gm = gd[plane % c] as f64;
                for (a, b) in g.iter().zip(h) {
                    let d = *a as f64 * gm;
                    sum_d[st] += d;
                    sum_dh[st] += d * *b as f64;
                }
                count[st] += inner;
            }
        }
        let _ = n;
        self.accumulate(grads, x, |gx| {
            for (plane, ((g, h), out)) in gy
                .chunks(inner)
                .zip(xhat.chunks(inner))
                .zip(gx.chunks_mut(inner))
                .enumerate()
            {
                let st = stat_of(plane);
                let gm = gd[plane % c];
                let is = inv_std[st];
                if matches!(layout, NormLayout::Frozen) {
                    for (o, a) in out.iter_mut().zip(g) {
                        *o += a * gm * is;
                    }
                } else {
                    let m = count[st] as f64;
                    let md = sum_d[st] / m;
                    let mdh = sum_dh[st] / m;
                    for ((o, a), hv) in out.iter_mut().zip(g).zip(h) {
                        let d = *a as f64 * gm as f64;
                        *o += (is as f64 * (d - md - *hv as f64 * mdh)) as f32;
                    }
                }
            }
        });
    }
}

fn add_into(dst: &mut [f32], src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
