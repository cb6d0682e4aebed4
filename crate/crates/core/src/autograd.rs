//! Reverse-mode differentiation over an append-only tape.
//!
//! Every forward op pushes a node holding its output value. [`Tape::backward`]
//! walks the nodes in exact reverse order of creation, so gradient sums are
//! formed in a fixed order and results are bit-reproducible.

use std::sync::atomic::{AtomicU32, Ordering};

use crate::conv::{self, Padding, Wants};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Clamp applied to probabilities inside the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-12;

static NEXT_TAPE: AtomicU32 = AtomicU32::new(0);

/// Handle to a node on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: u32,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    },
    ConvTranspose2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        padding: Padding,
    },
    ConvSum {
        terms: Vec<ConvTerm>,
        bias: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    GlobalAvgPool(Var),
    Sum(Var),
    Concat(Vec<Var>),
    Bce {
        pred: Var,
        target: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Convolution weights bound to tape variables.
#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    pub kernel: Var,
    pub bias: Option<Var>,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvParams {
    pub fn same(kernel: Var, bias: Option<Var>) -> Self {
        ConvParams {
            kernel,
            bias,
            stride: 1,
            padding: Padding::Same,
        }
    }
}

/// One summand of [`Tape::conv_sum`].
#[derive(Clone, Copy, Debug)]
pub struct ConvTerm {
    pub input: Var,
    pub params: ConvParams,
    pub transposed: bool,
}

impl ConvTerm {
    pub fn conv(input: Var, params: ConvParams) -> Self {
        ConvTerm {
            input,
            params,
            transposed: false,
        }
    }

    pub fn transposed(input: Var, params: ConvParams) -> Self {
        ConvTerm {
            input,
            params,
            transposed: true,
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node {
        assert_eq!(v.tape, self.id, "variable belongs to a different tape");
        &self.nodes[v.index as usize]
    }

    pub fn contains(&self, v: Var) -> bool {
        v.tape == self.id && (v.index as usize) < self.nodes.len()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let index = u32::try_from(self.nodes.len()).expect("tape overflow");
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var { tape: self.id, index }
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.node(v).requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Accumulated gradient of `v`; zeros when nothing has flowed into it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = self.node(v);
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape().to_vec()),
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn conv2d(&mut self, input: Var, p: &ConvParams) -> Result<Var> {
        let value = conv::conv2d(
            self.value(input),
            self.value(p.kernel),
            p.bias.map(|b| self.value(b)),
            p.stride,
            p.padding,
        )?;
        let mut deps = vec![input, p.kernel];
        deps.extend(p.bias);
        let rg = self.any_grad(&deps);
        let op = Op::Conv2d {
            input,
            kernel: p.kernel,
            bias: p.bias,
            stride: p.stride,
            padding: p.padding,
        };
        Ok(self.push(value, op, rg))
    }

    /// Transposed convolution; `p.kernel` is laid out `[Ci, Co, k, k]` and stride must be 1.
    pub fn conv_transpose2d(&mut self, input: Var, p: &ConvParams) -> Result<Var> {
        if p.stride != 1 {
            return Err(Error::Config(format!(
                "conv_transpose2d supports stride 1 only, got {}",
                p.stride
            )));
        }
        let value = conv::conv_transpose2d(
            self.value(input),
            self.value(p.kernel),
            p.bias.map(|b| self.value(b)),
            p.padding,
        )?;
        let mut deps = vec![input, p.kernel];
        deps.extend(p.bias);
        let rg = self.any_grad(&deps);
        let op = Op::ConvTranspose2d {
            input,
            kernel: p.kernel,
            bias: p.bias,
            padding: p.padding,
        };
        Ok(self.push(value, op, rg))
    }

    fn term_forward(&self, term: &ConvTerm) -> Result<Tensor> {
        let p = &term.params;
        if term.transposed {
            if p.stride != 1 {
                return Err(Error::Config(format!(
                    "conv_transpose2d supports stride 1 only, got {}",
                    p.stride
                )));
            }
            conv::conv_transpose2d(self.value(term.input), self.value(p.kernel), None, p.padding)
        } else {
            conv::conv2d(self.value(term.input), self.value(p.kernel), None, p.stride, p.padding)
        }
    }

    /// Sum of several (transposed) convolutions plus one shared channel bias,
    /// recorded as a single node. Per-term biases are ignored.
    pub fn conv_sum(&mut self, terms: &[ConvTerm], bias: Option<Var>) -> Result<Var> {
        let Some(first) = terms.first() else {
            return Err(Error::shape("conv_sum", "no terms"));
        };
        let mut value = self.term_forward(first)?;
        for term in &terms[1..] {
            let t = self.term_forward(term)?;
            if t.shape() != value.shape() {
                return Err(Error::shape(
                    "conv_sum",
                    format!("term output {:?} vs {:?}", t.shape(), value.shape()),
                ));
            }
            for (a, b) in value.data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
        let channels = value.shape()[1];
        let plane = value.shape()[2] * value.shape()[3];
        if let Some(b) = bias {
            let bt = self.value(b);
            if bt.numel() != channels {
                return Err(Error::shape(
                    "conv_sum",
                    format!("bias length {} != output channels {channels}", bt.numel()),
                ));
            }
            let bias_data = bt.data().to_vec();
            for (i, chunk) in value.data_mut().chunks_exact_mut(plane).enumerate() {
                let bv = bias_data[i % channels];
                for v in chunk {
                    *v += bv;
                }
            }
        }
        let mut deps: Vec<Var> = terms.iter().flat_map(|t| [t.input, t.params.kernel]).collect();
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        let op = Op::ConvSum {
            terms: terms.to_vec(),
            bias,
        };
        Ok(self.push(value, op, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sigmoid(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let last = *t
            .shape()
            .last()
            .ok_or_else(|| Error::shape("softmax", "scalar input has no axis"))?;
        if last == 0 {
            return Err(Error::shape("softmax", "empty last axis"));
        }
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks_exact(last) {
            data.extend(softmax(row));
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Softmax(a), rg))
    }

    /// `[B, C, H, W] -> [B, C]`, mean over the spatial axes.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let [b, c, h, w] = *t.shape() else {
            return Err(Error::shape(
                "global_avg_pool",
                format!("input must be [B, C, H, W], got {:?}", t.shape()),
            ));
        };
        if h == 0 || w == 0 {
            return Err(Error::shape("global_avg_pool", "empty spatial axes"));
        }
        let plane = (h * w) as f64;
        let data = t
            .data()
            .chunks_exact(h * w)
            .map(|ch| ch.iter().sum::<f64>() / plane)
            .collect();
        let value = Tensor::new([b, c], data)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::GlobalAvgPool(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    /// Concatenate 2-D `[B, n_i]` tensors along axis 1.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let rows = match *self.value(first).shape() {
            [b, _] => b,
            ref s => return Err(Error::shape("concat_cols", format!("inputs must be 2-D, got {s:?}"))),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            match *self.value(p).shape() {
                [b, n] if b == rows => widths.push(n),
                ref s => {
                    return Err(Error::shape(
                        "concat_cols",
                        format!("batch axis {rows} vs input shape {s:?}"),
                    ))
                }
            }
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &n) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * n..(r + 1) * n]);
            }
        }
        let value = Tensor::new([rows, total], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Mean binary cross-entropy between probabilities `pred` and 0/1 `target`.
    pub fn bce(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let loss = bce_loss(target.data(), self.value(pred).data())?;
        let rg = self.any_grad(&[pred]);
        let op = Op::Bce {
            pred,
            target: target.data().to_vec(),
        };
        Ok(self.push(Tensor::scalar(loss), op, rg))
    }

    /// Populate gradients of every `requires_grad` node reachable from `loss`.
    ///
    /// Leaf gradients accumulate across calls; intermediate gradients are
    /// released once propagated.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.contains(loss) {
            return Err(Error::Config("loss variable is not on this tape".into()));
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NotScalar(format!(
                "loss of shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        let root = loss.index as usize;
        if !self.nodes[root].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.nodes[root], &[1.0]);
        for i in (0..=root).rev() {
            let Some(upstream) = self.nodes[i].grad.take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = Some(upstream);
                continue;
            }
            let contributions = self.local_grads(i, &upstream)?;
            for (target, g) in contributions {
                let node = &mut self.nodes[target.index as usize];
                if node.requires_grad {
                    accumulate(node, &g);
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Vector-Jacobian products of node `i` for each of its inputs.
    fn local_grads(&self, i: usize, up: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => {
                let wants = Wants {
                    input: self.wants(*input),
                    kernel: self.wants(*kernel),
                    bias: bias.is_some_and(|b| self.wants(b)),
                };
                let g = conv::conv2d_backward(self.value(*input), self.value(*kernel), *stride, *padding, up, wants)?;
                out.extend(g.input.map(|d| (*input, d)));
                out.extend(g.kernel.map(|d| (*kernel, d)));
                if let (Some(b), Some(d)) = (bias, g.bias) {
                    out.push((*b, d));
                }
            }
            Op::ConvTranspose2d {
                input,
                kernel,
                bias,
                padding,
            } => {
                let wants = Wants {
                    input: self.wants(*input),
                    kernel: self.wants(*kernel),
                    bias: bias.is_some_and(|b| self.wants(b)),
                };
                let g = conv::conv_transpose2d_backward(self.value(*input), self.value(*kernel), *padding, up, wants)?;
                out.extend(g.input.map(|d| (*input, d)));
                out.extend(g.kernel.map(|d| (*kernel, d)));
                if let (Some(b), Some(d)) = (bias, g.bias) {
                    out.push((*b, d));
                }
            }
            Op::ConvSum { terms, bias } => {
                for term in terms {
                    let wants = Wants {
                        input: self.wants(term.input),
                        kernel: self.wants(term.params.kernel),
                        bias: false,
                    };
                    if !(wants.input || wants.kernel) {
                        continue;
                    }
                    let input = self.value(term.input);
                    let kernel = self.value(term.params.kernel);
                    let g = if term.transposed {
                        conv::conv_transpose2d_backward(input, kernel, term.params.padding, up, wants)?
                    } else {
                        conv::conv2d_backward(input, kernel, term.params.stride, term.params.padding, up, wants)?
                    };
                    out.extend(g.input.map(|d| (term.input, d)));
                    out.extend(g.kernel.map(|d| (term.params.kernel, d)));
                }
                if let Some(b) = bias.filter(|&b| self.wants(b)) {
                    let shape = node.value.shape();
                    let (channels, plane) = (shape[1], shape[2] * shape[3]);
                    let mut db = vec![0.0; channels];
                    for (i, chunk) in up.chunks_exact(plane).enumerate() {
                        db[i % channels] += chunk.iter().sum::<f64>();
                    }
                    out.push((b, db));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, up.to_vec()));
                out.push((*b, up.to_vec()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, up.iter().zip(vb).map(|(g, y)| g * y).collect()));
                out.push((*b, up.iter().zip(va).map(|(g, x)| g * x).collect()));
            }
            Op::Scale(a, f) => out.push((*a, up.iter().map(|g| g * f).collect())),
            Op::Relu(a) => {
                let x = self.value(*a).data();
                out.push((
                    *a,
                    up.iter().zip(x).map(|(g, &x)| if x > 0.0 { *g } else { 0.0 }).collect(),
                ));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                out.push((*a, up.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect()));
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let last = *node.value.shape().last().unwrap_or(&1);
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks_exact(last).zip(up.chunks_exact(last)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    d.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                out.push((*a, d));
            }
            Op::GlobalAvgPool(a) => {
                let shape = self.value(*a).shape();
                let plane = shape[2] * shape[3];
                let inv = 1.0 / plane as f64;
                let mut d = Vec::with_capacity(plane * up.len());
                for g in up {
                    d.extend(std::iter::repeat_n(g * inv, plane));
                }
                out.push((*a, d));
            }
            Op::Sum(a) => out.push((*a, vec![up[0]; self.value(*a).numel()])),
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).shape()[1]).collect();
                let total: usize = widths.iter().sum();
                let rows = node.value.shape()[0];
                let mut offset = 0;
                for (&p, &n) in parts.iter().zip(&widths) {
                    let mut d = Vec::with_capacity(rows * n);
                    for r in 0..rows {
                        d.extend_from_slice(&up[r * total + offset..r * total + offset + n]);
                    }
                    offset += n;
                    out.push((p, d));
                }
            }
            Op::Bce { pred, target } => {
                let p = self.value(*pred).data();
                let scale = up[0] / p.len() as f64;
                out.push((
                    *pred,
                    p.iter()
                        .zip(target)
                        .map(|(&p, &y)| {
                            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                            -scale * (y / p - (1.0 - y) / (1.0 - p))
                        })
                        .collect(),
                ));
            }
        }
        Ok(out)
    }
}

fn accumulate(node: &mut Node, g: &[f64]) {
    match &mut node.grad {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        None => node.grad = Some(g.to_vec()),
    }
}

/// Logistic function, evaluated on the branch that cannot overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Mean binary cross-entropy; `yhat` is clamped into `[BCE_EPS, 1 - BCE_EPS]`.
pub fn bce_loss(y: &[f64], yhat: &[f64]) -> Result<f64> {
    if y.len() != yhat.len() {
        return Err(Error::shape(
            "bce_loss",
            format!("targets have {} entries, predictions {}", y.len(), yhat.len()),
        ));
    }
    if y.is_empty() {
        return Err(Error::shape("bce_loss", "empty input"));
    }
    let total: f64 = y
        .iter()
        .zip(yhat)
        .map(|(&y, &p)| {
            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            y * p.ln() + (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(-total / y.len() as f64)
}

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compare taped gradients of a scalar function against central differences.
///
/// `f` receives a fresh tape and a trainable leaf holding the point, and must
/// return a scalar node.
pub fn grad_check<F>(f: F, point: &Tensor, h: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |x: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let out = f(&mut tape, v)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let x = tape.param(point.clone());
    let out = f(&mut tape, x)?;
    let base = tape.value(out).item()?;
    if !base.is_finite() {
        return Err(Error::NonFinite {
            what: "grad_check base evaluation".into(),
            index: 0,
        });
    }
    tape.backward(out)?;
    let analytic = tape.grad(x).into_data();

    let mut numeric = Vec::with_capacity(point.numel());
    let mut probe = point.clone();
    for i in 0..point.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                what: "grad_check perturbed evaluation".into(),
                index: i,
            });
        }
        numeric.push((plus - minus) / (2.0 * h));
    }
    let (worst_index, max_rel_error) = relative_errors(&analytic, &numeric);
    Ok(GradCheck {
        max_rel_error,
        worst_index,
        analytic,
        numeric,
    })
}

pub(crate) fn relative_errors(analytic: &[f64], numeric: &[f64]) -> (usize, f64) {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .enumerate()
        .fold((0, 0.0), |best, (i, e)| if e > best.1 { (i, e) } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut tape = Tape::new();
        let z = tape.param(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(z);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(z).data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::full([4], -3.0));
        let r = tape.relu(z);
        assert!(tape.value(r).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gap_values_and_gradient() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new([1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let g = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(g).data(), &[4.0]);
        let s = tape.sum(g);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[0.25; 4]);

        let c = tape.constant(Tensor::full([2, 3, 4, 5], 1.5));
        let g = tape.global_avg_pool(c).unwrap();
        assert!(tape.value(g).data().iter().all(|&v| close(v, 1.5, 1e-15)));
    }

    #[test]
    fn sigmoid_cases() {
        assert_eq!(sigmoid(0.0), 0.5);
        for x in [1000.0, -1000.0] {
            let s = sigmoid(x);
            assert!(s.is_finite() && (0.0..=1.0).contains(&s));
        }
        assert!(sigmoid(-1000.0) >= 0.0 && sigmoid(1000.0) <= 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::uniform([64], 20.0, &mut rng);
        for &v in x.data() {
            assert!(close(sigmoid(v), 1.0 - sigmoid(-v), 1e-12));
        }
    }

    #[test]
    fn softmax_cases() {
        for p in softmax(&[0.0, 0.0, 0.0]) {
            assert!(close(p, 1.0 / 3.0, 1e-15));
        }
        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]);
        for (a, b) in p.iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!(close(*a, b, 1e-15));
        }
        let x = [0.3, -2.0, 5.0, 1.0];
        let shifted: Vec<f64> = x.iter().map(|v| v + 123.4).collect();
        for (a, b) in softmax(&x).iter().zip(softmax(&shifted)) {
            assert!(close(*a, b, 1e-12));
        }
        let big = softmax(&[1000.0, -1000.0, 999.0]);
        assert!(big.iter().all(|&v| v >= 0.0) && close(big.iter().sum(), 1.0, 1e-12));
    }

    #[test]
    fn bce_cases() {
        assert!(close(bce_loss(&[1.0], &[0.5]).unwrap(), std::f64::consts::LN_2, 1e-15));
        let y = [1.0, 0.0, 0.0, 1.0];
        assert!(bce_loss(&y, &y).unwrap() <= 1e-11);
        let v = bce_loss(&[1.0, 0.0], &[0.9, 0.2]).unwrap();
        let hand = -(0.9f64.ln() + 0.8f64.ln()) / 2.0;
        assert!(close(v, hand, 1e-15));
        assert!(close(v, 0.164252, 1e-6));
        assert!(bce_loss(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn sum_and_quadratic_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let point = Tensor::uniform([2, 3], 2.0, &mut rng);

        let mut tape = Tape::new();
        let x = tape.param(point.clone());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert!(tape.grad(x).data().iter().all(|&g| g == 1.0));

        let mut tape = Tape::new();
        let x = tape.param(point.clone());
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        tape.backward(half).unwrap();
        assert_eq!(tape.grad(x), point);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0, 2.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[2.0, 2.0]);
        tape.zero_grad();
        assert_eq!(tape.grad(x).data(), &[0.0, 0.0]);
    }

    #[test]
    fn fan_out_sums_contributions() {
        // x used by three ops: d/dx (x + x + 3x) = 5
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![0.7]));
        let a = tape.add(x, x).unwrap();
        let b = tape.scale(x, 3.0);
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).data(), &[5.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros([3]));
        assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
    }

    #[test]
    fn unreached_leaf_has_zero_grad() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::from_vec(vec![1.0]));
        let unused = tape.param(Tensor::from_vec(vec![4.0, 5.0]));
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn concat_routes_gradients() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::new([2, 1], vec![1.0, 2.0]).unwrap());
        let b = tape.param(Tensor::new([2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = tape.concat_cols(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = tape.constant(Tensor::new([2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = tape.mul(c, w).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).data(), &[1.0, 4.0]);
        assert_eq!(tape.grad(b).data(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn grad_check_sum_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let point = Tensor::uniform([10], 3.0, &mut rng);
        let r = grad_check(|t, x| Ok(t.sum(x)), &point, 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-10, "{}", r.max_rel_error);
    }

    #[test]
    fn grad_check_bce_of_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits = Tensor::uniform([3, 4], 3.0, &mut rng);
        let target = Tensor::new([3, 4], (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect()).unwrap();
        let r = grad_check(
            |t, x| {
                let p = t.sigmoid(x);
                t.bce(p, &target)
            },
            &logits,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn grad_check_softmax_and_convs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = Tensor::uniform([2, 3, 5, 5], 1.0, &mut rng);
        let w = Tensor::uniform([4, 3, 3, 3], 0.5, &mut rng);
        let wt = Tensor::uniform([4, 3, 3, 3], 0.5, &mut rng);
        let b = Tensor::uniform([4], 0.5, &mut rng);
        let weights = Tensor::uniform([2, 3], 1.0, &mut rng);
        // input gradient through conv -> relu -> convT -> GAP -> softmax
        let f = |t: &mut Tape, x: Var| -> Result<Var> {
            let kw = t.constant(w.clone());
            let kb = t.constant(b.clone());
            let kt = t.constant(wt.clone());
            let y = t.conv2d(x, &ConvParams::same(kw, Some(kb)))?;
            let y = t.sigmoid(y);
            let z = t.conv_transpose2d(y, &ConvParams::same(kt, None))?;
            let g = t.global_avg_pool(z)?;
            let s = t.softmax(g)?;
            let c = t.constant(weights.clone());
            let m = t.mul(s, c)?;
            Ok(t.sum(m))
        };
        let r = grad_check(f, &x0, 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{}", r.max_rel_error);

        // kernel gradients
        let fk = |t: &mut Tape, k: Var| -> Result<Var> {
            let x = t.constant(x0.clone());
            let y = t.conv2d(x, &ConvParams::same(k, None))?;
            let y2 = t.mul(y, y)?;
            let kt = t.constant(wt.clone());
            let z = t.conv_transpose2d(y2, &ConvParams::same(kt, None))?;
            Ok(t.sum(z))
        };
        let r = grad_check(fk, &w, 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{}", r.max_rel_error);

        let ft = |t: &mut Tape, k: Var| -> Result<Var> {
            let x = t.constant(x0.clone());
            let kw = t.constant(w.clone());
            let y = t.conv2d(x, &ConvParams::same(kw, None))?;
            let z = t.conv_transpose2d(y, &ConvParams::same(k, None))?;
            let z2 = t.mul(z, z)?;
            Ok(t.sum(z2))
        };
        let r = grad_check(ft, &wt, 1e-5).unwrap();
        assert!(r.max_rel_error <= 1e-4, "{}", r.max_rel_error);
    }

    #[test]
    fn conv_sum_matches_separate_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::uniform([2, 2, 5, 5], 1.0, &mut rng);
        let h = Tensor::uniform([2, 3, 5, 5], 1.0, &mut rng);
        let w = Tensor::uniform([3, 2, 3, 3], 1.0, &mut rng);
        let wt = Tensor::uniform([3, 3, 3, 3], 1.0, &mut rng);
        let b = Tensor::uniform([3], 1.0, &mut rng);

        let mut t = Tape::new();
        let (xv, hv) = (t.param(x.clone()), t.param(h.clone()));
        let (wv, wtv, bv) = (t.param(w.clone()), t.param(wt.clone()), t.param(b.clone()));
        let fused = t
            .conv_sum(
                &[
                    ConvTerm::conv(xv, ConvParams::same(wv, None)),
                    ConvTerm::transposed(hv, ConvParams::same(wtv, None)),
                ],
                Some(bv),
            )
            .unwrap();
        let a = t.conv2d(xv, &ConvParams::same(wv, Some(bv))).unwrap();
        let c = t.conv_transpose2d(hv, &ConvParams::same(wtv, None)).unwrap();
        let split = t.add(a, c).unwrap();
        for (p, q) in t.value(fused).data().iter().zip(t.value(split).data()) {
            assert!((p - q).abs() < 1e-12);
        }

        let check = |use_fused: bool| {
            let mut t = Tape::new();
            let (xv, hv) = (t.param(x.clone()), t.param(h.clone()));
            let (wv, wtv, bv) = (t.param(w.clone()), t.param(wt.clone()), t.param(b.clone()));
            let z = if use_fused {
                t.conv_sum(
                    &[
                        ConvTerm::conv(xv, ConvParams::same(wv, None)),
                        ConvTerm::transposed(hv, ConvParams::same(wtv, None)),
                    ],
                    Some(bv),
                )
                .unwrap()
            } else {
                let a = t.conv2d(xv, &ConvParams::same(wv, Some(bv))).unwrap();
                let c = t.conv_transpose2d(hv, &ConvParams::same(wtv, None)).unwrap();
                t.add(a, c).unwrap()
            };
            let sq = t.mul(z, z).unwrap();
            let s = t.sum(sq);
            t.backward(s).unwrap();
            [xv, hv, wv, wtv, bv].map(|v| t.grad(v))
        };
        for (g1, g2) in check(true).iter().zip(check(false).iter()) {
            for (p, q) in g1.data().iter().zip(g2.data()) {
                assert!((p - q).abs() < 1e-9 * q.abs().max(1.0));
            }
        }
    }

    #[test]
    fn forward_is_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::uniform([2, 2, 6, 6], 1.0, &mut rng);
        let w = Tensor::uniform([3, 2, 3, 3], 1.0, &mut rng);
        let run = || {
            let mut t = Tape::new();
            let xv = t.constant(x.clone());
            let wv = t.constant(w.clone());
            let y = t.conv2d(xv, &ConvParams::same(wv, None)).unwrap();
            t.value(y).clone()
        };
        assert_eq!(run().data(), run().data());
    }
}
