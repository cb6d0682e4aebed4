//! Model grid: plain, widened, recurrent and per-class cluster ensembles.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ConvParams, GradCheck, Tape, Var};
use crate::codec::{self, Reader};
use crate::error::{Error, Result};
use crate::rcl::{self, RclLayer, RclStack, Readouts, Wiring};
use crate::tensor::Tensor;

/// The fifteen named variants, in table order.
pub const GRID: [&str; 15] = [
    "B",
    "BF",
    "BT",
    "BL",
    "BLT",
    "BT-EA",
    "BL-EA",
    "BLT-EA",
    "HB-B",
    "HB-BL",
    "HB-BT",
    "HB-BLT",
    "HB-BL-EA",
    "HB-BT-EA",
    "HB-BLT-EA",
];

pub const DEFAULT_CHANNELS: (usize, usize) = (32, 64);
pub const DEFAULT_RECURRENT_STEPS: usize = 4;

/// Samples per forward chunk when predicting on large sets.
const PREDICT_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSpec {
    pub wiring: Wiring,
    pub ea: bool,
    pub hb: bool,
    pub n_classes: usize,
    pub channels: (usize, usize),
    /// Multiplier on the second hidden layer's width (the "F" variant).
    pub width_factor: usize,
    pub time_steps: usize,
    pub kernel: usize,
}

impl ModelSpec {
    pub fn new(wiring: Wiring, n_classes: usize) -> Self {
        ModelSpec {
            wiring,
            ea: false,
            hb: false,
            n_classes,
            channels: DEFAULT_CHANNELS,
            width_factor: 1,
            time_steps: if wiring.is_recurrent() {
                DEFAULT_RECURRENT_STEPS
            } else {
                1
            },
            kernel: 3,
        }
    }

    /// Parse a grid name such as `HB-BLT-EA` or `BF`. `BF` widens by `n_classes`.
    pub fn parse(name: &str, n_classes: usize) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "unknown model name {name:?}; expected one of {}",
                GRID.join(", ")
            ))
        };
        let mut rest = name;
        let hb = match rest.strip_prefix("HB-") {
            Some(r) => {
                rest = r;
                true
            }
            None => false,
        };
        let ea = match rest.strip_suffix("-EA") {
            Some(r) => {
                rest = r;
                true
            }
            None => false,
        };
        let (wiring, factor) = if rest == "BF" {
            (Wiring::B, n_classes)
        } else {
            (rest.parse::<Wiring>().map_err(|_| bad())?, 1)
        };
        let mut spec = ModelSpec::new(wiring, n_classes);
        spec.hb = hb;
        spec.ea = ea;
        spec.width_factor = factor;
        spec.validate().map_err(|_| bad())?;
        Ok(spec)
    }

    pub fn name(&self) -> String {
        let mut s = String::new();
        if self.hb {
            s.push_str("HB-");
        }
        if self.is_widened() {
            s.push_str("BF");
        } else {
            s.push_str(self.wiring.as_str());
        }
        if self.ea {
            s.push_str("-EA");
        }
        s
    }

    fn is_widened(&self) -> bool {
        self.width_factor > 1
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_classes == 0 {
            return fail("n_classes must be at least 1".into());
        }
        if self.channels.0 == 0 || self.channels.1 == 0 {
            return fail(format!("hidden widths must be positive, got {:?}", self.channels));
        }
        if self.kernel == 0 || self.kernel.is_multiple_of(2) {
            return fail(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.width_factor == 0 {
            return fail("width_factor must be at least 1".into());
        }
        if self.is_widened() && (self.wiring != Wiring::B || self.hb || self.ea) {
            return fail("width_factor > 1 is only defined for the plain widened model".into());
        }
        if self.ea && !self.wiring.is_recurrent() {
            return fail("evidence accumulation needs a recurrent wiring".into());
        }
        if self.wiring == Wiring::B && self.time_steps != 1 {
            return fail(format!("wiring B runs exactly one time step, got {}", self.time_steps));
        }
        if self.time_steps == 0 {
            return fail("time_steps must be at least 1".into());
        }
        Ok(())
    }

    pub fn n_clusters(&self) -> usize {
        if self.hb {
            self.n_classes
        } else {
            1
        }
    }

    pub fn readout_width(&self) -> usize {
        if self.hb {
            1
        } else {
            self.n_classes
        }
    }

    fn conv2_width(&self) -> usize {
        self.channels.1 * self.width_factor
    }

    /// Parameter names and shapes in registry order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel;
        let (c1, c2) = (self.channels.0, self.conv2_width());
        let out = self.readout_width();
        let mut v = Vec::new();
        for j in 0..self.n_clusters() {
            let p = |s: &str| format!("cluster{j}.{s}");
            v.push((p("conv1.weight"), vec![c1, 1, k, k]));
            v.push((p("conv1.bias"), vec![c1]));
            if self.wiring.lateral() {
                v.push((p("conv1.lateral"), vec![c1, c1, k, k]));
            }
            if self.wiring.top_down() {
                v.push((p("conv1.topdown"), vec![c2, c1, k, k]));
            }
            v.push((p("conv2.weight"), vec![c2, c1, k, k]));
            v.push((p("conv2.bias"), vec![c2]));
            if self.wiring.lateral() {
                v.push((p("conv2.lateral"), vec![c2, c2, k, k]));
            }
            v.push((p("readout.weight"), vec![out, c2, k, k]));
            v.push((p("readout.bias"), vec![out]));
        }
        v
    }
}

impl fmt::Display for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Which per-step predictions enter the loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossOver {
    FinalStep,
    MeanOverSteps,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Registry indices of one cluster's tensors.
#[derive(Clone, Debug)]
struct ClusterLayout {
    conv1_w: usize,
    conv1_b: usize,
    conv1_lateral: Option<usize>,
    conv1_topdown: Option<usize>,
    conv2_w: usize,
    conv2_b: usize,
    conv2_lateral: Option<usize>,
    readout_w: usize,
    readout_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    params: Vec<Param>,
}

impl Model {
    /// Glorot-uniform kernels and zero biases, drawn in registry order from `seed`.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = spec
            .layout()
            .into_iter()
            .map(|(name, shape)| {
                let value = if shape.len() == 4 {
                    let rf = shape[2] * shape[3];
                    let bound = (6.0 / ((shape[0] + shape[1]) * rf) as f64).sqrt();
                    Tensor::uniform(shape, bound, &mut rng)
                } else {
                    Tensor::zeros(shape)
                };
                Param { name, value }
            })
            .collect();
        Ok(Model {
            spec: spec.clone(),
            params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn count_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Parameter count of a single cluster.
    pub fn cluster_param_count(&self) -> usize {
        self.count_params() / self.spec.n_clusters()
    }

    fn cluster_layout(&self, j: usize) -> ClusterLayout {
        let prefix = format!("cluster{j}.");
        let find = |s: &str| self.params.iter().position(|p| p.name.strip_prefix(&prefix) == Some(s));
        ClusterLayout {
            conv1_w: find("conv1.weight").expect("registry built from layout"),
            conv1_b: find("conv1.bias").expect("registry built from layout"),
            conv1_lateral: find("conv1.lateral"),
            conv1_topdown: find("conv1.topdown"),
            conv2_w: find("conv2.weight").expect("registry built from layout"),
            conv2_b: find("conv2.bias").expect("registry built from layout"),
            conv2_lateral: find("conv2.lateral"),
            readout_w: find("readout.weight").expect("registry built from layout"),
            readout_b: find("readout.bias").expect("registry built from layout"),
        }
    }

    /// Registry indices owned by cluster `j`.
    pub fn cluster_param_indices(&self, j: usize) -> Vec<usize> {
        let prefix = format!("cluster{j}.");
        (0..self.params.len())
            .filter(|&i| self.params[i].name.starts_with(&prefix))
            .collect()
    }

    /// Put cluster `j` on the tape; returns its stack and the (registry index, var) bindings.
    fn bind_cluster(&self, tape: &mut Tape, j: usize, trainable: bool) -> (RclStack, Vec<(usize, Var)>) {
        let l = self.cluster_layout(j);
        let mut bound = Vec::new();
        let mut bind = |i: usize| {
            let value = self.params[i].value.clone();
            let v = if trainable {
                tape.param(value)
            } else {
                tape.constant(value)
            };
            bound.push((i, v));
            v
        };
        let c1w = bind(l.conv1_w);
        let c1b = bind(l.conv1_b);
        let c1l = l.conv1_lateral.map(&mut bind);
        let c1t = l.conv1_topdown.map(&mut bind);
        let c2w = bind(l.conv2_w);
        let c2b = bind(l.conv2_b);
        let c2l = l.conv2_lateral.map(&mut bind);
        let rw = bind(l.readout_w);
        let rb = bind(l.readout_b);
        let stack = RclStack {
            wiring: self.spec.wiring,
            layers: vec![
                RclLayer {
                    index: 1,
                    bottom_up: ConvParams::same(c1w, Some(c1b)),
                    lateral: c1l.map(|k| ConvParams::same(k, None)),
                    top_down: c1t.map(|k| ConvParams::same(k, None)),
                },
                RclLayer {
                    index: 2,
                    bottom_up: ConvParams::same(c2w, Some(c2b)),
                    lateral: c2l.map(|k| ConvParams::same(k, None)),
                    top_down: None,
                },
            ],
            readout: ConvParams::same(rw, Some(rb)),
        };
        (stack, bound)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 1 {
            return Err(Error::shape("model input", format!("expected [B, 1, H, W], got {s:?}")));
        }
        Ok(())
    }

    fn check_targets(&self, x: &Tensor, y: &Tensor) -> Result<()> {
        let n = self.spec.n_classes;
        if y.shape() != [x.shape()[0], n] {
            return Err(Error::shape(
                "targets",
                format!("expected [{}, {n}], got {:?}", x.shape()[0], y.shape()),
            ));
        }
        Ok(())
    }

    fn readouts_for(&self, loss: LossOver) -> Readouts {
        match loss {
            LossOver::FinalStep => Readouts::FinalStep,
            LossOver::MeanOverSteps => Readouts::EveryStep,
        }
    }

    /// Raw logits `[B, n_classes]`, per step or final step only.
    pub fn forward_logits(&self, x: &Tensor, which: Readouts) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let batch = x.shape()[0];
        let n = self.spec.n_classes;
        let steps = match which {
            Readouts::EveryStep => self.spec.time_steps,
            Readouts::FinalStep => 1,
        };
        let mut out = vec![Tensor::zeros([batch, n]); steps];
        let width = self.spec.readout_width();
        for j in 0..self.spec.n_clusters() {
            let mut tape = Tape::new();
            let (stack, _) = self.bind_cluster(&mut tape, j, false);
            let input = tape.constant(x.clone());
            let logits = rcl::unroll(&mut tape, &stack, input, self.spec.time_steps, self.spec.ea, which)?;
            for (dst, v) in out.iter_mut().zip(logits) {
                let src = tape.value(v).data();
                for b in 0..batch {
                    dst.data_mut()[b * n + j * width..][..width].copy_from_slice(&src[b * width..][..width]);
                }
            }
        }
        Ok(out)
    }

    /// Per-step label probabilities `[B, n_classes]`.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self
            .forward_logits(x, Readouts::EveryStep)?
            .into_iter()
            .map(|t| t.map(crate::autograd::sigmoid))
            .collect())
    }

    /// Final-step probabilities, computed in chunks to bound memory.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let batch = x.shape()[0];
        let mut data = Vec::with_capacity(batch * self.spec.n_classes);
        let mut start = 0;
        while start < batch {
            let end = (start + PREDICT_CHUNK).min(batch);
            let chunk = x.narrow_batch(start, end)?;
            let logits = self.forward_logits(&chunk, Readouts::FinalStep)?;
            data.extend(logits[0].data().iter().map(|&v| crate::autograd::sigmoid(v)));
            start = end;
        }
        Tensor::new([batch, self.spec.n_classes], data)
    }

    fn cluster_targets(&self, y: &Tensor, j: usize) -> Tensor {
        if !self.spec.hb {
            return y.clone();
        }
        let n = self.spec.n_classes;
        let col = y.data().chunks(n).map(|row| row[j]).collect();
        Tensor::new([y.shape()[0], 1], col).expect("column shape")
    }

    /// Scalar loss of cluster `j` on `tape`; clusters' losses sum to the model loss.
    fn cluster_loss(
        &self,
        tape: &mut Tape,
        stack: &RclStack,
        x: &Tensor,
        y: &Tensor,
        j: usize,
        loss: LossOver,
    ) -> Result<Var> {
        let input = tape.constant(x.clone());
        let logits = rcl::unroll(
            tape,
            stack,
            input,
            self.spec.time_steps,
            self.spec.ea,
            self.readouts_for(loss),
        )?;
        let target = self.cluster_targets(y, j);
        let mut total = None;
        for l in &logits {
            let p = tape.sigmoid(*l);
            let term = tape.bce(p, &target)?;
            total = Some(match total {
                None => term,
                Some(t) => tape.add(t, term)?,
            });
        }
        let weight = 1.0 / (logits.len() * self.spec.n_clusters()) as f64;
        Ok(tape.scale(total.expect("at least one step"), weight))
    }

    /// Mean binary cross-entropy over samples and labels.
    pub fn loss(&self, x: &Tensor, y: &Tensor, over: LossOver) -> Result<f64> {
        self.check_input(x)?;
        self.check_targets(x, y)?;
        let mut total = 0.0;
        for j in 0..self.spec.n_clusters() {
            let mut tape = Tape::new();
            let (stack, _) = self.bind_cluster(&mut tape, j, false);
            let l = self.cluster_loss(&mut tape, &stack, x, y, j, over)?;
            total += tape.value(l).item()?;
        }
        Ok(total)
    }

    /// Loss and its gradient for every registry entry, in registry order.
    ///
    /// Clusters are differentiated one at a time, so peak memory is that of a
    /// single cluster's unrolled graph.
    pub fn loss_and_grads(&self, x: &Tensor, y: &Tensor, over: LossOver) -> Result<(f64, Vec<Tensor>)> {
        self.check_input(x)?;
        self.check_targets(x, y)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.params.len()];
        let mut total = 0.0;
        for j in 0..self.spec.n_clusters() {
            let mut tape = Tape::new();
            let (stack, bound) = self.bind_cluster(&mut tape, j, true);
            let l = self.cluster_loss(&mut tape, &stack, x, y, j, over)?;
            total += tape.value(l).item()?;
            tape.backward(l)?;
            for (i, v) in bound {
                grads[i] = Some(tape.grad(v));
            }
        }
        let grads = grads
            .into_iter()
            .map(|g| g.expect("every parameter belongs to a cluster"))
            .collect();
        Ok((total, grads))
    }

    /// Central-difference check of [`Model::loss_and_grads`] over every parameter.
    pub fn grad_check(&self, x: &Tensor, y: &Tensor, over: LossOver, h: f64) -> Result<GradCheck> {
        let (_, grads) = self.loss_and_grads(x, y, over)?;
        let analytic: Vec<f64> = grads.iter().flat_map(|g| g.data().iter().copied()).collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut probe = self.clone();
        for i in 0..self.params.len() {
            for k in 0..self.params[i].value.numel() {
                let orig = self.params[i].value.data()[k];
                probe.params[i].value.data_mut()[k] = orig + h;
                let plus = probe.loss(x, y, over)?;
                probe.params[i].value.data_mut()[k] = orig - h;
                let minus = probe.loss(x, y, over)?;
                probe.params[i].value.data_mut()[k] = orig;
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::NonFinite {
                        what: format!("loss with {} perturbed", self.params[i].name),
                        index: k,
                    });
                }
                numeric.push((plus - minus) / (2.0 * h));
            }
        }
        let (worst_index, max_rel_error) = crate::autograd::relative_errors(&analytic, &numeric);
        Ok(GradCheck {
            max_rel_error,
            worst_index,
            analytic,
            numeric,
        })
    }

    /// Name of the registry entry holding flat coordinate `index`.
    pub fn param_name_at(&self, mut index: usize) -> Option<&str> {
        for p in &self.params {
            if index < p.value.numel() {
                return Some(&p.name);
            }
            index -= p.value.numel();
        }
        None
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.spec;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        codec::put_u16(&mut out, CHECKPOINT_VERSION);
        out.push(s.wiring.code());
        out.push(s.ea as u8);
        out.push(s.hb as u8);
        codec::put_u16(&mut out, codec::fit(s.n_classes, "n_classes")?);
        for (v, what) in [
            (s.channels.0, "c1"),
            (s.channels.1, "c2"),
            (s.width_factor, "width_factor"),
            (s.time_steps, "time_steps"),
            (s.kernel, "kernel"),
        ] {
            codec::put_u32(&mut out, codec::fit(v, what)?);
        }
        codec::put_u32(&mut out, codec::fit(self.params.len(), "parameter count")?);
        for p in &self.params {
            codec::put_u16(&mut out, codec::fit(p.name.len(), "name length")?);
            out.extend_from_slice(p.name.as_bytes());
            out.push(codec::fit(p.value.ndim(), "rank")?);
            for &d in p.value.shape() {
                codec::put_u32(&mut out, codec::fit(d, "dimension")?);
            }
            codec::put_f64s(&mut out, p.value.data());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "checkpoint");
        r.magic(CHECKPOINT_MAGIC)?;
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Mismatch(format!(
                "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
            )));
        }
        let code = r.u8()?;
        let wiring = Wiring::from_code(code).ok_or_else(|| r.fail(format!("unknown wiring code {code}")))?;
        let ea = r.u8()? != 0;
        let hb = r.u8()? != 0;
        let n_classes = r.u16()? as usize;
        let c1 = r.u32()? as usize;
        let c2 = r.u32()? as usize;
        let spec = ModelSpec {
            wiring,
            ea,
            hb,
            n_classes,
            channels: (c1, c2),
            width_factor: r.u32()? as usize,
            time_steps: r.u32()? as usize,
            kernel: r.u32()? as usize,
        };
        spec.validate()
            .map_err(|e| r.fail(format!("stored spec is invalid: {e}")))?;
        let layout = spec.layout();
        let count = r.u32()? as usize;
        let mut params = Vec::with_capacity(layout.len());
        for i in 0..count {
            let len = r.u16()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| r.fail(format!("parameter {i} name is not UTF-8")))?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            match layout.get(i) {
                Some((expected, _)) if *expected != name => {
                    return Err(Error::Mismatch(format!(
                        "parameter {i} is {name:?}, spec {} expects {expected:?}",
                        spec.name()
                    )))
                }
                None => {
                    return Err(Error::Mismatch(format!(
                        "unexpected extra parameter {name:?} for spec {}",
                        spec.name()
                    )))
                }
                Some((_, expected_shape)) if *expected_shape != shape => {
                    return Err(Error::Mismatch(format!(
                        "parameter {name:?} has shape {shape:?}, expected {expected_shape:?}"
                    )))
                }
                Some(_) => {}
            }
            let numel = shape.iter().product();
            let data = r.f64s(numel)?;
            params.push(Param {
                name,
                value: Tensor::new(shape, data)?,
            });
        }
        if count < layout.len() {
            return Err(Error::Mismatch(format!(
                "missing parameter {:?} for spec {}",
                layout[count].0,
                spec.name()
            )));
        }
        r.finish()?;
        Ok(Model { spec, params })
    }

    /// Decode and require the stored spec to equal `expected`.
    pub fn from_bytes_expecting(bytes: &[u8], expected: &ModelSpec) -> Result<Self> {
        let model = Self::from_bytes(bytes)?;
        if let Some(field) = spec_difference(&model.spec, expected) {
            return Err(Error::Mismatch(field));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }

    pub fn load_expecting(path: &Path, expected: &ModelSpec) -> Result<Self> {
        Self::from_bytes_expecting(&codec::read_file(path)?, expected)
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"HBCK";
const CHECKPOINT_VERSION: u16 = 1;

/// First field in which two specs differ, described for an error message.
pub fn spec_difference(found: &ModelSpec, expected: &ModelSpec) -> Option<String> {
    let fields: [(&str, String, String); 8] = [
        ("wiring", found.wiring.to_string(), expected.wiring.to_string()),
        ("ea", found.ea.to_string(), expected.ea.to_string()),
        ("hb", found.hb.to_string(), expected.hb.to_string()),
        ("n_classes", found.n_classes.to_string(), expected.n_classes.to_string()),
        (
            "channels",
            format!("{:?}", found.channels),
            format!("{:?}", expected.channels),
        ),
        (
            "width_factor",
            found.width_factor.to_string(),
            expected.width_factor.to_string(),
        ),
        (
            "time_steps",
            found.time_steps.to_string(),
            expected.time_steps.to_string(),
        ),
        ("kernel", found.kernel.to_string(), expected.kernel.to_string()),
    ];
    fields
        .into_iter()
        .find(|(_, a, b)| a != b)
        .map(|(f, a, b)| format!("field {f}: checkpoint has {a}, expected {b}"))
}
