//! Adam with coupled weight decay, cosine schedule and the epoch loop.

use std::ops::ControlFlow;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{self, Reader};
use crate::datagen::{Corruption, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::eval::{per_label_accuracy, THRESHOLD};
use crate::models::{LossOver, Model, Param};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `0.5 lr0 (1 + cos(pi min(epoch, t_max) / t_max))`.
pub fn cosine_lr(epoch: usize, lr0: f64, t_max: usize) -> f64 {
    let t = epoch.min(t_max) as f64 / t_max as f64;
    (0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos())).max(0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[Param]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        AdamState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One Adam update with L2 decay folded into the gradient.
pub fn adam_step(
    params: &mut [Param],
    grads: &[Tensor],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::shape(
            "adam_step",
            format!(
                "{} params, {} grads, {} moment buffers",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(Error::shape(
                "adam_step",
                format!("{}: param {:?} vs grad {:?}", p.name, p.value.shape(), g.shape()),
            ));
        }
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: format!("gradient of {}", p.name),
                index: i,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for (((w, &gi), mi), vi) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let gi = gi + weight_decay * *w;
            *mi = BETA1 * *mi + (1.0 - BETA1) * gi;
            *vi = BETA2 * *vi + (1.0 - BETA2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub t_max: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_over: LossOver,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            weight_decay: 1e-5,
            t_max: 10,
            // The schedule reaches zero at t_max; later epochs would not move the weights.
            epochs: 10,
            batch_size: 128,
            seed: 0,
            loss_over: LossOver::FinalStep,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.t_max == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(format!(
                "t_max, epochs and batch_size must be at least 1 (got {}, {}, {})",
                self.t_max, self.epochs, self.batch_size
            )));
        }
        Ok(())
    }

    /// Settings that must not change across a resume.
    fn fingerprint(&self) -> [u64; 6] {
        [
            self.lr0.to_bits(),
            self.weight_decay.to_bits(),
            self.t_max as u64,
            self.batch_size as u64,
            self.seed,
            matches!(self.loss_over, LossOver::MeanOverSteps) as u64,
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    /// 0-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    pub epochs_done: usize,
    pub best: Model,
    pub best_val: f64,
    pub history: Vec<EpochRecord>,
    fingerprint: Option<[u64; 6]>,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        TrainState {
            adam: AdamState::new(model.params()),
            best: model.clone(),
            model,
            epochs_done: 0,
            best_val: f64::NEG_INFINITY,
            history: Vec::new(),
            fingerprint: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        codec::put_u16(&mut out, STATE_VERSION);
        let fp = self.fingerprint.unwrap_or_default();
        for v in fp {
            codec::put_u64(&mut out, v);
        }
        out.push(self.fingerprint.is_some() as u8);
        codec::put_u32(&mut out, codec::fit(self.epochs_done, "epochs")?);
        codec::put_u64(&mut out, self.adam.step);
        codec::put_f64s(&mut out, &[self.best_val]);
        codec::put_u32(&mut out, codec::fit(self.history.len(), "history length")?);
        for h in &self.history {
            codec::put_u32(&mut out, codec::fit(h.epoch, "epoch")?);
            codec::put_f64s(&mut out, &[h.lr, h.train_loss, h.val_accuracy]);
        }
        for m in [&self.model, &self.best] {
            let bytes = m.to_bytes()?;
            codec::put_u64(&mut out, bytes.len() as u64);
            out.extend_from_slice(&bytes);
        }
        for buf in self.adam.m.iter().chain(&self.adam.v) {
            codec::put_f64s(&mut out, buf);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "train state");
        r.magic(STATE_MAGIC)?;
        let version = r.u16()?;
        if version != STATE_VERSION {
            return Err(r.fail(format!("unsupported version {version}")));
        }
        let mut fp = [0u64; 6];
        for v in &mut fp {
            *v = r.u64()?;
        }
        let fingerprint = (r.u8()? != 0).then_some(fp);
        let epochs_done = r.u32()? as usize;
        let step = r.u64()?;
        let best_val = r.f64s(1)?[0];
        let n_hist = r.u32()? as usize;
        let mut history = Vec::with_capacity(n_hist.min(1 << 16));
        for _ in 0..n_hist {
            let epoch = r.u32()? as usize;
            let v = r.f64s(3)?;
            history.push(EpochRecord {
                epoch,
                lr: v[0],
                train_loss: v[1],
                val_accuracy: v[2],
            });
        }
        let mut models = Vec::with_capacity(2);
        for _ in 0..2 {
            let len = r.u64()? as usize;
            models.push(Model::from_bytes(r.take(len)?)?);
        }
        let best = models.pop().expect("two models");
        let model = models.pop().expect("two models");
        if best.spec() != model.spec() {
            return Err(r.fail("best and current models have different specs"));
        }
        let sizes: Vec<usize> = model.params().iter().map(|p| p.value.numel()).collect();
        let read = |r: &mut Reader| -> Result<Vec<Vec<f64>>> { sizes.iter().map(|&n| r.f64s(n)).collect() };
        let m = read(&mut r)?;
        let v = read(&mut r)?;
        r.finish()?;
        Ok(TrainState {
            model,
            adam: AdamState { m, v, step },
            epochs_done,
            best,
            best_val,
            history,
            fingerprint,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        codec::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&codec::read_file(path)?)
    }
}

const STATE_MAGIC: &[u8; 4] = b"HBTS";
const STATE_VERSION: u16 = 1;

/// Training and validation inputs.
pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub val: &'a Dataset,
    pub stats: &'a NormStats,
}

/// Sample order for `epoch`: a fresh shuffle keyed by `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Per-label accuracy of `model` on clean `data`.
pub fn accuracy_on(model: &Model, data: &Dataset, stats: &NormStats) -> Result<f64> {
    let all: Vec<usize> = (0..data.len()).collect();
    let (x, y) = data.batch(&all, stats, Corruption::None, 0)?;
    per_label_accuracy(&model.predict(&x)?, &y, THRESHOLD)
}

/// Run epochs `state.epochs_done .. min(until, cfg.epochs)`.
///
/// `on_epoch` sees each finished epoch; returning `Break` stops early with
/// the state consistent for a later resume.
pub fn train(
    state: &mut TrainState,
    data: &TrainData<'_>,
    cfg: &TrainConfig,
    until: usize,
    mut on_epoch: impl FnMut(&EpochRecord, &TrainState) -> ControlFlow<()>,
) -> Result<()> {
    cfg.validate()?;
    let n = state.model.spec().n_classes;
    if data.train.n_classes != n || data.val.n_classes != n {
        return Err(Error::Config(format!(
            "model predicts {n} labels but datasets have {} (train) and {} (val)",
            data.train.n_classes, data.val.n_classes
        )));
    }
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    match state.fingerprint {
        Some(fp) if fp != cfg.fingerprint() => {
            return Err(Error::Config(
                "resumed state was produced with different optimizer, batch or seed settings".into(),
            ))
        }
        _ => state.fingerprint = Some(cfg.fingerprint()),
    }
    let stop = until.min(cfg.epochs);
    while state.epochs_done < stop {
        let epoch = state.epochs_done;
        let lr = cosine_lr(epoch, cfg.lr0, cfg.t_max);
        let order = epoch_order(data.train.len(), cfg.seed, epoch);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (x, y) = data.train.batch(idx, data.stats, Corruption::None, 0)?;
            let (loss, grads) = state.model.loss_and_grads(&x, &y, cfg.loss_over)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss });
            }
            adam_step(state.model.params_mut(), &grads, &mut state.adam, lr, cfg.weight_decay)?;
            loss_sum += loss * idx.len() as f64;
        }
        let val_accuracy = accuracy_on(&state.model, data.val, data.stats)?;
        let rec = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / data.train.len() as f64,
            val_accuracy,
        };
        if val_accuracy > state.best_val {
            state.best_val = val_accuracy;
            state.best = state.model.clone();
        }
        state.history.push(rec);
        state.epochs_done += 1;
        if on_epoch(&rec, state).is_break() {
            break;
        }
    }
    Ok(())
}

pub fn history_to_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,lr,train_loss,val_accuracy\n");
    for h in history {
        s.push_str(&format!("{},{},{},{}\n", h.epoch, h.lr, h.train_loss, h.val_accuracy));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelSpec;
    use rand::Rng;

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(cosine_lr(0, 0.01, 10), 0.01);
        assert!(cosine_lr(10, 0.01, 10).abs() < 1e-18);
        assert!((cosine_lr(5, 0.01, 10) - 0.005).abs() < 1e-15);
        assert_eq!(cosine_lr(25, 0.01, 10), cosine_lr(10, 0.01, 10));
    }

    fn params(values: Vec<f64>) -> Vec<Param> {
        vec![Param {
            name: "w".into(),
            value: Tensor::from_vec(values),
        }]
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = params(vec![0.3, -1.2]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::zeros([2])], &mut st, 0.01, 0.0).unwrap();
        assert_eq!(p[0].value.data(), &[0.3, -1.2]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = params(vec![1.0, 1.0]);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &[Tensor::from_vec(vec![2.5, -0.7])], &mut st, 0.01, 0.0).unwrap();
        assert!((p[0].value.data()[0] - 0.99).abs() < 1e-9);
        assert!((p[0].value.data()[1] - 1.01).abs() < 1e-9);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = params(vec![1.0]);
        let mut st = AdamState::new(&p);
        let err = adam_step(&mut p, &[Tensor::from_vec(vec![f64::NAN])], &mut st, 0.01, 0.0).unwrap_err();
        assert!(err.to_string().contains("gradient of w"));
    }

    #[test]
    fn matches_scalar_recurrence() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = params((0..4).map(|_| rng.random_range(-1.0..1.0)).collect());
        let mut st = AdamState::new(&p);
        let mut w: Vec<f64> = p[0].value.data().to_vec();
        let (mut m, mut v) = (vec![0.0; 4], vec![0.0; 4]);
        let (lr, wd) = (0.003, 1e-3);
        for t in 1..=50 {
            let g: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            adam_step(&mut p, &[Tensor::from_vec(g.clone())], &mut st, lr, wd).unwrap();
            for i in 0..4 {
                let gi = g[i] + wd * w[i];
                m[i] = 0.9 * m[i] + 0.1 * gi;
                v[i] = 0.999 * v[i] + 0.001 * gi * gi;
                let mh = m[i] / (1.0 - 0.9f64.powi(t));
                let vh = v[i] / (1.0 - 0.999f64.powi(t));
                w[i] -= lr * mh / (vh.sqrt() + 1e-8);
            }
            for (a, b) in p[0].value.data().iter().zip(&w) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
        assert_eq!(st.step, 50);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(50, 1, 0);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(50, 1, 0));
        assert_ne!(a, epoch_order(50, 1, 1));
    }

    #[test]
    fn state_round_trip() {
        let mut spec = ModelSpec::parse("HB-BL", 2).unwrap();
        spec.channels = (2, 3);
        let mut st = TrainState::new(Model::build(&spec, 0).unwrap());
        st.adam.step = 7;
        st.adam.m[0][0] = 0.25;
        st.history.push(EpochRecord {
            epoch: 0,
            lr: 0.01,
            train_loss: 0.7,
            val_accuracy: 0.5,
        });
        st.epochs_done = 1;
        st.best_val = 0.5;
        st.fingerprint = Some(TrainConfig::default().fingerprint());
        let bytes = st.to_bytes().unwrap();
        assert_eq!(TrainState::from_bytes(&bytes).unwrap(), st);
        assert!(TrainState::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn history_csv_layout() {
        let h = [EpochRecord {
            epoch: 0,
            lr: 0.01,
            train_loss: 0.5,
            val_accuracy: 0.75,
        }];
        assert_eq!(
            history_to_csv(&h),
            "epoch,lr,train_loss,val_accuracy\n0,0.01,0.5,0.75\n"
        );
    }
}
