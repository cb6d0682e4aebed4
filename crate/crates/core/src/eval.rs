//! Accuracy metrics, noise sweeps and result records.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::datagen::{derive_seed, Corruption, Dataset, NormStats};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;

pub const THRESHOLD: f64 = 0.5;

fn check_pair(op: &'static str, probs: &Tensor, labels: &Tensor) -> Result<(usize, usize)> {
    if probs.ndim() != 2 || probs.shape() != labels.shape() {
        return Err(Error::shape(
            op,
            format!("probabilities {:?} vs labels {:?}", probs.shape(), labels.shape()),
        ));
    }
    Ok((probs.shape()[0], probs.shape()[1]))
}

/// Fraction of (sample, label) cells where `prob >= threshold` matches the label bit.
pub fn per_label_accuracy(probs: &Tensor, labels: &Tensor, threshold: f64) -> Result<f64> {
    check_pair("per_label_accuracy", probs, labels)?;
    if probs.numel() == 0 {
        return Err(Error::Config("accuracy of an empty batch".into()));
    }
    let hits = probs
        .data()
        .iter()
        .zip(labels.data())
        .filter(|(p, y)| (**p >= threshold) == (**y >= 0.5))
        .count();
    Ok(hits as f64 / probs.numel() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TopK {
    pub accuracy: f64,
    pub evaluated: usize,
    /// Samples without any present label.
    pub skipped: usize,
}

/// Mean overlap between each sample's `k` highest-scoring labels and its `k`
/// true labels. Ties are broken toward the lower label index.
pub fn topk_accuracy(probs: &Tensor, labels: &Tensor) -> Result<TopK> {
    let (b, n) = check_pair("topk_accuracy", probs, labels)?;
    let mut total = 0.0;
    let mut evaluated = 0;
    for i in 0..b {
        let p = &probs.data()[i * n..][..n];
        let y = &labels.data()[i * n..][..n];
        let k = y.iter().filter(|&&v| v >= 0.5).count();
        if k == 0 {
            continue;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &c| p[c].total_cmp(&p[a]).then(a.cmp(&c)));
        let hit = order[..k].iter().filter(|&&j| y[j] >= 0.5).count();
        total += hit as f64 / k as f64;
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::Config("no sample has a present label".into()));
    }
    Ok(TopK {
        accuracy: total / evaluated as f64,
        evaluated,
        skipped: b - evaluated,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NoiseKind {
    None,
    Gaussian,
    SaltPepper,
}

impl NoiseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NoiseKind::None => "none",
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::SaltPepper => "salt_pepper",
        }
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NoiseKind::None),
            "gaussian" => Ok(NoiseKind::Gaussian),
            "salt_pepper" => Ok(NoiseKind::SaltPepper),
            _ => Err(Error::Config(format!("unknown noise kind {s:?}"))),
        }
    }
}

/// One column of a noise table: a noise kind and its level (sigma or SNR).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseCell {
    pub kind: NoiseKind,
    pub param: f64,
}

impl NoiseCell {
    pub const CLEAN: NoiseCell = NoiseCell {
        kind: NoiseKind::None,
        param: 0.0,
    };

    pub fn gaussian(sigma: f64) -> Self {
        NoiseCell {
            kind: NoiseKind::Gaussian,
            param: sigma,
        }
    }

    pub fn salt_pepper(snr: f64) -> Self {
        NoiseCell {
            kind: NoiseKind::SaltPepper,
            param: snr,
        }
    }

    pub fn corruption(self) -> Result<Corruption> {
        match self.kind {
            NoiseKind::None => Ok(Corruption::None),
            NoiseKind::Gaussian if self.param >= 0.0 => Ok(Corruption::Gaussian { sigma: self.param }),
            NoiseKind::SaltPepper if (0.0..=1.0).contains(&self.param) => {
                Ok(Corruption::SaltPepper { snr: self.param })
            }
            _ => Err(Error::Config(format!(
                "invalid {} level {}",
                self.kind.as_str(),
                self.param
            ))),
        }
    }
}

impl fmt::Display for NoiseCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            NoiseKind::None => f.write_str("clean"),
            NoiseKind::Gaussian => write!(f, "sigma={}", self.param),
            NoiseKind::SaltPepper => write!(f, "snr={}", self.param),
        }
    }
}

/// Clean, Gaussian sigma 0.5/3/5, salt-and-pepper SNR 0.9/0.5/0.1.
pub fn default_grid() -> Vec<NoiseCell> {
    vec![
        NoiseCell::CLEAN,
        NoiseCell::gaussian(0.5),
        NoiseCell::gaussian(3.0),
        NoiseCell::gaussian(5.0),
        NoiseCell::salt_pepper(0.9),
        NoiseCell::salt_pepper(0.5),
        NoiseCell::salt_pepper(0.1),
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Metric {
    PerLabel,
    TopK,
}

impl Metric {
    pub const ALL: [Metric; 2] = [Metric::PerLabel, Metric::TopK];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::PerLabel => "per_label_accuracy",
            Metric::TopK => "topk_accuracy",
        }
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub model: String,
    pub dataset: String,
    pub noise: NoiseCell,
    pub metric: Metric,
    pub value: f64,
    pub seed: u64,
}

impl EvalRecord {
    /// Everything but the value; unique within a results store.
    pub fn key(&self) -> (String, String, NoiseKind, u64, Metric, u64) {
        (
            self.model.clone(),
            self.dataset.clone(),
            self.noise.kind,
            self.noise.param.to_bits(),
            self.metric,
            self.seed,
        )
    }
}

/// Identifies whose results a sweep produces.
#[derive(Clone, Debug)]
pub struct SweepLabels<'a> {
    pub model: &'a str,
    pub dataset: &'a str,
    pub seed: u64,
}

/// Evaluate `model` on `test` under every cell of `grid`.
///
/// Cell `c` draws its noise from `derive_seed(noise_seed, c, 0)`, so records
/// are reproducible regardless of scheduling.
pub fn noise_sweep(
    model: &Model,
    test: &Dataset,
    stats: &NormStats,
    grid: &[NoiseCell],
    metrics: &[Metric],
    labels: &SweepLabels<'_>,
    noise_seed: u64,
) -> Result<Vec<EvalRecord>> {
    let indices: Vec<usize> = (0..test.len()).collect();
    let per_cell = grid
        .par_iter()
        .enumerate()
        .map(|(c, cell)| -> Result<Vec<EvalRecord>> {
            let corruption = cell.corruption()?;
            let (x, y) = test.batch(&indices, stats, corruption, derive_seed(noise_seed, c as u64, 0))?;
            let probs = model.predict(&x)?;
            metrics
                .iter()
                .map(|&metric| {
                    let value = match metric {
                        Metric::PerLabel => per_label_accuracy(&probs, &y, THRESHOLD)?,
                        Metric::TopK => topk_accuracy(&probs, &y)?.accuracy,
                    };
                    Ok(EvalRecord {
                        model: labels.model.to_string(),
                        dataset: labels.dataset.to_string(),
                        noise: *cell,
                        metric,
                        value,
                        seed: labels.seed,
                    })
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_cell.into_iter().flatten().collect())
}

pub const RESULTS_HEADER: [&str; 7] = [
    "model",
    "dataset",
    "noise_kind",
    "noise_param",
    "metric",
    "value",
    "seed",
];

pub fn results_to_csv(records: &[EvalRecord]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Format {
        kind: "results csv",
        reason: e.to_string(),
    };
    w.write_record(RESULTS_HEADER).map_err(fail)?;
    for r in records {
        w.write_record([
            r.model.as_str(),
            r.dataset.as_str(),
            r.noise.kind.as_str(),
            &r.noise.param.to_string(),
            r.metric.as_str(),
            &r.value.to_string(),
            &r.seed.to_string(),
        ])
        .map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format {
        kind: "results csv",
        reason: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn results_from_csv(text: &str) -> Result<Vec<EvalRecord>> {
    let fail = |line: u64, reason: String| Error::Format {
        kind: "results csv",
        reason: format!("line {line}: {reason}"),
    };
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| fail(1, e.to_string()))?;
    if header.iter().ne(RESULTS_HEADER) {
        return Err(fail(1, format!("header must be {}", RESULTS_HEADER.join(","))));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| fail(line, e.to_string()))?;
        let num = |k: usize| -> Result<f64> {
            row[k]
                .parse::<f64>()
                .map_err(|_| fail(line, format!("{} is not a number: {:?}", RESULTS_HEADER[k], &row[k])))
        };
        let value = num(5)?;
        if !(0.0..=1.0).contains(&value) {
            return Err(fail(line, format!("value {value} outside [0, 1]")));
        }
        out.push(EvalRecord {
            model: row[0].to_string(),
            dataset: row[1].to_string(),
            noise: NoiseCell {
                kind: row[2].parse().map_err(|e: Error| fail(line, e.to_string()))?,
                param: num(3)?,
            },
            metric: row[4].parse().map_err(|e: Error| fail(line, e.to_string()))?,
            value,
            seed: row[6]
                .parse()
                .map_err(|_| fail(line, format!("seed is not an integer: {:?}", &row[6])))?,
        });
    }
    Ok(out)
}
