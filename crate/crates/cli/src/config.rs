//! Flat `section.key=value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use hbnet::datagen::{DatasetConfig, DatasetKind, CANVAS, IMAGE_SIZE};
use hbnet::eval::{default_grid, Metric, NoiseCell, NoiseKind};
use hbnet::models::{LossOver, ModelSpec, GRID};
use hbnet::stats::IncrementMethod;
use hbnet::training::TrainConfig;

use crate::CliError;

/// Every accepted key with its default, in echo order. `auto` defers to a
/// derived value (documented per key in the README).
const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("dataset.kind", "digits5"),
    ("dataset.scale", "1"),
    ("dataset.sizes", "auto"),
    ("dataset.seed", "auto"),
    ("dataset.canvas", "256"),
    ("dataset.image_size", "32"),
    ("model.name", "B"),
    ("model.c1", "32"),
    ("model.c2", "64"),
    ("model.width_factor", "auto"),
    ("model.time_steps", "auto"),
    ("model.kernel", "3"),
    ("model.seed", "auto"),
    ("train.lr0", "0.01"),
    ("train.weight_decay", "0.00001"),
    ("train.t_max", "10"),
    ("train.epochs", "10"),
    ("train.batch_size", "128"),
    ("train.seed", "auto"),
    ("train.loss_over", "final"),
    ("eval.grid", "default"),
    ("eval.metrics", "per_label_accuracy,topk_accuracy"),
    ("eval.seeds", "auto"),
    ("eval.split", "test"),
    ("paths.data", "auto"),
    ("paths.checkpoint", "auto"),
    ("stats.results", "auto"),
    ("stats.pairs", "auto"),
    ("stats.metric", "per_label_accuracy"),
    ("stats.increment", "median"),
    ("stats.alpha", "0.05"),
    ("grid.models", "all"),
    ("grid.seeds", "0,1,2"),
];

#[derive(Clone, Debug)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut values: BTreeMap<String, String> = KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        let mut seen = std::collections::HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::user(format!("config line {}: expected key=value, got {line:?}", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !values.contains_key(k) {
                return Err(CliError::user(format!("config line {}: unknown key {k:?}", i + 1)));
            }
            if !seen.insert(k.to_string()) {
                return Err(CliError::user(format!("config line {}: duplicate key {k:?}", i + 1)));
            }
            values.insert(k.to_string(), v.to_string());
        }
        Ok(RawConfig { values })
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        assert!(self.values.contains_key(key), "unknown key {key}");
        self.values.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> &str {
        &self.values[key]
    }

    fn parsed<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| CliError::user(format!("{key}: cannot parse {v:?}")))
    }

    fn auto_or<T: FromStr>(&self, key: &str, fallback: T) -> Result<T, CliError> {
        if self.get(key) == "auto" {
            Ok(fallback)
        } else {
            self.parsed(key)
        }
    }

    fn list(&self, key: &str) -> Vec<String> {
        self.get(key)
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect()
    }

    /// All keys, defaults included, as a loadable config.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, _) in KEYS {
            writeln!(out, "{k}={}", self.values[*k]).unwrap();
        }
        out
    }

    pub fn resolve(&self) -> Result<Config, CliError> {
        let seed: u64 = self.parsed("seed")?;
        let kind: DatasetKind = self.parsed("dataset.kind").map_err(|_| {
            CliError::user(format!(
                "dataset.kind: unknown kind {:?}; expected digits5, mixed5 or letters5",
                self.get("dataset.kind")
            ))
        })?;
        let sizes = match self.get("dataset.sizes") {
            "auto" => None,
            _ => {
                let parts = self.list("dataset.sizes");
                let nums: Result<Vec<usize>, _> = parts.iter().map(|p| p.parse::<usize>()).collect();
                match nums {
                    Ok(n) if n.len() == 3 => Some([n[0], n[1], n[2]]),
                    _ => {
                        return Err(CliError::user(format!(
                            "dataset.sizes: expected train,val,test counts, got {:?}",
                            self.get("dataset.sizes")
                        )))
                    }
                }
            }
        };
        let dataset = DatasetConfig {
            kind,
            scale: self.parsed("dataset.scale")?,
            seed: self.auto_or("dataset.seed", seed)?,
            sizes,
            canvas: self.auto_or("dataset.canvas", CANVAS)?,
            image_size: self.auto_or("dataset.image_size", IMAGE_SIZE)?,
        };
        dataset.split_sizes().map_err(CliError::from)?;

        let model_name = self.get("model.name").to_string();
        let model = self.model_spec(&model_name, kind.n_classes())?;

        let train = TrainConfig {
            lr0: self.parsed("train.lr0")?,
            weight_decay: self.parsed("train.weight_decay")?,
            t_max: self.parsed("train.t_max")?,
            epochs: self.parsed("train.epochs")?,
            batch_size: self.parsed("train.batch_size")?,
            seed: self.auto_or("train.seed", seed)?,
            loss_over: match self.get("train.loss_over") {
                "final" => LossOver::FinalStep,
                "mean" => LossOver::MeanOverSteps,
                other => {
                    return Err(CliError::user(format!(
                        "train.loss_over: expected final or mean, got {other:?}"
                    )))
                }
            },
        };
        train.validate().map_err(CliError::from)?;

        let grid = match self.get("eval.grid") {
            "default" => default_grid(),
            _ => self
                .list("eval.grid")
                .iter()
                .map(|cell| parse_cell(cell))
                .collect::<Result<_, _>>()?,
        };
        for cell in &grid {
            cell.corruption().map_err(CliError::from)?;
        }
        let metrics = self
            .list("eval.metrics")
            .iter()
            .map(|m| {
                m.parse::<Metric>()
                    .map_err(|e| CliError::user(format!("eval.metrics: {e}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if metrics.is_empty() {
            return Err(CliError::user("eval.metrics: at least one metric is required"));
        }
        let eval_seeds = match self.get("eval.seeds") {
            "auto" => vec![seed],
            _ => self.seed_list("eval.seeds")?,
        };
        let eval_split = match self.get("eval.split") {
            s @ ("test" | "val" | "train") => s.to_string(),
            other => {
                return Err(CliError::user(format!(
                    "eval.split: expected test, val or train, got {other:?}"
                )))
            }
        };

        let pairs = match self.get("stats.pairs") {
            "auto" => None,
            _ => Some(
                self.list("stats.pairs")
                    .iter()
                    .map(|p| {
                        p.split_once(':')
                            .map(|(a, b)| (a.to_string(), b.to_string()))
                            .ok_or_else(|| {
                                CliError::user(format!("stats.pairs: expected baseline:candidate, got {p:?}"))
                            })
                    })
                    .collect::<Result<Vec<_>, _>>()?,
            ),
        };
        let alpha: f64 = self.parsed("stats.alpha")?;
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(CliError::user(format!("stats.alpha must lie in (0, 1), got {alpha}")));
        }
        let increment = match self.get("stats.increment") {
            "median" => IncrementMethod::MedianRatio,
            "boundary" => IncrementMethod::SignificanceBoundary { alpha },
            other => {
                return Err(CliError::user(format!(
                    "stats.increment: expected median or boundary, got {other:?}"
                )))
            }
        };
        let stats_metric: Metric = self
            .parsed::<Metric>("stats.metric")
            .map_err(|_| CliError::user(format!("stats.metric: unknown metric {:?}", self.get("stats.metric"))))?;

        let grid_models = match self.get("grid.models") {
            "all" => GRID.iter().map(|s| s.to_string()).collect(),
            _ => self.list("grid.models"),
        };
        let mut grid_specs = Vec::new();
        for name in &grid_models {
            grid_specs.push(self.model_spec(name, kind.n_classes())?);
        }
        let grid_seeds = self.seed_list("grid.seeds")?;
        if grid_seeds.is_empty() {
            return Err(CliError::user("grid.seeds: at least one seed is required"));
        }

        let opt_path = |k: &str| match self.get(k) {
            "auto" => None,
            p => Some(std::path::PathBuf::from(p)),
        };
        Ok(Config {
            seed,
            dataset,
            model,
            model_seed: self.auto_or("model.seed", seed)?,
            train,
            grid,
            metrics,
            eval_seeds,
            eval_split,
            data_dir: opt_path("paths.data"),
            checkpoint: opt_path("paths.checkpoint"),
            results: match self.get("stats.results") {
                "auto" => None,
                _ => Some(self.list("stats.results").into_iter().map(Into::into).collect()),
            },
            pairs,
            stats_metric,
            increment,
            alpha,
            grid_specs,
            grid_seeds,
        })
    }

    fn seed_list(&self, key: &str) -> Result<Vec<u64>, CliError> {
        self.list(key)
            .iter()
            .map(|s| {
                s.parse()
                    .map_err(|_| CliError::user(format!("{key}: {s:?} is not a seed")))
            })
            .collect()
    }

    fn model_spec(&self, name: &str, n_classes: usize) -> Result<ModelSpec, CliError> {
        let mut spec = ModelSpec::parse(name, n_classes).map_err(|e| CliError::user(format!("model: {e}")))?;
        spec.channels = (self.parsed("model.c1")?, self.parsed("model.c2")?);
        // An explicit factor only applies to the widened variant.
        if spec.width_factor > 1 {
            spec.width_factor = self.auto_or("model.width_factor", spec.width_factor)?;
        }
        spec.time_steps = self.auto_or("model.time_steps", spec.time_steps)?;
        if !spec.wiring.is_recurrent() {
            spec.time_steps = 1;
        }
        spec.kernel = self.parsed("model.kernel")?;
        spec.validate()
            .map_err(|e| CliError::user(format!("model {name}: {e}")))?;
        Ok(spec)
    }
}

fn parse_cell(s: &str) -> Result<NoiseCell, CliError> {
    let bad = || {
        CliError::user(format!(
            "eval.grid: expected kind:level (none, gaussian, salt_pepper), got {s:?}"
        ))
    };
    let (kind, level) = match s.split_once(':') {
        Some((k, l)) => (k, l.parse::<f64>().map_err(|_| bad())?),
        None if s == "none" => ("none", 0.0),
        None => return Err(bad()),
    };
    let kind: NoiseKind = kind.parse().map_err(|_| bad())?;
    Ok(NoiseCell { kind, param: level })
}

/// A validated configuration.
#[derive(Clone, Debug)]
pub struct Config {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelSpec,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub grid: Vec<NoiseCell>,
    pub metrics: Vec<Metric>,
    pub eval_seeds: Vec<u64>,
    pub eval_split: String,
    pub data_dir: Option<std::path::PathBuf>,
    pub checkpoint: Option<std::path::PathBuf>,
    pub results: Option<Vec<std::path::PathBuf>>,
    pub pairs: Option<Vec<(String, String)>>,
    pub stats_metric: Metric,
    pub increment: IncrementMethod,
    pub alpha: f64,
    pub grid_specs: Vec<ModelSpec>,
    pub grid_seeds: Vec<u64>,
}
