use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use hbnet::datagen::{make_split, Dataset, NormStats, Split};
use hbnet::eval::{noise_sweep, results_from_csv, results_to_csv, EvalRecord, SweepLabels};
use hbnet::models::{spec_difference, Model};
use hbnet::training::{accuracy_on, history_to_csv, train as fit, TrainData, TrainState};

use crate::config::{Config, RawConfig};
use crate::report;
use crate::{write_text, CliError};

pub const NORM_FILE: &str = "norm.hbns";
pub const MODEL_FILE: &str = "model.hbck";
pub const STATE_FILE: &str = "train_state.hbts";
pub const HISTORY_FILE: &str = "history.csv";
pub const RESULTS_FILE: &str = "results.csv";
pub const REPORT_FILE: &str = "report.md";
pub const COMPARISONS_FILE: &str = "comparisons.csv";

pub fn data_dir(cfg: &Config, out: &Path) -> PathBuf {
    cfg.data_dir.clone().unwrap_or_else(|| out.join("data"))
}

fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.hbds", split.as_str()))
}

fn checkpoint_path(cfg: &Config, out: &Path) -> PathBuf {
    cfg.checkpoint.clone().unwrap_or_else(|| out.join(MODEL_FILE))
}

pub fn gen(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let dir = data_dir(cfg, out);
    let mut stats = None;
    for split in Split::ALL {
        let ds = make_split(&cfg.dataset, split)?;
        if split == Split::Train {
            stats = Some(NormStats::compute(&ds)?);
        }
        ds.save(&split_path(&dir, split))?;
        println!("{}: {} samples", split.as_str(), ds.len());
    }
    stats
        .expect("train split is generated first")
        .save(&dir.join(NORM_FILE))?;
    println!("wrote {}", dir.display());
    Ok(())
}

fn load_split(dir: &Path, split: Split) -> Result<Dataset, CliError> {
    let path = split_path(dir, split);
    if !path.exists() {
        return Err(CliError::user(format!(
            "dataset split not found at {}; run `hbnet gen` with the same config first",
            path.display()
        )));
    }
    Ok(Dataset::load(&path)?)
}

fn load_norm(dir: &Path) -> Result<NormStats, CliError> {
    let path = dir.join(NORM_FILE);
    if !path.exists() {
        return Err(CliError::user(format!(
            "normalization statistics not found at {}; run `hbnet gen` first",
            path.display()
        )));
    }
    Ok(NormStats::load(&path)?)
}

fn check_classes(ds: &Dataset, cfg: &Config) -> Result<(), CliError> {
    if ds.n_classes != cfg.model.n_classes {
        return Err(CliError::user(format!(
            "dataset has {} classes but the config's {} expects {}",
            ds.n_classes,
            cfg.dataset.kind.as_str(),
            cfg.model.n_classes
        )));
    }
    Ok(())
}

pub fn train(cfg: &Config, out: &Path, resume: bool) -> Result<TrainState, CliError> {
    let dir = data_dir(cfg, out);
    let train_set = load_split(&dir, Split::Train)?;
    let val_set = load_split(&dir, Split::Val)?;
    let stats = load_norm(&dir)?;
    check_classes(&train_set, cfg)?;

    let state_path = out.join(STATE_FILE);
    let mut state = if resume && state_path.exists() {
        let s = TrainState::load(&state_path)?;
        if let Some(diff) = spec_difference(s.model.spec(), &cfg.model) {
            return Err(hbnet::Error::Mismatch(format!("saved state at {}: {diff}", state_path.display())).into());
        }
        println!("resuming {} after epoch {}", cfg.model.name(), s.epochs_done);
        s
    } else {
        if resume {
            println!("no saved state at {}; starting fresh", state_path.display());
        }
        TrainState::new(Model::build(&cfg.model, cfg.model_seed)?)
    };

    let ckpt = checkpoint_path(cfg, out);
    let data = TrainData {
        train: &train_set,
        val: &val_set,
        stats: &stats,
    };
    let mut failure = None;
    let epochs = cfg.train.epochs;
    fit(&mut state, &data, &cfg.train, usize::MAX, |rec, st| {
        println!(
            "epoch {:>3}/{epochs}  lr {:.6}  loss {:.5}  val_acc {:.4}",
            rec.epoch + 1,
            rec.lr,
            rec.train_loss,
            rec.val_accuracy
        );
        let saved = st
            .save(&state_path)
            .and_then(|_| st.best.save(&ckpt))
            .map_err(CliError::from)
            .and_then(|_| write_text(&out.join(HISTORY_FILE), &history_to_csv(&st.history)));
        match saved {
            Ok(()) => ControlFlow::Continue(()),
            Err(e) => {
                failure = Some(e);
                ControlFlow::Break(())
            }
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    // Covers runs that were already complete on resume.
    state.save(&state_path)?;
    state.best.save(&ckpt)?;
    write_text(&out.join(HISTORY_FILE), &history_to_csv(&state.history))?;
    let acc = accuracy_on(&state.best, &train_set, &stats)?;
    println!(
        "final train per-label accuracy {acc:.4} (best val {:.4})",
        state.best_val
    );
    Ok(state)
}

pub fn eval(cfg: &Config, out: &Path) -> Result<Vec<EvalRecord>, CliError> {
    let dir = data_dir(cfg, out);
    let split = match cfg.eval_split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        _ => Split::Test,
    };
    let set = load_split(&dir, split)?;
    let stats = load_norm(&dir)?;
    check_classes(&set, cfg)?;
    let ckpt = checkpoint_path(cfg, out);
    if !ckpt.exists() {
        return Err(CliError::user(format!(
            "checkpoint not found at {}; run `hbnet train` first",
            ckpt.display()
        )));
    }
    let model = Model::load_expecting(&ckpt, &cfg.model)?;
    let name = cfg.model.name();
    let mut records = Vec::new();
    for &seed in &cfg.eval_seeds {
        let labels = SweepLabels {
            model: &name,
            dataset: cfg.dataset.kind.as_str(),
            seed,
        };
        records.extend(noise_sweep(
            &model,
            &set,
            &stats,
            &cfg.grid,
            &cfg.metrics,
            &labels,
            seed,
        )?);
    }
    for r in &records {
        println!(
            "{name} {} {} seed {}: {:.4}",
            r.noise,
            r.metric.as_str(),
            r.seed,
            r.value
        );
    }
    write_text(&out.join(RESULTS_FILE), &results_to_csv(&records)?)?;
    Ok(records)
}

pub fn load_results(paths: &[PathBuf]) -> Result<Vec<EvalRecord>, CliError> {
    let mut all: Vec<EvalRecord> = Vec::new();
    let mut seen = std::collections::HashMap::new();
    for p in paths {
        let text = std::fs::read_to_string(p)
            .map_err(|e| CliError::user(format!("cannot read results {}: {e}", p.display())))?;
        let recs = results_from_csv(&text).map_err(|e| CliError::user(format!("{}: {e}", p.display())))?;
        for r in recs {
            if let Some(first) = seen.insert(r.key(), p.clone()) {
                return Err(CliError::user(format!(
                    "duplicate result for {} {} {} seed {} in {} and {}",
                    r.model,
                    r.dataset,
                    r.noise,
                    r.seed,
                    first.display(),
                    p.display()
                )));
            }
            all.push(r);
        }
    }
    Ok(all)
}

pub fn stats(cfg: &Config, out: &Path) -> Result<(), CliError> {
    let paths = cfg.results.clone().unwrap_or_else(|| vec![out.join(RESULTS_FILE)]);
    let records = load_results(&paths)?;
    let rep = report::build(&records, cfg)?;
    write_text(&out.join(REPORT_FILE), &rep.markdown)?;
    write_text(&out.join(COMPARISONS_FILE), &rep.comparisons_csv)?;
    print!("{}", rep.markdown);
    Ok(())
}

/// Train and evaluate every model and seed, skipping finished stages.
pub fn grid(raw: &RawConfig, cfg: &Config, out: &Path) -> Result<(), CliError> {
    let dir = data_dir(cfg, out);
    let stamp = dir.join("dataset.cfg");
    let want = format!("{:?}\n", cfg.dataset);
    let have = std::fs::read_to_string(&stamp).ok();
    let complete = Split::ALL.iter().all(|&s| split_path(&dir, s).exists()) && dir.join(NORM_FILE).exists();
    if complete && have.as_deref() == Some(want.as_str()) {
        println!("data: up to date in {}", dir.display());
    } else {
        gen(cfg, out)?;
        write_text(&stamp, &want)?;
    }

    let mut merged = Vec::new();
    for spec in &cfg.grid_specs {
        for &seed in &cfg.grid_seeds {
            let name = spec.name();
            let run_dir = out.join("runs").join(&name).join(format!("seed{seed}"));
            let mut run_raw = raw.clone();
            run_raw.set("seed", seed.to_string());
            run_raw.set("model.name", name.as_str());
            run_raw.set("dataset.seed", cfg.dataset.seed.to_string());
            run_raw.set("paths.data", dir.to_string_lossy());
            run_raw.set("paths.checkpoint", "auto");
            run_raw.set("eval.seeds", "auto");
            let run_cfg = run_raw.resolve()?;
            let echo = run_raw.echo();
            let cfg_path = run_dir.join("resolved.cfg");
            if std::fs::read_to_string(&cfg_path).is_ok_and(|old| old != echo) {
                println!("{name} seed {seed}: settings changed, starting over");
                std::fs::remove_dir_all(&run_dir)
                    .map_err(|e| CliError::user(format!("cannot clear {}: {e}", run_dir.display())))?;
            }
            std::fs::create_dir_all(&run_dir)
                .map_err(|e| CliError::user(format!("cannot create {}: {e}", run_dir.display())))?;
            write_text(&cfg_path, &echo)?;

            let results = run_dir.join(RESULTS_FILE);
            if results.exists() {
                println!("{name} seed {seed}: done");
                merged.extend(load_results(&[results])?);
                continue;
            }
            let finished = run_dir.join(MODEL_FILE).exists()
                && TrainState::load(&run_dir.join(STATE_FILE))
                    .map(|s| s.epochs_done >= run_cfg.train.epochs && spec_difference(s.model.spec(), spec).is_none())
                    .unwrap_or(false);
            if finished {
                println!("{name} seed {seed}: trained");
            } else {
                println!("{name} seed {seed}: training");
                train(&run_cfg, &run_dir, true)?;
            }
            merged.extend(eval(&run_cfg, &run_dir)?);
        }
    }
    write_text(&out.join(RESULTS_FILE), &results_to_csv(&merged)?)?;
    let mut stats_cfg = cfg.clone();
    stats_cfg.results = Some(vec![out.join(RESULTS_FILE)]);
    stats(&stats_cfg, out)
}
