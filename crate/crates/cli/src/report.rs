//! Markdown report and comparison table built from evaluation records.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use hbnet::eval::{EvalRecord, NoiseCell, NoiseKind};
use hbnet::models::GRID;
use hbnet::stats::{increment_test, pvalue_matrix, robustness_differentials, IncrementResult, WilcoxonOutcome};

use crate::config::Config;
use crate::CliError;

pub struct Report {
    pub markdown: String,
    pub comparisons_csv: String,
}

/// Pairing key shared by two models' results: dataset, noise cell, seed.
type PairKey = (String, NoiseKind, u64, u64);

/// `p` with enough digits to show exact small-sample values like 0.03125.
pub fn format_p(p: f64) -> String {
    if p == 0.0 {
        "0".into()
    } else if p < 1e-3 {
        format!("{p:.3e}")
    } else {
        let s = format!("{p:.6}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn format_stat(x: f64) -> String {
    if x.fract() == 0.0 {
        format!("{x:.0}")
    } else {
        format!("{x:.1}")
    }
}

fn model_order(names: &BTreeSet<String>) -> Vec<String> {
    let mut v: Vec<String> = names.iter().cloned().collect();
    v.sort_by_key(|n| (GRID.iter().position(|g| g == n).unwrap_or(GRID.len()), n.clone()));
    v
}

fn same_cell(a: &NoiseCell, b: &NoiseCell) -> bool {
    a.kind == b.kind && a.param.to_bits() == b.param.to_bits()
}

fn cell_key(c: &NoiseCell) -> (NoiseKind, u64) {
    (c.kind, c.param.to_bits())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn build(all: &[EvalRecord], cfg: &Config) -> Result<Report, CliError> {
    let records: Vec<&EvalRecord> = all.iter().filter(|r| r.metric == cfg.stats_metric).collect();
    if records.is_empty() {
        return Err(CliError::user(format!(
            "no results for metric {}",
            cfg.stats_metric.as_str()
        )));
    }
    let models = model_order(&records.iter().map(|r| r.model.clone()).collect());
    let mut datasets: Vec<String> = Vec::new();
    let mut cells: Vec<NoiseCell> = Vec::new();
    for r in &records {
        if !datasets.contains(&r.dataset) {
            datasets.push(r.dataset.clone());
        }
        if !cells.iter().any(|c| same_cell(c, &r.noise)) {
            cells.push(r.noise);
        }
    }
    let by_model = |m: &str| -> BTreeMap<PairKey, f64> {
        records
            .iter()
            .filter(|r| r.model == m)
            .map(|r| {
                (
                    (r.dataset.clone(), r.noise.kind, r.noise.param.to_bits(), r.seed),
                    r.value,
                )
            })
            .collect()
    };

    let mut md = String::new();
    writeln!(md, "# Results ({})\n", cfg.stats_metric.as_str()).unwrap();
    for ds in &datasets {
        writeln!(md, "## Mean accuracy, {ds}\n").unwrap();
        let mut header = String::from("| Model |");
        let mut rule = String::from("|---|");
        for c in &cells {
            write!(header, " {c} |").unwrap();
            rule.push_str("---|");
        }
        writeln!(md, "{header}\n{rule}").unwrap();
        for m in &models {
            let vals = by_model(m);
            let mut row = format!("| {m} |");
            for c in &cells {
                let v: Vec<f64> = vals
                    .iter()
                    .filter(|((d, k, p, _), _)| d == ds && (*k, *p) == cell_key(c))
                    .map(|(_, v)| *v)
                    .collect();
                if v.is_empty() {
                    row.push_str(" - |");
                } else {
                    write!(row, " {:.4} |", mean(&v)).unwrap();
                }
            }
            writeln!(md, "{row}").unwrap();
        }
        md.push('\n');
    }

    let pairs = match &cfg.pairs {
        Some(p) => p.clone(),
        None => models
            .iter()
            .filter(|m| !m.starts_with("HB-"))
            .filter_map(|m| {
                let hb = format!("HB-{m}");
                models.contains(&hb).then(|| (m.clone(), hb))
            })
            .collect(),
    };
    let mut csv = csv::Writer::from_writer(Vec::new());
    csv.write_record([
        "baseline",
        "candidate",
        "n",
        "stat",
        "p",
        "increment_percent",
        "stat_in",
        "p_in",
        "dropped",
    ])
    .map_err(|e| CliError::user(e.to_string()))?;
    if !pairs.is_empty() {
        writeln!(md, "## Paired comparisons (one-sided Wilcoxon signed-rank)\n").unwrap();
        writeln!(
            md,
            "| Baseline | Candidate | n | Stat | p | Increment (%) | Stat_in | p_in |"
        )
        .unwrap();
        writeln!(md, "|---|---|---|---|---|---|---|---|").unwrap();
    }
    for (a, b) in &pairs {
        for m in [a, b] {
            if !models.contains(m) {
                return Err(CliError::user(format!("pair {a}:{b}: no results for model {m}")));
            }
        }
        let (va, vb) = (by_model(a), by_model(b));
        let unmatched: Vec<String> = va
            .keys()
            .filter(|k| !vb.contains_key(*k))
            .map(|k| format!("{} only: {}", a, describe(k)))
            .chain(
                vb.keys()
                    .filter(|k| !va.contains_key(*k))
                    .map(|k| format!("{} only: {}", b, describe(k))),
            )
            .collect();
        if !unmatched.is_empty() {
            return Err(CliError::user(format!(
                "pair {a}:{b} has unmatched results:\n  {}",
                unmatched.join("\n  ")
            )));
        }
        let xs: Vec<f64> = va.values().copied().collect();
        let ys: Vec<f64> = vb.values().copied().collect();
        let res = increment_test(&xs, &ys, cfg.increment)?;
        let row = comparison_row(&res);
        writeln!(
            md,
            "| {a} | {b} | {} | {} | {} | {} | {} | {} |",
            xs.len(),
            row[0],
            row[1],
            row[2],
            row[3],
            row[4]
        )
        .unwrap();
        let n = xs.len().to_string();
        let dropped = res.dropped.to_string();
        let mut rec = vec![a.as_str(), b.as_str(), n.as_str()];
        rec.extend(row.iter().map(String::as_str));
        rec.push(dropped.as_str());
        csv.write_record(&rec).map_err(|e| CliError::user(e.to_string()))?;
    }
    if !pairs.is_empty() {
        md.push('\n');
    }

    robustness_section(&mut md, &models, &datasets, &cells, &by_model, cfg.alpha)?;

    let bytes = csv.into_inner().map_err(|e| CliError::user(e.to_string()))?;
    Ok(Report {
        markdown: md,
        comparisons_csv: String::from_utf8(bytes).expect("csv output is UTF-8"),
    })
}

fn describe(k: &PairKey) -> String {
    format!(
        "{} {} seed {}",
        k.0,
        NoiseCell {
            kind: k.1,
            param: f64::from_bits(k.2)
        },
        k.3
    )
}

/// Stat, p, increment, Stat_in, p_in as displayed.
fn comparison_row(res: &IncrementResult) -> [String; 5] {
    let tested = |o: &WilcoxonOutcome| match o.result() {
        Some(r) => (format_stat(r.statistic), format_p(r.p)),
        None => ("no test".into(), "-".into()),
    };
    let (stat, p) = tested(&res.comparison);
    let inc = res
        .increment_percent
        .map(|v| format!("{v:.2}"))
        .unwrap_or_else(|| "-".into());
    let (stat_in, p_in) = res
        .increment_test
        .as_ref()
        .map(tested)
        .unwrap_or_else(|| ("-".into(), "-".into()));
    [stat, p, inc, stat_in, p_in]
}

fn robustness_section(
    md: &mut String,
    models: &[String],
    datasets: &[String],
    cells: &[NoiseCell],
    by_model: &dyn Fn(&str) -> BTreeMap<PairKey, f64>,
    alpha: f64,
) -> Result<(), CliError> {
    let Some(clean) = cells.iter().find(|c| c.kind == NoiseKind::None) else {
        return Ok(());
    };
    let families: Vec<Vec<NoiseCell>> = [NoiseKind::Gaussian, NoiseKind::SaltPepper]
        .iter()
        .map(|&k| {
            std::iter::once(*clean)
                .chain(cells.iter().filter(|c| c.kind == k).copied())
                .collect::<Vec<_>>()
        })
        .filter(|f| f.len() >= 2)
        .collect();
    if families.is_empty() {
        return Ok(());
    }
    let mut names = Vec::new();
    let mut deltas = Vec::new();
    let mut skipped = Vec::new();
    let mut shape: Option<Vec<(String, usize, u64)>> = None;
    for m in models {
        let vals = by_model(m);
        let seeds: BTreeSet<u64> = vals.keys().map(|k| k.3).collect();
        let mut d = Vec::new();
        let mut layout = Vec::new();
        let mut complete = true;
        'outer: for ds in datasets {
            for (fi, fam) in families.iter().enumerate() {
                for &s in &seeds {
                    let mut acc = Vec::new();
                    for c in fam {
                        match vals.get(&(ds.clone(), c.kind, c.param.to_bits(), s)) {
                            Some(v) => acc.push(*v),
                            None => {
                                complete = false;
                                break 'outer;
                            }
                        }
                    }
                    d.extend(robustness_differentials(&acc)?);
                    layout.push((ds.clone(), fi, s));
                }
            }
        }
        let consistent = match &shape {
            Some(sh) => *sh == layout,
            None => true,
        };
        if complete && consistent {
            shape.get_or_insert(layout);
            names.push(m.clone());
            deltas.push(d);
        } else {
            skipped.push(m.clone());
        }
    }
    if names.len() < 2 {
        return Ok(());
    }
    let mat = pvalue_matrix(&names, &deltas, alpha)?;
    writeln!(md, "## Robustness p-value matrix\n").unwrap();
    writeln!(
        md,
        "Row r, column c: one-sided p that r loses less accuracy between adjacent noise levels than c; shown when p < {alpha}.\n"
    )
    .unwrap();
    let mut header = String::from("| |");
    let mut rule = String::from("|---|");
    for n in &mat.names {
        write!(header, " {n} |").unwrap();
        rule.push_str("---|");
    }
    writeln!(md, "{header}\n{rule}").unwrap();
    for (r, row) in mat.cells.iter().enumerate() {
        let mut line = format!("| {} |", mat.names[r]);
        for cell in row {
            match cell {
                Some(p) => write!(line, " {} |", format_p(*p)).unwrap(),
                None => line.push_str(" |"),
            }
        }
        writeln!(md, "{line}").unwrap();
    }
    if !skipped.is_empty() {
        writeln!(md, "\nOmitted for incomplete noise levels: {}", skipped.join(", ")).unwrap();
    }
    md.push('\n');
    Ok(())
}
