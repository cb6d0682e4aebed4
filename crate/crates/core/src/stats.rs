//! Paired nonparametric tests and robustness comparisons.

use statrs::function::erf::erfc;

use crate::error::{Error, Result};

/// Largest effective sample size for which p-values are computed exactly.
pub const EXACT_MAX_N: usize = 25;
/// Relative tolerance under which two absolute differences count as tied.
const TIE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Alternative {
    TwoSided,
    /// `x` tends to exceed `y`.
    Greater,
    /// `x` tends to fall below `y`.
    Less,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Exact,
    NormalApprox,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::NormalApprox => "normal",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WilcoxonResult {
    pub n_effective: usize,
    /// `min(W+, W-)`.
    pub statistic: f64,
    pub w_plus: f64,
    pub p: f64,
    pub method: Method,
}

#[derive(Clone, Debug, PartialEq)]
pub enum WilcoxonOutcome {
    /// Every paired difference was zero.
    NoTest {
        n: usize,
    },
    Tested(WilcoxonResult),
}

impl WilcoxonOutcome {
    pub fn result(&self) -> Option<&WilcoxonResult> {
        match self {
            WilcoxonOutcome::Tested(r) => Some(r),
            WilcoxonOutcome::NoTest { .. } => None,
        }
    }

    pub fn p(&self) -> Option<f64> {
        self.result().map(|r| r.p)
    }
}

/// Average ranks of `values` (ascending), ties grouped within a relative tolerance.
fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut tie_sizes = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        let head = values[order[i]];
        while j < order.len() && values[order[j]] - head <= TIE_TOL * head.abs().max(values[order[j]].abs()) {
            j += 1;
        }
        let avg = (i + 1 + j) as f64 / 2.0;
        for &k in &order[i..j] {
            ranks[k] = avg;
        }
        tie_sizes.push(j - i);
        i = j;
    }
    (ranks, tie_sizes)
}

/// Exact upper-tail probability `P(W+ >= w)` under the sign-flip null for the given ranks.
///
/// Ranks are doubled to integers (averaged ranks are half-integers), and the
/// null distribution of the doubled sum is built by dynamic programming.
fn exact_tails(ranks: &[f64], w_plus: f64) -> (f64, f64) {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; total + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let denom = 2f64.powi(ranks.len() as i32);
    let w2 = (w_plus * 2.0).round() as usize;
    let upper: f64 = counts[w2..].iter().sum::<f64>() / denom;
    let lower: f64 = counts[..=w2].iter().sum::<f64>() / denom;
    (upper, lower)
}

fn upper_normal(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Wilcoxon signed-rank test on paired samples `x`, `y` (differences `x - y`).
///
/// Zero differences are dropped; exact p for up to [`EXACT_MAX_N`] remaining
/// pairs, otherwise the tie-corrected normal approximation with continuity
/// correction.
pub fn wilcoxon_signed_rank(x: &[f64], y: &[f64], alternative: Alternative) -> Result<WilcoxonOutcome> {
    if x.len() != y.len() {
        return Err(Error::shape(
            "wilcoxon",
            format!("paired samples have lengths {} and {}", x.len(), y.len()),
        ));
    }
    if x.is_empty() {
        return Err(Error::Config("wilcoxon needs at least one pair".into()));
    }
    let diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    if let Some(bad) = diffs.iter().position(|d| !d.is_finite()) {
        return Err(Error::NonFinite {
            what: "paired difference".into(),
            index: bad,
        });
    }
    let n = diffs.len();
    if n == 0 {
        return Ok(WilcoxonOutcome::NoTest { n: x.len() });
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = average_ranks(&abs);
    let w_plus: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total = (n * (n + 1)) as f64 / 2.0;
    let w_minus = total - w_plus;

    let (p, method) = if n <= EXACT_MAX_N {
        let (upper, lower) = exact_tails(&ranks, w_plus);
        let p = match alternative {
            Alternative::Greater => upper,
            Alternative::Less => lower,
            Alternative::TwoSided => (2.0 * upper.min(lower)).min(1.0),
        };
        (p, Method::Exact)
    } else {
        let mean = total / 2.0;
        let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
        let var = (n * (n + 1) * (2 * n + 1)) as f64 / 24.0 - tie_term;
        let sd = var.sqrt();
        let p = match alternative {
            Alternative::Greater => upper_normal((w_plus - mean - 0.5) / sd),
            Alternative::Less => upper_normal((mean - w_plus - 0.5) / sd),
            Alternative::TwoSided => (2.0 * upper_normal(((w_plus - mean).abs() - 0.5) / sd)).min(1.0),
        };
        (p.clamp(0.0, 1.0), Method::NormalApprox)
    };
    Ok(WilcoxonOutcome::Tested(WilcoxonResult {
        n_effective: n,
        statistic: w_plus.min(w_minus),
        w_plus,
        p,
        method,
    }))
}

/// How the percent increment and its significance are derived.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum IncrementMethod {
    /// Median of `100 (b - a) / a`; its significance is a one-sided test of
    /// the ratios `b / a` against `1 + increment / 100`.
    MedianRatio,
    /// Largest `delta` for which `b > (1 + delta) a` remains significant at
    /// `alpha` under a one-sided test; the reported test is the one at that
    /// boundary.
    SignificanceBoundary { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct IncrementResult {
    /// One-sided test that `b` exceeds `a`.
    pub comparison: WilcoxonOutcome,
    pub increment_percent: Option<f64>,
    /// Significance of the increment itself.
    pub increment_test: Option<WilcoxonOutcome>,
    /// Pairs dropped because `a` was zero.
    pub dropped: usize,
}

/// Compare paired accuracies `a` (baseline) and `b` (candidate).
pub fn increment_test(a: &[f64], b: &[f64], method: IncrementMethod) -> Result<IncrementResult> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "increment_test",
            format!("paired samples have lengths {} and {}", a.len(), b.len()),
        ));
    }
    let total = a.len();
    let (a, b): (Vec<f64>, Vec<f64>) = a
        .iter()
        .zip(b)
        .filter(|(x, _)| **x != 0.0)
        .map(|(x, y)| (*x, *y))
        .unzip();
    let dropped = total - a.len();
    if a.is_empty() {
        return Err(Error::Config("no pairs with a nonzero baseline".into()));
    }
    let comparison = wilcoxon_signed_rank(&b, &a, Alternative::Greater)?;
    let (increment_percent, increment_test) = match method {
        IncrementMethod::MedianRatio => {
            let mut pct: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 100.0 * (y - x) / x).collect();
            let inc = median(&mut pct);
            let ratios: Vec<f64> = a.iter().zip(&b).map(|(x, y)| y / x).collect();
            let target = vec![1.0 + inc / 100.0; ratios.len()];
            let t = wilcoxon_signed_rank(&ratios, &target, Alternative::Greater)?;
            (Some(inc), Some(t))
        }
        IncrementMethod::SignificanceBoundary { alpha } => match significance_boundary(&a, &b, alpha)? {
            Some((delta, t)) => (Some(100.0 * delta), Some(t)),
            None => (None, None),
        },
    };
    Ok(IncrementResult {
        comparison,
        increment_percent,
        increment_test,
        dropped,
    })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Bisect for the largest `delta` with `b > (1 + delta) a` significant.
fn significance_boundary(a: &[f64], b: &[f64], alpha: f64) -> Result<Option<(f64, WilcoxonOutcome)>> {
    let test = |delta: f64| -> Result<WilcoxonOutcome> {
        let scaled: Vec<f64> = a.iter().map(|x| (1.0 + delta) * x).collect();
        wilcoxon_signed_rank(b, &scaled, Alternative::Greater)
    };
    let significant = |o: &WilcoxonOutcome| o.p().is_some_and(|p| p < alpha);
    let at_zero = test(0.0)?;
    if !significant(&at_zero) {
        return Ok(None);
    }
    let mut lo = 0.0;
    let mut best = at_zero;
    // Past the largest ratio every difference is negative, so the test fails.
    let mut hi = a
        .iter()
        .zip(b)
        .map(|(x, y)| y / x - 1.0)
        .fold(f64::NEG_INFINITY, f64::max)
        .max(0.0)
        + 1e-9;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        let t = test(mid)?;
        if significant(&t) {
            lo = mid;
            best = t;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-12 {
            break;
        }
    }
    Ok(Some((lo, best)))
}

/// Accuracy drop between adjacent noise levels.
pub fn robustness_differentials(acc_by_level: &[f64]) -> Result<Vec<f64>> {
    if acc_by_level.len() < 2 {
        return Err(Error::Config(format!(
            "differentials need at least 2 noise levels, got {}",
            acc_by_level.len()
        )));
    }
    Ok(acc_by_level.windows(2).map(|w| w[0] - w[1]).collect())
}

/// Pairwise one-sided robustness comparisons.
#[derive(Clone, Debug, PartialEq)]
pub struct PValueMatrix {
    pub names: Vec<String>,
    /// `cells[r][c]`: p that model `r`'s differentials are smaller than model
    /// `c`'s, kept only when below `alpha`.
    pub cells: Vec<Vec<Option<f64>>>,
    pub alpha: f64,
}

pub fn pvalue_matrix(names: &[String], deltas: &[Vec<f64>], alpha: f64) -> Result<PValueMatrix> {
    if names.len() != deltas.len() {
        return Err(Error::shape(
            "pvalue_matrix",
            format!("{} names for {} differential vectors", names.len(), deltas.len()),
        ));
    }
    if let Some(first) = deltas.first() {
        if let Some(i) = deltas.iter().position(|d| d.len() != first.len()) {
            return Err(Error::shape(
                "pvalue_matrix",
                format!(
                    "{} has {} differentials, {} has {}",
                    names[i],
                    deltas[i].len(),
                    names[0],
                    first.len()
                ),
            ));
        }
    }
    let k = names.len();
    let mut cells = vec![vec![None; k]; k];
    for r in 0..k {
        for c in 0..k {
            if r == c || deltas[r].is_empty() {
                continue;
            }
            let t = wilcoxon_signed_rank(&deltas[r], &deltas[c], Alternative::Less)?;
            cells[r][c] = t.p().filter(|&p| p < alpha);
        }
    }
    Ok(PValueMatrix {
        names: names.to_vec(),
        cells,
        alpha,
    })
}
