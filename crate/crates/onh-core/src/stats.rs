//! Group-comparison statistics: one-way ANOVA with Tukey HSD post-hoc
//! tests (Tukey-Kramer for unequal group sizes), Fisher's exact test,
//! and per-parameter group summary tables.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use statrs::function::beta::beta_reg;
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::params::OnhParameters;
use crate::surfaces::Octant;
use crate::volume::SeverityGroup;

pub const ALPHA: f64 = 0.05;
/// Absolute tolerance of the studentized-range quadrature.
pub const SR_QUAD_TOL: f64 = 1e-8;
/// Total table count above which the r x c exact test switches to
/// Monte Carlo.
pub const FISHER_ENUM_LIMIT: u64 = 200;
pub const FISHER_MC_TABLES: usize = 100_000;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("need at least 2 groups, got {0}")]
    TooFewGroups(usize),
    #[error("group {0} has fewer than 2 values")]
    GroupTooSmall(String),
    #[error("all within-group variance is zero")]
    ZeroWithinVariance,
    #[error("contingency table has an empty row or column margin")]
    EmptyMargin,
    #[error("contingency table must be at least 2x2 with nonnegative counts")]
    MalformedTable,
    #[error("i/o failure: {0}")]
    IoFailure(#[from] std::io::Error),
    #[error("serialization failure: {0}")]
    Serialization(#[from] serde_json::Error),
}

/// Labeled groups of real values. NaN values are dropped on
/// construction (listwise deletion per parameter).
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSamples {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl GroupSamples {
    pub fn new(labels: Vec<String>, values: Vec<Vec<f64>>) -> GroupSamples {
        assert_eq!(labels.len(), values.len(), "one label per group");
        let values = values
            .into_iter()
            .map(|g| g.into_iter().filter(|v| !v.is_nan()).collect())
            .collect();
        GroupSamples { labels, values }
    }

    fn check_anova(&self) -> Result<(), StatsError> {
        if self.labels.len() < 2 {
            return Err(StatsError::TooFewGroups(self.labels.len()));
        }
        for (label, g) in self.labels.iter().zip(&self.values) {
            if g.len() < 2 {
                return Err(StatsError::GroupTooSmall(label.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnovaResult {
    pub f: f64,
    pub p: f64,
    pub df_between: usize,
    pub df_within: usize,
    /// Mean square within; reused by the Tukey test.
    pub msw: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Survival function of the F distribution via the regularized
/// incomplete beta function.
fn f_survival(f: f64, d1: f64, d2: f64) -> f64 {
    if f <= 0.0 {
        return 1.0;
    }
    beta_reg(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * f))
}

/// Classic one-way decomposition: F = (SSB/dfB) / (SSW/dfW), p from
/// the F distribution.
pub fn one_way_anova(samples: &GroupSamples) -> Result<AnovaResult, StatsError> {
    samples.check_anova()?;
    let k = samples.values.len();
    let n: usize = samples.values.iter().map(|g| g.len()).sum();
    let grand = samples.values.iter().flatten().sum::<f64>() / n as f64;
    let ssb: f64 = samples
        .values
        .iter()
        .map(|g| g.len() as f64 * (mean(g) - grand).powi(2))
        .sum();
    let ssw: f64 = samples
        .values
        .iter()
        .map(|g| {
            let m = mean(g);
            g.iter().map(|v| (v - m).powi(2)).sum::<f64>()
        })
        .sum();
    let df_between = k - 1;
    let df_within = n - k;
    if ssw == 0.0 {
        return Err(StatsError::ZeroWithinVariance);
    }
    let msw = ssw / df_within as f64;
    let f = (ssb / df_between as f64) / msw;
    let p = f_survival(f, df_between as f64, df_within as f64);
    Ok(AnovaResult { f, p, df_between, df_within, msw })
}

// ---- studentized range distribution --------------------------------------

/// Adaptive Simpson quadrature with absolute tolerance.
fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &impl Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, fa, m, fm, left, lm, flm, tol / 2.0, depth - 1)
                + recurse(f, m, fm, b, fb, right, rm, frm, tol / 2.0, depth - 1)
        }
    }
    let (fa, fb) = (f(a), f(b));
    let (whole, m, fm) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, whole, m, fm, tol, 48)
}

/// Standard normal density.
fn phi(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Standard normal CDF via the complementary error function
/// relationship, evaluated with a continued-fraction-free rational
/// approximation good to ~1e-15 (Cody's erf).
fn norm_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// P(range of k iid standard normals ≤ w).
fn range_cdf(w: f64, k: usize) -> f64 {
    if w <= 0.0 {
        return 0.0;
    }
    let integrand = |z: f64| {
        let d = norm_cdf(z) - norm_cdf(z - w);
        phi(z) * d.powi(k as i32 - 1)
    };
    (k as f64) * adaptive_simpson(&integrand, -8.0 - w.min(20.0), 8.0, SR_QUAD_TOL / 10.0)
}

/// Survival function of the studentized range: P(Q > q) for k groups
/// and df error degrees of freedom, by integrating the range CDF
/// against the density of the scaled error standard deviation.
pub fn studentized_range_survival(q: f64, k: usize, df: usize) -> f64 {
    if q <= 0.0 {
        return 1.0;
    }
    let nu = df as f64;
    // density of s = sd_hat/sd: f(s) ∝ s^(nu-1) exp(-nu s^2/2)
    let ln_c = nu / 2.0 * (nu / 2.0).ln() - ln_gamma(nu / 2.0) + (2.0f64).ln();
    let s_density = |s: f64| (ln_c + (nu - 1.0) * s.ln() - nu * s * s / 2.0).exp();
    let integrand = |s: f64| s_density(s) * range_cdf(q * s, k);
    // the s density concentrates around 1 with width ~1/sqrt(2 nu)
    let upper = 1.0 + 12.0 / (2.0 * nu).sqrt();
    let cdf = adaptive_simpson(&integrand, 1e-10, upper.min(16.0), SR_QUAD_TOL);
    (1.0 - cdf).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TukeyPair {
    pub group_a: String,
    pub group_b: String,
    pub mean_diff: f64,
    pub q: f64,
    pub p: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TukeyResult {
    pub pairs: Vec<TukeyPair>,
    pub alpha: f64,
}

/// All pairwise comparisons with the Tukey-Kramer statistic
/// q = |mean_i - mean_j| / sqrt(MSW/2 (1/n_i + 1/n_j)) and p-values
/// from the studentized range distribution.
pub fn tukey_hsd(samples: &GroupSamples, alpha: f64) -> Result<TukeyResult, StatsError> {
    let anova = one_way_anova(samples)?;
    let k = samples.values.len();
    let mut pairs = Vec::new();
    for i in 0..k {
        for j in i + 1..k {
            let (gi, gj) = (&samples.values[i], &samples.values[j]);
            let diff = mean(gi) - mean(gj);
            let se = (anova.msw / 2.0 * (1.0 / gi.len() as f64 + 1.0 / gj.len() as f64)).sqrt();
            let q = diff.abs() / se;
            let p = studentized_range_survival(q, k, anova.df_within);
            pairs.push(TukeyPair {
                group_a: samples.labels[i].clone(),
                group_b: samples.labels[j].clone(),
                mean_diff: diff,
                q,
                p,
                significant: p < alpha,
            });
        }
    }
    Ok(TukeyResult { pairs, alpha })
}

// ---- Fisher's exact test --------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FisherResult {
    pub p: f64,
    /// Monte-Carlo standard error; absent for exact computations.
    pub standard_error: Option<f64>,
}

fn ln_factorial(n: u64) -> f64 {
    ln_gamma(n as f64 + 1.0)
}

fn margins(table: &[Vec<u64>]) -> Result<(Vec<u64>, Vec<u64>, u64), StatsError> {
    let r = table.len();
    if r < 2 || table[0].len() < 2 || table.iter().any(|row| row.len() != table[0].len()) {
        return Err(StatsError::MalformedTable);
    }
    let c = table[0].len();
    let row: Vec<u64> = table.iter().map(|row| row.iter().sum()).collect();
    let col: Vec<u64> = (0..c).map(|j| table.iter().map(|row| row[j]).sum()).collect();
    if row.iter().any(|&m| m == 0) || col.iter().any(|&m| m == 0) {
        return Err(StatsError::EmptyMargin);
    }
    Ok((row.clone(), col, row.iter().sum()))
}

/// Log-probability of a table under the fixed-margins null.
fn ln_table_prob(table: &[Vec<u64>], row: &[u64], col: &[u64], total: u64) -> f64 {
    let mut ln = row.iter().map(|&m| ln_factorial(m)).sum::<f64>()
        + col.iter().map(|&m| ln_factorial(m)).sum::<f64>()
        - ln_factorial(total);
    for r in table {
        for &v in r {
            ln -= ln_factorial(v);
        }
    }
    ln
}

/// Exact two-sided p: sum of probabilities of all same-margin tables no
/// more probable than the observed one (with a small relative slack for
/// floating-point equality).
fn fisher_enumerate(table: &[Vec<u64>]) -> Result<f64, StatsError> {
    let (row, col, total) = margins(table)?;
    let ln_obs = ln_table_prob(table, &row, &col, total);
    let cutoff = ln_obs + 1e-7;
    let r = row.len();
    let c = col.len();
    let mut current = vec![vec![0u64; c]; r];
    let mut p_sum = 0.0;
    // depth-first fill in row-major order; the last row and last column
    // are forced by the margins
    fn fill(
        current: &mut Vec<Vec<u64>>,
        i: usize,
        j: usize,
        row: &[u64],
        col: &[u64],
        total: u64,
        cutoff: f64,
        p_sum: &mut f64,
    ) {
        let r = row.len();
        let c = col.len();
        if i == r - 1 {
            // last row forced by column margins
            for jj in 0..c {
                let used: u64 = (0..r - 1).map(|ii| current[ii][jj]).sum();
                if used > col[jj] {
                    return;
                }
                current[r - 1][jj] = col[jj] - used;
            }
            if current[r - 1].iter().sum::<u64>() != row[r - 1] {
                return;
            }
            let ln = ln_table_prob(current, row, col, total);
            if ln <= cutoff {
                *p_sum += ln.exp();
            }
            return;
        }
        if j == c - 1 {
            // last column of a free row forced by the row margin
            let used: u64 = current[i][..c - 1].iter().sum();
            if used > row[i] {
                return;
            }
            current[i][c - 1] = row[i] - used;
            let col_used: u64 = (0..=i).map(|ii| current[ii][c - 1]).sum();
            if col_used > col[c - 1] {
                return;
            }
            fill(current, i + 1, 0, row, col, total, cutoff, p_sum);
            return;
        }
        let row_left = row[i] - current[i][..j].iter().sum::<u64>();
        let col_used: u64 = (0..i).map(|ii| current[ii][j]).sum();
        let col_left = col[j].saturating_sub(col_used);
        for v in 0..=row_left.min(col_left) {
            current[i][j] = v;
            fill(current, i, j + 1, row, col, total, cutoff, p_sum);
        }
        current[i][j] = 0;
    }
    fill(&mut current, 0, 0, &row, &col, total, cutoff, &mut p_sum);
    Ok(p_sum.min(1.0))
}

/// Monte-Carlo p for large r x c tables: sample same-margin tables by
/// permuting column labels against row labels and count tables no more
/// probable than the observed one.
fn fisher_monte_carlo(table: &[Vec<u64>], tables: usize, seed: u64) -> Result<FisherResult, StatsError> {
    let (row, col, total) = margins(table)?;
    let ln_obs = ln_table_prob(table, &row, &col, total);
    let cutoff = ln_obs + 1e-7;
    let r = row.len();
    let c = col.len();
    let mut row_of: Vec<usize> = Vec::with_capacity(total as usize);
    for (i, &m) in row.iter().enumerate() {
        row_of.extend(std::iter::repeat(i).take(m as usize));
    }
    let mut col_of: Vec<usize> = Vec::with_capacity(total as usize);
    for (j, &m) in col.iter().enumerate() {
        col_of.extend(std::iter::repeat(j).take(m as usize));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..tables {
        // Fisher-Yates shuffle of the column assignment
        for i in (1..col_of.len()).rev() {
            let j = rng.gen_range(0..=i);
            col_of.swap(i, j);
        }
        let mut t = vec![vec![0u64; c]; r];
        for (&ri, &cj) in row_of.iter().zip(&col_of) {
            t[ri][cj] += 1;
        }
        if ln_table_prob(&t, &row, &col, total) <= cutoff {
            hits += 1;
        }
    }
    let p = hits as f64 / tables as f64;
    let se = (p * (1.0 - p) / tables as f64).sqrt();
    Ok(FisherResult { p, standard_error: Some(se) })
}

/// Fisher's exact test. 2x2 tables and small r x c tables (total count
/// ≤ 200) are enumerated exactly; larger tables fall back to a seeded
/// Monte-Carlo estimate with its standard error.
pub fn fisher_exact(table: &[Vec<u64>]) -> Result<FisherResult, StatsError> {
    let (_, _, total) = margins(table)?;
    let is_2x2 = table.len() == 2 && table[0].len() == 2;
    if is_2x2 || total <= FISHER_ENUM_LIMIT {
        Ok(FisherResult { p: fisher_enumerate(table)?, standard_error: None })
    } else {
        fisher_monte_carlo(table, FISHER_MC_TABLES, 0x46495348)
    }
}

// ---- group summaries ------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupStat {
    pub group: String,
    pub n: usize,
    pub mean: f64,
    /// Absent for single-value groups.
    pub sd: Option<f64>,
    /// min, first quartile, median, third quartile, max.
    pub five_number: Option<[f64; 5]>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairwiseMark {
    pub group_a: String,
    pub group_b: String,
    pub p: f64,
    /// "*" when p < alpha, empty otherwise.
    pub star: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParameterSummary {
    pub parameter: String,
    pub groups: Vec<GroupStat>,
    pub anova: Option<AnovaResult>,
    pub pairwise: Vec<PairwiseMark>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryReport {
    pub parameters: Vec<ParameterSummary>,
}

/// Quantile with linear interpolation between order statistics.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * q;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn group_stat(label: &str, values: &[f64]) -> GroupStat {
    let n = values.len();
    let m = mean(values);
    let sd = if n > 1 {
        Some((values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt())
    } else {
        None
    };
    let five_number = if n > 0 {
        let mut sorted = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).expect("no NaN after deletion"));
        Some([
            sorted[0],
            quantile(&sorted, 0.25),
            quantile(&sorted, 0.5),
            quantile(&sorted, 0.75),
            sorted[n - 1],
        ])
    } else {
        None
    };
    GroupStat { group: label.to_string(), n, mean: m, sd, five_number }
}

/// The full sectorized + scalar parameter list, in octant order for the
/// sector tables.
pub fn parameter_names() -> Vec<String> {
    let mut names = Vec::new();
    for family in ["rnflt", "mrw", "gcct", "cht"] {
        for oct in Octant::ALL {
            names.push(format!("{family}_{}_um", oct.short_name()));
        }
    }
    for scalar in OnhParameters::scalar_names() {
        names.push(scalar.to_string());
    }
    names
}

fn parameter_value(params: &OnhParameters, name: &str) -> f64 {
    if let Some(v) = params.scalar(name) {
        return v;
    }
    let mut parts = name.splitn(2, '_');
    let family = parts.next().unwrap_or_default();
    let rest = parts.next().unwrap_or_default();
    let oct_name = rest.strip_suffix("_um").unwrap_or(rest);
    let idx = Octant::ALL
        .iter()
        .position(|o| o.short_name() == oct_name)
        .expect("valid octant name");
    match family {
        "rnflt" => params.rnflt_um[idx],
        "mrw" => params.mrw_um[idx],
        "gcct" => params.gcct_um[idx],
        "cht" => params.cht_um[idx],
        _ => panic!("unknown parameter {name}"),
    }
}

/// Per-parameter, per-group summary with ANOVA + Tukey marks. NaN
/// values are deleted per parameter; ANOVA/Tukey are skipped (None /
/// empty) when their preconditions fail after deletion.
pub fn summarize(eyes: &[(OnhParameters, SeverityGroup)]) -> SummaryReport {
    let mut groups: BTreeMap<u8, (String, Vec<&OnhParameters>)> = BTreeMap::new();
    for (params, group) in eyes {
        let key = *group as u8;
        groups
            .entry(key)
            .or_insert_with(|| (group.as_str().to_string(), Vec::new()))
            .1
            .push(params);
    }
    let mut parameters = Vec::new();
    for name in parameter_names() {
        let labels: Vec<String> = groups.values().map(|(l, _)| l.clone()).collect();
        let values: Vec<Vec<f64>> = groups
            .values()
            .map(|(_, ps)| ps.iter().map(|p| parameter_value(p, &name)).collect())
            .collect();
        let samples = GroupSamples::new(labels, values);
        let group_stats: Vec<GroupStat> = samples
            .labels
            .iter()
            .zip(&samples.values)
            .filter(|(_, v)| !v.is_empty())
            .map(|(l, v)| group_stat(l, v))
            .collect();
        let anova = one_way_anova(&samples).ok();
        let pairwise = match tukey_hsd(&samples, ALPHA) {
            Ok(t) => t
                .pairs
                .into_iter()
                .map(|p| PairwiseMark {
                    group_a: p.group_a,
                    group_b: p.group_b,
                    p: p.p,
                    star: if p.significant { "*".to_string() } else { String::new() },
                })
                .collect(),
            Err(_) => Vec::new(),
        };
        parameters.push(ParameterSummary { parameter: name, groups: group_stats, anova, pairwise });
    }
    SummaryReport { parameters }
}

/// One CSV row per (parameter, group):
/// parameter,group,n,mean,sd,min,q1,median,q3,max,anova_p,stars
pub fn write_summary_csv<W: Write>(report: &SummaryReport, w: &mut W) -> Result<(), StatsError> {
    writeln!(w, "parameter,group,n,mean,sd,min,q1,median,q3,max,anova_p,stars")?;
    for param in &report.parameters {
        let anova_p = param
            .anova
            .as_ref()
            .map(|a| a.p.to_string())
            .unwrap_or_default();
        let stars: String = param
            .pairwise
            .iter()
            .filter(|m| !m.star.is_empty())
            .map(|m| format!("{}-{}", m.group_a, m.group_b))
            .collect::<Vec<_>>()
            .join(";");
        for g in &param.groups {
            let sd = g.sd.map(|v| v.to_string()).unwrap_or_default();
            let fv = g.five_number.expect("non-empty group");
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                param.parameter, g.group, g.n, g.mean, sd, fv[0], fv[1], fv[2], fv[3], fv[4],
                anova_p, stars
            )?;
        }
    }
    Ok(())
}

pub fn write_summary_json<W: Write>(report: &SummaryReport, w: &mut W) -> Result<(), StatsError> {
    serde_json::to_writer_pretty(&mut *w, report)?;
    writeln!(w)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand_distr::{ChiSquared, Distribution, StandardNormal};
    use statrs::distribution::{ContinuousCDF, StudentsT};

    fn gs(groups: &[&[f64]]) -> GroupSamples {
        GroupSamples::new(
            (0..groups.len()).map(|i| format!("g{i}")).collect(),
            groups.iter().map(|g| g.to_vec()).collect(),
        )
    }

    #[test]
    fn anova_identical_means_gives_f_zero_p_one() {
        let s = gs(&[&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]]);
        let a = one_way_anova(&s).unwrap();
        assert_abs_diff_eq!(a.f, 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!(a.p, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn anova_two_groups_equals_t_squared() {
        let x: Vec<f64> = vec![4.1, 5.3, 3.9, 4.7, 5.0, 4.4];
        let y: Vec<f64> = vec![5.2, 6.0, 5.5, 6.3, 5.1];
        let a = one_way_anova(&gs(&[&x, &y])).unwrap();
        // pooled-variance two-sample t statistic
        let (nx, ny) = (x.len() as f64, y.len() as f64);
        let (mx, my) = (mean(&x), mean(&y));
        let ssx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
        let ssy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
        let sp2 = (ssx + ssy) / (nx + ny - 2.0);
        let t = (mx - my) / (sp2 * (1.0 / nx + 1.0 / ny)).sqrt();
        assert_abs_diff_eq!(a.f, t * t, epsilon = 1e-10);
        // and the p-values agree with the two-sided t test
        let tdist = StudentsT::new(0.0, 1.0, nx + ny - 2.0).unwrap();
        let p_t = 2.0 * (1.0 - tdist.cdf(t.abs()));
        assert_abs_diff_eq!(a.p, p_t, epsilon = 1e-10);
    }

    #[test]
    fn anova_fixed_dataset_matches_closed_form() {
        // groups 1..5, 2..6, 3..7: SSB = 10, SSW = 30, F = (10/2)/(30/12) = 2
        let s = gs(&[
            &[1.0, 2.0, 3.0, 4.0, 5.0],
            &[2.0, 3.0, 4.0, 5.0, 6.0],
            &[3.0, 4.0, 5.0, 6.0, 7.0],
        ]);
        let a = one_way_anova(&s).unwrap();
        assert_abs_diff_eq!(a.f, 2.0, epsilon = 1e-10);
        assert_eq!((a.df_between, a.df_within), (2, 12));
    }

    #[test]
    fn anova_affine_invariance_and_zero_variance() {
        let s = gs(&[&[1.0, 2.0, 4.0], &[2.5, 3.5, 5.0], &[0.5, 1.0, 3.0]]);
        let a = one_way_anova(&s).unwrap();
        let shifted = gs(&[
            &[1.0 * 3.0 + 7.0, 2.0 * 3.0 + 7.0, 4.0 * 3.0 + 7.0],
            &[2.5 * 3.0 + 7.0, 3.5 * 3.0 + 7.0, 5.0 * 3.0 + 7.0],
            &[0.5 * 3.0 + 7.0, 1.0 * 3.0 + 7.0, 3.0 * 3.0 + 7.0],
        ]);
        let b = one_way_anova(&shifted).unwrap();
        assert_abs_diff_eq!(a.f, b.f, epsilon = 1e-10);
        assert_abs_diff_eq!(a.p, b.p, epsilon = 1e-10);

        let constant = gs(&[&[2.0, 2.0], &[5.0, 5.0]]);
        assert!(matches!(one_way_anova(&constant), Err(StatsError::ZeroWithinVariance)));
    }

    #[test]
    fn nan_values_are_dropped_on_construction() {
        let s = GroupSamples::new(
            vec!["a".into(), "b".into()],
            vec![vec![1.0, f64::NAN, 2.0], vec![3.0, 4.0]],
        );
        assert_eq!(s.values[0], vec![1.0, 2.0]);
    }

    #[test]
    fn studentized_range_survival_matches_monte_carlo() {
        let (k, df) = (3usize, 10usize);
        for q in [2.0, 3.5] {
            let analytic = studentized_range_survival(q, k, df);
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let chi = ChiSquared::new(df as f64).unwrap();
            let draws = 1_000_000usize;
            let mut hits = 0usize;
            for _ in 0..draws {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for _ in 0..k {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    lo = lo.min(z);
                    hi = hi.max(z);
                }
                let s = (chi.sample(&mut rng) / df as f64).sqrt();
                if (hi - lo) / s > q {
                    hits += 1;
                }
            }
            let mc = hits as f64 / draws as f64;
            let se = (mc * (1.0 - mc) / draws as f64).sqrt();
            assert!(
                (analytic - mc).abs() <= 3.0 * se,
                "q={q}: analytic {analytic} vs mc {mc} (se {se})"
            );
        }
    }

    #[test]
    fn tukey_identical_means_not_significant() {
        let s = gs(&[&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0], &[2.0, 3.0, 1.0]]);
        let t = tukey_hsd(&s, ALPHA).unwrap();
        assert_eq!(t.pairs.len(), 3);
        for pair in &t.pairs {
            assert_abs_diff_eq!(pair.p, 1.0, epsilon = 1e-9);
            assert!(!pair.significant);
        }
    }

    #[test]
    fn tukey_two_groups_reduces_to_t_test() {
        let x = [4.1, 5.3, 3.9, 4.7, 5.0, 4.4];
        let y = [5.2, 6.0, 5.5, 6.3, 5.1];
        let t = tukey_hsd(&gs(&[&x, &y]), ALPHA).unwrap();
        let a = one_way_anova(&gs(&[&x, &y])).unwrap();
        // q = sqrt(2) |t|, and for k = 2 the studentized-range p equals
        // the two-sided t-test p
        let tstat = a.f.sqrt();
        assert_abs_diff_eq!(t.pairs[0].q, std::f64::consts::SQRT_2 * tstat, epsilon = 1e-10);
        let tdist = StudentsT::new(0.0, 1.0, a.df_within as f64).unwrap();
        let p_t = 2.0 * (1.0 - tdist.cdf(tstat));
        assert_abs_diff_eq!(t.pairs[0].p, p_t, epsilon = 1e-6);
    }

    #[test]
    fn fisher_2x2_symmetric_table_p_one() {
        let r = fisher_exact(&[vec![5, 5], vec![5, 5]]).unwrap();
        assert_abs_diff_eq!(r.p, 1.0, epsilon = 1e-12);
        assert!(r.standard_error.is_none());
    }

    #[test]
    fn fisher_zero_margin_rejected() {
        assert!(matches!(
            fisher_exact(&[vec![0, 0], vec![3, 4]]),
            Err(StatsError::EmptyMargin)
        ));
        assert!(matches!(
            fisher_exact(&[vec![0, 2], vec![0, 4]]),
            Err(StatsError::EmptyMargin)
        ));
    }

    #[test]
    fn fisher_2x2_matches_hypergeometric_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..30 {
            let a = rng.gen_range(1..12u64);
            let b = rng.gen_range(1..12u64);
            let c = rng.gen_range(1..12u64);
            let d = rng.gen_range(1..12u64);
            let got = fisher_exact(&[vec![a, b], vec![c, d]]).unwrap().p;
            // direct hypergeometric enumeration over the free cell
            let (r1, r2, c1) = (a + b, c + d, a + c);
            let n = r1 + r2;
            let lnp = |x: u64| -> Option<f64> {
                if x > r1 || c1 < x || (c1 - x) > r2 {
                    return None;
                }
                Some(
                    ln_factorial(r1) + ln_factorial(r2) + ln_factorial(c1)
                        + ln_factorial(n - c1)
                        - ln_factorial(n)
                        - ln_factorial(x)
                        - ln_factorial(r1 - x)
                        - ln_factorial(c1 - x)
                        - ln_factorial(r2 - (c1 - x)),
                )
            };
            let obs = lnp(a).unwrap();
            let mut want = 0.0;
            for x in 0..=c1.min(r1) {
                if let Some(l) = lnp(x) {
                    if l <= obs + 1e-7 {
                        want += l.exp();
                    }
                }
            }
            assert_abs_diff_eq!(got, want.min(1.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn fisher_invariant_under_permutations() {
        let t = vec![vec![2u64, 7, 3], vec![5, 1, 4]];
        let p0 = fisher_exact(&t).unwrap().p;
        // swap rows
        let p1 = fisher_exact(&[t[1].clone(), t[0].clone()]).unwrap().p;
        // swap first two columns
        let swapped: Vec<Vec<u64>> = t.iter().map(|r| vec![r[1], r[0], r[2]]).collect();
        let p2 = fisher_exact(&swapped).unwrap().p;
        assert_abs_diff_eq!(p0, p1, epsilon = 1e-12);
        assert_abs_diff_eq!(p0, p2, epsilon = 1e-12);
    }

    #[test]
    fn fisher_monte_carlo_agrees_with_enumeration() {
        // 2x3 with total 300: dispatches to Monte Carlo, while direct
        // enumeration stays cheap for the oracle
        let t = vec![vec![60u64, 40, 50], vec![45, 55, 50]];
        let exact = fisher_enumerate(&t).unwrap();
        let mc = fisher_exact(&t).unwrap();
        let se = mc.standard_error.expect("monte carlo path");
        assert!(se > 0.0);
        assert!(
            (mc.p - exact).abs() <= 4.0 * se,
            "mc {} vs exact {exact} (se {se})",
            mc.p
        );
    }

    fn constant_params(fill: f64) -> OnhParameters {
        let mut p = OnhParameters::nan();
        p.rnflt_um = [fill; 8];
        p.mrw_um = [fill + 1.0; 8];
        p.gcct_um = [fill + 2.0; 8];
        p.cht_um = [fill + 3.0; 8];
        p.pld_um = fill;
        p.mpt_um = fill;
        p.lcd_um = fill;
        p.lc_gsi = 0.1;
        p.ppsa_deg = 5.0;
        p.bmoa_mm2 = 2.0;
        p.rnflt_avg_um = fill;
        p.mrw_avg_um = fill + 1.0;
        p.gcct_avg_um = fill + 2.0;
        p.cht_avg_um = fill + 3.0;
        p
    }

    #[test]
    fn summary_means_match_construction() {
        let mut eyes = Vec::new();
        for v in [100.0, 110.0, 120.0] {
            eyes.push((constant_params(v), SeverityGroup::Normal));
        }
        for v in [70.0, 80.0] {
            eyes.push((constant_params(v), SeverityGroup::Advanced));
        }
        let report = summarize(&eyes);
        let rnflt_t = report
            .parameters
            .iter()
            .find(|p| p.parameter == "rnflt_T_um")
            .unwrap();
        let normal = rnflt_t.groups.iter().find(|g| g.group == "normal").unwrap();
        assert_abs_diff_eq!(normal.mean, 110.0, epsilon = 1e-12);
        assert_eq!(normal.n, 3);
        let adv = rnflt_t.groups.iter().find(|g| g.group == "advanced").unwrap();
        assert_abs_diff_eq!(adv.mean, 75.0, epsilon = 1e-12);
        assert_eq!(adv.five_number.unwrap(), [70.0, 72.5, 75.0, 77.5, 80.0]);
    }

    #[test]
    fn summary_single_eye_group_has_no_sd() {
        let eyes = vec![
            (constant_params(100.0), SeverityGroup::Normal),
            (constant_params(80.0), SeverityGroup::Mild),
        ];
        let report = summarize(&eyes);
        for p in &report.parameters {
            for g in &p.groups {
                assert!(g.sd.is_none());
            }
            assert!(p.anova.is_none());
            assert!(p.pairwise.is_empty());
        }
    }

    #[test]
    fn summary_csv_schema() {
        let eyes = vec![
            (constant_params(100.0), SeverityGroup::Normal),
            (constant_params(101.0), SeverityGroup::Normal),
            (constant_params(80.0), SeverityGroup::Mild),
            (constant_params(82.0), SeverityGroup::Mild),
        ];
        let report = summarize(&eyes);
        let mut buf = Vec::new();
        write_summary_csv(&report, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "parameter,group,n,mean,sd,min,q1,median,q3,max,anova_p,stars"
        );
        // 42 parameters x 2 groups rows follow
        assert_eq!(lines.count(), parameter_names().len() * 2);
        let mut json = Vec::new();
        write_summary_json(&report, &mut json).unwrap();
        let parsed: serde_json::Value = serde_json::from_slice(&json).unwrap();
        assert_eq!(parsed["parameters"].as_array().unwrap().len(), parameter_names().len());
    }
}
