//! Performance statistics for a stream of daily log excess returns.
//!
//! Location and scale fields are reported in percent per observation.
//! Ratios whose denominator is zero are `None`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_SAMPLES: usize = 100;

/// Which observations enter the downside deviation used by the Sortino ratio.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SortinoDenominator {
    /// Root mean square of (r − mean) over the observations below the mean,
    /// divided by their count. Same as the reported semideviation.
    #[default]
    BelowMean,
    /// Squares of min(r − mean, 0), divided by the full sample size.
    FullSample,
    /// Squares of min(r, 0), divided by the full sample size (zero target).
    ZeroTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricConventions {
    pub level: f64,
    pub sortino: SortinoDenominator,
}

impl Default for MetricConventions {
    fn default() -> Self {
        MetricConventions {
            level: 0.95,
            sortino: SortinoDenominator::BelowMean,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    pub mean: f64,
    pub std: f64,
    pub semideviation: f64,
    pub skewness: Option<f64>,
    pub kurtosis: Option<f64>,
    pub var95: f64,
    pub cvar95: f64,
    pub sharpe: Option<f64>,
    pub sortino: Option<f64>,
    pub mean_to_var: Option<f64>,
    pub mean_to_cvar: Option<f64>,
    pub sample_count: usize,
}

fn ratio(num: f64, den: f64) -> Option<f64> {
    (den > 0.0).then(|| num / den)
}

/// The three ratios checkable from (mean, std, VaR, CVaR) alone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailRatios {
    pub sharpe: Option<f64>,
    pub mean_to_var: Option<f64>,
    pub mean_to_cvar: Option<f64>,
}

pub fn tail_ratios(mean: f64, std: f64, var: f64, cvar: f64) -> TailRatios {
    TailRatios {
        sharpe: ratio(mean, std),
        mean_to_var: ratio(mean, var),
        mean_to_cvar: ratio(mean, cvar),
    }
}

/// Index of the lower-interpolated (1 − level) order statistic.
fn lower_quantile_index(n: usize, level: f64) -> usize {
    (((1.0 - level) * (n - 1) as f64).floor() as usize).min(n - 1)
}

pub fn performance_report(returns: &[f64], conventions: &MetricConventions) -> Result<PerfReport> {
    let n = returns.len();
    if n < MIN_SAMPLES {
        return Err(Error::InsufficientData {
            needed: MIN_SAMPLES,
            got: n,
        });
    }
    if !(conventions.level > 0.0 && conventions.level < 1.0) {
        return Err(Error::Config(format!(
            "tail level {} outside (0, 1)",
            conventions.level
        )));
    }
    let pct: Vec<f64> = returns.iter().map(|r| 100.0 * r).collect();
    let nf = n as f64;
    // shifting by the first value makes a constant stream exactly dispersion-free
    let r0 = pct[0];
    let shift = pct.iter().map(|r| r - r0).sum::<f64>() / nf;
    let mean = r0 + shift;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    let (mut down_sq, mut down_n) = (0.0, 0usize);
    let mut full_sq = 0.0;
    let mut zero_sq = 0.0;
    for &r in &pct {
        let e = (r - r0) - shift;
        let e2 = e * e;
        m2 += e2;
        m3 += e2 * e;
        m4 += e2 * e2;
        if r < mean {
            down_sq += e2;
            down_n += 1;
            full_sq += e2;
        }
        if r < 0.0 {
            zero_sq += r * r;
        }
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    let std = m2.sqrt();
    let semideviation = if down_n > 0 {
        (down_sq / down_n as f64).sqrt()
    } else {
        0.0
    };
    let (skewness, kurtosis) = if m2 > 0.0 {
        (Some(m3 / m2.powf(1.5)), Some(m4 / (m2 * m2) - 3.0))
    } else {
        (None, None)
    };

    let mut sorted = pct.clone();
    sorted.sort_by(f64::total_cmp);
    let q = sorted[lower_quantile_index(n, conventions.level)];
    let tail: Vec<f64> = sorted.iter().copied().take_while(|r| *r <= q).collect();
    let tail_mean = tail.iter().sum::<f64>() / tail.len() as f64;
    // guard tiny negative values from rounding on constant streams
    let var95 = (mean - q).max(0.0);
    let cvar95 = (mean - tail_mean).max(var95);

    let downside = match conventions.sortino {
        SortinoDenominator::BelowMean => semideviation,
        SortinoDenominator::FullSample => (full_sq / nf).sqrt(),
        SortinoDenominator::ZeroTarget => (zero_sq / nf).sqrt(),
    };
    let ratios = tail_ratios(mean, std, var95, cvar95);
    Ok(PerfReport {
        mean,
        std,
        semideviation,
        skewness,
        kurtosis,
        var95,
        cvar95,
        sharpe: ratios.sharpe,
        sortino: ratio(mean, downside),
        mean_to_var: ratios.mean_to_var,
        mean_to_cvar: ratios.mean_to_cvar,
        sample_count: n,
    })
}

impl PerfReport {
    /// (name, value) pairs in table order; undefined entries are NaN.
    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        let o = |v: Option<f64>| v.unwrap_or(f64::NAN);
        vec![
            ("mean", self.mean),
            ("std", self.std),
            ("semideviation", self.semideviation),
            ("skewness", o(self.skewness)),
            ("kurtosis", o(self.kurtosis)),
            ("var95", self.var95),
            ("cvar95", self.cvar95),
            ("sharpe", o(self.sharpe)),
            ("sortino", o(self.sortino)),
            ("mean_to_var", o(self.mean_to_var)),
            ("mean_to_cvar", o(self.mean_to_cvar)),
        ]
    }

    pub fn degenerate(&self) -> bool {
        self.sharpe.is_none() || self.mean_to_var.is_none() || self.mean_to_cvar.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairComparison {
    pub left: String,
    pub right: String,
    pub diffs: Vec<(String, f64)>,
    pub max_diff: f64,
    pub within_tolerance: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonVerdict {
    pub tolerance: f64,
    pub pairs: Vec<PairComparison>,
}

impl ComparisonVerdict {
    pub fn pair(&self, left: &str, right: &str) -> Option<&PairComparison> {
        self.pairs
            .iter()
            .find(|p| (p.left == left && p.right == right) || (p.left == right && p.right == left))
    }
}

fn metric_diff(a: f64, b: f64) -> f64 {
    // both undefined counts as agreement
    if a.is_nan() && b.is_nan() {
        0.0
    } else if a.is_nan() || b.is_nan() {
        f64::INFINITY
    } else {
        (a - b).abs()
    }
}

/// Absolute metric differences for every pair of named reports.
pub fn compare_strategies(reports: &[(String, PerfReport)], tolerance: f64) -> ComparisonVerdict {
    let mut pairs = Vec::new();
    for i in 0..reports.len() {
        for j in i + 1..reports.len() {
            let (ln, l) = &reports[i];
            let (rn, r) = &reports[j];
            let diffs: Vec<(String, f64)> = l
                .metrics()
                .into_iter()
                .zip(r.metrics())
                .map(|((name, a), (_, b))| (name.to_string(), metric_diff(a, b)))
                .collect();
            let count_diff = (l.sample_count as f64 - r.sample_count as f64).abs();
            let max_diff = diffs.iter().map(|d| d.1).fold(count_diff, f64::max);
            pairs.push(PairComparison {
                left: ln.clone(),
                right: rn.clone(),
                diffs,
                max_diff,
                within_tolerance: max_diff <= tolerance,
            });
        }
    }
    ComparisonVerdict { tolerance, pairs }
}

const ROW_LABELS: [(&str, &str, bool); 11] = [
    ("mean", "Mean", true),
    ("std", "Standard deviation", true),
    ("semideviation", "Semideviation", true),
    ("skewness", "Skewness", false),
    ("kurtosis", "Kurtosis", false),
    ("var95", "VaR", true),
    ("cvar95", "CVaR", true),
    ("sharpe", "Sharpe", false),
    ("sortino", "Sortino", false),
    ("mean_to_var", "Mean-to-VaR", false),
    ("mean_to_cvar", "Mean-to-CVaR", false),
];

fn cell(v: f64, pct: bool) -> String {
    if v.is_nan() {
        "n/a".into()
    } else if pct {
        format!("{v:.4} %")
    } else {
        format!("{v:.4}")
    }
}

/// Aligned text table with one column per report.
pub fn format_table(reports: &[(String, PerfReport)]) -> String {
    let mut rows: Vec<Vec<String>> = vec![std::iter::once(String::new())
        .chain(reports.iter().map(|(n, _)| n.clone()))
        .collect()];
    let metrics: Vec<Vec<(&str, f64)>> = reports.iter().map(|(_, r)| r.metrics()).collect();
    for (k, (_, label, pct)) in ROW_LABELS.iter().enumerate() {
        let mut row = vec![label.to_string()];
        row.extend(metrics.iter().map(|m| cell(m[k].1, *pct)));
        rows.push(row);
    }
    let mut row = vec!["Observations".to_string()];
    row.extend(reports.iter().map(|(_, r)| r.sample_count.to_string()));
    rows.push(row);

    let cols = rows[0].len();
    let widths: Vec<usize> = (0..cols)
        .map(|c| rows.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for r in &rows {
        let line: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| {
                if c == 0 {
                    format!("{s:<w$}", w = widths[c])
                } else {
                    format!("{s:>w$}", w = widths[c])
                }
            })
            .collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Same content as [`format_table`] as CSV with full precision.
pub fn table_csv(reports: &[(String, PerfReport)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["metric".to_string()];
    header.extend(reports.iter().map(|(n, _)| n.clone()));
    w.write_record(&header)?;
    let metrics: Vec<Vec<(&str, f64)>> = reports.iter().map(|(_, r)| r.metrics()).collect();
    for (k, (key, _, _)) in ROW_LABELS.iter().enumerate() {
        let mut row = vec![key.to_string()];
        row.extend(metrics.iter().map(|m| {
            let v = m[k].1;
            if v.is_nan() {
                String::new()
            } else {
                v.to_string()
            }
        }));
        w.write_record(&row)?;
    }
    let mut row = vec!["sample_count".to_string()];
    row.extend(reports.iter().map(|(_, r)| r.sample_count.to_string()));
    w.write_record(&row)?;
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StudentT};

    fn sample(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let t = StudentT::new(5.0).unwrap();
        (0..n).map(|_| 0.0005 + 0.01 * t.sample(&mut rng)).collect()
    }

    #[test]
    fn table_ratios() {
        // (mean, std, VaR, CVaR) and (Sharpe, mean-to-VaR, mean-to-CVaR) per column
        let cols = [
            ((0.0507, 1.1682, 1.6773, 2.8334), (0.0434, 0.0302, 0.0179)),
            ((0.2437, 4.3154, 7.0890, 8.9186), (0.0565, 0.0344, 0.0273)),
            ((0.2437, 4.3154, 7.0890, 8.9186), (0.0565, 0.0344, 0.0273)),
            ((0.3078, 7.8217, 12.8507, 16.1727), (0.0394, 0.0240, 0.0190)),
        ];
        for ((m, s, v, c), (sh, mv, mc)) in cols {
            let r = tail_ratios(m, s, v, c);
            assert!((r.sharpe.unwrap() - sh).abs() <= 1e-4);
            assert!((r.mean_to_var.unwrap() - mv).abs() <= 1e-4);
            assert!((r.mean_to_cvar.unwrap() - mc).abs() <= 1e-4);
        }
    }

    #[test]
    fn hand_computed_small_stream() {
        // 100 observations: 0.01 repeated 90 times, −0.02 repeated 10 times
        let mut r = vec![0.01; 90];
        r.extend(vec![-0.02; 10]);
        let rep = performance_report(&r, &MetricConventions::default()).unwrap();
        let mean = 0.7; // percent
        assert!((rep.mean - mean).abs() < 1e-12);
        let var = (90.0 * 0.3f64.powi(2) + 10.0 * 2.7f64.powi(2)) / 100.0;
        assert!((rep.std - var.sqrt()).abs() < 1e-12);
        assert!((rep.semideviation - 2.7).abs() < 1e-12);
        // floor(0.05·99) = 4 → sorted[4] = −2%
        assert!((rep.var95 - 2.7).abs() < 1e-12);
        assert!((rep.cvar95 - 2.7).abs() < 1e-12);
        assert_eq!(rep.sample_count, 100);
    }

    #[test]
    fn constant_stream_has_undefined_ratios() {
        let rep = performance_report(&[0.001; 200], &MetricConventions::default()).unwrap();
        assert_eq!(rep.std, 0.0);
        assert_eq!(rep.sharpe, None);
        assert_eq!(rep.mean_to_var, None);
        assert_eq!(rep.sortino, None);
        assert_eq!(rep.skewness, None);
        assert!(rep.degenerate());
    }

    #[test]
    fn too_few_samples() {
        assert!(matches!(
            performance_report(&[0.0; 99], &MetricConventions::default()),
            Err(Error::InsufficientData { needed: 100, got: 99 })
        ));
    }

    #[test]
    fn sortino_switch_changes_only_sortino() {
        let r = sample(2000, 3);
        let a = performance_report(&r, &MetricConventions::default()).unwrap();
        let b = performance_report(
            &r,
            &MetricConventions {
                sortino: SortinoDenominator::FullSample,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(a.sharpe, b.sharpe);
        assert_eq!(a.semideviation, b.semideviation);
        assert!(b.sortino.unwrap() > a.sortino.unwrap());
    }

    #[test]
    fn self_comparison_is_zero() {
        let rep = performance_report(&sample(500, 1), &MetricConventions::default()).unwrap();
        let v = compare_strategies(&[("a".into(), rep), ("b".into(), rep)], 0.0);
        assert_eq!(v.pairs.len(), 1);
        assert_eq!(v.pairs[0].max_diff, 0.0);
        assert!(v.pair("b", "a").unwrap().within_tolerance);
    }

    #[test]
    fn table_renders_every_column() {
        let rep = performance_report(&sample(500, 2), &MetricConventions::default()).unwrap();
        let reports = vec![("Benchmark".to_string(), rep), ("Kelly".to_string(), rep)];
        let text = format_table(&reports);
        assert!(text.lines().next().unwrap().contains("Kelly"));
        assert_eq!(text.lines().count(), 13);
        let csv = table_csv(&reports).unwrap();
        assert!(csv.starts_with("metric,Benchmark,Kelly"));
    }

    proptest! {
        #[test]
        fn scale_equivariance(seed in 0u64..1000, lambda in 0.01f64..50.0) {
            let r = sample(300, seed);
            let scaled: Vec<f64> = r.iter().map(|v| v * lambda).collect();
            let a = performance_report(&r, &MetricConventions::default()).unwrap();
            let b = performance_report(&scaled, &MetricConventions::default()).unwrap();
            let close = |x: f64, y: f64| (x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1.0);
            prop_assert!(close(b.mean, lambda * a.mean));
            prop_assert!(close(b.std, lambda * a.std));
            prop_assert!(close(b.semideviation, lambda * a.semideviation));
            prop_assert!(close(b.var95, lambda * a.var95));
            prop_assert!(close(b.cvar95, lambda * a.cvar95));
            for (x, y) in [(a.sharpe, b.sharpe), (a.sortino, b.sortino), (a.mean_to_var, b.mean_to_var), (a.mean_to_cvar, b.mean_to_cvar)] {
                prop_assert!(close(x.unwrap(), y.unwrap()));
            }
        }

        #[test]
        fn quantile_coherence(seed in 0u64..1000, n in 100usize..600) {
            let r = sample(n, seed);
            let rep = performance_report(&r, &MetricConventions::default()).unwrap();
            prop_assert!(rep.cvar95 >= rep.var95);
            let mut s: Vec<f64> = r.iter().map(|v| 100.0 * v).collect();
            s.sort_by(f64::total_cmp);
            let q = s[((0.05 * (n - 1) as f64).floor()) as usize];
            prop_assert!((rep.var95 - (rep.mean - q)).abs() < 1e-12);
            prop_assert!((rep.sharpe.unwrap() - rep.mean / rep.std).abs() < 1e-12);
            prop_assert!((rep.mean_to_var.unwrap() - rep.mean / rep.var95).abs() < 1e-12);
            prop_assert!((rep.mean_to_cvar.unwrap() - rep.mean / rep.cvar95).abs() < 1e-12);
        }
    }
}
