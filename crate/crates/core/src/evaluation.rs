//! Out-of-sample score tables and coherence diagnostics.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{score_mixture, PredictiveMixture, RegionSpec, RuleSpec, ScoringRule, TailKind};
use crate::stats;

/// Tail regions with thresholds at the type-7 empirical quantiles of the
/// training data: lower tails for levels ≤ 0.5, upper tails above.
pub fn cls_thresholds(y_train: &[f64], levels: &[f64]) -> Result<Vec<RegionSpec>> {
    if y_train.is_empty() {
        return Err(Error::domain("CLS thresholds need a non-empty training series"));
    }
    let mut sorted = y_train.to_vec();
    sorted.sort_by(f64::total_cmp);
    levels
        .iter()
        .map(|&level| {
            if !(level > 0.0 && level < 1.0) {
                return Err(Error::domain(format!("CLS level must lie in (0,1), got {level}")));
            }
            let kind = if level <= 0.5 { TailKind::Lower } else { TailKind::Upper };
            RegionSpec::new(kind, level, stats::quantile_sorted(&sorted, level))
        })
        .collect()
}

/// Resolves rule names against the training data.
pub fn resolve_rules(specs: &[RuleSpec], y_train: &[f64]) -> Result<Vec<ScoringRule>> {
    specs
        .iter()
        .map(|s| match s {
            RuleSpec::Cls { percent } => {
                let region = cls_thresholds(y_train, &[*percent as f64 / 100.0])?[0];
                Ok(ScoringRule::Cls(region))
            }
            other => other.resolve(None),
        })
        .collect()
}

/// Mean score of each rule over the hold-out.
pub fn average_score_row(predictives: &[PredictiveMixture], y_test: &[f64], rules: &[ScoringRule]) -> Result<Vec<f64>> {
    if predictives.len() != y_test.len() {
        return Err(Error::DimensionMismatch {
            expected: predictives.len(),
            got: y_test.len(),
        });
    }
    if y_test.is_empty() {
        return Err(Error::domain("empty hold-out"));
    }
    rules
        .iter()
        .map(|r| {
            let total = predictives
                .iter()
                .zip(y_test)
                .map(|(p, y)| score_mixture(r, p, *y))
                .sum::<Result<f64>>()?;
            Ok(total / y_test.len() as f64)
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatrixMeta {
    pub t: usize,
    pub split: usize,
    pub seeds: Vec<u64>,
    pub config_hash: String,
}

/// Average scores: rows are focusing rules (plus optional reference rows),
/// columns evaluation rules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub method: String,
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub entries: Vec<Vec<f64>>,
    pub meta: MatrixMeta,
}

impl ScoreMatrix {
    pub fn new(
        method: &str,
        row_labels: Vec<String>,
        col_labels: Vec<String>,
        entries: Vec<Vec<f64>>,
        meta: MatrixMeta,
    ) -> Result<Self> {
        if entries.len() != row_labels.len() || entries.iter().any(|r| r.len() != col_labels.len()) {
            return Err(Error::DimensionMismatch {
                expected: row_labels.len() * col_labels.len(),
                got: entries.iter().map(|r| r.len()).sum(),
            });
        }
        if entries.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Estimation(format!("{method} score matrix has non-finite entries")));
        }
        Ok(Self {
            method: method.to_string(),
            row_labels,
            col_labels,
            entries,
            meta,
        })
    }

    pub fn get(&self, row: &str, col: &str) -> Option<f64> {
        let r = self.row_labels.iter().position(|l| l == row)?;
        let c = self.col_labels.iter().position(|l| l == col)?;
        Some(self.entries[r][c])
    }
}

/// For each column, the rank (1 = best, ties share the minimum rank) of the row
/// with the same label among the rows whose labels are column labels.
pub fn coherence_check(m: &ScoreMatrix) -> Result<Vec<usize>> {
    let focus: Vec<usize> = (0..m.row_labels.len())
        .filter(|&r| m.col_labels.contains(&m.row_labels[r]))
        .collect();
    m.col_labels
        .iter()
        .enumerate()
        .map(|(c, label)| {
            let own = m.row_labels.iter().position(|l| l == label).ok_or_else(|| {
                Error::Config(format!("{} matrix has no focusing row for column {label}", m.method))
            })?;
            let v = m.entries[own][c];
            Ok(1 + focus.iter().filter(|&&r| m.entries[r][c] > v).count())
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub title: String,
    pub matrices: Vec<ScoreMatrix>,
    /// Diagonal ranks, aligned with `matrices`.
    pub coherence: Vec<Vec<usize>>,
    pub notes: Vec<String>,
}

impl EvalReport {
    pub fn new(title: &str, matrices: Vec<ScoreMatrix>, notes: Vec<String>) -> Result<Self> {
        let coherence = matrices.iter().map(coherence_check).collect::<Result<_>>()?;
        Ok(Self {
            title: title.to_string(),
            matrices,
            coherence,
            notes,
        })
    }

    pub fn matrix(&self, method: &str) -> Option<&ScoreMatrix> {
        self.matrices.iter().find(|m| m.method == method)
    }

    pub fn ranks(&self, method: &str) -> Option<&[usize]> {
        let i = self.matrices.iter().position(|m| m.method == method)?;
        Some(&self.coherence[i])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

/// CSV text of one matrix: full-precision entries and the config hash per row.
pub fn matrix_csv(m: &ScoreMatrix) -> String {
    let mut s = String::from("focusing_rule");
    for c in &m.col_labels {
        s.push(',');
        s.push_str(c);
    }
    s.push_str(",config_hash\n");
    for (label, row) in m.row_labels.iter().zip(&m.entries) {
        s.push_str(label);
        for v in row {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{}", m.meta.config_hash);
    }
    s
}

pub fn report_markdown(report: &EvalReport) -> String {
    let mut s = format!("# {}\n", report.title);
    for (m, ranks) in report.matrices.iter().zip(&report.coherence) {
        let _ = writeln!(
            s,
            "\n## {}\n\nT = {}, hold-out from observation {}, seeds {:?}, config {}\n",
            m.method,
            m.meta.t,
            m.meta.split + 1,
            m.meta.seeds,
            m.meta.config_hash
        );
        s.push_str("| |");
        for c in &m.col_labels {
            let _ = write!(s, " {c} |");
        }
        s.push_str("\n|---|");
        s.push_str(&"---:|".repeat(m.col_labels.len()));
        s.push('\n');
        let col_max: Vec<f64> = (0..m.col_labels.len())
            .map(|c| m.entries.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        for (label, row) in m.row_labels.iter().zip(&m.entries) {
            let _ = write!(s, "| {}-{} |", m.method, label);
            for (v, max) in row.iter().zip(&col_max) {
                if v == max {
                    let _ = write!(s, " **{v:.4}** |");
                } else {
                    let _ = write!(s, " {v:.4} |");
                }
            }
            s.push('\n');
        }
        s.push_str("\nDiagonal rank per column:");
        for (c, r) in m.col_labels.iter().zip(ranks) {
            let _ = write!(s, " {c} {r};");
        }
        s.pop();
        s.push('\n');
    }
    if !report.notes.is_empty() {
        s.push_str("\n## Notes\n\n");
        for n in &report.notes {
            let _ = writeln!(s, "- {n}");
        }
    }
    s
}

/// Writes `scores_<method>.csv` per matrix and/or `report.md` into `out_dir`.
pub fn render_report(report: &EvalReport, formats: &[ReportFormat], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for f in formats {
        match f {
            ReportFormat::Csv => {
                for m in &report.matrices {
                    let path = out_dir.join(format!("scores_{}.csv", m.method.to_ascii_lowercase()));
                    std::fs::write(&path, matrix_csv(m))?;
                    written.push(path);
                }
            }
            ReportFormat::Markdown => {
                let path = out_dir.join("report.md");
                std::fs::write(&path, report_markdown(report))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::scoring::{mixture_logpdf, GaussianPredictive};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn labels(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn threshold_examples() {
        let grid: Vec<f64> = (0..1000).map(|i| -4.995 + 0.01 * i as f64).collect();
        let r = cls_thresholds(&grid, &[0.1, 0.5, 0.9]).unwrap();
        assert!((r[0].threshold + 4.0).abs() < 0.01);
        assert_eq!(r[0].kind, TailKind::Lower);
        assert!(r[1].threshold.abs() < 1e-9);
        assert_eq!(r[2].kind, TailKind::Upper);
        assert!((r[2].threshold + r[0].threshold).abs() < 1e-9);
        assert!(cls_thresholds(&[], &[0.1]).is_err());
    }

    #[test]
    fn thresholds_ignore_holdout() {
        let train = [0.3, -1.0, 2.0, 0.5, -0.2];
        let specs = RuleSpec::simulation_set();
        let a = resolve_rules(&specs, &train).unwrap();
        let b = resolve_rules(&specs, &train).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn average_row_examples() {
        let n01 = PredictiveMixture::new(vec![GaussianPredictive::new(0.0, 1.0).unwrap()]).unwrap();
        let row = average_score_row(&[n01.clone()], &[0.5], &[ScoringRule::Ls]).unwrap();
        assert_eq!(row[0], mixture_logpdf(&n01, 0.5));

        let mut r = RngStream::new(1, 0).rng();
        let y: Vec<f64> = (0..100_000).map(|_| r.sample(StandardNormal)).collect();
        let preds = vec![n01.clone(); y.len()];
        let ls: Vec<f64> = y.iter().map(|v| mixture_logpdf(&n01, *v)).collect();
        let avg = average_score_row(&preds, &y, &[ScoringRule::Ls]).unwrap()[0];
        let se = (stats::variance(&ls) / y.len() as f64).sqrt();
        assert!((avg + 1.418_938_5).abs() < 3.0 * se);
        assert!((avg - stats::mean(&ls)).abs() < 1e-12);

        let mut rev = y.clone();
        rev.reverse();
        let back = average_score_row(&preds, &rev, &[ScoringRule::Ls]).unwrap()[0];
        assert!((back - avg).abs() < 1e-12);
        assert!(average_score_row(&preds[..2], &y[..3], &[ScoringRule::Ls]).is_err());
    }

    fn matrix(entries: Vec<Vec<f64>>) -> ScoreMatrix {
        let l = labels(&["LS", "CRPS", "IS"]);
        ScoreMatrix::new("ABC", l.clone(), l, entries, MatrixMeta::default()).unwrap()
    }

    #[test]
    fn coherence_examples() {
        let m = matrix(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(coherence_check(&m).unwrap(), vec![1, 1, 1]);
        let m = matrix(vec![vec![2.0; 3]; 3]);
        assert_eq!(coherence_check(&m).unwrap(), vec![1, 1, 1]);
        // Shifting a column leaves ranks unchanged.
        let base = vec![vec![-1.0, -0.3, -2.0], vec![-0.9, -0.2, -2.1], vec![-1.2, -0.4, -1.9]];
        let mut shifted = base.clone();
        for r in shifted.iter_mut() {
            r[1] += 10.0;
        }
        assert_eq!(coherence_check(&matrix(base)).unwrap(), coherence_check(&matrix(shifted)).unwrap());
        let m = ScoreMatrix::new("ABC", labels(&["LS"]), labels(&["LS", "IS"]), vec![vec![0.0, 0.0]], MatrixMeta::default()).unwrap();
        assert!(coherence_check(&m).is_err());
    }

    #[test]
    fn coherence_on_misspecified_reference_panel() {
        // ABC panel of the misspecified simulation design plus the exact
        // predictive as a reference row, which is not ranked.
        let cols = labels(&["LS", "CLS10", "CLS20", "CLS80", "CLS90", "CRPS", "IS"]);
        let mut rows = cols.clone();
        rows.push("Exact".into());
        let entries = vec![
            vec![-1.3427, -0.3586, -0.6173, -0.4900, -0.2975, -0.5331, -4.6333],
            vec![-1.4117, -0.3572, -0.6327, -0.5122, -0.3037, -0.5616, -4.5813],
            vec![-1.3737, -0.3553, -0.6202, -0.5062, -0.3084, -0.5427, -4.7791],
            vec![-2.0917, -0.8118, -1.2925, -0.4675, -0.2822, -0.6082, -10.5000],
            vec![-2.4259, -0.8961, -1.4896, -0.4715, -0.2777, -0.6509, -12.7820],
            vec![-1.3371, -0.3629, -0.6214, -0.4881, -0.2998, -0.5309, -4.7405],
            vec![-1.4882, -0.3657, -0.6648, -0.5333, -0.3057, -0.6025, -4.2895],
            vec![-1.3343, -0.3618, -0.6199, -0.4882, -0.3003, -0.5304, -4.7357],
        ];
        let m = ScoreMatrix::new("ABC", rows, cols, entries, MatrixMeta::default()).unwrap();
        assert_eq!(coherence_check(&m).unwrap(), vec![2, 2, 2, 1, 1, 1, 1]);
    }

    #[test]
    fn rendering() {
        let l = labels(&["LS", "CRPS"]);
        let meta = MatrixMeta {
            t: 10,
            split: 5,
            seeds: vec![1],
            config_hash: "abc123".into(),
        };
        let m = ScoreMatrix::new("FBP", l.clone(), l, vec![vec![-0.81891, -0.5], vec![-0.9, -0.49]], meta).unwrap();
        let report = EvalReport::new("demo", vec![m], vec![]).unwrap();
        let md = report_markdown(&report);
        assert!(md.contains("| FBP-LS | **-0.8189** | -0.5000 |"), "{md}");
        assert!(md.contains("| FBP-CRPS | -0.9000 | **-0.4900** |"), "{md}");
        let dir = tempfile::tempdir().unwrap();
        let a = render_report(&report, &[ReportFormat::Csv, ReportFormat::Markdown], dir.path()).unwrap();
        let first = std::fs::read(&a[0]).unwrap();
        render_report(&report, &[ReportFormat::Csv], dir.path()).unwrap();
        assert_eq!(first, std::fs::read(&a[0]).unwrap());
        assert!(String::from_utf8(first).unwrap().starts_with("focusing_rule,LS,CRPS,config_hash\nLS,-0.81891,-0.5,abc123\n"));
    }
}
