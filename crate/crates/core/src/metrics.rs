//! Evaluation metrics, win-matrix aggregation and the reliability analyses
//! for categorization (Jaccard) and discovery (mutual information).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::categorizer::{oracle_categorize, Category, CategoryAssignment};
use crate::data::RegionTable;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} values, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("correlation undefined: {0} is constant")]
    ConstantInput(&'static str),
    #[error("cell {cell} has no score for model {model:?}")]
    MissingModel { cell: String, model: String },
    #[error("bins must be >= 2, got {0}")]
    InvalidBins(usize),
    #[error("baseline mutual information is zero")]
    ZeroBaseline,
    #[error("{0}")]
    Invalid(String),
}

/// Sample Pearson correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricError::TooShort {
            needed: 2,
            got: x.len(),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || !sxx.is_finite() {
        return Err(MetricError::ConstantInput("x"));
    }
    if syy == 0.0 || !syy.is_finite() {
        return Err(MetricError::ConstantInput("y"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::TooShort { needed: 1, got: 0 });
    }
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sse / pred.len() as f64).sqrt())
}

/// Mean and standard error (sample std / sqrt(n)); the error is 0 for n = 1.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub pearson: f64,
    pub pearson_se: f64,
    pub rmse: f64,
    pub rmse_se: f64,
    pub runs: usize,
}

impl ModelScore {
    pub fn from_runs(pearsons: &[f64], rmses: &[f64]) -> Self {
        let (pearson, pearson_se) = mean_and_se(pearsons);
        let (rmse, rmse_se) = mean_and_se(rmses);
        ModelScore {
            pearson,
            pearson_se,
            rmse,
            rmse_se,
            runs: pearsons.len(),
        }
    }
}

/// One experimental condition with per-model scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub setting: String,
    pub indicator: String,
    pub dataset: String,
    pub scores: BTreeMap<String, ModelScore>,
}

impl EvalCell {
    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.dataset, self.indicator, self.setting)
    }
}

pub fn eval_cells_csv(cells: &[EvalCell]) -> String {
    let mut out = String::from("dataset,indicator,setting,model,pearson,pearson_se,rmse,rmse_se,runs\n");
    for c in cells {
        for (model, s) in &c.scores {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                c.dataset, c.indicator, c.setting, model, s.pearson, s.pearson_se, s.rmse, s.rmse_se, s.runs
            );
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WinMetric {
    Pearson,
    Rmse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WinMatrix {
    pub models: Vec<String>,
    /// `rates[a][b]`: fraction of cells where model `a` beats model `b`.
    pub rates: Vec<Vec<Option<f64>>>,
    pub metric: WinMetric,
    pub cell_count: usize,
}

/// Pairwise winning rates; strict wins count 1, ties 0.5 to each side.
pub fn win_matrix(cells: &[EvalCell], models: &[String], metric: WinMetric) -> Result<WinMatrix, MetricError> {
    let m = models.len();
    let mut wins = vec![vec![0.0f64; m]; m];
    for cell in cells {
        let mut vals = Vec::with_capacity(m);
        for model in models {
            let s = cell.scores.get(model).ok_or_else(|| MetricError::MissingModel {
                cell: cell.label(),
                model: model.clone(),
            })?;
            vals.push(match metric {
                WinMetric::Pearson => s.pearson,
                WinMetric::Rmse => -s.rmse,
            });
        }
        for a in 0..m {
            for b in 0..m {
                if a == b {
                    continue;
                }
                if vals[a] > vals[b] {
                    wins[a][b] += 1.0;
                } else if vals[a] == vals[b] {
                    wins[a][b] += 0.5;
                }
            }
        }
    }
    let n = cells.len();
    let rates = (0..m)
        .map(|a| {
            (0..m)
                .map(|b| {
                    if a == b || n == 0 {
                        None
                    } else {
                        Some(wins[a][b] / n as f64)
                    }
                })
                .collect()
        })
        .collect();
    Ok(WinMatrix {
        models: models.to_vec(),
        rates,
        metric,
        cell_count: n,
    })
}

impl WinMatrix {
    pub fn rate(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.models.iter().position(|m| m == a)?;
        let j = self.models.iter().position(|m| m == b)?;
        self.rates[i][j]
    }

    /// Row model vs column model, diagonal left blank.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model");
        for m in &self.models {
            out.push(',');
            out.push_str(m);
        }
        out.push('\n');
        for (i, row) in self.rates.iter().enumerate() {
            out.push_str(&self.models[i]);
            for r in row {
                out.push(',');
                if let Some(v) = r {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }

    /// Heatmap: green for high winning rates, red for low.
    pub fn to_svg(&self) -> String {
        let cell = 60usize;
        let margin = 140usize;
        let n = self.models.len();
        let size = margin + cell * n + 10;
        let mut s = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" font-family=\"sans-serif\" font-size=\"11\">\n"
        );
        for (i, m) in self.models.iter().enumerate() {
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>",
                margin - 6,
                margin + i * cell + cell / 2 + 4,
                xml_escape(m)
            );
            let _ = writeln!(
                s,
                "<text x=\"{}\" y=\"{}\" text-anchor=\"start\" transform=\"rotate(-45 {} {})\">{}</text>",
                margin + i * cell + cell / 2,
                margin - 6,
                margin + i * cell + cell / 2,
                margin - 6,
                xml_escape(m)
            );
        }
        for (i, row) in self.rates.iter().enumerate() {
            for (j, r) in row.iter().enumerate() {
                let (x, y) = (margin + j * cell, margin + i * cell);
                let fill = r.map_or_else(|| "#ffffff".to_owned(), heat_color);
                let _ = writeln!(
                    s,
                    "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"{fill}\" stroke=\"#999\"/>"
                );
                if let Some(v) = r {
                    let _ = writeln!(
                        s,
                        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{:.2}</text>",
                        x + cell / 2,
                        y + cell / 2 + 4,
                        v
                    );
                }
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

fn heat_color(rate: f64) -> String {
    let t = rate.clamp(0.0, 1.0);
    let (r, g) = if t < 0.5 {
        (215.0, 48.0 + (t / 0.5) * (200.0 - 48.0))
    } else {
        (
            215.0 - ((t - 0.5) / 0.5) * (215.0 - 26.0),
            200.0 - ((t - 0.5) / 0.5) * (200.0 - 150.0),
        )
    };
    format!("#{:02x}{:02x}{:02x}", r as u8, g as u8, 60u8)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// |A ∩ B| / |A ∪ B|, with two empty sets counting as identical.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

pub const DEFAULT_TAUS: [f64; 4] = [0.05, 0.10, 0.15, 0.20];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JaccardScores {
    pub positive: f64,
    pub negative: f64,
    pub mixed: f64,
}

fn category_set(assignments: &[CategoryAssignment], cat: Category, keep: &BTreeSet<&str>) -> BTreeSet<String> {
    assignments
        .iter()
        .filter(|a| a.category == cat && keep.contains(a.module.as_str()))
        .map(|a| a.module.clone())
        .collect()
}

/// Agreement between LLM categories and Pearson-threshold categories,
/// averaged over the thresholds.
pub fn jaccard_reliability(
    llm: &[CategoryAssignment],
    table: &RegionTable,
    taus: &[f64],
) -> Result<JaccardScores, MetricError> {
    if taus.is_empty() {
        return Err(MetricError::Invalid("no thresholds given".into()));
    }
    let keep: BTreeSet<&str> = table.feature_names().iter().map(String::as_str).collect();
    let cats = [Category::Positive, Category::Negative, Category::Mixed];
    let llm_sets: Vec<_> = cats.iter().map(|&c| category_set(llm, c, &keep)).collect();
    let mut sums = [0.0; 3];
    for &tau in taus {
        let oracle = oracle_categorize(table, tau).map_err(|e| MetricError::Invalid(e.to_string()))?;
        for (k, &c) in cats.iter().enumerate() {
            sums[k] += jaccard(&llm_sets[k], &category_set(&oracle, c, &keep));
        }
    }
    let n = taus.len() as f64;
    Ok(JaccardScores {
        positive: sums[0] / n,
        negative: sums[1] / n,
        mixed: sums[2] / n,
    })
}

/// Datasets side by side, each with its P / N / M agreement scores.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityTable {
    pub rows: Vec<(String, JaccardScores)>,
}

impl ReliabilityTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,P,N,M\n");
        for (name, s) in &self.rows {
            let _ = writeln!(out, "{name},{:.3},{:.3},{:.3}", s.positive, s.negative, s.mixed);
        }
        out
    }

    /// Datasets across the top, P/N/M under each, one row of scores.
    pub fn to_markdown(&self) -> String {
        let mut head = String::from("|");
        let mut sub = String::from("|");
        let mut rule = String::from("|");
        let mut vals = String::from("|");
        for (name, s) in &self.rows {
            let _ = write!(head, " {name} | | |");
            sub.push_str(" P | N | M |");
            rule.push_str("---|---|---|");
            let _ = write!(vals, " {:.3} | {:.3} | {:.3} |", s.positive, s.negative, s.mixed);
        }
        format!("{head}\n{rule}\n{sub}\n{vals}\n")
    }
}

/// Equal-frequency bin index per value; tied values share a bin.
pub fn quantile_bins(x: &[f64], bins: usize) -> Vec<usize> {
    let n = x.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(a.cmp(&b)));
    let mut out = vec![0usize; n];
    let mut rank = 0;
    while rank < n {
        let start = rank;
        let v = x[order[start]];
        while rank < n && x[order[rank]] == v {
            rank += 1;
        }
        let bin = (start * bins / n).min(bins - 1);
        for &i in &order[start..rank] {
            out[i] = bin;
        }
    }
    out
}

/// Plug-in mutual information (bits) over quantile bins of each variable.
pub fn mutual_information(x: &[f64], y: &[f64], bins: usize) -> Result<f64, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    if bins < 2 {
        return Err(MetricError::InvalidBins(bins));
    }
    if x.len() < bins {
        return Err(MetricError::TooShort {
            needed: bins,
            got: x.len(),
        });
    }
    let n = x.len() as f64;
    let bx = quantile_bins(x, bins);
    let by = quantile_bins(y, bins);
    let mut joint = vec![0usize; bins * bins];
    let mut mx = vec![0usize; bins];
    let mut my = vec![0usize; bins];
    for (&i, &j) in bx.iter().zip(&by) {
        joint[i * bins + j] += 1;
        mx[i] += 1;
        my[j] += 1;
    }
    let mut terms = Vec::new();
    for i in 0..bins {
        for j in 0..bins {
            let c = joint[i * bins + j];
            if c == 0 {
                continue;
            }
            let pij = c as f64 / n;
            let pi = mx[i] as f64 / n;
            let pj = my[j] as f64 / n;
            terms.push(pij * (pij / (pi * pj)).log2());
        }
    }
    // Summing in sorted order makes MI(x, y) and MI(y, x) bit-identical.
    terms.sort_by(f64::total_cmp);
    let mi: f64 = terms.iter().sum();
    Ok(mi.max(0.0))
}

pub fn default_bins(n: usize) -> usize {
    ((n as f64).sqrt().floor() as usize).clamp(2, 4)
}

/// Percent differences of each discovered feature's MI against the mean MI
/// of the original features, summarized as (mean, standard error).
pub fn mi_difference_from_values(discovered: &[f64], baseline: f64) -> Result<(f64, f64), MetricError> {
    if discovered.is_empty() {
        return Err(MetricError::TooShort { needed: 1, got: 0 });
    }
    if baseline == 0.0 {
        return Err(MetricError::ZeroBaseline);
    }
    let diffs: Vec<f64> = discovered.iter().map(|d| 100.0 * (d - baseline) / baseline).collect();
    Ok(mean_and_se(&diffs))
}

pub fn mi_difference_mean(
    discovered: &[Vec<f64>],
    original: &[Vec<f64>],
    labels: &[f64],
    bins: usize,
) -> Result<(f64, f64), MetricError> {
    if original.is_empty() {
        return Err(MetricError::TooShort { needed: 1, got: 0 });
    }
    let base: Vec<f64> = original
        .iter()
        .map(|c| mutual_information(c, labels, bins))
        .collect::<Result<_, _>>()?;
    let baseline = base.iter().sum::<f64>() / base.len() as f64;
    let disc: Vec<f64> = discovered
        .iter()
        .map(|c| mutual_information(c, labels, bins))
        .collect::<Result<_, _>>()?;
    mi_difference_from_values(&disc, baseline)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(p: f64, r: f64) -> ModelScore {
        ModelScore {
            pearson: p,
            pearson_se: 0.0,
            rmse: r,
            rmse_se: 0.0,
            runs: 3,
        }
    }

    fn cell(i: usize, a: (f64, f64), b: (f64, f64)) -> EvalCell {
        EvalCell {
            setting: "3-shot".into(),
            indicator: "POP".into(),
            dataset: format!("d{i}"),
            scores: BTreeMap::from([("A".into(), score(a.0, a.1)), ("B".into(), score(b.0, b.1))]),
        }
    }

    #[test]
    fn pearson_examples() {
        assert_eq!(pearson(&[1., 2., 3.], &[2., 4., 6.]).unwrap(), 1.0);
        assert_eq!(pearson(&[1., 2., 3.], &[3., 2., 1.]).unwrap(), -1.0);
        assert!((pearson(&[1., 2., 3., 4.], &[1., 3., 2., 4.]).unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(pearson(&[1., 1.], &[1., 2.]), Err(MetricError::ConstantInput("x")));
    }

    #[test]
    fn rmse_examples() {
        assert_eq!(rmse(&[1., 2.], &[1., 2.]).unwrap(), 0.0);
        assert!((rmse(&[0., 0.], &[3., 4.]).unwrap() - 12.5f64.sqrt()).abs() < 1e-15);
        assert!((rmse(&[1.5, 2.5, 3.5], &[1., 2., 3.]).unwrap() - 0.5).abs() < 1e-15);
        assert!(matches!(rmse(&[1.], &[1., 2.]), Err(MetricError::LengthMismatch(1, 2))));
    }

    #[test]
    fn win_matrix_examples() {
        let dominant: Vec<_> = (0..16).map(|i| cell(i, (0.9, 1.0), (0.1, 2.0))).collect();
        let models = vec!["A".to_string(), "B".to_string()];
        let w = win_matrix(&dominant, &models, WinMetric::Pearson).unwrap();
        assert_eq!(w.rate("A", "B"), Some(1.0));
        assert_eq!(w.rate("B", "A"), Some(0.0));
        assert_eq!(w.rate("A", "A"), None);

        let tied: Vec<_> = (0..4).map(|i| cell(i, (0.5, 1.0), (0.5, 1.0))).collect();
        let w = win_matrix(&tied, &models, WinMetric::Rmse).unwrap();
        assert_eq!(w.rate("A", "B"), Some(0.5));

        let mut three_of_four: Vec<_> = (0..3).map(|i| cell(i, (0.5, 1.0), (0.5, 2.0))).collect();
        three_of_four.push(cell(3, (0.5, 3.0), (0.5, 2.0)));
        let w = win_matrix(&three_of_four, &models, WinMetric::Rmse).unwrap();
        assert_eq!(w.rate("A", "B"), Some(0.75));
        assert!(w.to_csv().starts_with("model,A,B\nA,,0.75\n"));
        assert!(w.to_svg().contains("<svg"));
    }

    #[test]
    fn win_matrix_missing_model_names_cell() {
        let c = cell(7, (0.5, 1.0), (0.5, 1.0));
        let err = win_matrix(&[c], &["A".into(), "Z".into()], WinMetric::Pearson).unwrap_err();
        assert_eq!(
            err,
            MetricError::MissingModel {
                cell: "d7/POP/3-shot".into(),
                model: "Z".into()
            }
        );
    }

    #[test]
    fn jaccard_set_arithmetic() {
        let a: BTreeSet<_> = ["a", "b"].into();
        let b: BTreeSet<_> = ["b", "c"].into();
        assert!((jaccard(&a, &b) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&a, &a), 1.0);
        let e: BTreeSet<&str> = BTreeSet::new();
        assert_eq!(jaccard(&e, &e), 1.0);
    }

    #[test]
    fn mi_identity_is_two_bits() {
        let x: Vec<f64> = (0..40).map(|i| (i as f64) * 0.37 - 3.0).collect();
        assert_eq!(mutual_information(&x, &x, 4).unwrap(), 2.0);
        assert_eq!(mutual_information(&[1.0; 8], &x[..8], 4).unwrap(), 0.0);
        assert!(matches!(
            mutual_information(&x, &x, 1),
            Err(MetricError::InvalidBins(1))
        ));
    }

    #[test]
    fn mi_difference_examples() {
        assert_eq!(mi_difference_from_values(&[0.7], 0.7).unwrap(), (0.0, 0.0));
        // diffs are +100% and -100%; sample std is 100*sqrt(2), over sqrt(2) -> 100.
        let (m, se) = mi_difference_from_values(&[1.4, 0.0], 0.7).unwrap();
        assert!(m.abs() < 1e-12);
        assert!((se - 100.0).abs() < 1e-9);
        assert_eq!(mi_difference_from_values(&[1.0], 0.0), Err(MetricError::ZeroBaseline));
    }

    #[test]
    fn reliability_markdown_layout() {
        let t = ReliabilityTable {
            rows: vec![(
                "KOR".into(),
                JaccardScores {
                    positive: 0.819,
                    negative: 0.602,
                    mixed: 0.697,
                },
            )],
        };
        let md = t.to_markdown();
        assert!(md.contains("| KOR |"));
        assert!(md.contains("| 0.819 | 0.602 | 0.697 |"));
        assert_eq!(t.to_csv(), "dataset,P,N,M\nKOR,0.819,0.602,0.697\n");
    }
}
