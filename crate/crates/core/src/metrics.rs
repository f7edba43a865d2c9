//! Verification accuracy, group-fairness statistics and confidence curves.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::data::VerificationPair;
use crate::error::{Error, Result};

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Best accuracy over all thresholds `t`, where a pair is accepted when
/// `similarity >= t`. Returns `(accuracy fraction, threshold)`.
pub fn best_threshold(scored: &[(f64, bool)]) -> (f64, f64) {
    let mut sorted: Vec<(f64, bool)> = scored.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = sorted.len();
    let positives = sorted.iter().filter(|p| p.1).count();
    // Threshold above everything: all rejected, negatives correct.
    let mut best = (n - positives, f64::INFINITY);
    let mut correct = n - positives;
    let mut i = n;
    while i > 0 {
        let t = sorted[i - 1].0;
        while i > 0 && sorted[i - 1].0 == t {
            correct = if sorted[i - 1].1 { correct + 1 } else { correct - 1 };
            i -= 1;
        }
        if correct > best.0 {
            best = (correct, t);
        }
    }
    (best.0 as f64 / n.max(1) as f64, best.1)
}

fn accuracy_at(scored: &[(f64, bool)], t: f64) -> f64 {
    let ok = scored.iter().filter(|(s, same)| (*s >= t) == *same).count();
    ok as f64 / scored.len() as f64
}

/// Per-group verification accuracy in percent. Pairs index rows of
/// `embeddings`. With `folds > 1` the threshold is chosen on the other folds
/// and accuracy averaged over held-out folds.
pub fn verification_accuracy(
    embeddings: &[Vec<f64>],
    pairs: &[VerificationPair],
    folds: usize,
) -> Result<BTreeMap<usize, f64>> {
    const OP: &str = "verification_accuracy";
    if pairs.is_empty() {
        return Err(Error::invalid(OP, "no verification pairs"));
    }
    let mut by_group: BTreeMap<usize, Vec<(f64, bool)>> = BTreeMap::new();
    for p in pairs {
        let (Some(a), Some(b)) = (embeddings.get(p.a), embeddings.get(p.b)) else {
            return Err(Error::invalid(
                OP,
                format!("pair ({}, {}) references a missing embedding", p.a, p.b),
            ));
        };
        by_group
            .entry(p.group)
            .or_default()
            .push((cosine_similarity(a, b), p.same));
    }
    Ok(by_group
        .into_iter()
        .map(|(g, scored)| {
            let acc = if folds <= 1 || scored.len() < folds {
                best_threshold(&scored).0
            } else {
                let n = scored.len();
                let bounds: Vec<usize> = (0..=folds).map(|f| f * n / folds).collect();
                let mut total = 0.0;
                for f in 0..folds {
                    let test = &scored[bounds[f]..bounds[f + 1]];
                    let train: Vec<(f64, bool)> = scored[..bounds[f]]
                        .iter()
                        .chain(&scored[bounds[f + 1]..])
                        .copied()
                        .collect();
                    let (_, t) = best_threshold(&train);
                    total += accuracy_at(test, t);
                }
                total / folds as f64
            };
            (g, 100.0 * acc)
        })
        .collect())
}

/// Sample standard deviation (divisor `n - 1`) of group accuracies.
pub fn fairness_std(accuracies: &[f64]) -> Result<f64> {
    if accuracies.len() < 2 {
        return Err(Error::invalid("fairness_std", "need at least 2 groups"));
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let ss: f64 = accuracies.iter().map(|a| (a - mean).powi(2)).sum();
    Ok((ss / (n - 1.0)).sqrt())
}

/// Skewed error ratio: highest group error rate over the lowest.
pub fn fairness_ser(accuracies: &[f64]) -> Result<f64> {
    const OP: &str = "fairness_ser";
    if accuracies.len() < 2 {
        return Err(Error::invalid(OP, "need at least 2 groups"));
    }
    if accuracies.iter().any(|&a| !(a < 100.0)) {
        return Err(Error::invalid(
            OP,
            "a group has 100% accuracy, so its error rate is zero",
        ));
    }
    let errors = accuracies.iter().map(|a| 100.0 - a);
    let max = errors.clone().fold(f64::MIN, f64::max);
    let min = errors.fold(f64::MAX, f64::min);
    Ok(max / min)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FairnessReport {
    pub groups: Vec<String>,
    /// Percent, one per group.
    pub accuracies: Vec<f64>,
    pub average: f64,
    /// Percentage points.
    pub std: f64,
    /// `None` when some group makes no errors.
    pub ser: Option<f64>,
}

impl FairnessReport {
    pub fn from_accuracies(groups: Vec<String>, accuracies: Vec<f64>) -> Result<Self> {
        if groups.len() != accuracies.len() {
            return Err(Error::invalid(
                "fairness_report",
                format!("{} group names for {} accuracies", groups.len(), accuracies.len()),
            ));
        }
        let std = fairness_std(&accuracies)?;
        let ser = fairness_ser(&accuracies).ok();
        let average = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        Ok(Self {
            groups,
            accuracies,
            average,
            std,
            ser,
        })
    }

    fn ser_text(&self) -> String {
        self.ser.map_or_else(|| "undefined".to_string(), |s| s.to_string())
    }

    /// Header row of group names then `avg,std,ser`; one value row.
    pub fn to_csv(&self) -> String {
        let mut head: Vec<String> = self.groups.clone();
        head.extend(["avg", "std", "ser"].map(String::from));
        let mut row: Vec<String> = self.accuracies.iter().map(f64::to_string).collect();
        row.extend([self.average.to_string(), self.std.to_string(), self.ser_text()]);
        format!("{}\n{}\n", head.join(","), row.join(","))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: &str| Error::invalid("fairness_report", m.to_string());
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head: Vec<&str> = lines.next().ok_or_else(|| bad("empty report"))?.split(',').collect();
        let row: Vec<&str> = lines.next().ok_or_else(|| bad("missing value row"))?.split(',').collect();
        if head.len() != row.len() || head.len() < 5 || head[head.len() - 3..] != ["avg", "std", "ser"] {
            return Err(bad("malformed report header"));
        }
        let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(&format!("not a number: {s}")));
        let g = head.len() - 3;
        let accuracies = row[..g].iter().map(|s| num(s)).collect::<Result<Vec<_>>>()?;
        let ser = match row[g + 2].trim() {
            "undefined" => None,
            s => Some(num(s)?),
        };
        Ok(Self {
            groups: head[..g].iter().map(|s| s.to_string()).collect(),
            accuracies,
            average: num(row[g])?,
            std: num(row[g + 1])?,
            ser,
        })
    }

    /// Fixed-width table: one column per group, then Avg, STD, SER.
    pub fn to_table(&self) -> String {
        let mut cols: Vec<(String, String)> = self
            .groups
            .iter()
            .zip(&self.accuracies)
            .map(|(g, a)| (g.clone(), format!("{a:.2}")))
            .collect();
        cols.push(("Avg".into(), format!("{:.2}", self.average)));
        cols.push(("STD".into(), format!("{:.2}", self.std)));
        cols.push((
            "SER".into(),
            self.ser.map_or_else(|| "-".into(), |s| format!("{s:.2}")),
        ));
        let mut head = String::new();
        let mut row = String::new();
        for (h, v) in &cols {
            let w = h.len().max(v.len()) + 2;
            let _ = write!(head, "{h:>w$}");
            let _ = write!(row, "{v:>w$}");
        }
        format!("{head}\n{row}\n")
    }
}

/// Per-epoch, per-group mean confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceCurve {
    pub groups: Vec<usize>,
    /// `means[epoch][k]` for `groups[k]`; NaN when a group had no samples.
    pub means: Vec<Vec<f64>>,
    /// Largest minus smallest group mean per epoch.
    pub gap: Vec<f64>,
}

/// Builds the curve from `(group, p_max)` observations collected per epoch.
pub fn confidence_curve(epochs: &[Vec<(usize, f64)>]) -> ConfidenceCurve {
    let groups: Vec<usize> = epochs
        .iter()
        .flatten()
        .map(|&(g, _)| g)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut means = Vec::with_capacity(epochs.len());
    let mut gap = Vec::with_capacity(epochs.len());
    for obs in epochs {
        let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for &(g, p) in obs {
            let e = acc.entry(g).or_default();
            e.0 += p;
            e.1 += 1;
        }
        let row: Vec<f64> = groups
            .iter()
            .map(|g| acc.get(g).map_or(f64::NAN, |(s, n)| s / *n as f64))
            .collect();
        let present = row.iter().copied().filter(|v| !v.is_nan());
        let hi = present.clone().fold(f64::NEG_INFINITY, f64::max);
        let lo = present.fold(f64::INFINITY, f64::min);
        gap.push(if hi >= lo { hi - lo } else { 0.0 });
        means.push(row);
    }
    ConfidenceCurve { groups, means, gap }
}

impl ConfidenceCurve {
    pub fn to_csv(&self, names: impl Fn(usize) -> String) -> String {
        let mut out = String::from("epoch");
        for &g in &self.groups {
            let _ = write!(out, ",{}", names(g));
        }
        out.push_str(",gap\n");
        for (e, (row, gap)) in self.means.iter().zip(&self.gap).enumerate() {
            let _ = write!(out, "{e}");
            for v in row {
                let _ = write!(out, ",{v}");
            }
            let _ = writeln!(out, ",{gap}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GABN: [f64; 4] = [95.78, 95.21, 94.51, 94.71];
    const BASELINE: [f64; 4] = [96.18, 94.67, 93.72, 93.98];

    #[test]
    fn published_fairness_numbers() {
        let std = fairness_std(&GABN).unwrap();
        assert!((std - 0.567_355).abs() < 1e-6, "{std}");
        assert_eq!((std * 100.0).floor() / 100.0, 0.56);
        assert!((fairness_std(&BASELINE).unwrap() - 1.11).abs() <= 0.02);
        assert!((fairness_ser(&BASELINE).unwrap() - 1.65).abs() <= 0.01);
        assert!((fairness_ser(&GABN).unwrap() - 1.30).abs() <= 0.01);
        assert_eq!(fairness_std(&[90.0; 3]).unwrap(), 0.0);
        assert_eq!(fairness_ser(&[90.0; 3]).unwrap(), 1.0);
        assert!(fairness_std(&[90.0]).is_err());
        assert!(fairness_ser(&[100.0, 90.0]).is_err());
    }

    #[test]
    fn similarity_examples() {
        assert!((cosine_similarity(&[0.6, 0.8], &[0.6, 0.8]) - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]), 0.0);
    }

    #[test]
    fn threshold_sweep() {
        let scored = [(0.9, true), (0.8, true), (0.3, false), (0.1, false)];
        assert_eq!(best_threshold(&scored), (1.0, 0.8));
        let all_neg = [(0.5, false), (0.2, false)];
        assert_eq!(best_threshold(&all_neg).0, 1.0);
        let tied = [(0.5, true), (0.5, false)];
        assert_eq!(best_threshold(&tied).0, 0.5);
    }

    #[test]
    fn report_round_trips() {
        let names = ["a", "b", "c", "d"].map(String::from).to_vec();
        let r = FairnessReport::from_accuracies(names.clone(), BASELINE.to_vec()).unwrap();
        assert_eq!(FairnessReport::from_csv(&r.to_csv()).unwrap(), r);
        assert!(r.to_table().contains("SER"));
        let perfect = FairnessReport::from_accuracies(names, vec![100.0, 90.0, 95.0, 99.0]).unwrap();
        assert_eq!(perfect.ser, None);
        assert_eq!(FairnessReport::from_csv(&perfect.to_csv()).unwrap(), perfect);
    }

    #[test]
    fn curve_examples() {
        let single = confidence_curve(&[vec![(0, 0.3), (0, 0.9)], vec![(0, 0.5)]]);
        assert_eq!(single.gap, vec![0.0, 0.0]);
        let flat = confidence_curve(&vec![vec![(0, 0.8), (1, 0.8)]; 3]);
        assert!(flat.means.iter().flatten().all(|&v| v == 0.8));
        let c = confidence_curve(&[vec![(2, 0.2), (5, 0.6), (2, 0.4), (5, 1.0)]]);
        assert_eq!(c.groups, vec![2, 5]);
        assert!((c.means[0][0] - 0.3).abs() < 1e-15 && (c.means[0][1] - 0.8).abs() < 1e-15);
        assert!((c.gap[0] - 0.5).abs() < 1e-15);
    }
}
