//! Gaussian one-class detector over uncertainty scores, ROC/AUROC
//! evaluation, and the word-accuracy metric.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One-class model: Gaussian fit (sample mean, unbiased standard
/// deviation) on benign scores of a single measure.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DetectorModel {
    pub measure: String,
    pub mean: f64,
    pub std: f64,
    pub train_size: usize,
}

/// Fit on benign scores only. At least two distinct values are required;
/// a degenerate sample has no scale.
pub fn fit_detector(benign_scores: &[f64], measure: &str) -> Result<DetectorModel> {
    let n = benign_scores.len();
    if n < 2 {
        return Err(Error::TooFewSamples { got: n, min: 2 });
    }
    let mean = benign_scores.iter().sum::<f64>() / n as f64;
    let var = benign_scores.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return Err(Error::ZeroVariance { n, value: benign_scores[0] });
    }
    Ok(DetectorModel { measure: measure.to_string(), mean, std: var.sqrt(), train_size: n })
}

/// Absolute z-score: larger means less probable under the fitted Gaussian.
pub fn anomaly_score(detector: &DetectorModel, value: f64) -> f64 {
    (value - detector.mean).abs() / detector.std
}

/// ROC curve (FPR, TPR) points from (0,0) to (1,1) plus the trapezoidal
/// AUROC, with adversarial as the positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocResult {
    /// Score threshold per point; the (0,0) point carries +infinity.
    pub thresholds: Vec<f64>,
    pub points: Vec<(f64, f64)>,
    pub auroc: f64,
}

/// Threshold sweep over anomaly scores ("flag as attack when score >= t").
/// Tied scores move together, producing the diagonal segments that make
/// the trapezoidal area equal the pairwise ranking probability
/// `P(adv > benign) + P(adv == benign)/2`.
pub fn roc_auroc(benign_scores: &[f64], adversarial_scores: &[f64]) -> Result<RocResult> {
    if benign_scores.is_empty() || adversarial_scores.is_empty() {
        return Err(Error::Empty { what: "score set".to_string() });
    }
    let neg = benign_scores.len() as f64;
    let pos = adversarial_scores.len() as f64;

    let mut labeled: Vec<(f64, bool)> = benign_scores
        .iter()
        .map(|&s| (s, false))
        .chain(adversarial_scores.iter().map(|&s| (s, true)))
        .collect();
    for (s, _) in &labeled {
        if !s.is_finite() {
            return Err(Error::NonFinite { context: "anomaly score".to_string() });
        }
    }
    labeled.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());

    let mut thresholds = vec![f64::INFINITY];
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < labeled.len() {
        let score = labeled[i].0;
        while i < labeled.len() && labeled[i].0 == score {
            if labeled[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        thresholds.push(score);
        points.push((fp as f64 / neg, tp as f64 / pos));
    }

    let mut auroc = 0.0;
    for w in points.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        auroc += (x1 - x0) * (y0 + y1) / 2.0;
    }
    Ok(RocResult { thresholds, points, auroc })
}

/// Substitution / deletion / insertion counts of the minimal edit distance
/// between reference and hypothesis word sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub reference_words: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    /// `(N - S - D - I) / N`; negative when insertions outnumber the
    /// reference.
    pub fn accuracy(&self) -> f64 {
        let n = self.reference_words as f64;
        (n - (self.substitutions + self.deletions + self.insertions) as f64) / n
    }
}

/// Unit-cost minimal edit distance with a fixed tie order (match or
/// substitution, then deletion, then insertion) so the counts are
/// deterministic.
pub fn edit_counts<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<EditCounts> {
    let n = reference.len();
    let m = hypothesis.len();
    if n == 0 {
        return Err(Error::Empty { what: "reference transcript".to_string() });
    }

    let mut dp = vec![vec![0u32; m + 1]; n + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = i as u32;
    }
    for j in 0..=m {
        dp[0][j] = j as u32;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[i - 1][j - 1] + u32::from(reference[i - 1] != hypothesis[j - 1]);
            let del = dp[i - 1][j] + 1;
            let ins = dp[i][j - 1] + 1;
            dp[i][j] = sub.min(del).min(ins);
        }
    }

    let (mut i, mut j) = (n, m);
    let (mut s, mut d, mut ins) = (0usize, 0usize, 0usize);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let cost = u32::from(reference[i - 1] != hypothesis[j - 1]);
            if dp[i][j] == dp[i - 1][j - 1] + cost {
                s += cost as usize;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[i][j] == dp[i - 1][j] + 1 {
            d += 1;
            i -= 1;
        } else {
            ins += 1;
            j -= 1;
        }
    }
    Ok(EditCounts { reference_words: n, substitutions: s, deletions: d, insertions: ins })
}

/// Word accuracy `(N - S - D - I) / N` of a hypothesis against a
/// reference.
pub fn word_accuracy<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64> {
    Ok(edit_counts(reference, hypothesis)?.accuracy())
}

/// Held-out detector-fitting ids must not appear in the evaluation sets.
pub fn check_disjoint_ids<'a>(
    heldout: impl IntoIterator<Item = &'a str>,
    evaluation: impl IntoIterator<Item = &'a str>,
) -> Result<()> {
    let held: HashSet<&str> = heldout.into_iter().collect();
    for id in evaluation {
        if held.contains(id) {
            return Err(Error::OverlappingIds { id: id.to_string() });
        }
    }
    Ok(())
}

/// Equal-width histogram over `[lo, hi]`; returns (left-edge, count) rows.
/// Counts always sum to the input size (out-of-range values clamp to the
/// edge bins).
pub fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<(f64, usize)> {
    assert!(bins > 0 && hi > lo);
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let idx = (((v - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
        counts[idx] += 1;
    }
    counts.into_iter().enumerate().map(|(i, c)| (lo + i as f64 * width, c)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    #[test]
    fn detector_fit_examples() {
        let d = fit_detector(&[1.0, 2.0, 3.0], "entropy").unwrap();
        assert!((d.mean - 2.0).abs() < 1e-12);
        assert!((d.std - 1.0).abs() < 1e-12);

        assert!(matches!(fit_detector(&[5.0, 5.0], "entropy"), Err(Error::ZeroVariance { .. })));
        assert!(matches!(fit_detector(&[5.0], "entropy"), Err(Error::TooFewSamples { .. })));

        // Permutation invariance.
        let a = fit_detector(&[3.0, 1.0, 2.0], "entropy").unwrap();
        assert_eq!(a.mean, d.mean);
        assert_eq!(a.std, d.std);
    }

    #[test]
    fn anomaly_score_is_symmetric_z_score() {
        let d = fit_detector(&[1.0, 2.0, 3.0], "entropy").unwrap();
        assert_eq!(anomaly_score(&d, 2.0), 0.0);
        assert_eq!(anomaly_score(&d, 4.0), 2.0);
        let diff = anomaly_score(&d, 2.0 + 0.7) - anomaly_score(&d, 2.0 - 0.7);
        assert!(diff.abs() < 1e-12);
    }

    #[test]
    fn roc_examples() {
        let r = roc_auroc(&[0.0, 1.0], &[2.0, 3.0]).unwrap();
        assert!((r.auroc - 1.0).abs() < 1e-12);

        let r = roc_auroc(&[0.0, 1.0, 2.0], &[0.0, 1.0, 2.0]).unwrap();
        assert!((r.auroc - 0.5).abs() < 1e-12);

        let r = roc_auroc(&[0.0, 2.0], &[1.0, 3.0]).unwrap();
        assert!((r.auroc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn roc_endpoints_and_monotonicity() {
        let mut rng = seed::rng(3);
        let benign: Vec<f64> = (0..40).map(|_| rng.gen_range(0.0..2.0)).collect();
        let adv: Vec<f64> = (0..25).map(|_| rng.gen_range(1.0..3.0)).collect();
        let r = roc_auroc(&benign, &adv).unwrap();
        assert_eq!(r.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(r.points.last(), Some(&(1.0, 1.0)));
        for w in r.points.windows(2) {
            assert!(w[1].0 >= w[0].0);
            assert!(w[1].1 >= w[0].1);
        }
        assert_eq!(r.thresholds.len(), r.points.len());
    }

    /// Brute-force pairwise ranking probability, the independent AUROC
    /// oracle.
    fn pairwise_auroc(benign: &[f64], adv: &[f64]) -> f64 {
        let mut total = 0.0;
        for &a in adv {
            for &b in benign {
                total += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        total / (benign.len() * adv.len()) as f64
    }

    #[test]
    fn auroc_equals_pairwise_ranking_probability() {
        let mut rng = seed::rng(4);
        for case in 0..300 {
            let nb = rng.gen_range(1..40);
            let na = rng.gen_range(1..40);
            // Quantized scores force plenty of ties.
            let benign: Vec<f64> = (0..nb).map(|_| rng.gen_range(0..8) as f64 * 0.25).collect();
            let adv: Vec<f64> = (0..na).map(|_| rng.gen_range(2..10) as f64 * 0.25).collect();
            let r = roc_auroc(&benign, &adv).unwrap();
            let oracle = pairwise_auroc(&benign, &adv);
            assert!(
                (r.auroc - oracle).abs() < 1e-9,
                "case {case}: curve {} vs pairwise {oracle}",
                r.auroc
            );
        }
    }

    #[test]
    fn auroc_invariant_under_monotone_transform() {
        let mut rng = seed::rng(5);
        let benign: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..2.0)).collect();
        let adv: Vec<f64> = (0..30).map(|_| rng.gen_range(0.5..2.5)).collect();
        let r1 = roc_auroc(&benign, &adv).unwrap().auroc;
        let f = |v: f64| (3.0 * v).exp() + 1.0;
        let r2 = roc_auroc(
            &benign.iter().map(|&v| f(v)).collect::<Vec<_>>(),
            &adv.iter().map(|&v| f(v)).collect::<Vec<_>>(),
        )
        .unwrap()
        .auroc;
        assert!((r1 - r2).abs() < 1e-12);
    }

    #[test]
    fn word_accuracy_examples() {
        let r = |s: &str| s.split_whitespace().map(|w| w.to_string()).collect::<Vec<_>>();
        assert_eq!(word_accuracy(&r("1 2 3"), &r("1 2 3")).unwrap(), 1.0);
        let acc = word_accuracy(&r("1 2 3"), &r("1 5 3")).unwrap();
        assert!((acc - 2.0 / 3.0).abs() < 1e-12);
        // Insertions can push accuracy below zero.
        let acc = word_accuracy(&r("1 2 3"), &r("1 2 3 4 5 6 7")).unwrap();
        assert!((acc - (-1.0 / 3.0)).abs() < 1e-12);
        let c = edit_counts(&r("1 2 3"), &r("1 2 3 4 5 6 7")).unwrap();
        assert_eq!((c.substitutions, c.deletions, c.insertions), (0, 0, 4));

        assert!(word_accuracy::<String>(&[], &r("1")).is_err());
        // Empty hypothesis: all deletions, accuracy 0.
        assert_eq!(word_accuracy(&r("1 2"), &r("")).unwrap(), 0.0);
    }

    #[test]
    fn word_accuracy_is_one_iff_equal() {
        let mut rng = seed::rng(6);
        for _ in 0..500 {
            let n = rng.gen_range(1..6);
            let reference: Vec<u8> = (0..n).map(|_| rng.gen_range(0..10)).collect();
            let m = rng.gen_range(0..6);
            let hypothesis: Vec<u8> = (0..m).map(|_| rng.gen_range(0..10)).collect();
            let acc = word_accuracy(&reference, &hypothesis).unwrap();
            if reference == hypothesis {
                assert_eq!(acc, 1.0);
            } else {
                assert!(acc < 1.0, "{reference:?} vs {hypothesis:?} gave {acc}");
            }
        }
    }

    #[test]
    fn s_plus_d_never_exceeds_reference_length() {
        let mut rng = seed::rng(7);
        for _ in 0..500 {
            let n = rng.gen_range(1..8);
            let m = rng.gen_range(0..8);
            let reference: Vec<u8> = (0..n).map(|_| rng.gen_range(0..4)).collect();
            let hypothesis: Vec<u8> = (0..m).map(|_| rng.gen_range(0..4)).collect();
            let c = edit_counts(&reference, &hypothesis).unwrap();
            assert!(c.substitutions + c.deletions <= c.reference_words);
            // Edit identity: reference consumed by S+D+matches, hypothesis
            // by S+I+matches.
            assert_eq!(
                c.reference_words - c.substitutions - c.deletions,
                hypothesis.len() - c.substitutions - c.insertions
            );
        }
    }

    #[test]
    fn disjointness_check() {
        check_disjoint_ids(["a", "b"], ["c", "d"]).unwrap();
        assert!(matches!(
            check_disjoint_ids(["a", "b"], ["b"]),
            Err(Error::OverlappingIds { .. })
        ));
    }

    #[test]
    fn histogram_counts_sum_to_input_size() {
        let mut rng = seed::rng(8);
        let values: Vec<f64> = (0..137).map(|_| rng.gen_range(-1.0..4.0)).collect();
        let h = histogram(&values, 0.0, 3.0, 10);
        assert_eq!(h.len(), 10);
        assert_eq!(h.iter().map(|(_, c)| c).sum::<usize>(), 137);
    }
}
