//! Evaluation metrics: accuracy, ROC-AUC, plug-in mutual information between
//! discrete predictions and labels, MI stability, and confidence histograms.
//!
//! All metrics here are pure functions over discrete predictions or
//! probabilities, so they work in f64 regardless of the model scalar type.

use std::collections::BTreeMap;

use crate::error::{CgrlError, Result};

/// Fraction of exact matches over the given node ids.
pub fn accuracy(pred_labels: &[usize], true_labels: &[usize], ids: &[usize]) -> Result<f64> {
    if ids.is_empty() {
        return Err(CgrlError::invalid("accuracy", "empty id set"));
    }
    let hits = ids
        .iter()
        .filter(|&&i| pred_labels[i] == true_labels[i])
        .count();
    Ok(hits as f64 / ids.len() as f64)
}

/// Probability that a random positive outranks a random negative; ties count
/// one half. Computed through midranks.
pub fn roc_auc(scores: &[f64], binary_labels: &[usize], ids: &[usize]) -> Result<f64> {
    let n_pos = ids.iter().filter(|&&i| binary_labels[i] == 1).count();
    let n_neg = ids.len().saturating_sub(n_pos);
    if n_pos == 0 || n_neg == 0 {
        return Err(CgrlError::invalid("roc_auc", "both classes must be present"));
    }
    let mut order: Vec<usize> = ids.to_vec();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)));
    // midranks over tied scores
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &id in &order[i..=j] {
            if binary_labels[id] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let auc = (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;
    Ok(auc)
}

/// Plug-in mutual information (nats) from the empirical joint of
/// (prediction, label) over the given ids, with the 0·ln0 = 0 convention.
pub fn mutual_information(
    pred_labels: &[usize],
    true_labels: &[usize],
    ids: &[usize],
) -> Result<f64> {
    if ids.is_empty() {
        return Err(CgrlError::invalid("mutual_information", "empty id set"));
    }
    // BTreeMap keeps the summation order deterministic
    let n = ids.len() as f64;
    let mut joint: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    let mut marg_pred: BTreeMap<usize, f64> = BTreeMap::new();
    let mut marg_true: BTreeMap<usize, f64> = BTreeMap::new();
    for &i in ids {
        *joint.entry((pred_labels[i], true_labels[i])).or_insert(0.0) += 1.0;
        *marg_pred.entry(pred_labels[i]).or_insert(0.0) += 1.0;
        *marg_true.entry(true_labels[i]).or_insert(0.0) += 1.0;
    }
    let mut mi = 0.0;
    for (&(p, t), &c) in &joint {
        let pj = c / n;
        let pp = marg_pred[&p] / n;
        let pt = marg_true[&t] / n;
        mi += pj * (pj / (pp * pt)).ln();
    }
    // clamp away float residue: MI is mathematically >= 0
    Ok(mi.max(0.0))
}

/// Per-epoch MI values for one split and model.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MiSeries {
    pub values: Vec<f64>,
    pub split_tag: String,
    pub model_tag: String,
}

/// Sample standard deviation of the trailing `window` values.
pub fn mi_stability(series: &MiSeries, window: usize) -> Result<f64> {
    if window == 0 {
        return Err(CgrlError::invalid("mi_stability", "window must be >= 1"));
    }
    if window > series.values.len() {
        return Err(CgrlError::invalid(
            "mi_stability",
            format!("window {window} exceeds series length {}", series.values.len()),
        ));
    }
    let tail = &series.values[series.values.len() - window..];
    Ok(sample_std(tail))
}

pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
    var.sqrt()
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Normalized densities over equal-width bins on [0, 1]:
/// sum(density) * bin_width = 1.
pub fn confidence_histogram(probabilities: &[f64], bins: usize) -> Result<Vec<f64>> {
    if bins < 2 {
        return Err(CgrlError::invalid("confidence_histogram", "bins must be >= 2"));
    }
    if probabilities.is_empty() {
        return Err(CgrlError::invalid("confidence_histogram", "no probabilities"));
    }
    if let Some(&bad) = probabilities.iter().find(|&&p| !(0.0..=1.0).contains(&p)) {
        return Err(CgrlError::invalid(
            "confidence_histogram",
            format!("probability {bad} outside [0, 1]"),
        ));
    }
    let width = 1.0 / bins as f64;
    let mut counts = vec![0usize; bins];
    for &p in probabilities {
        let b = ((p / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = probabilities.len() as f64;
    Ok(counts.iter().map(|&c| c as f64 / (n * width)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_cases() {
        let truth = vec![0, 1, 2, 1];
        assert_eq!(accuracy(&[0, 1, 2, 1], &truth, &[0, 1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[1, 0, 1, 0], &truth, &[0, 1, 2, 3]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 2, 0], &truth, &[0, 1, 2, 3]).unwrap(), 0.75);
        assert!(accuracy(&[0], &[0], &[]).is_err());
    }

    #[test]
    fn roc_auc_cases() {
        let labels = vec![1, 0, 1, 0];
        // perfectly separated
        assert_eq!(
            roc_auc(&[0.9, 0.1, 0.8, 0.2], &labels, &[0, 1, 2, 3]).unwrap(),
            1.0
        );
        // all scores equal -> tie convention 0.5
        assert_eq!(
            roc_auc(&[0.5, 0.5, 0.5, 0.5], &labels, &[0, 1, 2, 3]).unwrap(),
            0.5
        );
        // pairwise-count oracle: 3 of 4 pairs correctly ordered
        assert_eq!(
            roc_auc(&[0.9, 0.8, 0.7, 0.6], &labels, &[0, 1, 2, 3]).unwrap(),
            0.75
        );
        assert!(roc_auc(&[0.9, 0.8], &[1, 1], &[0, 1]).is_err());
    }

    #[test]
    fn roc_auc_matches_pairwise_counting_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let n = 30;
            let scores: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 8.0).round() / 8.0).collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            if !labels.contains(&0) || !labels.contains(&1) {
                continue;
            }
            let ids: Vec<usize> = (0..n).collect();
            let got = roc_auc(&scores, &labels, &ids).unwrap();
            let mut num = 0.0;
            let mut den = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if labels[i] == 1 && labels[j] == 0 {
                        den += 1.0;
                        if scores[i] > scores[j] {
                            num += 1.0;
                        } else if scores[i] == scores[j] {
                            num += 0.5;
                        }
                    }
                }
            }
            assert!((got - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_flips_under_score_negation() {
        let scores = vec![0.3, 0.9, 0.1, 0.7, 0.5];
        let labels = vec![0, 1, 0, 1, 0];
        let ids: Vec<usize> = (0..5).collect();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let a = roc_auc(&scores, &labels, &ids).unwrap();
        let b = roc_auc(&neg, &labels, &ids).unwrap();
        assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mutual_information_cases() {
        // perfect predictions on balanced binary labels -> ln 2
        let truth = vec![0, 1, 0, 1];
        let ids: Vec<usize> = (0..4).collect();
        let mi = mutual_information(&truth, &truth, &ids).unwrap();
        assert!((mi - (2.0f64).ln()).abs() < 1e-12);

        // constant predictor -> 0
        let constant = vec![0, 0, 0, 0];
        let mi0 = mutual_information(&constant, &truth, &ids).unwrap();
        assert!(mi0.abs() < 1e-12);
    }

    #[test]
    fn mutual_information_matches_plugin_oracle() {
        // joint counts [[45, 5], [5, 45]]
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for (p, t, c) in [(0, 0, 45), (0, 1, 5), (1, 0, 5), (1, 1, 45)] {
            for _ in 0..c {
                pred.push(p);
                truth.push(t);
            }
        }
        let ids: Vec<usize> = (0..pred.len()).collect();
        let got = mutual_information(&pred, &truth, &ids).unwrap();
        // direct plug-in evaluation
        let want = 2.0 * 0.45 * (0.45f64 / 0.25).ln() + 2.0 * 0.05 * (0.05f64 / 0.25).ln();
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn mutual_information_is_symmetric_and_bounded() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(15);
        for _ in 0..10 {
            let n = 60;
            let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
            let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..3)).collect();
            let ids: Vec<usize> = (0..n).collect();
            let ab = mutual_information(&a, &b, &ids).unwrap();
            let ba = mutual_information(&b, &a, &ids).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            let support = |xs: &[usize]| {
                let mut s: Vec<usize> = xs.to_vec();
                s.sort_unstable();
                s.dedup();
                s.len() as f64
            };
            let bound = support(&a).ln().min(support(&b).ln()) + 1e-12;
            assert!(ab >= 0.0 && ab <= bound);
        }
    }

    #[test]
    fn mi_stability_cases() {
        let constant = MiSeries {
            values: vec![0.4; 10],
            split_tag: "ID-val".into(),
            model_tag: "erm-gcn".into(),
        };
        assert_eq!(mi_stability(&constant, 5).unwrap(), 0.0);

        let alternating = MiSeries {
            values: vec![0.0, 1.0, 0.0, 1.0],
            split_tag: "OOD-val".into(),
            model_tag: "cgrl-gcn".into(),
        };
        let s = mi_stability(&alternating, 4).unwrap();
        assert!((s - (1.0f64 / 3.0).sqrt()).abs() < 1e-12, "sample std, got {s}");

        assert!(mi_stability(&alternating, 0).is_err());
        assert!(mi_stability(&alternating, 9).is_err());
    }

    #[test]
    fn histogram_cases() {
        // all confidences 1.0 -> whole mass in the last bin
        let h = confidence_histogram(&[1.0, 1.0, 1.0], 10).unwrap();
        assert!((h[9] - 10.0).abs() < 1e-12);
        assert!(h[..9].iter().all(|&d| d == 0.0));

        // densities integrate to 1
        let probs: Vec<f64> = (0..100).map(|i| 0.25 + 0.0075 * i as f64).collect();
        let h = confidence_histogram(&probs, 10).unwrap();
        let total: f64 = h.iter().map(|d| d * 0.1).sum();
        assert!((total - 1.0).abs() < 1e-12);

        // counting oracle on a 10-bin fixture
        let fixed = vec![0.05, 0.15, 0.15, 0.95, 0.95, 0.95];
        let h = confidence_histogram(&fixed, 10).unwrap();
        assert!((h[0] - 1.0 / (6.0 * 0.1)).abs() < 1e-12);
        assert!((h[1] - 2.0 / (6.0 * 0.1)).abs() < 1e-12);
        assert!((h[9] - 3.0 / (6.0 * 0.1)).abs() < 1e-12);

        assert!(confidence_histogram(&[0.5], 1).is_err());
        assert!(confidence_histogram(&[1.5], 10).is_err());
    }
}
