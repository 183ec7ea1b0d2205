//! Ranking and calibration metrics for the progress-head diagnostics.

/// Average ranks (1-based) with ties sharing their mean rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = mean_rank;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation (Pearson over average ranks). Returns 0 when
/// either input is constant.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let mean = (n as f64 + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_x = 0.0;
    let mut var_y = 0.0;
    for i in 0..n {
        let (dx, dy) = (rx[i] - mean, ry[i] - mean);
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == 0.0 || var_y == 0.0 {
        return 0.0;
    }
    cov / (var_x.sqrt() * var_y.sqrt())
}

/// Area under the ROC curve via the rank-sum formulation (ties averaged).
/// Returns 0.5 when one class is absent.
pub fn auc(scores: &[f64], labels: &[bool]) -> f64 {
    assert_eq!(scores.len(), labels.len());
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 0.5;
    }
    let r = ranks(scores);
    let rank_sum: f64 = r
        .iter()
        .zip(labels.iter())
        .filter(|(_, &l)| l)
        .map(|(&rk, _)| rk)
        .sum();
    (rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64
}

/// Expected calibration error over equal-width probability bins.
pub fn ece(probs: &[f64], labels: &[bool], bins: usize) -> f64 {
    assert_eq!(probs.len(), labels.len());
    if probs.is_empty() || bins == 0 {
        return 0.0;
    }
    let mut count = vec![0usize; bins];
    let mut conf = vec![0.0f64; bins];
    let mut acc = vec![0.0f64; bins];
    for (&p, &l) in probs.iter().zip(labels.iter()) {
        let b = ((p * bins as f64) as usize).min(bins - 1);
        count[b] += 1;
        conf[b] += p;
        acc[b] += if l { 1.0 } else { 0.0 };
    }
    let n = probs.len() as f64;
    (0..bins)
        .filter(|&b| count[b] > 0)
        .map(|b| {
            let c = count[b] as f64;
            (c / n) * ((acc[b] / c) - (conf[b] / c)).abs()
        })
        .sum()
}

/// Mean of `values` per decile of `phase` (phase in `[0, 1]`). Empty
/// deciles yield NaN.
pub fn decile_means(phase: &[f64], values: &[f64]) -> [f64; 10] {
    let mut sums = [0.0f64; 10];
    let mut counts = [0usize; 10];
    for (&p, &v) in phase.iter().zip(values.iter()) {
        let d = ((p * 10.0) as usize).min(9);
        sums[d] += v;
        counts[d] += 1;
    }
    let mut out = [f64::NAN; 10];
    for d in 0..10 {
        if counts[d] > 0 {
            out[d] = sums[d] / counts[d] as f64;
        }
    }
    out
}

/// Median (averaging the middle pair for even lengths).
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    #[test]
    fn spearman_oracle_bounds() {
        // identity ranking gives exactly 1 (the oracle upper bound used by
        // the diagnostics)
        let t: Vec<f64> = (0..50).map(|i| i as f64).collect();
        assert_eq!(spearman(&t, &t), 1.0);
        let rev: Vec<f64> = t.iter().rev().cloned().collect();
        assert_eq!(spearman(&t, &rev), -1.0);
        // monotone transform preserves rank correlation
        let squashed: Vec<f64> = t.iter().map(|&x| (x / 10.0).tanh()).collect();
        assert!((spearman(&t, &squashed) - 1.0).abs() < 1e-12);
        let constant = vec![3.3; 50];
        assert_eq!(spearman(&t, &constant), 0.0);
    }

    #[test]
    fn auc_perfect_chance_and_ties() {
        let labels: Vec<bool> = (0..20).map(|i| i >= 10).collect();
        let scores: Vec<f64> = (0..20).map(|i| i as f64).collect();
        assert_eq!(auc(&scores, &labels), 1.0);
        let inverted: Vec<f64> = scores.iter().map(|s| -s).collect();
        assert_eq!(auc(&inverted, &labels), 0.0);
        let all_same = vec![0.5; 20];
        assert_eq!(auc(&all_same, &labels), 0.5);
    }

    #[test]
    fn random_scores_hover_near_half_auc() {
        let mut rng = stream(55, "metrics", 0);
        let labels: Vec<bool> = (0..4000).map(|_| rng.random::<f64>() < 0.2).collect();
        let scores: Vec<f64> = (0..4000).map(|_| rng.random::<f64>()).collect();
        let a = auc(&scores, &labels);
        assert!((a - 0.5).abs() < 0.05, "chance-level AUC was {a}");
    }

    #[test]
    fn ece_detects_miscalibration() {
        // confident and right: low ECE
        let probs = vec![0.95; 100];
        let labels = vec![true; 100];
        assert!(ece(&probs, &labels, 10) < 0.06);
        // confident and wrong: ECE near 0.95
        let labels = vec![false; 100];
        assert!(ece(&probs, &labels, 10) > 0.9);
    }

    #[test]
    fn decile_profile_and_median() {
        let phase: Vec<f64> = (0..100).map(|i| i as f64 / 99.0).collect();
        let vals: Vec<f64> = phase.iter().map(|p| p * 2.0).collect();
        let prof = decile_means(&phase, &vals);
        assert!(prof.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
