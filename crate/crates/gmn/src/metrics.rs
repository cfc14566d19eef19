//! Ranking and classification metrics over scored samples. Samples are
//! `(score, is_positive)` pairs; probabilities only enter through the
//! logistic link when a metric needs them.

/// Area under the ROC curve, computed from average ranks so tied scores get
/// half credit. Exactly invariant under any strictly increasing rescoring.
/// Degenerate inputs (no positives or no negatives) score 0.5: such a set
/// carries no ranking information.
pub fn rank_auc(pairs: &[(f64, bool)]) -> f64 {
    let n = pairs.len();
    let n_pos = pairs.iter().filter(|&&(_, y)| y).count();
    let n_neg = n - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return 0.5;
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| pairs[a].0.partial_cmp(&pairs[b].0).unwrap());
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && pairs[idx[j + 1]].0 == pairs[idx[i]].0 {
            j += 1;
        }
        // Ascending 1-based ranks; every member of a tie run shares the mean.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &idx[i..=j] {
            if pairs[k].1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    (rank_sum_pos - np * (np + 1.0) / 2.0) / (np * n_neg as f64)
}

/// Classification metrics at the natural threshold: a sample is predicted
/// positive when its score is above zero, i.e. its logistic probability is
/// above one half.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdMetrics {
    /// Fraction of predicted positives that are true positives; zero when
    /// nothing was predicted positive (see `predicted_pos`).
    pub precision: f64,
    /// Fraction of true positives predicted positive.
    pub recall: f64,
    /// Mean binary cross-entropy in nats, probabilities clamped to
    /// `[1e-12, 1 - 1e-12]` so a confidently wrong score stays finite.
    pub bce: f64,
    pub predicted_pos: usize,
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

pub fn threshold_metrics(pairs: &[(f64, bool)]) -> ThresholdMetrics {
    let mut tp = 0usize;
    let mut predicted = 0usize;
    let mut positives = 0usize;
    let mut bce_sum = 0.0;
    for &(s, y) in pairs {
        let predicted_pos = s > 0.0;
        if predicted_pos {
            predicted += 1;
            if y {
                tp += 1;
            }
        }
        if y {
            positives += 1;
        }
        let p = sigmoid(s).clamp(1e-12, 1.0 - 1e-12);
        bce_sum -= if y { p.ln() } else { (1.0 - p).ln() };
    }
    ThresholdMetrics {
        precision: if predicted > 0 {
            tp as f64 / predicted as f64
        } else {
            0.0
        },
        recall: if positives > 0 {
            tp as f64 / positives as f64
        } else {
            0.0
        },
        bce: if pairs.is_empty() {
            0.0
        } else {
            bce_sum / pairs.len() as f64
        },
        predicted_pos: predicted,
    }
}

/// Fraction of groups whose single best-scored sample is a positive. The
/// first maximum wins when scores tie, and empty groups are skipped.
pub fn hit_at_one(groups: &[Vec<(f64, bool)>]) -> f64 {
    let mut hits = 0usize;
    let mut counted = 0usize;
    for g in groups {
        if g.is_empty() {
            continue;
        }
        counted += 1;
        let mut best = &g[0];
        for s in &g[1..] {
            if s.0 > best.0 {
                best = s;
            }
        }
        if best.1 {
            hits += 1;
        }
    }
    if counted == 0 {
        0.0
    } else {
        hits as f64 / counted as f64
    }
}
