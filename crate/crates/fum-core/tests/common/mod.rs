//! Brute-force oracles shared by the integration tests. These are
//! deliberately independent implementations: AUC by pair enumeration,
//! MRR by counting, nDCG by selection — no shared sorting code with the
//! library.

use fum_core::Real;

/// Probability a random positive outranks a random negative, enumerated
/// pair by pair with ties counting one half.
pub fn oracle_auc(scores: &[Real], labels: &[bool]) -> Option<Real> {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    if pairs == 0.0 {
        None
    } else {
        Some(wins / pairs)
    }
}

/// Rank of index `i` under descending scores with ties broken by the
/// smaller original index, computed by counting.
fn rank_of(scores: &[Real], i: usize) -> usize {
    let mut rank = 1;
    for (j, &s) in scores.iter().enumerate() {
        if s > scores[i] || (s == scores[i] && j < i) {
            rank += 1;
        }
    }
    rank
}

pub fn oracle_mrr(scores: &[Real], labels: &[bool]) -> Option<Real> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, &l) in labels.iter().enumerate() {
        if l {
            sum += 1.0 / rank_of(scores, i) as Real;
            count += 1;
        }
    }
    if count == 0 {
        None
    } else {
        Some(sum / count as Real)
    }
}

pub fn oracle_ndcg(scores: &[Real], labels: &[bool], k: usize) -> Real {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return 0.0;
    }
    let mut dcg = 0.0;
    for (i, &l) in labels.iter().enumerate() {
        if l {
            let rank = rank_of(scores, i);
            if rank <= k {
                dcg += 1.0 / ((rank + 1) as Real).log2();
            }
        }
    }
    let mut ideal = 0.0;
    for rank in 1..=positives.min(k) {
        ideal += 1.0 / ((rank + 1) as Real).log2();
    }
    dcg / ideal
}
