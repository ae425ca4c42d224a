//! Impression-level ranking metrics and evaluation over a data split.
//!
//! AUC uses the rank-sum formulation with ties counting one half. MRR
//! and nDCG rank by descending score with ties broken by original index
//! (stable sort), so results are platform-independent.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::config::{Ablation, TrainConfig};
use crate::data::{recent_history, DatasetBundle, ImpressionSample, NewsTable};
use crate::error::Result;
use crate::model::FumModel;
use crate::store::ParamStore;
use crate::tensor::{Real, Tensor};

/// Probability that a random positive outranks a random negative, ties
/// counting 1/2. `None` when only one class is present.
pub fn auc(scores: &[Real], labels: &[bool]) -> Option<Real> {
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    // Ascending ranks with tie groups averaged.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_of = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + 1 + j + 1) as Real / 2.0;
        for &idx in &order[i..=j] {
            rank_of[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum: Real = labels
        .iter()
        .zip(&rank_of)
        .filter(|(&l, _)| l)
        .map(|(_, &r)| r)
        .sum();
    let p = positives as Real;
    let n = negatives as Real;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Indices sorted by descending score, ties keeping original order.
fn descending_order(scores: &[Real]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Mean over positives of 1/rank. `None` when there are no positives.
pub fn mrr(scores: &[Real], labels: &[bool]) -> Option<Real> {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let order = descending_order(scores);
    let sum: Real = order
        .iter()
        .enumerate()
        .filter(|(_, &idx)| labels[idx])
        .map(|(pos, _)| 1.0 / (pos + 1) as Real)
        .sum();
    Some(sum / positives as Real)
}

/// DCG@k with binary gains and 1/log2(rank+1) discounts, normalized by
/// the ideal ordering. Zero when there are no positives.
pub fn ndcg_at_k(scores: &[Real], labels: &[bool], k: usize) -> Real {
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return 0.0;
    }
    let order = descending_order(scores);
    let discount = |rank: usize| 1.0 / ((rank + 1) as Real).log2();
    let dcg: Real = order
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &idx)| labels[idx])
        .map(|(pos, _)| discount(pos + 1))
        .sum();
    let ideal: Real = (1..=positives.min(k)).map(discount).sum();
    dcg / ideal
}

/// Macro-averaged metrics over impressions. Single-class impressions are
/// skipped for AUC and counted; impressions without positives are skipped
/// for MRR and nDCG likewise.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub auc: Real,
    pub mrr: Real,
    pub ndcg5: Real,
    pub ndcg10: Real,
    pub impressions: usize,
    pub skipped: usize,
}

impl MetricReport {
    pub const TSV_HEADER: &'static str = "epoch\tsplit\tauc\tmrr\tndcg5\tndcg10\tloss";

    pub fn tsv_row(&self, epoch: usize, split: &str, loss: Option<Real>) -> String {
        let loss = match loss {
            Some(v) => format!("{v:.6}"),
            None => "nan".to_string(),
        };
        format!(
            "{epoch}\t{split}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{loss}",
            self.auc, self.mrr, self.ndcg5, self.ndcg10
        )
    }
}

#[derive(Default, Clone, Copy)]
struct Kahan {
    sum: Real,
    carry: Real,
}

impl Kahan {
    fn add(&mut self, x: Real) {
        let y = x - self.carry;
        let t = self.sum + y;
        self.carry = (t - self.sum) - y;
        self.sum = t;
    }
}

/// Aggregates per-impression metrics with compensated summation, so the
/// result is independent of accumulation grouping.
#[derive(Default)]
pub struct MetricAccumulator {
    auc_sum: Kahan,
    auc_count: usize,
    mrr_sum: Kahan,
    ndcg5_sum: Kahan,
    ndcg10_sum: Kahan,
    ranked_count: usize,
    impressions: usize,
    skipped: usize,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, scores: &[Real], labels: &[bool]) {
        self.impressions += 1;
        match auc(scores, labels) {
            Some(a) => {
                self.auc_sum.add(a);
                self.auc_count += 1;
            }
            None => self.skipped += 1,
        }
        if let Some(m) = mrr(scores, labels) {
            self.mrr_sum.add(m);
            self.ndcg5_sum.add(ndcg_at_k(scores, labels, 5));
            self.ndcg10_sum.add(ndcg_at_k(scores, labels, 10));
            self.ranked_count += 1;
        }
    }

    pub fn finish(self) -> MetricReport {
        let mean = |k: Kahan, n: usize| if n == 0 { 0.0 } else { k.sum / n as Real };
        MetricReport {
            auc: mean(self.auc_sum, self.auc_count),
            mrr: mean(self.mrr_sum, self.ranked_count),
            ndcg5: mean(self.ndcg5_sum, self.ranked_count),
            ndcg10: mean(self.ndcg10_sum, self.ranked_count),
            impressions: self.impressions,
            skipped: self.skipped,
        }
    }
}

/// Scores every impression with the model (frozen parameters) and macro-
/// averages the metrics. Candidate news are encoded once; user encoding
/// runs per impression over its own history.
pub fn evaluate(
    model: &FumModel,
    store: &ParamStore,
    impressions: &[ImpressionSample],
    news: &NewsTable,
) -> Result<MetricReport> {
    // Encode each distinct candidate once, in first-appearance order.
    let mut wanted: Vec<usize> = Vec::new();
    let mut seen: HashMap<usize, usize> = HashMap::new();
    for imp in impressions {
        for (id, _) in &imp.candidates {
            let idx = news
                .index_of(id)
                .ok_or_else(|| crate::error::Error::UnknownNewsId {
                    id: id.clone(),
                    context: format!("impression {}", imp.impression_id),
                })?;
            seen.entry(idx).or_insert_with(|| {
                wanted.push(idx);
                wanted.len() - 1
            });
        }
    }
    let records: Vec<_> = wanted.iter().map(|&i| news.records[i].clone()).collect();
    let encoded = model.encode_news_batch(store, &records)?;

    let scored: Result<Vec<(Vec<Real>, Vec<bool>)>> = impressions
        .par_iter()
        .map(|imp| {
            let history_ids = recent_history(&imp.history, model.cfg.m);
            let history: Result<Vec<&crate::data::NewsRecord>> = history_ids
                .iter()
                .map(|id| news.get(id, &format!("impression {}", imp.impression_id)))
                .collect();
            let user = model.encode_user(store, &history?, model.cfg.ablation)?;
            let mut scores = Vec::with_capacity(imp.candidates.len());
            let mut labels = Vec::with_capacity(imp.candidates.len());
            for (id, clicked) in &imp.candidates {
                let idx = seen[&news.index_of(id).unwrap()];
                scores.push(crate::trainer::score(&user.u, &encoded[idx].vector)?);
                labels.push(*clicked);
            }
            Ok((scores, labels))
        })
        .collect();

    let mut acc = MetricAccumulator::new();
    for (scores, labels) in scored? {
        acc.add(&scores, &labels);
    }
    Ok(acc.finish())
}

/// Trains one model per ablation mode with identical seeds and data
/// order, and evaluates each on the eval split.
pub fn ablation_run(
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
) -> Result<Vec<(Ablation, MetricReport)>> {
    let mut out = Vec::new();
    for ablation in [Ablation::Full, Ablation::FineOnly, Ablation::CoarseOnly] {
        let run_cfg = TrainConfig {
            ablation,
            ..cfg.clone()
        };
        let outcome = crate::trainer::run_training(bundle, &run_cfg)?;
        let model = FumModel::new(&run_cfg, bundle.vocab.len())?;
        let report = evaluate(&model, &outcome.params, &bundle.eval, &bundle.news)?;
        out.push((ablation, report));
    }
    Ok(out)
}

/// Dot-product scoring of already-encoded vectors; used by the serving
/// path and tests.
pub fn score_vectors(u: &Tensor, n: &Tensor) -> Result<Real> {
    crate::trainer::score(u, n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    const T: bool = true;
    const F: bool = false;

    #[test]
    fn auc_basics() {
        assert_eq!(auc(&[0.9, 0.1], &[T, F]), Some(1.0));
        assert_eq!(auc(&[0.9, 0.1], &[F, T]), Some(0.0));
        // Tie counts one half, from brute-force pair enumeration.
        assert_eq!(auc(&[0.8, 0.8], &[T, F]), Some(0.5));
        // Single class signals a skip.
        assert_eq!(auc(&[0.5, 0.4], &[T, T]), None);
        assert_eq!(auc(&[0.5], &[F]), None);
    }

    #[test]
    fn auc_complement_for_tie_free_scores() {
        let scores = [0.9, 0.3, 0.5, 0.1, 0.7];
        let labels = [T, F, T, F, F];
        let neg: Vec<Real> = scores.iter().map(|s| -s).collect();
        let a = auc(&scores, &labels).unwrap();
        let b = auc(&neg, &labels).unwrap();
        assert_relative_eq!(a + b, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn mrr_basics() {
        assert_eq!(mrr(&[0.9, 0.1], &[T, F]), Some(1.0));
        // Single positive ranked third of five.
        let scores = [0.5, 0.4, 0.3, 0.2, 0.1];
        let labels = [F, F, T, F, F];
        assert_relative_eq!(mrr(&scores, &labels).unwrap(), 1.0 / 3.0, max_relative = 1e-12);
        // Two positives at ranks 1 and 4: (1 + 1/4)/2, enumerated by hand.
        let labels = [T, F, F, T, F];
        assert_relative_eq!(mrr(&scores, &labels).unwrap(), 0.625, max_relative = 1e-12);
        assert_eq!(mrr(&scores, &[F; 5]), None);
    }

    #[test]
    fn ndcg_basics() {
        let scores = [0.5, 0.4, 0.3];
        assert_relative_eq!(ndcg_at_k(&scores, &[T, T, F], 5), 1.0, max_relative = 1e-12);
        // Single positive at rank 2: 1/log2(3), checked against a
        // high-precision calculator.
        assert_relative_eq!(
            ndcg_at_k(&scores, &[F, T, F], 5),
            0.630_929_753_571_457_4,
            max_relative = 1e-12
        );
        assert_eq!(ndcg_at_k(&scores, &[F, F, F], 5), 0.0);
    }

    #[test]
    fn ndcg_is_one_exactly_for_perfect_prefixes() {
        let scores = [5.0, 4.0, 3.0, 2.0, 1.0];
        assert_eq!(ndcg_at_k(&scores, &[T, T, F, F, F], 2), 1.0);
        assert!(ndcg_at_k(&scores, &[T, F, T, F, F], 2) < 1.0);
    }

    #[test]
    fn metrics_are_rank_invariant_under_monotone_maps() {
        // Scores on a 1/8 grid keep cubes exact and distinct.
        let scores: Vec<Real> = [-9i32, 4, -2, 7, 1, -5]
            .iter()
            .map(|&k| k as Real / 8.0)
            .collect();
        let labels = [T, F, T, F, F, T];
        let affine: Vec<Real> = scores.iter().map(|s| 3.0 * s + 7.0).collect();
        let cubic: Vec<Real> = scores.iter().map(|s| s * s * s).collect();
        for transformed in [affine, cubic] {
            assert_eq!(auc(&scores, &labels), auc(&transformed, &labels));
            assert_eq!(mrr(&scores, &labels), mrr(&transformed, &labels));
            assert_eq!(
                ndcg_at_k(&scores, &labels, 5),
                ndcg_at_k(&transformed, &labels, 5)
            );
        }
    }

    #[test]
    fn accumulator_skips_and_counts() {
        let mut acc = MetricAccumulator::new();
        acc.add(&[0.9, 0.1], &[T, F]); // auc 1, mrr 1
        acc.add(&[0.9, 0.1], &[T, T]); // single class: auc skipped, mrr (1 + 1/2)/2
        acc.add(&[0.9, 0.1], &[F, F]); // no positives: skipped everywhere
        let r = acc.finish();
        assert_eq!(r.impressions, 3);
        assert_eq!(r.skipped, 2);
        assert_eq!(r.auc, 1.0);
        assert_eq!(r.mrr, (1.0 + 0.75) / 2.0);
    }

    #[test]
    fn oracle_scores_reach_one_anti_oracle_zero() {
        // Single-positive impressions scored by their own label rank the
        // positive first: every metric is exactly 1.
        let mut acc = MetricAccumulator::new();
        for labels in [[T, F, F, F], [F, T, F, F]] {
            let scores: Vec<Real> = labels.iter().map(|&l| if l { 1.0 } else { 0.0 }).collect();
            acc.add(&scores, &labels);
        }
        let r = acc.finish();
        assert_eq!((r.auc, r.mrr, r.ndcg5, r.ndcg10), (1.0, 1.0, 1.0, 1.0));

        let mut anti = MetricAccumulator::new();
        let labels = [T, F, F, T];
        let scores: Vec<Real> = labels.iter().map(|&l| if l { 0.0 } else { 1.0 }).collect();
        anti.add(&scores, &labels);
        assert_eq!(anti.finish().auc, 0.0);
    }

    #[test]
    fn tsv_row_shape() {
        let r = MetricReport {
            auc: 0.75,
            mrr: 0.5,
            ndcg5: 0.25,
            ndcg10: 0.3,
            impressions: 10,
            skipped: 1,
        };
        let row = r.tsv_row(2, "eval", Some(0.125));
        assert_eq!(row, "2\teval\t0.750000\t0.500000\t0.250000\t0.300000\t0.125000");
        assert_eq!(row.split('\t').count(), MetricReport::TSV_HEADER.split('\t').count());
    }
}
