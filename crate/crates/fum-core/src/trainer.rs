//! Candidate scoring, pairwise ranking loss, negative sampling and the
//! training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{LossVariant, TrainConfig};
use crate::data::{recent_history, DatasetBundle, ImpressionSample, NewsTable};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::model::FumModel;
use crate::optim::{adam_step, AdamState};
use crate::store::{backward_pass, Graph, ParamStore};
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

/// Matching score: the inner product of user and news embeddings.
pub fn score(u: &Tensor, n: &Tensor) -> Result<Real> {
    if u.shape() != n.shape() || u.shape().len() != 1 {
        return Err(Error::ShapeMismatch {
            op: "score",
            lhs: u.shape().to_vec(),
            rhs: n.shape().to_vec(),
        });
    }
    Ok(u.values().iter().zip(n.values()).map(|(a, b)| a * b).sum())
}

fn stable_softplus(x: Real) -> Real {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pairwise ranking loss against one or more negatives.
///
/// The default is the mean of -ln sigmoid(r_pos - r_neg); the
/// `PaperSigmoid` variant is the mean of -sigmoid(r_pos - r_neg),
/// selectable so the difference between the two formulations stays
/// observable.
pub fn bpr_loss(r_pos: Real, r_negs: &[Real], variant: LossVariant) -> Real {
    assert!(!r_negs.is_empty(), "bpr_loss requires at least one negative");
    let total: Real = r_negs
        .iter()
        .map(|&r_neg| {
            let delta = r_pos - r_neg;
            match variant {
                LossVariant::LogSigmoid => stable_softplus(-delta),
                LossVariant::PaperSigmoid => -sigmoid(delta),
            }
        })
        .sum();
    total / r_negs.len() as Real
}

/// One training pair set: a user history plus one clicked candidate and
/// its sampled negatives, all as news-table indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub history: Vec<usize>,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Builds one sample per clicked candidate, drawing `ratio` negatives
/// uniformly without replacement from the impression's non-clicked
/// candidates (with replacement only if there are too few). Histories
/// keep their most recent `m` entries. Impressions without a click or
/// without a negative yield no samples.
pub fn sample_negatives<R: Rng>(
    imp: &ImpressionSample,
    news: &NewsTable,
    ratio: usize,
    m: usize,
    rng: &mut R,
) -> Result<Vec<TrainingSample>> {
    let ctx = format!("impression {}", imp.impression_id);
    let resolve = |id: &str| -> Result<usize> {
        news.index_of(id).ok_or_else(|| Error::UnknownNewsId {
            id: id.to_string(),
            context: ctx.clone(),
        })
    };
    let mut clicked = Vec::new();
    let mut unclicked = Vec::new();
    for (id, is_click) in &imp.candidates {
        let idx = resolve(id)?;
        if *is_click {
            clicked.push(idx);
        } else {
            unclicked.push(idx);
        }
    }
    if clicked.is_empty() || unclicked.is_empty() {
        return Ok(Vec::new());
    }
    let history: Result<Vec<usize>> = recent_history(&imp.history, m)
        .iter()
        .map(|id| resolve(id))
        .collect();
    let history = history?;

    let mut samples = Vec::with_capacity(clicked.len());
    for &positive in &clicked {
        let negatives: Vec<usize> = if unclicked.len() >= ratio {
            unclicked.choose_multiple(rng, ratio).copied().collect()
        } else {
            (0..ratio)
                .map(|_| *unclicked.choose(rng).unwrap())
                .collect()
        };
        samples.push(TrainingSample {
            history: history.clone(),
            positive,
            negatives,
        });
    }
    Ok(samples)
}

/// Builds the loss node for one sample: the user vector against the
/// positive and each negative candidate.
pub fn sample_loss_graph(
    g: &mut Graph,
    model: &FumModel,
    sample: &TrainingSample,
    news: &NewsTable,
    variant: LossVariant,
) -> Result<Var> {
    let history: Vec<&crate::data::NewsRecord> =
        sample.history.iter().map(|&i| &news.records[i]).collect();
    let (u, _, _) = model.user_graph(g, &history, model.cfg.ablation)?;
    let n_pos = model.news_graph(g, &news.records[sample.positive])?;
    let r_pos = g.dot(u, n_pos)?;
    let mut parts = Vec::with_capacity(sample.negatives.len());
    for &neg in &sample.negatives {
        let n_neg = model.news_graph(g, &news.records[neg])?;
        let r_neg = g.dot(u, n_neg)?;
        let delta = g.sub(r_pos, r_neg)?;
        let term = match variant {
            LossVariant::LogSigmoid => {
                let neg_delta = g.neg(delta);
                g.softplus(neg_delta)
            }
            LossVariant::PaperSigmoid => {
                let s = g.sigmoid(delta);
                g.neg(s)
            }
        };
        parts.push(term);
    }
    g.mean_scalars(&parts)
}

/// One line of the training/evaluation log.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub report: MetricReport,
    pub loss: Option<Real>,
}

impl MetricRow {
    pub fn to_tsv(&self) -> String {
        self.report.tsv_row(self.epoch, &self.split, self.loss)
    }
}

pub fn log_to_tsv(rows: &[MetricRow]) -> String {
    let mut out = String::from(MetricReport::TSV_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&row.to_tsv());
        out.push('\n');
    }
    out
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub adam: AdamState,
    pub log: Vec<MetricRow>,
    /// Train impressions that yielded no pair (no click or no negative).
    pub skipped_impressions: usize,
}

/// Epochs of shuffled minibatch Adam steps over BPR pairs, evaluating on
/// the eval split after each epoch. Deterministic for a fixed config.
pub fn run_training(bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = FumModel::new(cfg, bundle.vocab.len())?;
    let mut store = model.init_params(bundle.word_init.clone())?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x53414d504c4552); // sampling stream
    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for imp in &bundle.train {
        let mut s = sample_negatives(imp, &bundle.news, cfg.negatives_per_positive, cfg.m, &mut rng)?;
        if s.is_empty() {
            skipped += 1;
        }
        samples.append(&mut s);
    }
    if samples.is_empty() {
        return Err(Error::EmptyTrainingSet);
    }

    let mut adam = AdamState::new(&store, cfg.learning_rate);
    let mut log = Vec::new();
    for epoch in 1..=cfg.epochs {
        samples.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in samples.chunks(cfg.batch_size) {
            store.zero_grads();
            let weight = 1.0 / batch.len() as Real;
            for sample in batch {
                let scaled = backward_pass(&mut store, |g| {
                    let loss = sample_loss_graph(g, &model, sample, &bundle.news, cfg.loss_variant)?;
                    Ok(g.scale(loss, weight))
                })?;
                epoch_loss += scaled / weight;
            }
            adam_step(&mut store, &mut adam)?;
        }
        let mean_loss = epoch_loss / samples.len() as Real;
        let report = evaluate(&model, &store, &bundle.eval, &bundle.news)?;
        log.push(MetricRow {
            epoch,
            split: "eval".into(),
            report,
            loss: Some(mean_loss),
        });
    }
    Ok(TrainOutcome {
        params: store,
        adam,
        log,
        skipped_impressions: skipped,
    })
}
