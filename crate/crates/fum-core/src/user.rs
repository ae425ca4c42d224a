//! User modeling: the fine-grained path runs a linear-attention stack
//! over the concatenated token sequence of all clicked news; the
//! coarse-grained path runs self-attention over whole-news embeddings.
//! The two user vectors add up to the fused embedding.

use rand::Rng;

use crate::attention::{AttnPool, FastformerLayer, SelfAttnLayer, SequenceMixer};
use crate::config::{Ablation, TrainConfig};
use crate::data::NewsRecord;
use crate::error::{Error, Result};
use crate::news::{encode_news_graph, EmbeddingTables, NewsEncoderParams};
use crate::store::{Graph, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Index layout of one user's concatenated behavior document: m news
/// slots of k genre blocks of l tokens each, always padded to full
/// length. Token embeddings are the concatenation of word, genre and
/// position embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct BehaviorSequence {
    pub word_ids: Vec<usize>,
    pub genre_ids: Vec<usize>,
    pub mask: Vec<bool>,
    pub m: usize,
    pub k: usize,
    pub l: usize,
}

impl BehaviorSequence {
    pub fn seq_len(&self) -> usize {
        self.m * self.k * self.l
    }

    /// Token range of the i-th news slot.
    pub fn news_range(&self, i: usize) -> std::ops::Range<usize> {
        let width = self.k * self.l;
        i * width..(i + 1) * width
    }

    /// Which news slots contain at least one real token.
    pub fn news_mask(&self) -> Vec<bool> {
        (0..self.m)
            .map(|i| self.mask[self.news_range(i)].iter().any(|&b| b))
            .collect()
    }

    pub fn any_unmasked(&self) -> bool {
        self.mask.iter().any(|&b| b)
    }
}

/// Lays out the behavior document: news slot i occupies offsets
/// [i*k*l, (i+1)*k*l), genre blocks in order within it. Histories longer
/// than m are rejected; truncation happens during ingestion.
pub fn build_behavior_sequence(history: &[&NewsRecord], m: usize, k: usize, l: usize) -> Result<BehaviorSequence> {
    if history.len() > m {
        return Err(Error::HistoryTooLong {
            len: history.len(),
            m,
        });
    }
    let total = m * k * l;
    let mut word_ids = vec![0usize; total];
    let mut genre_ids = vec![0usize; total];
    let mut mask = vec![false; total];
    for (slot, record) in history.iter().enumerate() {
        if record.genres.len() != k {
            return Err(Error::ShapeMismatch {
                op: "behavior_sequence",
                lhs: vec![record.genres.len()],
                rhs: vec![k],
            });
        }
        for (genre, text) in record.genres.iter().enumerate() {
            if text.ids.len() != l {
                return Err(Error::ShapeMismatch {
                    op: "behavior_sequence",
                    lhs: vec![text.ids.len()],
                    rhs: vec![l],
                });
            }
            let base = slot * k * l + genre * l;
            for t in 0..l {
                word_ids[base + t] = text.ids[t] as usize;
                genre_ids[base + t] = genre;
                mask[base + t] = text.mask[t];
            }
        }
    }
    // Genre ids are defined for padded slots too, keeping the gather
    // pattern uniform; their embeddings stay masked.
    for slot in history.len()..m {
        for genre in 0..k {
            let base = slot * k * l + genre * l;
            for t in 0..l {
                genre_ids[base + t] = genre;
            }
        }
    }
    Ok(BehaviorSequence {
        word_ids,
        genre_ids,
        mask,
        m,
        k,
        l,
    })
}

/// Fine-grained model: embedding tables for the behavior document, the
/// mixer stack, and the two pooling stages.
#[derive(Debug, Clone)]
pub struct FineUserParams {
    pub genre_table: String,
    pub position_table: String,
    pub layers: Vec<FastformerLayer>,
    pub news_pool: AttnPool,
    pub user_pool: AttnPool,
    d_genre: usize,
    d_pos: usize,
    d_model: usize,
    pub m: usize,
    pub k: usize,
    pub l: usize,
}

impl FineUserParams {
    pub fn new(cfg: &TrainConfig) -> Self {
        let d_model = cfg.d_model();
        let layers = (0..cfg.fastformer_layers)
            .map(|i| {
                let d_in = if i == 0 { cfg.d_token() } else { d_model };
                FastformerLayer::new(
                    &format!("fine.fastformer{i}"),
                    d_in,
                    cfg.heads,
                    cfg.head_dim,
                    cfg.fastformer_scoring,
                    cfg.use_query_residual,
                )
            })
            .collect();
        FineUserParams {
            genre_table: "fine.genre".into(),
            position_table: "fine.position".into(),
            layers,
            news_pool: AttnPool::new("fine.news_pool", cfg.pool_scoring, d_model, cfg.d_att),
            user_pool: AttnPool::new("fine.user_pool", cfg.pool_scoring, d_model, cfg.d_att),
            d_genre: cfg.d_genre,
            d_pos: cfg.d_pos,
            d_model,
            m: cfg.m,
            k: cfg.k,
            l: cfg.l,
        }
    }

    pub fn seq_len(&self) -> usize {
        self.m * self.k * self.l
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        store.insert(
            &self.genre_table,
            crate::store::glorot_matrix(self.k, self.d_genre, rng),
        )?;
        store.insert(
            &self.position_table,
            crate::store::glorot_matrix(self.seq_len(), self.d_pos, rng),
        )?;
        for layer in &self.layers {
            layer.register(store, rng)?;
        }
        self.news_pool.register(store, rng)?;
        self.user_pool.register(store, rng)
    }
}

/// Coarse-grained model over news embeddings.
#[derive(Debug, Clone)]
pub struct CoarseUserParams {
    pub attn: SelfAttnLayer,
    pub user_pool: AttnPool,
}

impl CoarseUserParams {
    pub fn new(cfg: &TrainConfig) -> Self {
        let d_model = cfg.d_model();
        CoarseUserParams {
            attn: SelfAttnLayer::new("coarse.attn", d_model, cfg.heads, cfg.head_dim),
            user_pool: AttnPool::new("coarse.user_pool", cfg.pool_scoring, d_model, cfg.d_att),
        }
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.attn.register(store, rng)?;
        self.user_pool.register(store, rng)
    }
}

/// Runs the mixer stack over the embedded behavior document, pools each
/// news slot's tokens into per-news vectors, then pools those into the
/// fine-grained user vector. An empty history gives the zero vector.
pub fn fine_user_encode(
    g: &mut Graph,
    tables: &EmbeddingTables,
    fine: &FineUserParams,
    seq: &BehaviorSequence,
) -> Result<Var> {
    if !seq.any_unmasked() {
        return Ok(g.zeros(vec![fine.d_model]));
    }
    let word = g.param(&tables.word)?;
    let words = g.gather_rows(word, &seq.word_ids)?;
    let genre = g.param(&fine.genre_table)?;
    let genres = g.gather_rows(genre, &seq.genre_ids)?;
    let position = g.param(&fine.position_table)?;
    let position_ids: Vec<usize> = (0..seq.seq_len()).collect();
    let positions = g.gather_rows(position, &position_ids)?;
    let mut x = g.concat_cols(&[words, genres, positions])?;
    for layer in &fine.layers {
        x = layer.mix(g, x, &seq.mask)?;
    }

    let news_mask = seq.news_mask();
    let width = seq.k * seq.l;
    let mut rows = Vec::with_capacity(seq.m);
    for i in 0..seq.m {
        let row = if news_mask[i] {
            let slice = g.slice_rows(x, i * width, width)?;
            let pooled = fine.news_pool.pool(g, slice, &seq.mask[seq.news_range(i)])?;
            g.reshape(pooled, vec![1, fine.d_model])?
        } else {
            g.zeros(vec![1, fine.d_model])
        };
        rows.push(row);
    }
    let per_news = g.concat_rows(&rows)?;
    fine.user_pool.pool(g, per_news, &news_mask)
}

/// Self-attention over the user's news embeddings followed by pooling.
/// An empty history gives the zero vector.
pub fn coarse_user_encode(
    g: &mut Graph,
    coarse: &CoarseUserParams,
    news_embeddings: Var,
    news_mask: &[bool],
) -> Result<Var> {
    let d = g.shape(news_embeddings)[1];
    if !news_mask.iter().any(|&b| b) {
        return Ok(g.zeros(vec![d]));
    }
    let contextual = coarse.attn.mix(g, news_embeddings, news_mask)?;
    coarse.user_pool.pool(g, contextual, news_mask)
}

/// The fused user representation.
#[derive(Debug, Clone, PartialEq)]
pub struct UserEmbedding {
    pub u_fine: Tensor,
    pub u_coarse: Tensor,
    pub u: Tensor,
}

/// Builds u = u_fine + u_coarse on the graph. Ablations zero one side
/// and skip its computation.
#[allow(clippy::too_many_arguments)]
pub fn encode_user_graph(
    g: &mut Graph,
    tables: &EmbeddingTables,
    news_params: &NewsEncoderParams,
    fine: &FineUserParams,
    coarse: &CoarseUserParams,
    history: &[&NewsRecord],
    ablation: Ablation,
) -> Result<(Var, Var, Var)> {
    let seq = build_behavior_sequence(history, fine.m, fine.k, fine.l)?;
    let d = fine.d_model;

    let u_fine = match ablation {
        Ablation::CoarseOnly => g.zeros(vec![d]),
        _ => fine_user_encode(g, tables, fine, &seq)?,
    };

    let u_coarse = match ablation {
        Ablation::FineOnly => g.zeros(vec![d]),
        _ => {
            let mut rows = Vec::with_capacity(seq.m);
            let mut news_mask = Vec::with_capacity(seq.m);
            for slot in 0..seq.m {
                if slot < history.len() && !history[slot].all_empty() {
                    let v = encode_news_graph(g, tables, news_params, history[slot])?;
                    rows.push(g.reshape(v, vec![1, d])?);
                    news_mask.push(true);
                } else {
                    rows.push(g.zeros(vec![1, d]));
                    news_mask.push(false);
                }
            }
            let stacked = g.concat_rows(&rows)?;
            coarse_user_encode(g, coarse, stacked, &news_mask)?
        }
    };

    let u = g.add(u_fine, u_coarse)?;
    Ok((u, u_fine, u_coarse))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GenreText;

    fn news(id: &str, k: usize, l: usize, first_tokens: &[u32]) -> NewsRecord {
        let mut genres = Vec::new();
        for gi in 0..k {
            if gi == 0 {
                let mut ids = vec![0u32; l];
                let mut mask = vec![false; l];
                for (i, &t) in first_tokens.iter().take(l).enumerate() {
                    ids[i] = t;
                    mask[i] = true;
                }
                genres.push(GenreText { ids, mask });
            } else {
                genres.push(GenreText::empty(l));
            }
        }
        NewsRecord {
            news_id: id.into(),
            genres,
        }
    }

    #[test]
    fn layout_matches_offset_arithmetic() {
        // m=2, k=2, l=3: the second news' first genre occupies offsets 6..9.
        let n1 = news("N1", 2, 3, &[2, 3]);
        let n2 = news("N2", 2, 3, &[4, 5, 6]);
        let seq = build_behavior_sequence(&[&n1, &n2], 2, 2, 3).unwrap();
        assert_eq!(seq.news_range(1), 6..12);
        assert_eq!(&seq.word_ids[6..9], &[4, 5, 6]);
        assert_eq!(&seq.mask[6..9], &[true, true, true]);
        // n1 genre 2 block is empty
        assert_eq!(&seq.mask[3..6], &[false, false, false]);
        assert_eq!(seq.news_mask(), vec![true, true]);
    }

    #[test]
    fn short_history_pads_with_masked_slots() {
        // m=2, k=1, l=2, one news with both tokens real: mask (T,T,F,F).
        let n1 = news("N1", 1, 2, &[2, 3]);
        let seq = build_behavior_sequence(&[&n1], 2, 1, 2).unwrap();
        assert_eq!(seq.mask, vec![true, true, false, false]);
        assert_eq!(seq.news_mask(), vec![true, false]);
    }

    #[test]
    fn empty_history_is_fully_masked() {
        let seq = build_behavior_sequence(&[], 3, 2, 2).unwrap();
        assert!(!seq.any_unmasked());
        assert_eq!(seq.seq_len(), 12);
    }

    #[test]
    fn overlong_history_is_rejected() {
        let n = news("N1", 1, 2, &[2]);
        let err = build_behavior_sequence(&[&n, &n, &n], 2, 1, 2);
        assert!(matches!(err, Err(Error::HistoryTooLong { len: 3, m: 2 })));
    }
}
