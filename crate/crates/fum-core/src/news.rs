//! News encoder: per-genre text encoders (self-attention + attention
//! pooling over tokens) aggregated attentively across genres.

use rand::Rng;
use rayon::prelude::*;

use crate::attention::{AttnPool, SelfAttnLayer, SequenceMixer};
use crate::config::TrainConfig;
use crate::data::{GenreText, NewsRecord};
use crate::error::{Error, Result};
use crate::store::{Graph, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Names and dimensions of the shared embedding tables.
#[derive(Debug, Clone)]
pub struct EmbeddingTables {
    pub word: String,
    /// Per-genre offset added to every token embedding, realizing
    /// genre-specific embedding layers over one shared word table.
    pub genre_offset: String,
    pub d: usize,
    pub k: usize,
}

impl EmbeddingTables {
    pub fn new(cfg: &TrainConfig) -> Self {
        EmbeddingTables {
            word: "embed.word".into(),
            genre_offset: "embed.genre_offset".into(),
            d: cfg.d,
            k: cfg.k,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GenreEncoder {
    pub attn: SelfAttnLayer,
    pub pool: AttnPool,
}

/// Per-genre text encoders plus the genre aggregator.
#[derive(Debug, Clone)]
pub struct NewsEncoderParams {
    pub genres: Vec<GenreEncoder>,
    pub aggregator: AttnPool,
    d_model: usize,
}

impl NewsEncoderParams {
    pub fn new(cfg: &TrainConfig) -> Self {
        let d_model = cfg.d_model();
        let genres = (0..cfg.k)
            .map(|i| GenreEncoder {
                attn: SelfAttnLayer::new(&format!("news.genre{i}.attn"), cfg.d, cfg.heads, cfg.head_dim),
                pool: AttnPool::new(
                    &format!("news.genre{i}.pool"),
                    cfg.pool_scoring,
                    d_model,
                    cfg.d_att,
                ),
            })
            .collect();
        NewsEncoderParams {
            genres,
            aggregator: AttnPool::new("news.agg", cfg.pool_scoring, d_model, cfg.d_att),
            d_model,
        }
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for genre in &self.genres {
            genre.attn.register(store, rng)?;
            genre.pool.register(store, rng)?;
        }
        self.aggregator.register(store, rng)
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }
}

/// Encodes one genre's token sequence into a genre-specific news
/// embedding. An all-padding genre yields the zero vector.
pub fn encode_genre_text(
    g: &mut Graph,
    tables: &EmbeddingTables,
    params: &NewsEncoderParams,
    genre: usize,
    text: &GenreText,
) -> Result<Var> {
    if genre >= params.genres.len() {
        return Err(Error::GenreIndex {
            index: genre,
            k: params.genres.len(),
        });
    }
    if text.is_empty() {
        return Ok(g.zeros(vec![params.d_model]));
    }
    let word = g.param(&tables.word)?;
    let ids: Vec<usize> = text.ids.iter().map(|&i| i as usize).collect();
    let embedded = g.gather_rows(word, &ids)?;
    let offsets = g.param(&tables.genre_offset)?;
    let offset = g.slice_rows(offsets, genre, 1)?;
    let offset = g.reshape(offset, vec![tables.d])?;
    let embedded = g.add_row_broadcast(embedded, offset)?;
    let enc = &params.genres[genre];
    let mixed = enc.attn.mix(g, embedded, &text.mask)?;
    enc.pool.pool(g, mixed, &text.mask)
}

/// Builds the news embedding by pooling genre embeddings, masking genres
/// whose text is entirely padding. Rejects articles with no text at all.
pub fn encode_news_graph(
    g: &mut Graph,
    tables: &EmbeddingTables,
    params: &NewsEncoderParams,
    record: &NewsRecord,
) -> Result<Var> {
    if record.genres.len() != params.genres.len() {
        return Err(Error::ShapeMismatch {
            op: "encode_news",
            lhs: vec![record.genres.len()],
            rhs: vec![params.genres.len()],
        });
    }
    if record.all_empty() {
        return Err(Error::EmptyArticle(record.news_id.clone()));
    }
    let d = params.d_model;
    let mut rows = Vec::with_capacity(record.genres.len());
    let mut genre_mask = Vec::with_capacity(record.genres.len());
    for (i, text) in record.genres.iter().enumerate() {
        let row = if text.is_empty() {
            genre_mask.push(false);
            g.zeros(vec![1, d])
        } else {
            genre_mask.push(true);
            let t = encode_genre_text(g, tables, params, i, text)?;
            g.reshape(t, vec![1, d])?
        };
        rows.push(row);
    }
    let stacked = g.concat_rows(&rows)?;
    params.aggregator.pool(g, stacked, &genre_mask)
}

/// A news article's embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedNews {
    pub news_id: String,
    pub vector: Tensor,
}

/// Frozen-parameter encoding of one article.
pub fn encode_news(
    store: &ParamStore,
    tables: &EmbeddingTables,
    params: &NewsEncoderParams,
    record: &NewsRecord,
) -> Result<EncodedNews> {
    let mut g = Graph::frozen(store);
    let v = encode_news_graph(&mut g, tables, params, record).map_err(|e| Error::NewsEncode {
        id: record.news_id.clone(),
        source: Box::new(e),
    })?;
    Ok(EncodedNews {
        news_id: record.news_id.clone(),
        vector: g.to_tensor(v),
    })
}

/// Order-preserving parallel encoding; the first failing article reports
/// its id.
pub fn encode_news_batch(
    store: &ParamStore,
    tables: &EmbeddingTables,
    params: &NewsEncoderParams,
    records: &[NewsRecord],
) -> Result<Vec<EncodedNews>> {
    records
        .par_iter()
        .map(|record| encode_news(store, tables, params, record))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vocabulary;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            m: 2,
            k: 2,
            l: 3,
            d: 4,
            d_genre: 2,
            d_pos: 2,
            heads: 2,
            head_dim: 3,
            d_att: 5,
            ..TrainConfig::default()
        }
    }

    fn setup(cfg: &TrainConfig, vocab_size: usize) -> (EmbeddingTables, NewsEncoderParams, ParamStore) {
        let tables = EmbeddingTables::new(cfg);
        let params = NewsEncoderParams::new(cfg);
        let mut store = ParamStore::new(3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        store
            .insert(&tables.word, crate::store::glorot_matrix(vocab_size, cfg.d, &mut rng))
            .unwrap();
        store
            .insert(&tables.genre_offset, Tensor::zeros(vec![cfg.k, cfg.d]))
            .unwrap();
        params.register(&mut store, &mut rng).unwrap();
        (tables, params, store)
    }

    fn record(id: &str, genres: Vec<GenreText>) -> NewsRecord {
        NewsRecord {
            news_id: id.into(),
            genres,
        }
    }

    #[test]
    fn all_padding_genre_encodes_to_zero() {
        let cfg = toy_cfg();
        let (tables, params, store) = setup(&cfg, 10);
        let mut g = Graph::frozen(&store);
        let out = encode_genre_text(&mut g, &tables, &params, 0, &GenreText::empty(3)).unwrap();
        assert_eq!(g.values(out), &[0.0; 6]);
    }

    #[test]
    fn genre_index_out_of_range_is_rejected() {
        let cfg = toy_cfg();
        let (tables, params, store) = setup(&cfg, 10);
        let mut g = Graph::frozen(&store);
        let text = GenreText {
            ids: vec![2, 0, 0],
            mask: vec![true, false, false],
        };
        assert!(matches!(
            encode_genre_text(&mut g, &tables, &params, 5, &text),
            Err(Error::GenreIndex { index: 5, k: 2 })
        ));
    }

    #[test]
    fn empty_article_is_rejected() {
        let cfg = toy_cfg();
        let (tables, params, store) = setup(&cfg, 10);
        let mut g = Graph::frozen(&store);
        let rec = record("N9", vec![GenreText::empty(3), GenreText::empty(3)]);
        assert!(matches!(
            encode_news_graph(&mut g, &tables, &params, &rec),
            Err(Error::EmptyArticle(_))
        ));
    }

    #[test]
    fn single_genre_news_equals_its_genre_embedding() {
        let cfg = TrainConfig { k: 1, ..toy_cfg() };
        let (tables, params, store) = setup(&cfg, 10);
        let text = GenreText {
            ids: vec![2, 3, 0],
            mask: vec![true, true, false],
        };
        let mut g = Graph::frozen(&store);
        let genre_vec = encode_genre_text(&mut g, &tables, &params, 0, &text).unwrap();
        let news_vec =
            encode_news_graph(&mut g, &tables, &params, &record("N1", vec![text.clone()])).unwrap();
        for (a, b) in g.values(genre_vec).iter().zip(g.values(news_vec)) {
            assert_relative_eq!(*a, *b, max_relative = 1e-12);
        }
    }

    #[test]
    fn adding_empty_genre_changes_nothing() {
        // k = 2 with the second genre empty pools only the first row.
        let cfg = toy_cfg();
        let (tables, params, store) = setup(&cfg, 10);
        let text = GenreText {
            ids: vec![2, 3, 4],
            mask: vec![true, true, true],
        };
        let mut g = Graph::frozen(&store);
        let only = encode_genre_text(&mut g, &tables, &params, 0, &text).unwrap();
        let with_empty = encode_news_graph(
            &mut g,
            &tables,
            &params,
            &record("N1", vec![text.clone(), GenreText::empty(3)]),
        )
        .unwrap();
        for (a, b) in g.values(only).iter().zip(g.values(with_empty)) {
            assert_relative_eq!(*a, *b, max_relative = 1e-12);
        }
    }

    #[test]
    fn token_permutation_leaves_news_embedding_unchanged() {
        // No positional signal inside the news encoder, so swapping two
        // title tokens is invisible.
        let cfg = toy_cfg();
        let (tables, params, store) = setup(&cfg, 10);
        let a = record(
            "N1",
            vec![
                GenreText { ids: vec![2, 3, 4], mask: vec![true; 3] },
                GenreText::empty(3),
            ],
        );
        let b = record(
            "N1",
            vec![
                GenreText { ids: vec![4, 2, 3], mask: vec![true; 3] },
                GenreText::empty(3),
            ],
        );
        let va = encode_news(&store, &tables, &params, &a).unwrap();
        let vb = encode_news(&store, &tables, &params, &b).unwrap();
        for (x, y) in va.vector.values().iter().zip(vb.vector.values()) {
            assert_relative_eq!(*x, *y, max_relative = 1e-10);
        }
    }

    #[test]
    fn batch_encoding_matches_per_item_and_preserves_order() {
        let cfg = toy_cfg();
        let (tables, params, store) = setup(&cfg, 10);
        let records: Vec<NewsRecord> = (0..5)
            .map(|i| {
                record(
                    &format!("N{i}"),
                    vec![
                        GenreText {
                            ids: vec![2 + i as u32, 3, 0],
                            mask: vec![true, true, false],
                        },
                        GenreText::empty(3),
                    ],
                )
            })
            .collect();
        assert!(encode_news_batch(&store, &tables, &params, &[]).unwrap().is_empty());
        let batch = encode_news_batch(&store, &tables, &params, &records).unwrap();
        for (i, item) in batch.iter().enumerate() {
            assert_eq!(item.news_id, records[i].news_id);
            let single = encode_news(&store, &tables, &params, &records[i]).unwrap();
            assert_eq!(single.vector.values(), item.vector.values());
        }
    }

    #[test]
    fn batch_error_carries_offending_id() {
        let cfg = toy_cfg();
        let (tables, params, store) = setup(&cfg, 10);
        let records = vec![record("BAD", vec![GenreText::empty(3), GenreText::empty(3)])];
        let err = encode_news_batch(&store, &tables, &params, &records)
            .unwrap_err()
            .to_string();
        assert!(err.contains("BAD"), "{err}");
    }

    #[test]
    fn composed_toy_matches_layer_oracles() {
        // 3-token genre encode with k = 1 reduces to self-attention
        // followed by the pooler; both layers already match frozen
        // oracles, so compose them here via the public layer API and
        // compare against the news encoder path.
        let cfg = TrainConfig { k: 1, ..toy_cfg() };
        let (tables, params, store) = setup(&cfg, 10);
        let text = GenreText {
            ids: vec![5, 2, 7],
            mask: vec![true, true, true],
        };
        let mut g = Graph::frozen(&store);
        let word = g.param(&tables.word).unwrap();
        let x = g.gather_rows(word, &[5, 2, 7]).unwrap();
        let offsets = g.param(&tables.genre_offset).unwrap();
        let off = g.slice_rows(offsets, 0, 1).unwrap();
        let off = g.reshape(off, vec![cfg.d]).unwrap();
        let x = g.add_row_broadcast(x, off).unwrap();
        let mixed = params.genres[0].attn.mix(&mut g, x, &text.mask).unwrap();
        let expected = params.genres[0].pool.pool(&mut g, mixed, &text.mask).unwrap();
        let got = encode_genre_text(&mut g, &tables, &params, 0, &text).unwrap();
        assert_eq!(g.values(expected), g.values(got));
    }

    #[test]
    fn vocabulary_roundtrip_smoke() {
        let vocab = Vocabulary::build(["one two three"].iter().copied(), 1);
        assert_eq!(vocab.len(), 5);
    }
}
