//! Full model assembly: shared embeddings, news encoder, fine and coarse
//! user models, parameter initialization and frozen-parameter encoding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Ablation, TrainConfig};
use crate::data::NewsRecord;
use crate::error::{Error, Result};
use crate::news::{encode_news_graph, EmbeddingTables, EncodedNews, NewsEncoderParams};
use crate::store::{glorot_matrix, Graph, ParamStore};
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::user::{encode_user_graph, CoarseUserParams, FineUserParams, UserEmbedding};

#[derive(Debug, Clone)]
pub struct FumModel {
    pub cfg: TrainConfig,
    pub vocab_size: usize,
    pub tables: EmbeddingTables,
    pub news_encoder: NewsEncoderParams,
    pub fine: FineUserParams,
    pub coarse: CoarseUserParams,
}

impl FumModel {
    pub fn new(cfg: &TrainConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        Ok(FumModel {
            cfg: cfg.clone(),
            vocab_size,
            tables: EmbeddingTables::new(cfg),
            news_encoder: NewsEncoderParams::new(cfg),
            fine: FineUserParams::new(cfg),
            coarse: CoarseUserParams::new(cfg),
        })
    }

    /// Registers every parameter. The word table comes from `word_init`
    /// when given (pretrained vectors), otherwise from the shared
    /// initialization scheme. Everything is seeded by the config seed.
    pub fn init_params(&self, word_init: Option<Tensor>) -> Result<ParamStore> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut store = ParamStore::new(self.cfg.seed);
        let word = match word_init {
            Some(t) => {
                if t.shape() != [self.vocab_size, self.cfg.d] {
                    return Err(Error::ShapeMismatch {
                        op: "word table",
                        lhs: t.shape().to_vec(),
                        rhs: vec![self.vocab_size, self.cfg.d],
                    });
                }
                t
            }
            None => glorot_matrix(self.vocab_size, self.cfg.d, &mut rng),
        };
        store.insert(&self.tables.word, word)?;
        // Genre offsets act as additive biases on token embeddings.
        store.insert(
            &self.tables.genre_offset,
            Tensor::zeros(vec![self.cfg.k, self.cfg.d]),
        )?;
        self.news_encoder.register(&mut store, &mut rng)?;
        self.fine.register(&mut store, &mut rng)?;
        self.coarse.register(&mut store, &mut rng)?;
        Ok(store)
    }

    pub fn news_graph(&self, g: &mut Graph, record: &NewsRecord) -> Result<Var> {
        encode_news_graph(g, &self.tables, &self.news_encoder, record)
    }

    pub fn user_graph(
        &self,
        g: &mut Graph,
        history: &[&NewsRecord],
        ablation: Ablation,
    ) -> Result<(Var, Var, Var)> {
        encode_user_graph(
            g,
            &self.tables,
            &self.news_encoder,
            &self.fine,
            &self.coarse,
            history,
            ablation,
        )
    }

    pub fn encode_user(
        &self,
        store: &ParamStore,
        history: &[&NewsRecord],
        ablation: Ablation,
    ) -> Result<UserEmbedding> {
        let mut g = Graph::frozen(store);
        let (u, u_fine, u_coarse) = self.user_graph(&mut g, history, ablation)?;
        Ok(UserEmbedding {
            u_fine: g.to_tensor(u_fine),
            u_coarse: g.to_tensor(u_coarse),
            u: g.to_tensor(u),
        })
    }

    pub fn encode_news(&self, store: &ParamStore, record: &NewsRecord) -> Result<EncodedNews> {
        crate::news::encode_news(store, &self.tables, &self.news_encoder, record)
    }

    pub fn encode_news_batch(
        &self,
        store: &ParamStore,
        records: &[NewsRecord],
    ) -> Result<Vec<EncodedNews>> {
        crate::news::encode_news_batch(store, &self.tables, &self.news_encoder, records)
    }
}
