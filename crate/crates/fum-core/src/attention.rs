//! Sequence mixers and attention pooling.
//!
//! Two mixers sit behind the [`SequenceMixer`] interface: an additive
//! (linear-cost) attention layer that summarizes global query/key
//! contexts and modulates each token with them, and standard scaled
//! dot-product multi-head self-attention (quadratic cost). Pooling over
//! rows uses softmax weights from a learned scorer.

use rand::Rng;

use crate::error::{Error, Result};
use crate::store::{glorot_matrix, zeros_vector, Graph, ParamStore};
use crate::tape::Var;
use crate::tensor::Real;

/// How attention scores are produced from a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttnScoring {
    /// w . x / sqrt(dim) with a learned vector w.
    LearnedVector,
    /// v2 . tanh(W1 x + b1), a one-hidden-layer MLP.
    #[default]
    TanhMlp,
}

impl std::str::FromStr for AttnScoring {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "learned_vector" => Ok(AttnScoring::LearnedVector),
            "tanh_mlp" => Ok(AttnScoring::TanhMlp),
            other => Err(format!("expected learned_vector or tanh_mlp, got `{other}`")),
        }
    }
}

impl std::fmt::Display for AttnScoring {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttnScoring::LearnedVector => write!(f, "learned_vector"),
            AttnScoring::TanhMlp => write!(f, "tanh_mlp"),
        }
    }
}

/// Layout of one attention scorer's parameters in the store.
#[derive(Debug, Clone)]
pub struct Scorer {
    kind: AttnScoring,
    d_in: usize,
    d_att: usize,
    w_name: String,
    w1_name: String,
    b1_name: String,
    v2_name: String,
}

impl Scorer {
    pub fn new(prefix: &str, kind: AttnScoring, d_in: usize, d_att: usize) -> Self {
        Scorer {
            kind,
            d_in,
            d_att,
            w_name: format!("{prefix}.w"),
            w1_name: format!("{prefix}.w1"),
            b1_name: format!("{prefix}.b1"),
            v2_name: format!("{prefix}.v2"),
        }
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        match self.kind {
            AttnScoring::LearnedVector => {
                // Score vectors start at zero: uniform attention at init.
                store.insert(&self.w_name, zeros_vector(self.d_in))?;
            }
            AttnScoring::TanhMlp => {
                store.insert(&self.w1_name, glorot_matrix(self.d_in, self.d_att, rng))?;
                store.insert(&self.b1_name, zeros_vector(self.d_att))?;
                store.insert(&self.v2_name, zeros_vector(self.d_att))?;
            }
        }
        Ok(())
    }

    /// Scores every row of `x` ([n, d_in]) into an [n] vector.
    pub fn scores(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let n = g.shape(x)[0];
        match self.kind {
            AttnScoring::LearnedVector => {
                let w = self.param_col(g, &self.w_name, self.d_in)?;
                let s = g.matmul(x, w)?;
                let s = g.reshape(s, vec![n])?;
                Ok(g.scale(s, 1.0 / (self.d_in as Real).sqrt()))
            }
            AttnScoring::TanhMlp => {
                let w1 = g.param(&self.w1_name)?;
                let b1 = g.param(&self.b1_name)?;
                let v2 = self.param_col(g, &self.v2_name, self.d_att)?;
                let hidden = g.matmul(x, w1)?;
                let hidden = g.add_row_broadcast(hidden, b1)?;
                let hidden = g.tanh(hidden);
                let s = g.matmul(hidden, v2)?;
                g.reshape(s, vec![n])
            }
        }
    }

    fn param_col(&self, g: &mut Graph, name: &str, dim: usize) -> Result<Var> {
        let v = g.param(name)?;
        g.reshape(v, vec![dim, 1])
    }

    /// Multiply-accumulate count for scoring n rows.
    pub fn flops(&self, n: u64) -> u64 {
        match self.kind {
            AttnScoring::LearnedVector => n * self.d_in as u64 + n,
            AttnScoring::TanhMlp => n * (self.d_in * self.d_att) as u64 + n * self.d_att as u64,
        }
    }
}

/// Attention pooling: a softmax-weighted sum of rows. With the default
/// tanh-MLP scorer this carries the W1 / b1 / v2 parameter triple.
#[derive(Debug, Clone)]
pub struct AttnPool {
    d_in: usize,
    scorer: Scorer,
}

impl AttnPool {
    pub fn new(prefix: &str, kind: AttnScoring, d_in: usize, d_att: usize) -> Self {
        AttnPool {
            d_in,
            scorer: Scorer::new(prefix, kind, d_in, d_att),
        }
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        self.scorer.register(store, rng)
    }

    pub fn d_in(&self) -> usize {
        self.d_in
    }

    /// Pools [n, d_in] rows into a [d_in] vector. Rejects an all-masked
    /// input; callers handle empty sequences upstream.
    pub fn pool(&self, g: &mut Graph, x: Var, mask: &[bool]) -> Result<Var> {
        let scores = self.scorer.scores(g, x)?;
        let weights = g.softmax_masked(scores, mask)?;
        g.masked_weighted_sum(weights, x, mask)
    }

    pub fn flops(&self, n: u64) -> u64 {
        self.scorer.flops(n) + n * self.d_in as u64
    }
}

/// One additive-attention head: projects tokens to queries, keys and
/// values, pools a global query, modulates keys with it, pools a global
/// key, and modulates values with that.
#[derive(Debug, Clone)]
pub struct FastformerHead {
    d_in: usize,
    d_h: usize,
    wq: String,
    wk: String,
    wv: String,
    wo: String,
    alpha: Scorer,
    beta: Scorer,
    residual: bool,
}

impl FastformerHead {
    pub fn new(prefix: &str, d_in: usize, d_h: usize, scoring: AttnScoring, residual: bool) -> Self {
        let (alpha_prefix, beta_prefix) = match scoring {
            AttnScoring::LearnedVector => (format!("{prefix}.w_alpha"), format!("{prefix}.w_beta")),
            AttnScoring::TanhMlp => (format!("{prefix}.alpha"), format!("{prefix}.beta")),
        };
        FastformerHead {
            d_in,
            d_h,
            wq: format!("{prefix}.wq"),
            wk: format!("{prefix}.wk"),
            wv: format!("{prefix}.wv"),
            wo: format!("{prefix}.wo"),
            alpha: Scorer::new(&alpha_prefix, scoring, d_h, d_h),
            beta: Scorer::new(&beta_prefix, scoring, d_h, d_h),
            residual,
        }
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        store.insert(&self.wq, glorot_matrix(self.d_in, self.d_h, rng))?;
        store.insert(&self.wk, glorot_matrix(self.d_in, self.d_h, rng))?;
        store.insert(&self.wv, glorot_matrix(self.d_in, self.d_h, rng))?;
        store.insert(&self.wo, glorot_matrix(self.d_h, self.d_h, rng))?;
        self.alpha.register(store, rng)?;
        self.beta.register(store, rng)
    }

    /// Output rows at masked positions are unspecified here; the layer
    /// zeroes them after head concatenation.
    fn forward(&self, g: &mut Graph, h: Var, mask: &[bool]) -> Result<Var> {
        let wq = g.param(&self.wq)?;
        let q_proj = g.matmul(h, wq)?;
        let alpha_scores = self.alpha.scores(g, q_proj)?;
        let alpha = g.softmax_masked(alpha_scores, mask)?;
        let q_global = g.masked_weighted_sum(alpha, q_proj, mask)?;

        let wk = g.param(&self.wk)?;
        let k_proj = g.matmul(h, wk)?;
        let p = g.mul_row_broadcast(k_proj, q_global)?;
        let beta_scores = self.beta.scores(g, p)?;
        let beta = g.softmax_masked(beta_scores, mask)?;
        let k_global = g.masked_weighted_sum(beta, p, mask)?;

        let wv = g.param(&self.wv)?;
        let v_proj = g.matmul(h, wv)?;
        let modulated = g.mul_row_broadcast(v_proj, k_global)?;
        let wo = g.param(&self.wo)?;
        let out = g.matmul(modulated, wo)?;
        if self.residual {
            g.add(out, q_proj)
        } else {
            Ok(out)
        }
    }

    fn flops(&self, len: u64) -> u64 {
        let (d_in, d_h) = (self.d_in as u64, self.d_h as u64);
        3 * len * d_in * d_h            // query/key/value projections
            + self.alpha.flops(len)
            + self.beta.flops(len)
            + 4 * len * d_h             // two pools, two modulations
            + len * d_h * d_h           // output transform
    }
}

/// A stack of additive-attention heads concatenated along features.
#[derive(Debug, Clone)]
pub struct FastformerLayer {
    heads: Vec<FastformerHead>,
    d_in: usize,
    d_h: usize,
}

impl FastformerLayer {
    pub fn new(
        prefix: &str,
        d_in: usize,
        heads: usize,
        d_h: usize,
        scoring: AttnScoring,
        residual: bool,
    ) -> Self {
        let heads = (0..heads)
            .map(|i| FastformerHead::new(&format!("{prefix}.head{i}"), d_in, d_h, scoring, residual))
            .collect();
        FastformerLayer { heads, d_in, d_h }
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        for head in &self.heads {
            head.register(store, rng)?;
        }
        Ok(())
    }
}

/// Standard scaled dot-product multi-head self-attention with an output
/// projection. Masked columns never receive attention weight; masked rows
/// come out zero.
#[derive(Debug, Clone)]
pub struct SelfAttnLayer {
    d_in: usize,
    d_h: usize,
    wq: Vec<String>,
    wk: Vec<String>,
    wv: Vec<String>,
    wo: String,
}

impl SelfAttnLayer {
    pub fn new(prefix: &str, d_in: usize, heads: usize, d_h: usize) -> Self {
        SelfAttnLayer {
            d_in,
            d_h,
            wq: (0..heads).map(|i| format!("{prefix}.head{i}.wq")).collect(),
            wk: (0..heads).map(|i| format!("{prefix}.head{i}.wk")).collect(),
            wv: (0..heads).map(|i| format!("{prefix}.head{i}.wv")).collect(),
            wo: format!("{prefix}.wo"),
        }
    }

    pub fn register<R: Rng>(&self, store: &mut ParamStore, rng: &mut R) -> Result<()> {
        let d_out = self.d_h * self.wq.len();
        for i in 0..self.wq.len() {
            store.insert(&self.wq[i], glorot_matrix(self.d_in, self.d_h, rng))?;
            store.insert(&self.wk[i], glorot_matrix(self.d_in, self.d_h, rng))?;
            store.insert(&self.wv[i], glorot_matrix(self.d_in, self.d_h, rng))?;
        }
        store.insert(&self.wo, glorot_matrix(d_out, d_out, rng))?;
        Ok(())
    }
}

/// A sequence-to-sequence layer: output length equals input length and
/// masked positions neither influence unmasked outputs nor carry any.
/// Additional backends can slot in behind this interface.
pub trait SequenceMixer {
    fn mix(&self, g: &mut Graph, x: Var, mask: &[bool]) -> Result<Var>;
    /// Exact multiply-accumulate count of one forward pass at length `len`
    /// (matrix products, score dots, weighted sums, elementwise
    /// modulations and scalings; transcendental calls are not counted).
    fn flop_count(&self, len: usize) -> u64;
    fn d_in(&self) -> usize;
    fn d_out(&self) -> usize;
    fn name(&self) -> &'static str;
}

impl SequenceMixer for FastformerLayer {
    fn mix(&self, g: &mut Graph, x: Var, mask: &[bool]) -> Result<Var> {
        if g.shape(x) != [mask.len(), self.d_in] {
            return Err(Error::ShapeMismatch {
                op: "fastformer",
                lhs: g.shape(x).to_vec(),
                rhs: vec![mask.len(), self.d_in],
            });
        }
        let outs: Result<Vec<Var>> = self
            .heads
            .iter()
            .map(|head| head.forward(g, x, mask))
            .collect();
        let cat = g.concat_cols(&outs?)?;
        g.mask_rows(cat, mask)
    }

    fn flop_count(&self, len: usize) -> u64 {
        self.heads.iter().map(|h| h.flops(len as u64)).sum()
    }

    fn d_in(&self) -> usize {
        self.d_in
    }

    fn d_out(&self) -> usize {
        self.d_h * self.heads.len()
    }

    fn name(&self) -> &'static str {
        "fastformer"
    }
}

impl SequenceMixer for SelfAttnLayer {
    fn mix(&self, g: &mut Graph, x: Var, mask: &[bool]) -> Result<Var> {
        if g.shape(x) != [mask.len(), self.d_in] {
            return Err(Error::ShapeMismatch {
                op: "self_attention",
                lhs: g.shape(x).to_vec(),
                rhs: vec![mask.len(), self.d_in],
            });
        }
        let scale = 1.0 / (self.d_h as Real).sqrt();
        let mut outs = Vec::with_capacity(self.wq.len());
        for i in 0..self.wq.len() {
            let wq = g.param(&self.wq[i])?;
            let wk = g.param(&self.wk[i])?;
            let wv = g.param(&self.wv[i])?;
            let q = g.matmul(x, wq)?;
            let q = g.scale(q, scale);
            let k = g.matmul(x, wk)?;
            let v = g.matmul(x, wv)?;
            // Zeroing masked value rows keeps unmasked outputs bit-exact
            // under changes to masked inputs; their weights are already 0.
            let v = g.mask_rows(v, mask)?;
            let kt = g.transpose(k)?;
            let scores = g.matmul(q, kt)?;
            let attn = g.softmax_masked_rows(scores, mask)?;
            outs.push(g.matmul(attn, v)?);
        }
        let cat = g.concat_cols(&outs)?;
        let wo = g.param(&self.wo)?;
        let projected = g.matmul(cat, wo)?;
        g.mask_rows(projected, mask)
    }

    fn flop_count(&self, len: usize) -> u64 {
        let len = len as u64;
        let (d_in, d_h) = (self.d_in as u64, self.d_h as u64);
        let heads = self.wq.len() as u64;
        let d_out = d_h * heads;
        heads * (3 * len * d_in * d_h + len * d_h + 2 * len * len * d_h) + len * d_out * d_out
    }

    fn d_in(&self) -> usize {
        self.d_in
    }

    fn d_out(&self) -> usize {
        self.d_h * self.wq.len()
    }

    fn name(&self) -> &'static str {
        "self_attention"
    }
}
