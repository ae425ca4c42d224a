//! Dataset ingestion: MIND-format news and behavior files, tokenization,
//! vocabulary construction and pretrained word vectors.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::store::glorot_matrix;
use crate::tensor::{Real, Tensor};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Lowercases and splits into maximal runs of alphanumeric characters;
/// everything else separates.
pub fn tokenize(text: &str) -> Vec<String> {
    let lower = text.to_lowercase();
    let mut out = Vec::new();
    let mut current = String::new();
    for ch in lower.chars() {
        if ch.is_alphanumeric() {
            current.push(ch);
        } else if !current.is_empty() {
            out.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        out.push(current);
    }
    out
}

/// Token-to-id map. Id 0 is padding, id 1 is the unknown token; real
/// tokens get ids 2.. in first-occurrence order over the corpus, skipping
/// tokens below the frequency threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    tokens: Vec<String>,
    pub min_freq: usize,
}

impl Vocabulary {
    pub fn build<'a, I>(docs: I, min_freq: usize) -> Self
    where
        I: Iterator<Item = &'a str> + Clone,
    {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for doc in docs.clone() {
            for tok in tokenize(doc) {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut token_to_id = HashMap::new();
        let mut tokens = Vec::new();
        for doc in docs {
            for tok in tokenize(doc) {
                if counts[&tok] >= min_freq && !token_to_id.contains_key(&tok) {
                    token_to_id.insert(tok.clone(), (tokens.len() + 2) as u32);
                    tokens.push(tok);
                }
            }
        }
        Vocabulary {
            token_to_id,
            tokens,
            min_freq,
        }
    }

    pub fn id_of(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// Total id space including padding and unknown.
    pub fn len(&self) -> usize {
        self.tokens.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Number of real tokens (ids >= 2).
    pub fn token_count(&self) -> usize {
        self.tokens.len()
    }
}

/// One genre's token sequence, padded or truncated to length l.
#[derive(Debug, Clone, PartialEq)]
pub struct GenreText {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl GenreText {
    pub fn from_tokens(tokens: &[String], vocab: &Vocabulary, l: usize) -> Self {
        let mut ids = vec![PAD_ID; l];
        let mut mask = vec![false; l];
        for (i, tok) in tokens.iter().take(l).enumerate() {
            ids[i] = vocab.id_of(tok);
            mask[i] = true;
        }
        GenreText { ids, mask }
    }

    pub fn empty(l: usize) -> Self {
        GenreText {
            ids: vec![PAD_ID; l],
            mask: vec![false; l],
        }
    }

    pub fn is_empty(&self) -> bool {
        !self.mask.iter().any(|&m| m)
    }
}

/// A news article as k genre token sequences (title, abstract, topic
/// labels, entity text, in that order).
#[derive(Debug, Clone, PartialEq)]
pub struct NewsRecord {
    pub news_id: String,
    pub genres: Vec<GenreText>,
}

impl NewsRecord {
    pub fn all_empty(&self) -> bool {
        self.genres.iter().all(|g| g.is_empty())
    }
}

#[derive(Debug, Clone, Default)]
pub struct NewsTable {
    pub records: Vec<NewsRecord>,
    index: HashMap<String, usize>,
    /// Entity columns that failed to parse (genre 4 left empty).
    pub entity_warnings: usize,
}

impl NewsTable {
    pub fn push(&mut self, record: NewsRecord) -> bool {
        if self.index.contains_key(&record.news_id) {
            return false;
        }
        self.index.insert(record.news_id.clone(), self.records.len());
        self.records.push(record);
        true
    }

    pub fn get(&self, id: &str, context: &str) -> Result<&NewsRecord> {
        self.index
            .get(id)
            .map(|&i| &self.records[i])
            .ok_or_else(|| Error::UnknownNewsId {
                id: id.to_string(),
                context: context.to_string(),
            })
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Raw genre texts of one news line, before tokenization.
#[derive(Debug, Clone)]
pub struct RawNews {
    pub news_id: String,
    /// title, abstract, category + subcategory, entity labels
    pub texts: [String; 4],
}

fn entity_labels(column: &str) -> Option<String> {
    let trimmed = column.trim();
    if trimmed.is_empty() || trimmed == "[]" {
        return Some(String::new());
    }
    let value: serde_json::Value = serde_json::from_str(trimmed).ok()?;
    let items = value.as_array()?;
    let mut labels = Vec::new();
    for item in items {
        labels.push(item.get("Label")?.as_str()?.to_string());
    }
    Some(labels.join(" "))
}

/// Reads the 8-column news TSV: id, category, subcategory, title,
/// abstract, url, title entities, abstract entities.
pub fn read_news_raw(path: &Path) -> Result<(Vec<RawNews>, usize)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut rows = Vec::new();
    let mut warnings = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 8 {
            return Err(Error::DataFormat {
                path: path.display().to_string(),
                line: lineno + 1,
                what: format!("expected 8 tab-separated columns, found {}", cols.len()),
            });
        }
        let mut entity_text = String::new();
        for col in [cols[6], cols[7]] {
            match entity_labels(col) {
                Some(labels) => {
                    if !labels.is_empty() {
                        if !entity_text.is_empty() {
                            entity_text.push(' ');
                        }
                        entity_text.push_str(&labels);
                    }
                }
                None => warnings += 1,
            }
        }
        rows.push(RawNews {
            news_id: cols[0].to_string(),
            texts: [
                cols[3].to_string(),
                cols[4].to_string(),
                format!("{} {}", cols[1], cols[2]),
                entity_text,
            ],
        });
    }
    Ok((rows, warnings))
}

/// Parses a news TSV into token-id records with the first k genres.
pub fn parse_news_tsv(path: &Path, vocab: &Vocabulary, k: usize, l: usize) -> Result<NewsTable> {
    let (rows, warnings) = read_news_raw(path)?;
    let mut table = NewsTable {
        entity_warnings: warnings,
        ..NewsTable::default()
    };
    for raw in rows {
        let genres = raw.texts[..k]
            .iter()
            .map(|text| GenreText::from_tokens(&tokenize(text), vocab, l))
            .collect();
        table.push(NewsRecord {
            news_id: raw.news_id,
            genres,
        });
    }
    Ok(table)
}

/// One logged page view: the user's click history and the shown
/// candidates with click labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImpressionSample {
    pub impression_id: String,
    pub user_id: String,
    /// Most recent last.
    pub history: Vec<String>,
    pub candidates: Vec<(String, bool)>,
}

/// Parses the 5-column behaviors TSV: impression id, user id, time,
/// space-separated history, space-separated `newsId-label` candidates.
pub fn parse_behaviors_tsv(path: &Path) -> Result<Vec<ImpressionSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(Error::DataFormat {
                path: path.display().to_string(),
                line: lineno + 1,
                what: format!("expected 5 tab-separated columns, found {}", cols.len()),
            });
        }
        let history: Vec<String> = cols[3].split_whitespace().map(String::from).collect();
        let mut candidates = Vec::new();
        for token in cols[4].split_whitespace() {
            let clicked = match token.rsplit_once('-') {
                Some((id, "1")) if !id.is_empty() => (id.to_string(), true),
                Some((id, "0")) if !id.is_empty() => (id.to_string(), false),
                _ => {
                    return Err(Error::DataFormat {
                        path: path.display().to_string(),
                        line: lineno + 1,
                        what: format!("malformed candidate token `{token}`"),
                    })
                }
            };
            candidates.push(clicked);
        }
        if candidates.is_empty() {
            return Err(Error::DataFormat {
                path: path.display().to_string(),
                line: lineno + 1,
                what: "impression has no candidates".into(),
            });
        }
        out.push(ImpressionSample {
            impression_id: cols[0].to_string(),
            user_id: cols[1].to_string(),
            history,
            candidates,
        });
    }
    Ok(out)
}

/// Keeps the most recent `m` entries of a history (the tail).
pub fn recent_history<T>(history: &[T], m: usize) -> &[T] {
    &history[history.len().saturating_sub(m)..]
}

/// Loads a word table from a text file of `token v1 .. vd` lines.
/// Vocabulary rows present in the file take the file values; everything
/// else keeps the random initialization. Returns the table and the
/// fraction of real vocabulary tokens covered.
pub fn load_pretrained_vectors<R: Rng>(
    path: &Path,
    vocab: &Vocabulary,
    d: usize,
    rng: &mut R,
) -> Result<(Tensor, Real)> {
    let mut table = glorot_matrix(vocab.len(), d, rng);
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let mut hits = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: std::result::Result<Vec<f64>, _> = parts.map(|p| p.parse::<f64>()).collect();
        let values = values.map_err(|e| Error::DataFormat {
            path: path.display().to_string(),
            line: lineno + 1,
            what: format!("bad vector component: {e}"),
        })?;
        if values.len() != d {
            return Err(Error::DataFormat {
                path: path.display().to_string(),
                line: lineno + 1,
                what: format!("expected {d} components, found {}", values.len()),
            });
        }
        if vocab.contains(token) {
            let id = vocab.id_of(token) as usize;
            let row = &mut table.values_mut()[id * d..(id + 1) * d];
            for (slot, v) in row.iter_mut().zip(&values) {
                *slot = *v as Real;
            }
            hits += 1;
        }
    }
    let ratio = if vocab.token_count() == 0 {
        0.0
    } else {
        hits as Real / vocab.token_count() as Real
    };
    Ok((table, ratio))
}

/// A loaded train/eval split sharing one news table and vocabulary.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub news: NewsTable,
    pub train: Vec<ImpressionSample>,
    pub eval: Vec<ImpressionSample>,
    pub vocab: Vocabulary,
    pub word_init: Option<Tensor>,
    pub pretrained_hit_ratio: Option<Real>,
}

impl DatasetBundle {
    /// Checks that every referenced news id resolves.
    pub fn validate(&self) -> Result<()> {
        for (split, impressions) in [("train", &self.train), ("eval", &self.eval)] {
            for imp in impressions {
                let ctx = format!("{split} impression {}", imp.impression_id);
                for id in &imp.history {
                    self.news.get(id, &ctx)?;
                }
                for (id, _) in &imp.candidates {
                    self.news.get(id, &ctx)?;
                }
            }
        }
        Ok(())
    }
}

/// Loads `<dir>/train/{news.tsv,behaviors.tsv}` and
/// `<dir>/eval/{news.tsv,behaviors.tsv}`. The vocabulary comes from the
/// training split's news only.
pub fn load_dataset(dir: &Path, cfg: &TrainConfig, pretrained: Option<&Path>) -> Result<DatasetBundle> {
    use rand::SeedableRng;
    let train_news_path = dir.join("train").join("news.tsv");
    let eval_news_path = dir.join("eval").join("news.tsv");
    let (train_raw, _) = read_news_raw(&train_news_path)?;
    let vocab = Vocabulary::build(
        train_raw
            .iter()
            .flat_map(|r| r.texts[..cfg.k].iter().map(|s| s.as_str())),
        cfg.min_token_freq,
    );

    let mut news = parse_news_tsv(&train_news_path, &vocab, cfg.k, cfg.l)?;
    let eval_news = parse_news_tsv(&eval_news_path, &vocab, cfg.k, cfg.l)?;
    for record in eval_news.records {
        news.push(record);
    }
    news.entity_warnings += eval_news.entity_warnings;

    let train = parse_behaviors_tsv(&dir.join("train").join("behaviors.tsv"))?;
    let eval = parse_behaviors_tsv(&dir.join("eval").join("behaviors.tsv"))?;

    let (word_init, hit_ratio) = match pretrained {
        Some(path) => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5045_5452_4149_4e45);
            let (table, ratio) = load_pretrained_vectors(path, &vocab, cfg.d, &mut rng)?;
            (Some(table), Some(ratio))
        }
        None => (None, None),
    };

    let bundle = DatasetBundle {
        news,
        train,
        eval,
        vocab,
        word_init,
        pretrained_hit_ratio: hit_ratio,
    };
    bundle.validate()?;
    Ok(bundle)
}
