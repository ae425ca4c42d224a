//! Offline embedding caches: news and user vectors are computed once and
//! stored as 32-bit floats, so online ranking is a dot product per
//! candidate.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::Ablation;
use crate::data::{recent_history, ImpressionSample, NewsTable};
use crate::error::{Error, Result};
use crate::model::FumModel;
use crate::store::ParamStore;
use crate::tensor::Real;

pub const CACHE_MAGIC: &[u8; 9] = b"FUMCACHE1";

/// Id-keyed vectors of one fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<f32>,
    index: HashMap<String, usize>,
}

impl EmbeddingCache {
    pub fn new(dim: usize) -> Self {
        EmbeddingCache {
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.ids.iter().map(|s| s.as_str())
    }

    pub fn insert(&mut self, id: &str, vector: &[f32]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "cache insert",
                lhs: vec![vector.len()],
                rhs: vec![self.dim],
            });
        }
        if self.index.contains_key(id) {
            return Err(Error::DuplicateParam(id.to_string()));
        }
        self.index.insert(id.to_string(), self.ids.len());
        self.ids.push(id.to_string());
        self.vectors.extend_from_slice(vector);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index
            .get(id)
            .map(|&i| &self.vectors[i * self.dim..(i + 1) * self.dim])
    }

    pub fn require(&self, id: &str) -> Result<&[f32]> {
        self.get(id).ok_or_else(|| Error::CacheMiss(id.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::file(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.ids.len() as u64).to_le_bytes())?;
        for (i, id) in self.ids.iter().enumerate() {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            for v in &self.vectors[i * self.dim..(i + 1) * self.dim] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        struct Reader<R> {
            inner: R,
            offset: u64,
        }
        impl<R: Read> Reader<R> {
            fn read(&mut self, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
                let at = self.offset;
                self.inner.read_exact(buf).map_err(|_| Error::BinaryFormat {
                    path: path.display().to_string(),
                    offset: at,
                    what: format!("truncated while reading {what}"),
                })?;
                self.offset += buf.len() as u64;
                Ok(())
            }
        }

        let file = std::fs::File::open(path).map_err(|e| Error::file(path, e))?;
        let mut r = Reader {
            inner: BufReader::new(file),
            offset: 0,
        };
        let mut magic = [0u8; 9];
        r.read(&mut magic, path, "magic")?;
        if &magic != CACHE_MAGIC {
            return Err(Error::BinaryFormat {
                path: path.display().to_string(),
                offset: 0,
                what: "bad magic, not a FUMCACHE1 file".into(),
            });
        }
        let mut dim_buf = [0u8; 4];
        r.read(&mut dim_buf, path, "dimension")?;
        let dim = u32::from_le_bytes(dim_buf) as usize;
        let mut count_buf = [0u8; 8];
        r.read(&mut count_buf, path, "count")?;
        let count = u64::from_le_bytes(count_buf) as usize;
        let mut cache = EmbeddingCache::new(dim);
        for _ in 0..count {
            let mut len_buf = [0u8; 4];
            r.read(&mut len_buf, path, "id length")?;
            let mut id_buf = vec![0u8; u32::from_le_bytes(len_buf) as usize];
            r.read(&mut id_buf, path, "id")?;
            let id = String::from_utf8(id_buf).map_err(|_| Error::BinaryFormat {
                path: path.display().to_string(),
                offset: r.offset,
                what: "id is not UTF-8".into(),
            })?;
            let mut vec_buf = vec![0u8; dim * 4];
            r.read(&mut vec_buf, path, "vector")?;
            let vector: Vec<f32> = vec_buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            cache.insert(&id, &vector).map_err(|e| Error::BinaryFormat {
                path: path.display().to_string(),
                offset: r.offset,
                what: e.to_string(),
            })?;
        }
        Ok(cache)
    }
}

/// Dot product of cached vectors, accumulated in 64-bit.
pub fn cached_score(u: &[f32], n: &[f32]) -> Real {
    u.iter()
        .zip(n)
        .map(|(a, b)| *a as Real * *b as Real)
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedImpression {
    pub impression_id: String,
    /// Candidates sorted by descending cached score, stable on ties.
    pub ranked: Vec<(String, Real)>,
}

/// Ranks every impression's candidates from the caches alone. Any id
/// missing from its cache is an error naming the id.
pub fn rank_from_cache(
    news: &EmbeddingCache,
    users: &EmbeddingCache,
    impressions: &[ImpressionSample],
) -> Result<Vec<RankedImpression>> {
    impressions
        .iter()
        .map(|imp| {
            let u = users.require(&imp.user_id)?;
            let mut ranked: Vec<(String, Real)> = imp
                .candidates
                .iter()
                .map(|(id, _)| Ok((id.clone(), cached_score(u, news.require(id)?))))
                .collect::<Result<_>>()?;
            ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
            Ok(RankedImpression {
                impression_id: imp.impression_id.clone(),
                ranked,
            })
        })
        .collect()
}

fn to_f32(values: &[Real]) -> Vec<f32> {
    values.iter().map(|&v| v as f32).collect()
}

/// Encodes every news record into a cache.
pub fn build_news_cache(
    model: &FumModel,
    store: &ParamStore,
    news: &NewsTable,
) -> Result<EmbeddingCache> {
    let encoded = model.encode_news_batch(store, &news.records)?;
    let mut cache = EmbeddingCache::new(model.cfg.d_model());
    for item in encoded {
        cache.insert(&item.news_id, &to_f32(item.vector.values()))?;
    }
    Ok(cache)
}

/// Encodes one user vector per distinct user id, using the history from
/// that user's first impression in file order.
pub fn build_user_cache(
    model: &FumModel,
    store: &ParamStore,
    impressions: &[ImpressionSample],
    news: &NewsTable,
    ablation: Ablation,
) -> Result<EmbeddingCache> {
    let mut cache = EmbeddingCache::new(model.cfg.d_model());
    for imp in impressions {
        if cache.get(&imp.user_id).is_some() {
            continue;
        }
        let ctx = format!("impression {}", imp.impression_id);
        let history: Result<Vec<_>> = recent_history(&imp.history, model.cfg.m)
            .iter()
            .map(|id| news.get(id, &ctx))
            .collect();
        let emb = model.encode_user(store, &history?, ablation)?;
        cache.insert(&imp.user_id, &to_f32(emb.u.values()))?;
    }
    Ok(cache)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cache() -> EmbeddingCache {
        let mut c = EmbeddingCache::new(3);
        c.insert("A", &[1.0, 2.0, 3.0]).unwrap();
        c.insert("B", &[-0.5, 0.25, 0.125]).unwrap();
        c
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("c1.bin");
        let p2 = dir.path().join("c2.bin");
        let c = toy_cache();
        c.save(&p1).unwrap();
        let loaded = EmbeddingCache::load(&p1).unwrap();
        assert_eq!(loaded, c);
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_duplicates_and_dimension_drift() {
        let mut c = toy_cache();
        assert!(c.insert("A", &[0.0; 3]).is_err());
        assert!(c.insert("C", &[0.0; 2]).is_err());
    }

    #[test]
    fn load_errors_carry_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.bin");
        std::fs::write(&p, b"WRONGMAGI").unwrap();
        let err = EmbeddingCache::load(&p).unwrap_err().to_string();
        assert!(err.contains("magic"), "{err}");
        let mut bytes = CACHE_MAGIC.to_vec();
        bytes.extend_from_slice(&3u32.to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        let err = EmbeddingCache::load(&p).unwrap_err().to_string();
        assert!(err.contains("byte 13"), "{err}");
    }

    #[test]
    fn ranking_is_descending_and_stable() {
        let mut news = EmbeddingCache::new(1);
        news.insert("N1", &[1.0]).unwrap();
        news.insert("N2", &[3.0]).unwrap();
        news.insert("N3", &[3.0]).unwrap();
        let mut users = EmbeddingCache::new(1);
        users.insert("U1", &[1.0]).unwrap();
        let imp = ImpressionSample {
            impression_id: "I1".into(),
            user_id: "U1".into(),
            history: vec![],
            candidates: vec![
                ("N1".into(), false),
                ("N2".into(), true),
                ("N3".into(), false),
            ],
        };
        let ranked = rank_from_cache(&news, &users, &[imp.clone()]).unwrap();
        let order: Vec<&str> = ranked[0].ranked.iter().map(|(id, _)| id.as_str()).collect();
        // N2 and N3 tie; stable sort keeps candidate order.
        assert_eq!(order, vec!["N2", "N3", "N1"]);

        // Single candidate comes first trivially.
        let single = ImpressionSample {
            candidates: vec![("N1".into(), true)],
            ..imp.clone()
        };
        let r = rank_from_cache(&news, &users, &[single]).unwrap();
        assert_eq!(r[0].ranked.len(), 1);

        // Missing ids are named.
        let missing = ImpressionSample {
            candidates: vec![("N9".into(), false)],
            ..imp
        };
        let err = rank_from_cache(&news, &users, &[missing]).unwrap_err().to_string();
        assert!(err.contains("N9"), "{err}");
    }
}
