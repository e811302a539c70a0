use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::encoder::{ByteTokenizer, EncoderModel};
use crate::error::{Error, Result};
use crate::numeric::{dot, norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingStrategy {
    /// Embed the first S tokens only.
    Truncate,
    /// Average unnormalised per-chunk means over consecutive S-token chunks.
    ChunkAverage,
}

impl std::str::FromStr for EmbeddingStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "truncate" => Ok(Self::Truncate),
            "chunk" | "chunk_average" => Ok(Self::ChunkAverage),
            other => Err(Error::Config(format!("unknown strategy `{other}` (truncate, chunk)"))),
        }
    }
}

impl std::fmt::Display for EmbeddingStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Truncate => "truncate",
            Self::ChunkAverage => "chunk_average",
        })
    }
}

fn normalised(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let n = norm(&v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateVector(format!("embedding norm {n}")));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(v)
}

/// Unit-norm embedding of an already tokenised document.
pub fn embed_document_tokens(model: &EncoderModel, tokens: &[u32], strategy: EmbeddingStrategy) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("document has no tokens".into()));
    }
    match strategy {
        EmbeddingStrategy::Truncate => model.embed_tokens(tokens),
        EmbeddingStrategy::ChunkAverage => {
            let s = model.max_seq_len();
            let chunks: Vec<&[u32]> = tokens.chunks(s).collect();
            let mut acc = vec![0.0; model.config().d_model];
            for c in &chunks {
                for (a, v) in acc.iter_mut().zip(model.mean_pooled(c)?) {
                    *a += v;
                }
            }
            let m = chunks.len() as f64;
            normalised(acc.into_iter().map(|v| v / m).collect())
        }
    }
}

pub fn embed_document(model: &EncoderModel, text: &str, strategy: EmbeddingStrategy) -> Result<Vec<f64>> {
    embed_document_tokens(model, &ByteTokenizer::encode(text), strategy)
}

/// Brute-force inner-product index over unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex {
    ids: Vec<String>,
    dim: usize,
    matrix: Vec<f64>,
}

impl VectorIndex {
    pub fn new(ids: Vec<String>, embeddings: Vec<Vec<f64>>) -> Result<Self> {
        if ids.len() != embeddings.len() {
            return Err(Error::dim(format!("{} ids for {} embeddings", ids.len(), embeddings.len())));
        }
        let dim = embeddings.first().map_or(0, Vec::len);
        let mut matrix = Vec::with_capacity(dim * ids.len());
        for (id, e) in ids.iter().zip(&embeddings) {
            if e.len() != dim {
                return Err(Error::dim(format!("embedding of `{id}` has dim {}, expected {dim}", e.len())));
            }
            let n = norm(e);
            if (n - 1.0).abs() > 1e-6 {
                return Err(Error::DegenerateVector(format!("embedding of `{id}` has norm {n}")));
            }
            matrix.extend_from_slice(e);
        }
        Ok(Self { ids, dim, matrix })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    /// Top `k` by dot product, descending, ties by ascending doc id.
    pub fn search(&self, query: &[f64], k: usize) -> Result<Vec<(String, f64)>> {
        if k > self.len() {
            return Err(Error::Bounds(format!("k = {k} exceeds index size {}", self.len())));
        }
        if query.len() != self.dim {
            return Err(Error::dim(format!("query dim {} vs index dim {}", query.len(), self.dim)));
        }
        let scored: Vec<(usize, f64)> = (0..self.len()).map(|i| (i, dot(self.row(i), query))).collect();
        Ok(top_k(scored, &self.ids, k))
    }
}

/// Sorts `(index, score)` by score descending then id ascending; keeps `k`.
pub(crate) fn top_k(mut scored: Vec<(usize, f64)>, ids: &[String], k: usize) -> Vec<(String, f64)> {
    let cmp = |a: &(usize, f64), b: &(usize, f64)| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| ids[a.0].cmp(&ids[b.0]))
    };
    if k < scored.len() && k > 0 {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    scored.truncate(k);
    scored.into_iter().map(|(i, s)| (ids[i].clone(), s)).collect()
}
