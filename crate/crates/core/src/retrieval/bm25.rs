use std::collections::HashMap;

use super::index::top_k;
use crate::error::{Error, Result};

pub const K1: f64 = 1.2;
pub const B: f64 = 0.75;

/// Lowercased alphanumeric runs.
pub fn terms(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// Okapi BM25 over an in-memory corpus.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    ids: Vec<String>,
    tf: Vec<HashMap<String, usize>>,
    lens: Vec<usize>,
    df: HashMap<String, usize>,
    avg_len: f64,
    k1: f64,
    b: f64,
}

impl Bm25Index {
    pub fn new<S: AsRef<str>>(docs: &[(String, S)]) -> Self {
        Self::with_params(docs, K1, B)
    }

    pub fn with_params<S: AsRef<str>>(docs: &[(String, S)], k1: f64, b: f64) -> Self {
        let mut df: HashMap<String, usize> = HashMap::new();
        let mut tf = Vec::with_capacity(docs.len());
        let mut lens = Vec::with_capacity(docs.len());
        for (_, text) in docs {
            let ts = terms(text.as_ref());
            lens.push(ts.len());
            let mut counts: HashMap<String, usize> = HashMap::new();
            for t in ts {
                *counts.entry(t).or_default() += 1;
            }
            for t in counts.keys() {
                *df.entry(t.clone()).or_default() += 1;
            }
            tf.push(counts);
        }
        let avg_len = if docs.is_empty() {
            0.0
        } else {
            lens.iter().sum::<usize>() as f64 / docs.len() as f64
        };
        Self {
            ids: docs.iter().map(|(id, _)| id.clone()).collect(),
            tf,
            lens,
            df,
            avg_len,
            k1,
            b,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// `ln(1 + (N − df + 0.5)/(df + 0.5))`.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.len() as f64;
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Score of document `doc` for already-split query terms.
    pub fn score_terms(&self, query: &[String], doc: usize) -> f64 {
        let len_norm = if self.avg_len > 0.0 {
            1.0 - self.b + self.b * self.lens[doc] as f64 / self.avg_len
        } else {
            1.0
        };
        query
            .iter()
            .map(|t| {
                let tf = self.tf[doc].get(t).copied().unwrap_or(0) as f64;
                if tf == 0.0 {
                    0.0
                } else {
                    self.idf(t) * tf * (self.k1 + 1.0) / (tf + self.k1 * len_norm)
                }
            })
            .sum()
    }

    pub fn score(&self, query: &str, doc: usize) -> f64 {
        self.score_terms(&terms(query), doc)
    }

    pub fn search(&self, query: &str, k: usize) -> Result<Vec<(String, f64)>> {
        if k > self.len() {
            return Err(Error::Bounds(format!("k = {k} exceeds corpus size {}", self.len())));
        }
        let q = terms(query);
        let scored = (0..self.len()).map(|i| (i, self.score_terms(&q, i))).collect();
        Ok(top_k(scored, &self.ids, k))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(docs: &[(&str, &str)]) -> Bm25Index {
        let owned: Vec<(String, String)> = docs.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        Bm25Index::new(&owned)
    }

    #[test]
    fn presence_example() {
        let idx = corpus(&[("d1", "a b"), ("d2", "a")]);
        assert_eq!(idx.score("b", 1), 0.0);
        assert!(idx.score("b", 0) > 0.0);
        assert_eq!(idx.score("zzz", 0), 0.0);
    }

    #[test]
    fn tokenises_case_insensitively() {
        assert_eq!(terms("The CAT, sat!"), vec!["the", "cat", "sat"]);
    }
}
