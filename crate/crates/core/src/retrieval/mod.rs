//! Retrieval tasks and their file formats, document embedding strategies,
//! a brute-force vector index, nDCG@k, BM25 and an encode-time benchmark.

mod bench;
mod bm25;
mod index;
mod metrics;
mod task;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use bench::{bench_encode, format_bench, BenchRow, BenchTable, PAPER_LENGTHS};
pub use bm25::{terms, Bm25Index, B as BM25_B, K1 as BM25_K1};
pub use index::{embed_document, embed_document_tokens, EmbeddingStrategy, VectorIndex};
pub use metrics::ndcg_at_k;
pub use task::{read_jsonl, read_qrels, write_jsonl, write_qrels, Qrels, Record, RetrievalTask};

use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::par;

pub const DEFAULT_K: usize = 10;

/// Anything that can rank a task's documents for each of its queries.
pub trait Retriever {
    fn name(&self) -> String;
    fn strategy(&self) -> String;
    /// Top-`k` document ids for every query in `queries`, keyed by query id.
    fn rank(&self, task: &RetrievalTask, queries: &[&task::Record], k: usize) -> Result<BTreeMap<String, Vec<String>>>;
}

/// Dense retrieval with an encoder. Documents use `strategy`; queries are
/// always truncated at S.
pub struct DenseRetriever<'a> {
    pub model: &'a EncoderModel,
    pub strategy: EmbeddingStrategy,
    pub label: String,
}

impl<'a> DenseRetriever<'a> {
    pub fn new(model: &'a EncoderModel, strategy: EmbeddingStrategy) -> Self {
        Self {
            model,
            strategy,
            label: format!("encoder-{}", model.max_seq_len()),
        }
    }

    pub fn index(&self, documents: &[Record]) -> Result<VectorIndex> {
        let embs = par::try_map(documents, |d| embed_document(self.model, &d.text, self.strategy))?;
        VectorIndex::new(documents.iter().map(|d| d.id.clone()).collect(), embs)
    }
}

impl Retriever for DenseRetriever<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn strategy(&self) -> String {
        self.strategy.to_string()
    }

    fn rank(&self, task: &RetrievalTask, queries: &[&Record], k: usize) -> Result<BTreeMap<String, Vec<String>>> {
        let index = self.index(&task.documents)?;
        let k = k.min(index.len());
        let ranked = par::try_map(queries, |q| {
            let e = embed_document(self.model, &q.text, EmbeddingStrategy::Truncate)?;
            let hits = index.search(&e, k)?;
            Ok::<_, Error>((q.id.clone(), hits.into_iter().map(|h| h.0).collect()))
        })?;
        Ok(ranked.into_iter().collect())
    }
}

pub struct Bm25Retriever;

impl Retriever for Bm25Retriever {
    fn name(&self) -> String {
        "bm25".into()
    }

    fn strategy(&self) -> String {
        "lexical".into()
    }

    fn rank(&self, task: &RetrievalTask, queries: &[&Record], k: usize) -> Result<BTreeMap<String, Vec<String>>> {
        let docs: Vec<(String, &str)> = task.documents.iter().map(|d| (d.id.clone(), d.text.as_str())).collect();
        let index = Bm25Index::new(&docs);
        let k = k.min(index.len());
        queries
            .iter()
            .map(|q| Ok((q.id.clone(), index.search(&q.text, k)?.into_iter().map(|h| h.0).collect())))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_query: BTreeMap<String, f64>,
    #[serde(rename = "mean_ndcg@10")]
    pub mean_ndcg_at_10: f64,
    pub strategy: String,
    pub model: String,
}

/// nDCG@k for every judged query (in query-id order) and their mean.
pub fn evaluate(retriever: &dyn Retriever, task: &RetrievalTask, k: usize) -> Result<EvalReport> {
    task.validate()?;
    let mut judged: Vec<&Record> = task.queries.iter().filter(|q| task.qrels.contains_key(&q.id)).collect();
    judged.sort_by(|a, b| a.id.cmp(&b.id));
    if judged.is_empty() {
        return Err(Error::EmptyInput("no judged queries in task".into()));
    }
    if task.documents.is_empty() {
        return Err(Error::EmptyInput("task has no documents".into()));
    }
    let rankings = retriever.rank(task, &judged, k)?;
    let mut per_query = BTreeMap::new();
    for q in &judged {
        let ranking = rankings
            .get(&q.id)
            .ok_or_else(|| Error::Evaluation(format!("retriever returned no ranking for `{}`", q.id)))?;
        per_query.insert(q.id.clone(), ndcg_at_k(ranking, task.qrels.get(&q.id), k)?);
    }
    let mean = per_query.values().sum::<f64>() / per_query.len() as f64;
    Ok(EvalReport {
        per_query,
        mean_ndcg_at_10: mean,
        strategy: retriever.strategy(),
        model: retriever.name(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn model() -> EncoderModel {
        EncoderModel::new(EncoderConfig {
            vocab_size: 260,
            d_model: 16,
            n_layers: 1,
            max_seq_len: 64,
            short_conv_width: 3,
            monarch_b: 4,
            mlm_mask_prob: 0.3,
            seed: 3,
        })
        .unwrap()
    }

    fn self_task() -> RetrievalTask {
        let texts = [
            "red apples in autumn",
            "a quiet harbour at dawn",
            "numbers 1 2 3 4 5",
            "the long winding road north",
            "jazz on a rainy evening",
            "quantum foam and strings",
        ];
        let docs: Vec<Record> = texts.iter().enumerate().map(|(i, t)| Record::new(format!("d{i}"), *t)).collect();
        let queries: Vec<Record> = texts.iter().enumerate().map(|(i, t)| Record::new(format!("q{i}"), *t)).collect();
        let mut qrels = Qrels::new();
        for i in 0..texts.len() {
            qrels.entry(format!("q{i}")).or_default().insert(format!("d{i}"), 1);
        }
        RetrievalTask::new(docs, queries, qrels).unwrap()
    }

    #[test]
    fn identical_text_is_perfect() {
        let m = model();
        let r = evaluate(&DenseRetriever::new(&m, EmbeddingStrategy::Truncate), &self_task(), 10).unwrap();
        assert_eq!(r.mean_ndcg_at_10, 1.0);
        let b = evaluate(&Bm25Retriever, &self_task(), 10).unwrap();
        assert_eq!(b.mean_ndcg_at_10, 1.0);
    }

    #[test]
    fn order_invariant() {
        let m = model();
        let t = self_task();
        let mut shuffled = t.clone();
        shuffled.documents.reverse();
        shuffled.queries.rotate_left(2);
        let dr = DenseRetriever::new(&m, EmbeddingStrategy::ChunkAverage);
        assert_eq!(evaluate(&dr, &t, 3).unwrap(), evaluate(&dr, &shuffled, 3).unwrap());
    }

    #[test]
    fn report_json_keys() {
        let m = model();
        let r = evaluate(&DenseRetriever::new(&m, EmbeddingStrategy::Truncate), &self_task(), 10).unwrap();
        let v = serde_json::to_value(&r).unwrap();
        for key in ["per_query", "mean_ndcg@10", "strategy", "model"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }
}
