//! Synthetic retrieval tasks: the needle-in-a-haystack position experiment
//! and a separable long-document task used to check contrastive training.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::retrieval::{evaluate, DenseRetriever, EmbeddingStrategy, Qrels, Record, RetrievalTask, DEFAULT_K};
use crate::{par, rng};

pub const PASSAGES_PER_DOC: usize = 40;
const KEY_ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
const FILLER_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
/// Upper bound on generated document length, in bytes.
pub const MAX_DOC_BYTES: usize = 1 << 20;

fn default_queries() -> usize {
    200
}
fn default_distractors() -> usize {
    PASSAGES_PER_DOC - 1
}
fn default_passage_len() -> usize {
    64
}
fn default_key_len() -> usize {
    8
}
fn default_pool() -> usize {
    256
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeedleTaskSpec {
    #[serde(default = "default_queries")]
    pub n_queries: usize,
    #[serde(default = "default_distractors")]
    pub n_distractors: usize,
    #[serde(default = "default_passage_len")]
    pub passage_len: usize,
    /// Slot of the relevant passage, `0..=39`.
    #[serde(default)]
    pub position: usize,
    /// Length of the uppercase/digit key that opens the relevant passage.
    #[serde(default = "default_key_len")]
    pub key_len: usize,
    /// Size of the shared lowercase distractor pool.
    #[serde(default = "default_pool")]
    pub distractor_pool: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for NeedleTaskSpec {
    fn default() -> Self {
        Self::new(default_queries(), default_passage_len(), 0)
    }
}

impl NeedleTaskSpec {
    pub fn new(n_queries: usize, passage_len: usize, seed: u64) -> Self {
        Self {
            n_queries,
            n_distractors: default_distractors(),
            passage_len,
            position: 0,
            key_len: default_key_len(),
            distractor_pool: default_pool(),
            seed,
        }
    }

    pub fn at(&self, position: usize) -> Self {
        Self {
            position,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_distractors + 1 != PASSAGES_PER_DOC {
            return fail(format!("{} distractors; documents hold exactly 40 passages", self.n_distractors));
        }
        if self.position >= PASSAGES_PER_DOC {
            return fail(format!("position {} outside 0..=39", self.position));
        }
        if self.n_queries == 0 {
            return fail("n_queries must be positive".into());
        }
        if self.key_len == 0 || self.key_len > self.passage_len {
            return fail(format!("key length {} must be in 1..=passage_len", self.key_len));
        }
        if self.passage_len * PASSAGES_PER_DOC > MAX_DOC_BYTES {
            return fail(format!(
                "documents of {} bytes exceed the {MAX_DOC_BYTES}-byte bound",
                self.passage_len * PASSAGES_PER_DOC
            ));
        }
        if self.distractor_pool < self.n_distractors {
            return fail(format!("distractor pool {} smaller than 39", self.distractor_pool));
        }
        let keyspace = (KEY_ALPHABET.len() as f64).powi(self.key_len as i32);
        if (self.n_queries as f64) > keyspace / 2.0 {
            return fail(format!("{} unique keys of length {} requested", self.n_queries, self.key_len));
        }
        Ok(())
    }

    /// Byte range of the key inside every document at this position.
    pub fn key_range(&self) -> std::ops::Range<usize> {
        let start = self.position * self.passage_len;
        start..start + self.key_len
    }

    pub fn doc_len(&self) -> usize {
        PASSAGES_PER_DOC * self.passage_len
    }
}

fn random_string<R: Rng + ?Sized>(rng: &mut R, alphabet: &[u8], len: usize) -> String {
    (0..len).map(|_| *alphabet.choose(rng).expect("non-empty") as char).collect()
}

/// Builds the needle task. Keys, relevant-passage filler, and each
/// document's distractors (and their order) depend only on the seed, so
/// documents at different positions differ only by where the relevant
/// passage sits.
pub fn generate_needle_task(spec: &NeedleTaskSpec) -> Result<RetrievalTask> {
    spec.validate()?;
    build_needle_task(spec, |_| spec.position)
}

/// A needle task whose relevant passages sit at independently drawn slots
/// in `0..max_position`, for fine-tuning a model to find keys anywhere it
/// can see. `spec.position` is ignored.
pub fn needle_training_task(spec: &NeedleTaskSpec, max_position: usize) -> Result<RetrievalTask> {
    spec.at(0).validate()?;
    if max_position == 0 || max_position > PASSAGES_PER_DOC {
        return Err(Error::Config(format!("max_position {max_position} outside 1..=40")));
    }
    let mut r = rng::stream(spec.seed, rng::streams::NEEDLE * 16 + 1);
    let slots: Vec<usize> = (0..spec.n_queries).map(|_| r.random_range(0..max_position)).collect();
    build_needle_task(spec, |i| slots[i])
}

fn build_needle_task(spec: &NeedleTaskSpec, slot_of: impl Fn(usize) -> usize) -> Result<RetrievalTask> {
    let mut r = rng::stream(spec.seed, rng::streams::NEEDLE);
    let pool: Vec<String> = (0..spec.distractor_pool)
        .map(|_| random_string(&mut r, FILLER_ALPHABET, spec.passage_len))
        .collect();
    let mut keys = BTreeSet::new();
    let mut ordered_keys = Vec::with_capacity(spec.n_queries);
    while ordered_keys.len() < spec.n_queries {
        let k = random_string(&mut r, KEY_ALPHABET, spec.key_len);
        if keys.insert(k.clone()) {
            ordered_keys.push(k);
        }
    }
    let width = (spec.n_queries - 1).to_string().len();
    let mut documents = Vec::with_capacity(spec.n_queries);
    let mut queries = Vec::with_capacity(spec.n_queries);
    let mut qrels = Qrels::new();
    for (i, key) in ordered_keys.iter().enumerate() {
        let filler = random_string(&mut r, FILLER_ALPHABET, spec.passage_len - spec.key_len);
        let relevant = format!("{key}{filler}");
        let mut chosen: Vec<&String> = pool.choose_multiple(&mut r, spec.n_distractors).collect();
        chosen.shuffle(&mut r);
        let position = slot_of(i);
        let mut text = String::with_capacity(spec.doc_len());
        for slot in 0..PASSAGES_PER_DOC {
            match slot.cmp(&position) {
                std::cmp::Ordering::Less => text.push_str(chosen[slot]),
                std::cmp::Ordering::Equal => text.push_str(&relevant),
                std::cmp::Ordering::Greater => text.push_str(chosen[slot - 1]),
            }
        }
        let (did, qid) = (format!("doc{i:0width$}"), format!("q{i:0width$}"));
        qrels.entry(qid.clone()).or_default().insert(did.clone(), 1);
        documents.push(Record::new(did, text));
        queries.push(Record::new(qid, key.clone()));
    }
    RetrievalTask::new(documents, queries, qrels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub positions: Vec<usize>,
    pub scores: Vec<f64>,
}

impl SweepReport {
    /// Rows in the appendix layout: answer position, score (percent).
    pub fn table(&self) -> String {
        let mut out = String::from("Answer Position in Concat. Passage\tnDCG@10\n");
        for (p, s) in self.positions.iter().zip(&self.scores) {
            out.push_str(&format!("{p}\t{:.1}\n", 100.0 * s));
        }
        let avg = self.scores.iter().sum::<f64>() / self.scores.len().max(1) as f64;
        out.push_str(&format!("Synth. Task Avg.\t{:.1}\n", 100.0 * avg));
        out
    }
}

/// Mean nDCG@10 of `model` on the needle task at every position 0..=39.
pub fn position_sweep(model: &EncoderModel, strategy: EmbeddingStrategy, spec: &NeedleTaskSpec) -> Result<SweepReport> {
    let positions: Vec<usize> = (0..PASSAGES_PER_DOC).collect();
    let scores = par::try_map(&positions, |&p| {
        let task = generate_needle_task(&spec.at(p))?;
        let retriever = DenseRetriever::new(model, strategy);
        Ok::<_, Error>(evaluate(&retriever, &task, DEFAULT_K)?.mean_ndcg_at_10)
    })?;
    Ok(SweepReport { positions, scores })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeparableTaskSpec {
    pub n_docs: usize,
    pub doc_len: usize,
    pub query_len: usize,
    /// Characters in each document's private signature set.
    pub signature_size: usize,
    /// Probability that a character is drawn from the signature rather
    /// than the shared background.
    pub signature_rate: f64,
    /// Same probability for queries.
    pub query_signature_rate: f64,
    pub train_queries_per_doc: usize,
    pub test_queries_per_doc: usize,
    pub seed: u64,
}

impl Default for SeparableTaskSpec {
    fn default() -> Self {
        Self {
            n_docs: 20,
            doc_len: 512,
            query_len: 24,
            signature_size: 2,
            signature_rate: 0.05,
            query_signature_rate: 0.5,
            train_queries_per_doc: 4,
            test_queries_per_doc: 2,
            seed: 0,
        }
    }
}

const SIGNATURE_ALPHABET: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789!#$%&*+=?@^~";
const BACKGROUND_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz     ";

fn separable_text<R: Rng + ?Sized>(r: &mut R, sig: &[u8], rate: f64, len: usize) -> String {
    (0..len)
        .map(|_| {
            let set = if r.random_bool(rate) { sig } else { BACKGROUND_ALPHABET };
            *set.choose(r).expect("non-empty") as char
        })
        .collect()
}

/// Documents whose only distinguishing content is a private set of
/// signature characters sprinkled through shared lowercase background.
/// Returns `(train, test)` tasks over the same documents with disjoint
/// query samples.
pub fn generate_separable_task(spec: &SeparableTaskSpec) -> Result<(RetrievalTask, RetrievalTask)> {
    if spec.n_docs < 2 || spec.doc_len == 0 || spec.query_len == 0 || spec.signature_size == 0 {
        return Err(Error::Config("separable task needs >= 2 docs and positive lengths".into()));
    }
    if spec.n_docs * spec.signature_size > SIGNATURE_ALPHABET.len() {
        return Err(Error::Config(format!(
            "{} docs × {} signature chars exceed the {}-char alphabet",
            spec.n_docs,
            spec.signature_size,
            SIGNATURE_ALPHABET.len()
        )));
    }
    let in_range = |p: f64| p > 0.0 && p <= 1.0;
    if !in_range(spec.signature_rate) || !in_range(spec.query_signature_rate) {
        return Err(Error::Config("signature rates must lie in (0, 1]".into()));
    }
    let mut r = rng::stream(spec.seed, rng::streams::SEPARABLE);
    let mut alphabet = SIGNATURE_ALPHABET.to_vec();
    alphabet.shuffle(&mut r);
    let sigs: Vec<&[u8]> = alphabet.chunks(spec.signature_size).take(spec.n_docs).collect();
    let width = (spec.n_docs - 1).to_string().len();
    let docs: Vec<Record> = sigs
        .iter()
        .enumerate()
        .map(|(i, s)| Record::new(format!("doc{i:0width$}"), separable_text(&mut r, s, spec.signature_rate, spec.doc_len)))
        .collect();
    let mut split = |per_doc: usize, tag: &str| -> Result<RetrievalTask> {
        let mut queries = Vec::new();
        let mut qrels = Qrels::new();
        for (i, s) in sigs.iter().enumerate() {
            for j in 0..per_doc {
                let qid = format!("{tag}{i:0width$}_{j}");
                queries.push(Record::new(qid.clone(), separable_text(&mut r, s, spec.query_signature_rate, spec.query_len)));
                qrels.entry(qid).or_default().insert(docs[i].id.clone(), 1);
            }
        }
        RetrievalTask::new(docs.clone(), queries, qrels)
    };
    let train = split(spec.train_queries_per_doc, "train")?;
    let test = split(spec.test_queries_per_doc, "test")?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn needle_documents_have_fixed_length_and_unique_keys() {
        let spec = NeedleTaskSpec::new(30, 16, 5).at(7);
        let t = generate_needle_task(&spec).unwrap();
        for (d, q) in t.documents.iter().zip(&t.queries) {
            assert_eq!(d.text.len(), 40 * 16);
            assert_eq!(d.text.matches(&q.text).count(), 1);
            assert_eq!(&d.text[spec.key_range()], q.text);
        }
        for q in &t.queries {
            assert_eq!(t.documents.iter().filter(|d| d.text.contains(&q.text)).count(), 1);
        }
    }

    #[test]
    fn positions_only_move_the_relevant_passage() {
        let base = NeedleTaskSpec::new(5, 16, 2);
        let a = generate_needle_task(&base.at(0)).unwrap();
        let b = generate_needle_task(&base.at(39)).unwrap();
        assert_eq!(a.queries, b.queries);
        for (x, y) in a.documents.iter().zip(&b.documents) {
            // slot 0 of a is the relevant passage, which is slot 39 of b
            assert_eq!(&x.text[..16], &y.text[39 * 16..]);
            assert_eq!(&x.text[16..], &y.text[..39 * 16]);
        }
        assert_eq!(generate_needle_task(&base.at(3)).unwrap(), generate_needle_task(&base.at(3)).unwrap());
    }

    #[test]
    fn truncation_window_arithmetic() {
        let base = NeedleTaskSpec::new(5, 16, 2);
        assert!(base.at(0).key_range().end <= 128);
        assert!(base.at(7).key_range().end <= 128);
        assert!(base.at(8).key_range().start >= 128);
        assert!(base.at(39).key_range().start >= 128);
    }

    #[test]
    fn training_task_keeps_keys_and_varies_slots() {
        let spec = NeedleTaskSpec::new(50, 16, 4);
        let fixed = generate_needle_task(&spec).unwrap();
        let mixed = needle_training_task(&spec, 8).unwrap();
        assert_eq!(fixed.queries, mixed.queries);
        let mut slots = BTreeSet::new();
        for (d, q) in mixed.documents.iter().zip(&mixed.queries) {
            let at = d.text.find(&q.text).unwrap();
            assert_eq!(at % 16, 0);
            assert!(at / 16 < 8);
            slots.insert(at / 16);
        }
        assert!(slots.len() > 4);
        assert!(needle_training_task(&spec, 41).is_err());
    }

    #[test]
    fn needle_spec_validation() {
        assert!(NeedleTaskSpec::new(5, 16, 0).at(40).validate().is_err());
        assert!(NeedleTaskSpec::new(5, 1 << 16, 0).validate().is_err());
        let mut s = NeedleTaskSpec::new(5, 16, 0);
        s.n_distractors = 10;
        assert!(s.validate().is_err());
    }

    #[test]
    fn separable_splits_share_docs_not_queries() {
        let (train, test) = generate_separable_task(&SeparableTaskSpec::default()).unwrap();
        assert_eq!(train.documents, test.documents);
        assert_eq!(train.queries.len(), 80);
        assert_eq!(test.queries.len(), 40);
        let train_text: BTreeSet<&str> = train.queries.iter().map(|q| q.text.as_str()).collect();
        assert!(test.queries.iter().all(|q| !train_text.contains(q.text.as_str())));
        assert!(train.documents.iter().all(|d| d.text.len() == 512));
    }
}
