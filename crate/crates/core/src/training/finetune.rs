use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::optim::{AdamW, AdamWConfig, Schedule};
use crate::encoder::{ByteTokenizer, EncoderModel};
use crate::error::{Error, Result};
use crate::losses::{self, LossKind, DEFAULT_MNRL_SCALE};
use crate::numeric::{DiffArray, Graph, ParamId, ParamStore, Var};
use crate::retrieval::RetrievalTask;
use crate::{par, rng};

/// Tokenised fine-tuning data: a document pool and (query, positive doc)
/// pairs indexing into it.
#[derive(Debug, Clone, PartialEq)]
pub struct PairData {
    pub docs: Vec<Vec<u32>>,
    pub pairs: Vec<(Vec<u32>, usize)>,
}

impl PairData {
    pub fn new(docs: Vec<Vec<u32>>, pairs: Vec<(Vec<u32>, usize)>) -> Result<Self> {
        if let Some((_, d)) = pairs.iter().find(|(_, d)| *d >= docs.len()) {
            return Err(Error::Data(format!("pair references doc {d} of {}", docs.len())));
        }
        if docs.iter().any(Vec::is_empty) || pairs.iter().any(|(q, _)| q.is_empty()) {
            return Err(Error::Data("empty query or document".into()));
        }
        Ok(Self { docs, pairs })
    }

    /// One pair per positive qrel, in sorted (query id, doc id) order.
    pub fn from_task(task: &RetrievalTask) -> Result<Self> {
        let doc_index: HashMap<&str, usize> = task
            .documents
            .iter()
            .enumerate()
            .map(|(i, d)| (d.id.as_str(), i))
            .collect();
        let query_text: HashMap<&str, &str> = task.queries.iter().map(|q| (q.id.as_str(), q.text.as_str())).collect();
        let docs = task.documents.iter().map(|d| ByteTokenizer::encode(&d.text)).collect();
        let mut pairs = Vec::new();
        for (qid, rels) in &task.qrels {
            for (did, &rel) in rels {
                if rel > 0 {
                    let text = query_text
                        .get(qid.as_str())
                        .ok_or_else(|| Error::Data(format!("qrel query `{qid}` not found")))?;
                    let d = *doc_index
                        .get(did.as_str())
                        .ok_or_else(|| Error::Data(format!("qrel doc `{did}` not found")))?;
                    pairs.push((ByteTokenizer::encode(text), d));
                }
            }
        }
        Self::new(docs, pairs)
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// `k` distinct documents drawn uniformly, excluding the positive of `pair`.
pub fn sample_negatives<R: Rng + ?Sized>(data: &PairData, pair: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    let n = data.docs.len();
    let (_, positive) = data
        .pairs
        .get(pair)
        .ok_or_else(|| Error::Index(format!("pair {pair} of {}", data.pairs.len())))?;
    if k >= n {
        return Err(Error::Sampling(format!("{k} negatives requested from {n} documents")));
    }
    Ok(rand::seq::index::sample(rng, n - 1, k)
        .into_iter()
        .map(|j| if j >= *positive { j + 1 } else { j })
        .collect())
}

pub fn sample_negatives_seeded(data: &PairData, pair: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    sample_negatives(data, pair, k, &mut rng::stream(seed, rng::streams::NEGATIVES))
}

fn default_negatives() -> usize {
    32
}
fn default_batch() -> usize {
    32
}
fn default_micro() -> usize {
    1
}
fn default_lr() -> f64 {
    5e-6
}
fn default_loss() -> LossKind {
    LossKind::Opl
}
fn default_clip() -> f64 {
    1.0
}
fn default_epochs() -> usize {
    1
}
fn default_scale() -> f64 {
    DEFAULT_MNRL_SCALE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default = "default_negatives")]
    pub negatives_per_pair: usize,
    /// True batch size: items per optimizer update.
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Items per forward/backward pass; gradients accumulate up to
    /// `batch_size`. Ignored by MNRL, whose negatives live in the batch.
    #[serde(default = "default_micro")]
    pub micro_batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub warmup_fraction: f64,
    #[serde(default = "default_clip")]
    pub max_grad_norm: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_scale")]
    pub mnrl_scale: f64,
    /// Stop after this many pair steps (single-item micro-steps).
    #[serde(default)]
    pub max_pair_steps: Option<usize>,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    #[serde(default)]
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn new(loss: LossKind) -> Self {
        Self {
            loss,
            negatives_per_pair: default_negatives(),
            batch_size: default_batch(),
            micro_batch: default_micro(),
            lr: default_lr(),
            warmup_fraction: 0.0,
            max_grad_norm: default_clip(),
            epochs: default_epochs(),
            mnrl_scale: DEFAULT_MNRL_SCALE,
            max_pair_steps: None,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self::new(default_loss())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub updates: usize,
    pub pair_steps: usize,
    pub batch_losses: Vec<f64>,
}

/// One unit of work. For OPL: a (query, doc, label) pair; for PL: a pair
/// with `doc` its positive; for MNRL: a pair (label unused).
#[derive(Debug, Clone, Copy)]
struct Item {
    pair: usize,
    doc: usize,
    label: f64,
}

struct Partial {
    loss_sum: f64,
    grads: Vec<(ParamId, Vec<f64>)>,
}

fn embed_cached(
    g: &mut Graph,
    model: &EncoderModel,
    cache: &mut HashMap<usize, Var>,
    key: usize,
    tokens: &[u32],
) -> Result<Var> {
    if let Some(&v) = cache.get(&key) {
        return Ok(v);
    }
    let v = model.embed_var(g, tokens, true)?;
    cache.insert(key, v);
    Ok(v)
}

fn opl_micro(model: &EncoderModel, data: &PairData, items: &[Item], weight: f64) -> Result<Partial> {
    let mut g = Graph::new();
    let (mut qc, mut dc) = (HashMap::new(), HashMap::new());
    let mut terms = Vec::with_capacity(items.len());
    for it in items {
        let q = embed_cached(&mut g, model, &mut qc, it.pair, &data.pairs[it.pair].0)?;
        let d = embed_cached(&mut g, model, &mut dc, it.doc, &data.docs[it.doc])?;
        terms.push(losses::opl(&mut g, q, d, it.label)?);
    }
    finish(g, &terms, weight)
}

fn pl_micro(
    model: &EncoderModel,
    teacher: &EncoderModel,
    data: &PairData,
    items: &[Item],
    weight: f64,
) -> Result<Partial> {
    let mut g = Graph::new();
    let mut terms = Vec::with_capacity(items.len());
    for it in items {
        let (qt, dt) = (&data.pairs[it.pair].0, &data.docs[it.doc]);
        let tq = g.constant(&DiffArray::vector(teacher.embed_tokens(qt)?));
        let tp = g.constant(&DiffArray::vector(teacher.embed_tokens(dt)?));
        let sq = model.embed_var(&mut g, qt, true)?;
        let sp = model.embed_var(&mut g, dt, true)?;
        terms.push(losses::prototype_loss(&mut g, tq, sq, tp, sp)?);
    }
    finish(g, &terms, weight)
}

fn mnrl_batch<R: Rng + ?Sized>(
    model: &EncoderModel,
    data: &PairData,
    items: &[Item],
    cfg: &FinetuneConfig,
    rng: &mut R,
) -> Result<Partial> {
    let mut g = Graph::new();
    let (mut qc, mut dc) = (HashMap::new(), HashMap::new());
    let k = cfg.negatives_per_pair.min(items.len() - 1);
    let mut terms = Vec::with_capacity(items.len());
    for (i, it) in items.iter().enumerate() {
        let mut others: Vec<usize> = items
            .iter()
            .enumerate()
            .filter(|&(j, o)| j != i && o.doc != it.doc)
            .map(|(_, o)| o.doc)
            .collect();
        others.sort_unstable();
        others.dedup();
        others.shuffle(rng);
        others.truncate(k);
        if others.is_empty() {
            continue;
        }
        let q = embed_cached(&mut g, model, &mut qc, it.pair, &data.pairs[it.pair].0)?;
        let p = embed_cached(&mut g, model, &mut dc, it.doc, &data.docs[it.doc])?;
        let negs = others
            .iter()
            .map(|&d| embed_cached(&mut g, model, &mut dc, d, &data.docs[d]))
            .collect::<Result<Vec<_>>>()?;
        terms.push(losses::mnrl(&mut g, q, p, &negs, cfg.mnrl_scale)?);
    }
    if terms.is_empty() {
        return Err(Error::BatchContract("mnrl batch has no usable in-batch negatives".into()));
    }
    let weight = 1.0 / terms.len() as f64;
    finish(g, &terms, weight)
}

fn finish(mut g: Graph, terms: &[Var], weight: f64) -> Result<Partial> {
    let total = g.add_all(terms)?;
    let loss_sum = g.scalar(total);
    let scaled = g.scale(total, weight);
    g.backward(scaled)?;
    Ok(Partial {
        loss_sum,
        grads: ParamStore::take_grads(&g),
    })
}

/// Fine-tunes `model` in place over `data` with the configured loss.
///
/// Items (OPL: one positive plus `negatives_per_pair` label-0 negatives per
/// pair; PL and MNRL: one per pair) are grouped into true batches of
/// `batch_size`. Each batch's summed loss is divided by its size, so the
/// update does not depend on `micro_batch`. Gradients are clipped to
/// `max_grad_norm` before every AdamW step.
pub fn finetune(
    model: &mut EncoderModel,
    data: &PairData,
    cfg: &FinetuneConfig,
    teacher: Option<&EncoderModel>,
) -> Result<FinetuneReport> {
    if data.is_empty() {
        return Err(Error::Data("no training pairs".into()));
    }
    if cfg.batch_size == 0 || cfg.micro_batch == 0 || cfg.epochs == 0 {
        return Err(Error::Config("batch_size, micro_batch and epochs must be positive".into()));
    }
    match cfg.loss {
        LossKind::Mnrl if cfg.batch_size < 2 => {
            return Err(Error::BatchContract("mnrl needs batch_size >= 2".into()));
        }
        LossKind::Pl if teacher.is_none() => {
            return Err(Error::Config("prototype loss needs a teacher checkpoint".into()));
        }
        _ => {}
    }
    if let Some(t) = teacher {
        if t.config().d_model != model.config().d_model {
            return Err(Error::Config("teacher and student embedding sizes differ".into()));
        }
    }

    let mut order_rng = rng::stream(cfg.seed, rng::streams::FINETUNE);
    let mut neg_rng = rng::stream(cfg.seed, rng::streams::NEGATIVES);
    let k = cfg.negatives_per_pair.min(data.docs.len().saturating_sub(1));
    let mut items = Vec::new();
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut order_rng);
        for &i in &order {
            let doc = data.pairs[i].1;
            items.push(Item { pair: i, doc, label: 1.0 });
            if cfg.loss == LossKind::Opl {
                for neg in sample_negatives(data, i, k, &mut neg_rng)? {
                    items.push(Item {
                        pair: i,
                        doc: neg,
                        label: 0.0,
                    });
                }
            }
        }
    }
    if let Some(cap) = cfg.max_pair_steps {
        items.truncate(cap);
    }
    let batches: Vec<&[Item]> = items.chunks(cfg.batch_size).collect();
    let schedule = Schedule::new(batches.len().max(1), cfg.warmup_fraction, cfg.lr)?;
    let mut opt = AdamW::new(model.params(), cfg.optimizer);
    let mut report = FinetuneReport {
        updates: 0,
        pair_steps: 0,
        batch_losses: Vec::with_capacity(batches.len()),
    };

    for (step, batch) in batches.iter().enumerate() {
        let frozen: &EncoderModel = model;
        let weight = 1.0 / batch.len() as f64;
        let partials = match cfg.loss {
            LossKind::Mnrl => {
                if batch.len() < 2 {
                    break;
                }
                vec![mnrl_batch(frozen, data, batch, cfg, &mut neg_rng)?]
            }
            LossKind::Opl => {
                let micros: Vec<&[Item]> = batch.chunks(cfg.micro_batch).collect();
                par::try_map(&micros, |m| opl_micro(frozen, data, m, weight))?
            }
            LossKind::Pl => {
                let t = teacher.expect("checked above");
                let micros: Vec<&[Item]> = batch.chunks(cfg.micro_batch).collect();
                par::try_map(&micros, |m| pl_micro(frozen, t, data, m, weight))?
            }
        };
        let loss = match cfg.loss {
            LossKind::Mnrl => partials[0].loss_sum / batch.len() as f64,
            _ => partials.iter().map(|p| p.loss_sum).sum::<f64>() * weight,
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let params = model.params_mut();
        params.zero_grad();
        for p in &partials {
            params.accumulate_list(&p.grads)?;
        }
        params.clip_grad_norm(cfg.max_grad_norm);
        opt.step(params, schedule.lr(step))?;
        params.zero_grad();
        report.updates += 1;
        report.pair_steps += batch.len();
        report.batch_losses.push(loss);
    }
    Ok(report)
}
