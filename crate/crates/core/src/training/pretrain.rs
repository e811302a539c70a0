use std::io::Write;

use serde::{Deserialize, Serialize};

use super::masking::mask_tokens;
use super::mixture::{Mixture, MixtureSpec};
use super::optim::{AdamW, AdamWConfig, Schedule};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::numeric::{Graph, ParamId, ParamStore};
use crate::{par, rng};

fn default_warmup() -> f64 {
    0.06
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default)]
    pub optimizer: AdamWConfig,
    /// Global gradient-norm clip; none when absent.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            batch_size: 8,
            lr: 5e-4,
            warmup_fraction: 0.06,
            optimizer: AdamWConfig::default(),
            max_grad_norm: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub mlm_accuracy: f64,
}

/// One masked example prepared for the tape.
struct Masked {
    input: Vec<u32>,
    positions: Vec<usize>,
    targets: Vec<usize>,
}

struct ExampleResult {
    loss_sum: f64,
    correct: usize,
    grads: Vec<(ParamId, Vec<f64>)>,
}

fn prepare(model: &EncoderModel, tokens: &[u32], rng: &mut rng::Rng64) -> Option<Masked> {
    let vocab = model.vocab();
    let tokens = &tokens[..tokens.len().min(model.max_seq_len())];
    let (input, labels) = mask_tokens(tokens, vocab, model.config().mlm_mask_prob, rng);
    let (positions, targets): (Vec<usize>, Vec<usize>) = labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.map(|t| (i, t as usize)))
        .unzip();
    (!positions.is_empty()).then_some(Masked {
        input,
        positions,
        targets,
    })
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
        .0
}

/// Masked-token loss of one example, scaled by `weight` before backward.
/// Without `train` no gradients are produced.
fn run_example(model: &EncoderModel, ex: &Masked, weight: f64, train: bool) -> Result<ExampleResult> {
    let n = ex.input.len();
    let l = model.working_len(n);
    let mut ids = ex.input.clone();
    ids.resize(l, model.vocab().pad());
    let valid: Vec<bool> = (0..l).map(|i| i < n).collect();
    let mut g = Graph::new();
    let states = model.forward(&mut g, &ids, &valid, train)?;
    let picked = g.gather_rows(states, &ex.positions)?;
    let logits = model.mlm_logits(&mut g, picked, train)?;
    let mean = g.cross_entropy_rows(logits, &ex.targets)?;
    let count = ex.targets.len();
    let loss_sum = g.scalar(mean) * count as f64;
    let v = model.config().vocab_size;
    let lv = g.value(logits);
    let correct = (0..count).filter(|&r| argmax(&lv[r * v..(r + 1) * v]) == ex.targets[r]).count();
    let grads = if train {
        let scaled = g.scale(mean, weight * count as f64);
        g.backward(scaled)?;
        ParamStore::take_grads(&g)
    } else {
        Vec::new()
    };
    Ok(ExampleResult {
        loss_sum,
        correct,
        grads,
    })
}

/// MLM pretraining. Each step draws `batch_size` examples from the mixture,
/// masks them, and takes one AdamW step on the mean masked-token loss.
/// Returns per-step loss and top-1 masked accuracy.
pub fn pretrain(model: &mut EncoderModel, mixture: &mut Mixture, cfg: &PretrainConfig) -> Result<Vec<StepMetrics>> {
    if cfg.steps == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("pretraining needs steps > 0 and batch_size > 0".into()));
    }
    if mixture.max_len() > model.max_seq_len() {
        return Err(Error::Config(format!(
            "mixture emits {} tokens but the model accepts {}",
            mixture.max_len(),
            model.max_seq_len()
        )));
    }
    let schedule = Schedule::new(cfg.steps, cfg.warmup_fraction, cfg.lr)?;
    let mut opt = AdamW::new(model.params(), cfg.optimizer);
    let mut mask_rng = rng::stream(cfg.seed, rng::streams::MASKING);
    let mut metrics = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch: Vec<Masked> = (0..cfg.batch_size)
            .filter_map(|_| {
                let ex = mixture.next_example();
                prepare(model, &ex.tokens, &mut mask_rng)
            })
            .collect();
        let total: usize = batch.iter().map(|m| m.targets.len()).sum();
        let lr = schedule.lr(step);
        if total == 0 {
            metrics.push(StepMetrics {
                step,
                lr,
                loss: f64::NAN,
                mlm_accuracy: 0.0,
            });
            continue;
        }
        let weight = 1.0 / total as f64;
        let frozen: &EncoderModel = model;
        let results = par::try_map(&batch, |ex| run_example(frozen, ex, weight, true))?;

        let loss = results.iter().map(|r| r.loss_sum).sum::<f64>() / total as f64;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let correct: usize = results.iter().map(|r| r.correct).sum();
        let params = model.params_mut();
        params.zero_grad();
        for r in &results {
            params.accumulate_list(&r.grads)?;
        }
        if let Some(max) = cfg.max_grad_norm {
            params.clip_grad_norm(max);
        }
        opt.step(params, lr)?;
        params.zero_grad();
        metrics.push(StepMetrics {
            step,
            lr,
            loss,
            mlm_accuracy: correct as f64 / total as f64,
        });
    }
    Ok(metrics)
}

/// Masked-token loss and accuracy on fixed examples, no parameter change.
pub fn mlm_evaluate(model: &EncoderModel, examples: &[Vec<u32>], seed: u64) -> Result<(f64, f64)> {
    let mut r = rng::stream(seed, rng::streams::MASKING);
    let batch: Vec<Masked> = examples.iter().filter_map(|t| prepare(model, t, &mut r)).collect();
    let total: usize = batch.iter().map(|m| m.targets.len()).sum();
    if total == 0 {
        return Err(Error::EmptyInput("no maskable tokens in evaluation set".into()));
    }
    let results = par::try_map(&batch, |ex| run_example(model, ex, 0.0, false))?;
    let loss = results.iter().map(|r| r.loss_sum).sum::<f64>() / total as f64;
    let correct: usize = results.iter().map(|r| r.correct).sum();
    Ok((loss, correct as f64 / total as f64))
}

pub fn write_metrics_tsv<W: Write>(mut w: W, metrics: &[StepMetrics]) -> std::io::Result<()> {
    writeln!(w, "step\tlr\tloss\tmlm_accuracy")?;
    for m in metrics {
        writeln!(w, "{}\t{:e}\t{:.6}\t{:.6}", m.step, m.lr, m.loss, m.mlm_accuracy)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub max_seq_len: usize,
    pub training_selection: String,
    pub score: f64,
}

/// Pretrains one fresh model per example selection (short only, long only,
/// mixed) with identical budgets, then scores each by masked-token accuracy
/// (in percent) on a held-out stream drawn from the default mixture.
pub fn mixture_ablation(
    config: &crate::encoder::EncoderConfig,
    sources: &[Vec<String>],
    train: &PretrainConfig,
    eval_examples: usize,
) -> Result<Vec<AblationRow>> {
    let s = config.max_seq_len;
    let mut held_out = Mixture::new(sources, &MixtureSpec::default(), s, train.seed.wrapping_add(0x5eed))?;
    let eval: Vec<Vec<u32>> = (0..eval_examples).map(|_| held_out.next_example().tokens).collect();
    let selections = [
        ("Short Examples", MixtureSpec::short_only()),
        ("Long Examples", MixtureSpec::long_only()),
        ("Mixed Examples", MixtureSpec::default()),
    ];
    selections
        .iter()
        .map(|(name, spec)| {
            let mut model = EncoderModel::new(config.clone())?;
            let mut mixture = Mixture::new(sources, spec, s, train.seed)?;
            pretrain(&mut model, &mut mixture, train)?;
            let (_, acc) = mlm_evaluate(&model, &eval, train.seed.wrapping_add(1))?;
            Ok(AblationRow {
                model: "encoder".into(),
                max_seq_len: s,
                training_selection: name.to_string(),
                score: 100.0 * acc,
            })
        })
        .collect()
}

/// Plain-text rendering of the ablation table.
pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut out = String::from("Model\tMax. Seq. Length\tTraining Selection\tScore\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{}\t{:.1}\n",
            r.model, r.max_seq_len, r.training_selection, r.score
        ));
    }
    out
}
