use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use longctx::encoder::{self, EncoderModel};
use longctx::losses::LossKind;
use longctx::retrieval::{
    bench_encode, embed_document, evaluate, format_bench, read_jsonl, Bm25Retriever, DenseRetriever, RetrievalTask,
    Retriever,
};
use longctx::synth::{generate_needle_task, needle_training_task, position_sweep};
use longctx::training::corpus::desk_sources;
use longctx::training::{self, Mixture, PairData};
use longctx::par;

use crate::config::RunConfig;
use crate::error::CliError;

fn need<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path, CliError> {
    path.as_deref()
        .ok_or_else(|| CliError::Usage(format!("missing {what} (flag or [paths] entry)")))
}

fn load_model(path: &Path) -> Result<EncoderModel, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", path.display())));
    }
    Ok(encoder::load(path)?)
}

fn load_task(path: &Path) -> Result<RetrievalTask, CliError> {
    if !path.is_dir() {
        return Err(CliError::Usage(format!("task directory {} does not exist", path.display())));
    }
    Ok(RetrievalTask::load_dir(path)?)
}

fn write_json<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(p, text)?;
            log::info!("wrote {}", p.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn sources(cfg: &RunConfig) -> Result<Vec<Vec<String>>, CliError> {
    let c = &cfg.corpus;
    if c.files.is_empty() {
        return Ok(desk_sources(c.synthetic_passages, cfg.pretrain.seed));
    }
    if c.files.len() != 3 {
        return Err(CliError::Usage(format!("corpus.files needs exactly 3 files, got {}", c.files.len())));
    }
    c.files
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read corpus file {}: {e}", p.display())))?;
            Ok(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from).collect())
        })
        .collect()
}

/// Loads a warm-start checkpoint and extends it to the configured S. Every
/// other shape must already agree with the configuration.
fn warm_start(path: &Path, cfg: &RunConfig) -> Result<EncoderModel, CliError> {
    let model = load_model(path)?;
    let (have, want) = (model.config(), &cfg.encoder);
    let mismatches: Vec<String> = [
        ("vocab_size", have.vocab_size, want.vocab_size),
        ("d_model", have.d_model, want.d_model),
        ("n_layers", have.n_layers, want.n_layers),
        ("monarch_b", have.monarch_b, want.monarch_b),
        ("short_conv_width", have.short_conv_width, want.short_conv_width),
    ]
    .iter()
    .filter(|(_, a, b)| a != b)
    .map(|(n, a, b)| format!("{n}: checkpoint {a}, config {b}"))
    .collect();
    if !mismatches.is_empty() {
        return Err(CliError::Usage(format!(
            "warm-start checkpoint {} does not match the encoder config ({})",
            path.display(),
            mismatches.join("; ")
        )));
    }
    if have.max_seq_len == want.max_seq_len {
        return Ok(model);
    }
    log::info!("extending positions {} -> {}", have.max_seq_len, want.max_seq_len);
    Ok(model.extend_max_seq_len(want.max_seq_len)?)
}

pub fn pretrain(cfg: &RunConfig) -> Result<(), CliError> {
    let out = need(&cfg.paths.out, "output checkpoint --out")?;
    let mut model = match &cfg.paths.warm_start {
        Some(p) => warm_start(p, cfg)?,
        None => EncoderModel::new(cfg.encoder.clone())?,
    };
    let sources = sources(cfg)?;
    let mut mixture = Mixture::new(&sources, &cfg.mixture, model.max_seq_len(), cfg.pretrain.seed)?;
    log::info!("pretraining {} parameters for {} steps", model.count_params(), cfg.pretrain.steps);
    let metrics = training::pretrain(&mut model, &mut mixture, &cfg.pretrain)?;
    encoder::save(&model, out)?;
    let metrics_path = cfg
        .paths
        .metrics
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("{}.metrics.tsv", out.display())));
    training::write_metrics_tsv(BufWriter::new(fs::File::create(&metrics_path)?), &metrics)?;
    if let Some(last) = metrics.last() {
        log::info!("final loss {:.4}, mlm accuracy {:.3}", last.loss, last.mlm_accuracy);
    }
    log::info!("wrote {} and {}", out.display(), metrics_path.display());
    Ok(())
}

pub fn finetune(cfg: &RunConfig) -> Result<(), CliError> {
    let out = need(&cfg.paths.out, "output checkpoint --out")?;
    let mut model = load_model(need(&cfg.paths.model, "--model")?)?;
    let task = load_task(need(&cfg.paths.task, "--task")?)?;
    let teacher = match (cfg.finetune.loss, &cfg.paths.teacher) {
        (LossKind::Pl, Some(p)) => Some(load_model(p)?),
        (LossKind::Pl, None) => return Err(CliError::Usage("the prototype loss needs --teacher".into())),
        _ => None,
    };
    let data = PairData::from_task(&task)?;
    let report = training::finetune(&mut model, &data, &cfg.finetune, teacher.as_ref())?;
    log::info!(
        "{} loss: {} updates over {} pair steps, last batch loss {:.4}",
        cfg.finetune.loss,
        report.updates,
        report.pair_steps,
        report.batch_losses.last().copied().unwrap_or(f64::NAN)
    );
    encoder::save(&model, out)?;
    log::info!("wrote {}", out.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, bm25: bool) -> Result<(), CliError> {
    let task = load_task(need(&cfg.paths.task, "--task")?)?;
    let report = if bm25 {
        evaluate(&Bm25Retriever, &task, cfg.eval.k)?
    } else {
        let model = load_model(need(&cfg.paths.model, "--model or --bm25")?)?;
        let retriever = DenseRetriever::new(&model, cfg.strategy()?);
        evaluate(&retriever as &dyn Retriever, &task, cfg.eval.k)?
    };
    log::info!("mean nDCG@{} = {:.4}", cfg.eval.k, report.mean_ndcg_at_10);
    write_json(&report, cfg.paths.out.as_deref())
}

pub fn synth(cfg: &RunConfig, train_queries: Option<usize>, max_position: usize) -> Result<(), CliError> {
    let out = need(&cfg.paths.out, "output directory --out")?;
    let task = generate_needle_task(&cfg.synth)?;
    task.save_dir(out)?;
    log::info!("wrote needle task at position {} to {}", cfg.synth.position, out.display());
    if let Some(n) = train_queries {
        // a different seed keeps training keys apart from evaluation keys
        let spec = longctx::synth::NeedleTaskSpec {
            n_queries: n,
            seed: cfg.synth.seed.wrapping_add(1),
            ..cfg.synth.clone()
        };
        let dir = out.join("train");
        needle_training_task(&spec, max_position)?.save_dir(&dir)?;
        log::info!("wrote training task to {}", dir.display());
    }
    if let Some(p) = &cfg.paths.model {
        let model = load_model(p)?;
        let sweep = position_sweep(&model, cfg.strategy()?, &cfg.synth)?;
        write_json(&sweep, Some(&out.join("sweep.json")))?;
        fs::write(out.join("sweep.tsv"), sweep.table())?;
        print!("{}", sweep.table());
    }
    Ok(())
}

pub fn bench(cfg: &RunConfig) -> Result<(), CliError> {
    let model = load_model(need(&cfg.paths.model, "--model")?)?;
    log::info!("timing on {} thread(s)", if par::is_parallel() { "rayon" } else { "one" });
    let table = bench_encode(&model, &cfg.bench.lengths, cfg.strategy()?, cfg.bench.runs)?;
    print!("{}", format_bench(&table));
    if let Some(out) = &cfg.paths.out {
        write_json(&table, Some(out))?;
    }
    Ok(())
}

pub fn extend_pos(cfg: &RunConfig, max_seq_len: usize) -> Result<(), CliError> {
    let out = need(&cfg.paths.out, "output checkpoint --out")?;
    let model = load_model(need(&cfg.paths.model, "--model")?)?;
    let extended = model.extend_max_seq_len(max_seq_len)?;
    encoder::save(&extended, out)?;
    log::info!("extended S {} -> {}, wrote {}", model.max_seq_len(), max_seq_len, out.display());
    Ok(())
}

#[derive(Serialize)]
struct EmbeddingLine<'a> {
    #[serde(rename = "_id")]
    id: &'a str,
    embedding: Vec<f64>,
}

pub fn embed(cfg: &RunConfig) -> Result<(), CliError> {
    let model = load_model(need(&cfg.paths.model, "--model")?)?;
    let input = need(&cfg.paths.input, "--input")?;
    if !input.exists() {
        return Err(CliError::Usage(format!("input {} does not exist", input.display())));
    }
    let records = read_jsonl(input)?;
    let strategy = cfg.strategy()?;
    let embs = par::try_map(&records, |r| embed_document(&model, &r.text, strategy))?;
    let mut w: Box<dyn Write> = match &cfg.paths.out {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p)?)),
        None => Box::new(std::io::stdout().lock()),
    };
    for (r, e) in records.iter().zip(embs) {
        serde_json::to_writer(&mut w, &EmbeddingLine { id: &r.id, embedding: e })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    log::info!("embedded {} records", records.len());
    Ok(())
}
