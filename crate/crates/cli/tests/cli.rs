mod common;

use std::fs;

use common::*;
use serde_json::Value;

fn pretrained(dir: &std::path::Path) -> std::path::PathBuf {
    let cfg = write(dir, "run.toml", TINY_CONFIG);
    let ckpt = dir.join("m.ckpt");
    let o = longctx(&["pretrain", "--config", s(&cfg), "--out", s(&ckpt)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    ckpt
}

fn toy_task(dir: &std::path::Path) -> std::path::PathBuf {
    let t = dir.join("toy");
    fs::create_dir_all(&t).unwrap();
    let texts = ["red apples in autumn", "a quiet harbour at dawn", "jazz on a rainy evening"];
    let mut corpus = String::new();
    let mut queries = String::new();
    let mut qrels = String::from("query-id\tcorpus-id\tscore\n");
    for (i, x) in texts.iter().enumerate() {
        corpus += &format!("{{\"_id\":\"d{i}\",\"text\":\"{x}\"}}\n");
        queries += &format!("{{\"_id\":\"q{i}\",\"text\":\"{x}\"}}\n");
        qrels += &format!("q{i}\td{i}\t1\n");
    }
    fs::write(t.join("corpus.jsonl"), corpus).unwrap();
    fs::write(t.join("queries.jsonl"), queries).unwrap();
    fs::write(t.join("qrels.tsv"), qrels).unwrap();
    t
}

#[test]
fn missing_or_invalid_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = longctx(&["pretrain", "--config", s(&dir.path().join("nope.toml")), "--out", "x"]);
    assert_eq!(code(&o), 2);
    let o = longctx(&["pretrain", "--out", "x"]);
    assert_eq!(code(&o), 2);
    let bad = write(dir.path(), "bad.toml", "[pretrain]\nstep = 3\n");
    let o = longctx(&["pretrain", "--config", s(&bad), "--out", "x"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("step"), "{}", stderr(&o));
    assert_eq!(code(&longctx(&["frobnicate"])), 2);
}

#[test]
fn pretrain_is_byte_deterministic_and_logs_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "run.toml", TINY_CONFIG);
    let (a, b) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    for p in [&a, &b] {
        let o = std::process::Command::new(env!("CARGO_BIN_EXE_longctx"))
            .args(["pretrain", "--config", s(&cfg), "--seed", "5", "--out", s(p)])
            .output()
            .unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stderr(&o).contains("resolved config"));
        assert!(stderr(&o).contains("seed = 5"));
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let tsv = fs::read_to_string(format!("{}.metrics.tsv", a.display())).unwrap();
    assert_eq!(tsv.lines().next().unwrap(), "step\tlr\tloss\tmlm_accuracy");
    assert_eq!(tsv.lines().count(), 5);
}

#[test]
fn warm_start_checks_shapes_and_extends() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrained(dir.path());
    let wide = write(dir.path(), "wide.toml", &TINY_CONFIG.replace("d_model = 16", "d_model = 64").replace("monarch_b = 4", "monarch_b = 8"));
    let o = longctx(&["pretrain", "--config", s(&wide), "--warm-start", s(&ckpt), "--out", s(&dir.path().join("w.ckpt"))]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("d_model: checkpoint 16, config 64"), "{}", stderr(&o));

    let long = write(dir.path(), "long.toml", &TINY_CONFIG.replace("max_seq_len = 64", "max_seq_len = 256"));
    let out = dir.path().join("long.ckpt");
    let o = longctx(&["pretrain", "--config", s(&long), "--warm-start", s(&ckpt), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(longctx::encoder::load(&out).unwrap().max_seq_len(), 256);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "hot.toml", &TINY_CONFIG.replace("lr = 1e-3", "lr = 1e300"));
    let o = longctx(&["pretrain", "--config", s(&cfg), "--out", s(&dir.path().join("x.ckpt"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn extend_pos_tiles_positions() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrained(dir.path());
    let out = dir.path().join("ext.ckpt");
    let o = longctx(&["extend-pos", "--model", s(&ckpt), "--max-seq-len", "256", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let (a, b) = (longctx::encoder::load(&ckpt).unwrap(), longctx::encoder::load(&out).unwrap());
    assert_eq!(b.max_seq_len(), 256);
    assert_eq!(b.position_table().row(64 + 5), a.position_table().row(5));
    let o = longctx(&["extend-pos", "--model", s(&ckpt), "--max-seq-len", "100", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
}

#[test]
fn eval_on_identity_task_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrained(dir.path());
    let task = toy_task(dir.path());
    let report = dir.path().join("r.json");
    for strategy in ["truncate", "chunk"] {
        let o = longctx(&["eval", "--model", s(&ckpt), "--task", s(&task), "--strategy", strategy, "--out", s(&report)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let v = read_json(&report);
        assert_valid("eval_report.schema.json", &v);
        assert_eq!(v["mean_ndcg@10"], Value::from(1.0));
    }
    let o = longctx(&["eval", "--bm25", "--task", s(&task)]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_valid("eval_report.schema.json", &v);
    assert_eq!(v["mean_ndcg@10"], Value::from(1.0));
}

#[test]
fn malformed_inputs_exit_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrained(dir.path());
    let task = toy_task(dir.path());
    let mut corpus = fs::read_to_string(task.join("corpus.jsonl")).unwrap();
    corpus.insert_str(corpus.find('\n').unwrap() + 1, "{\"_id\": 3,\n");
    fs::write(task.join("corpus.jsonl"), &corpus).unwrap();
    let o = longctx(&["eval", "--model", s(&ckpt), "--task", s(&task)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("corpus.jsonl:2"), "{}", stderr(&o));

    let task = toy_task(&dir.path().join("again"));
    let mut qrels = fs::read_to_string(task.join("qrels.tsv")).unwrap();
    qrels += "q0\tghost\t1\n";
    fs::write(task.join("qrels.tsv"), qrels).unwrap();
    let o = longctx(&["eval", "--model", s(&ckpt), "--task", s(&task)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("ghost"));
}

#[test]
fn synth_round_trips_and_sweeps() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrained(dir.path());
    let cfg = write(dir.path(), "synth.toml", "[synth]\nn_queries = 12\npassage_len = 8\nkey_len = 4\nseed = 2\n");
    let out = dir.path().join("needle");
    let o = longctx(&["synth", "--config", s(&cfg), "--position", "9", "--train-queries", "20", "--model", s(&ckpt), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let task = longctx::retrieval::RetrievalTask::load_dir(&out).unwrap();
    let spec = longctx::synth::NeedleTaskSpec { n_queries: 12, passage_len: 8, key_len: 4, seed: 2, ..Default::default() };
    assert_eq!(task, longctx::synth::generate_needle_task(&spec.at(9)).unwrap());
    assert_eq!(longctx::retrieval::RetrievalTask::load_dir(&out.join("train")).unwrap().queries.len(), 20);
    let sweep = read_json(&out.join("sweep.json"));
    assert_valid("sweep_report.schema.json", &sweep);
    assert_eq!(fs::read_to_string(out.join("sweep.tsv")).unwrap().lines().count(), 42);

    // the written task evaluates identically to the in-memory one
    let report = dir.path().join("r.json");
    let o = longctx(&["eval", "--model", s(&ckpt), "--task", s(&out), "--out", s(&report)]);
    assert_eq!(code(&o), 0);
    let model = longctx::encoder::load(&ckpt).unwrap();
    let direct = longctx::retrieval::evaluate(
        &longctx::retrieval::DenseRetriever::new(&model, longctx::retrieval::EmbeddingStrategy::Truncate),
        &task,
        10,
    )
    .unwrap();
    // serde_json's default float parser may be one ulp off
    let got = read_json(&report);
    assert_eq!(got["per_query"].as_object().unwrap().len(), direct.per_query.len());
    for (q, want) in &direct.per_query {
        assert!((got["per_query"][q].as_f64().unwrap() - want).abs() < 1e-12, "{q}");
    }
    assert!((got["mean_ndcg@10"].as_f64().unwrap() - direct.mean_ndcg_at_10).abs() < 1e-12);
}

#[test]
fn bench_emits_one_row_per_length() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrained(dir.path());
    let out = dir.path().join("bench.json");
    let o = longctx(&["bench", "--model", s(&ckpt), "--lengths", "16,32,64", "--strategy", "truncate", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let v = read_json(&out);
    assert_valid("bench_report.schema.json", &v);
    assert_eq!(v["rows"].as_array().unwrap().len(), 3);
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("length\tmedian_seconds\n16\t"));
    let o = longctx(&["bench", "--model", s(&ckpt), "--lengths", "128", "--strategy", "truncate"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn embed_writes_unit_vectors() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrained(dir.path());
    let task = toy_task(dir.path());
    let out = dir.path().join("e.jsonl");
    let o = longctx(&["embed", "--model", s(&ckpt), "--input", s(&task.join("corpus.jsonl")), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines: Vec<Value> = fs::read_to_string(&out).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    for l in &lines {
        assert_valid("embedding_line.schema.json", l);
        let n: f64 = l["embedding"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap().powi(2)).sum();
        assert!((n - 1.0).abs() < 1e-9);
    }
    assert_eq!(lines[1]["_id"], "d1");
}

#[test]
fn finetune_runs_and_requires_teacher_for_pl() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrained(dir.path());
    let task = toy_task(dir.path());
    let out = dir.path().join("ft.ckpt");
    let o = longctx(&["finetune", "--model", s(&ckpt), "--task", s(&task), "--loss", "pl", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
    for loss in ["opl", "mnrl"] {
        let o = longctx(&["finetune", "--model", s(&ckpt), "--task", s(&task), "--loss", loss, "--out", s(&out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_ne!(fs::read(&out).unwrap(), fs::read(&ckpt).unwrap());
    }
    let o = longctx(&["finetune", "--model", s(&ckpt), "--task", s(&task), "--loss", "pl", "--teacher", s(&ckpt), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = longctx(&["finetune", "--model", s(&ckpt), "--task", s(&task), "--loss", "triplet", "--out", s(&out)]);
    assert_eq!(code(&o), 2);
}
