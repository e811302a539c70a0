use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use longctx::encoder::{EncoderConfig, EncoderModel};
use longctx::par;
use longctx::retrieval::{embed_document, DenseRetriever, EmbeddingStrategy};
use longctx::synth::{generate_needle_task, NeedleTaskSpec};

fn model(s: usize) -> EncoderModel {
    EncoderModel::new(EncoderConfig {
        vocab_size: 260,
        d_model: 64,
        n_layers: 1,
        max_seq_len: s,
        short_conv_width: 3,
        monarch_b: 8,
        mlm_mask_prob: 0.3,
        seed: 0,
    })
    .expect("valid config")
}

/// Corpus embedding through `par` against a plain sequential loop.
fn corpus_embedding(c: &mut Criterion) {
    let m = model(512);
    let task = generate_needle_task(&NeedleTaskSpec::new(64, 8, 0)).expect("valid spec");
    let retriever = DenseRetriever::new(&m, EmbeddingStrategy::Truncate);
    let mut group = c.benchmark_group("embed_corpus_64x320");
    group.sample_size(10);
    group.bench_function("sequential", |b| {
        b.iter(|| {
            task.documents
                .iter()
                .map(|d| embed_document(&m, &d.text, EmbeddingStrategy::Truncate).expect("embeds"))
                .collect::<Vec<_>>()
        })
    });
    let label = if par::is_parallel() { "rayon" } else { "par_fallback" };
    group.bench_function(label, |b| b.iter(|| retriever.index(&task.documents).expect("indexes")));
    group.finish();
}

fn encode_lengths(c: &mut Criterion) {
    let m = model(8192);
    let mut group = c.benchmark_group("encode_length");
    group.sample_size(10);
    for len in [512usize, 2048, 8192] {
        let text: String = (0..len).map(|i| (b'a' + (i * 7 % 26) as u8) as char).collect();
        group.bench_with_input(BenchmarkId::from_parameter(len), &text, |b, t| {
            b.iter(|| embed_document(&m, t, EmbeddingStrategy::Truncate).expect("embeds"))
        });
    }
    group.finish();
}

criterion_group!(benches, corpus_embedding, encode_lengths);
criterion_main!(benches);
