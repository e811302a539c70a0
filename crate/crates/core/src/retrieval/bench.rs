use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::index::{embed_document, EmbeddingStrategy};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::rng;

pub const PAPER_LENGTHS: [usize; 4] = [128, 2048, 8192, 32768];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub length: usize,
    pub median_seconds: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub model: String,
    pub max_seq_len: usize,
    pub strategy: String,
    pub rows: Vec<BenchRow>,
}

fn document(len: usize, seed: u64) -> String {
    let mut r = rng::seeded(seed);
    (0..len)
        .map(|i| if i % 6 == 5 { ' ' } else { r.random_range(b'a'..=b'z') as char })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Median wall-clock seconds to tokenise and embed an `X`-byte document for
/// each requested length, after one untimed warm-up run.
pub fn bench_encode(model: &EncoderModel, lengths: &[usize], strategy: EmbeddingStrategy, runs: usize) -> Result<BenchTable> {
    if runs < 5 {
        return Err(Error::Config(format!("at least 5 timed runs required, got {runs}")));
    }
    let s = model.max_seq_len();
    if strategy == EmbeddingStrategy::Truncate {
        if let Some(&too_long) = lengths.iter().find(|&&l| l > s) {
            return Err(Error::Config(format!(
                "length {too_long} exceeds S = {s}; use the chunk strategy beyond S"
            )));
        }
    }
    let mut rows = Vec::with_capacity(lengths.len());
    for &len in lengths {
        if len == 0 {
            return Err(Error::Config("benchmark length must be positive".into()));
        }
        let text = document(len, len as u64);
        embed_document(model, &text, strategy)?;
        let mut times = Vec::with_capacity(runs);
        for _ in 0..runs {
            let t0 = Instant::now();
            let e = embed_document(model, &text, strategy)?;
            times.push(t0.elapsed().as_secs_f64());
            std::hint::black_box(e);
        }
        rows.push(BenchRow {
            length: len,
            median_seconds: median(times),
            runs,
        });
    }
    Ok(BenchTable {
        model: format!("encoder-{s}"),
        max_seq_len: s,
        strategy: strategy.to_string(),
        rows,
    })
}

/// One line per length, then the same numbers in a single
/// model-per-row line with one column per length.
pub fn format_bench(table: &BenchTable) -> String {
    let mut out = String::from("length\tmedian_seconds\n");
    for r in &table.rows {
        out.push_str(&format!("{}\t{:.6}\n", r.length, r.median_seconds));
    }
    out.push('\n');
    out.push_str("Models\tMax. Seq. Length");
    for r in &table.rows {
        out.push_str(&format!("\t{}", r.length));
    }
    out.push_str(&format!("\n{}\t{}", table.model, table.max_seq_len));
    for r in &table.rows {
        out.push_str(&format!("\t{:.4}", r.median_seconds));
    }
    out.push('\n');
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    #[test]
    fn one_row_per_length_and_bounds() {
        let m = EncoderModel::new(EncoderConfig {
            vocab_size: 260,
            d_model: 16,
            n_layers: 1,
            max_seq_len: 256,
            short_conv_width: 3,
            monarch_b: 4,
            mlm_mask_prob: 0.3,
            seed: 0,
        })
        .unwrap();
        let t = bench_encode(&m, &[16, 64, 256], EmbeddingStrategy::Truncate, 5).unwrap();
        assert_eq!(t.rows.iter().map(|r| r.length).collect::<Vec<_>>(), vec![16, 64, 256]);
        assert!(bench_encode(&m, &[512], EmbeddingStrategy::Truncate, 5).is_err());
        assert!(bench_encode(&m, &[512], EmbeddingStrategy::ChunkAverage, 5).is_ok());
        assert!(bench_encode(&m, &[16], EmbeddingStrategy::Truncate, 3).is_err());
        assert_eq!(format_bench(&t).lines().count(), 1 + 3 + 1 + 2);
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
