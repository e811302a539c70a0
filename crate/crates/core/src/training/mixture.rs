use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{ByteTokenizer, Vocab};
use crate::error::{Error, Result};
use crate::rng::{self, Rng64};

pub const MIN_VARIABLE_LEN: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LengthType {
    Variable,
    Maximum,
}

/// Sampling weight per (source, length type). Three sources.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub variable: [f64; 3],
    pub maximum: [f64; 3],
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            variable: [0.10, 0.10, 0.10],
            maximum: [0.24, 0.23, 0.23],
        }
    }
}

impl MixtureSpec {
    pub fn short_only() -> Self {
        let third = 1.0 / 3.0;
        Self {
            variable: [third, third, 1.0 - 2.0 * third],
            maximum: [0.0; 3],
        }
    }

    pub fn long_only() -> Self {
        let third = 1.0 / 3.0;
        Self {
            variable: [0.0; 3],
            maximum: [third, third, 1.0 - 2.0 * third],
        }
    }

    pub fn single(source: usize, kind: LengthType) -> Self {
        let mut s = Self {
            variable: [0.0; 3],
            maximum: [0.0; 3],
        };
        match kind {
            LengthType::Variable => s.variable[source] = 1.0,
            LengthType::Maximum => s.maximum[source] = 1.0,
        }
        s
    }

    /// Cells in a fixed order: variable per source, then maximum per source.
    pub fn cells(&self) -> [(usize, LengthType, f64); 6] {
        let v = &self.variable;
        let m = &self.maximum;
        [
            (0, LengthType::Variable, v[0]),
            (1, LengthType::Variable, v[1]),
            (2, LengthType::Variable, v[2]),
            (0, LengthType::Maximum, m[0]),
            (1, LengthType::Maximum, m[1]),
            (2, LengthType::Maximum, m[2]),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.cells();
        if cells.iter().any(|c| !(c.2 >= 0.0 && c.2.is_finite())) {
            return Err(Error::Config("mixture weights must be finite and non-negative".into()));
        }
        let total: f64 = cells.iter().map(|c| c.2).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("mixture weights sum to {total}, expected 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub source: usize,
    pub kind: LengthType,
    pub tokens: Vec<u32>,
}

/// Deterministic, endless pretraining example stream.
///
/// Variable examples are one passage cut to a length drawn from
/// `U[10, S]`. Maximum examples join successive passages with SEP until the
/// sequence holds exactly S tokens. Each source keeps its own cursor, so
/// successive draws walk through its passages in order.
#[derive(Debug, Clone)]
pub struct Mixture {
    sources: Vec<Vec<Vec<u32>>>,
    cells: Vec<(usize, LengthType)>,
    picker: WeightedIndex<f64>,
    cursors: Vec<usize>,
    max_len: usize,
    sep: u32,
    rng: Rng64,
}

impl Mixture {
    pub fn new(sources: &[Vec<String>], spec: &MixtureSpec, max_len: usize, seed: u64) -> Result<Self> {
        let tokenised = sources
            .iter()
            .map(|s| s.iter().map(|t| ByteTokenizer::encode(t)).collect())
            .collect();
        Self::from_tokens(tokenised, spec, max_len, ByteTokenizer::vocab(), seed)
    }

    pub fn from_tokens(
        sources: Vec<Vec<Vec<u32>>>,
        spec: &MixtureSpec,
        max_len: usize,
        vocab: Vocab,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        if sources.len() != 3 {
            return Err(Error::Data(format!("expected 3 sources, got {}", sources.len())));
        }
        for (i, s) in sources.iter().enumerate() {
            if s.iter().all(|p| p.is_empty()) {
                return Err(Error::Data(format!("source {i} is empty")));
            }
        }
        if max_len < MIN_VARIABLE_LEN {
            return Err(Error::Config(format!("max length {max_len} below {MIN_VARIABLE_LEN}")));
        }
        let cells = spec.cells();
        let picker = WeightedIndex::new(cells.iter().map(|c| c.2))
            .map_err(|e| Error::Config(format!("mixture weights: {e}")))?;
        Ok(Self {
            sources,
            cells: cells.iter().map(|c| (c.0, c.1)).collect(),
            picker,
            cursors: vec![0; 3],
            max_len,
            sep: vocab.sep(),
            rng: rng::stream(seed, rng::streams::MIXTURE),
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    fn next_passage(&mut self, source: usize) -> &[u32] {
        let passages = &self.sources[source];
        loop {
            let i = self.cursors[source] % passages.len();
            self.cursors[source] += 1;
            if !passages[i].is_empty() {
                return &self.sources[source][i];
            }
        }
    }

    pub fn next_example(&mut self) -> Example {
        let (source, kind) = self.cells[self.picker.sample(&mut self.rng)];
        let tokens = match kind {
            LengthType::Variable => {
                let len = self.rng.random_range(MIN_VARIABLE_LEN..=self.max_len);
                let p = self.next_passage(source);
                p[..len.min(p.len())].to_vec()
            }
            LengthType::Maximum => {
                let mut out = Vec::with_capacity(self.max_len);
                while out.len() < self.max_len {
                    if !out.is_empty() {
                        out.push(self.sep);
                    }
                    let p = self.next_passage(source).to_vec();
                    out.extend_from_slice(&p);
                }
                out.truncate(self.max_len);
                out
            }
        };
        Example { source, kind, tokens }
    }
}

impl Iterator for Mixture {
    type Item = Example;

    fn next(&mut self) -> Option<Example> {
        Some(self.next_example())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::corpus::desk_sources;

    fn mixture(spec: &MixtureSpec, seed: u64) -> Mixture {
        Mixture::new(&desk_sources(30, 1), spec, 128, seed).unwrap()
    }

    #[test]
    fn default_spec_sums_to_one() {
        MixtureSpec::default().validate().unwrap();
        MixtureSpec::short_only().validate().unwrap();
        MixtureSpec::long_only().validate().unwrap();
        let bad = MixtureSpec {
            variable: [0.5, 0.5, 0.5],
            maximum: [0.0; 3],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn maximum_examples_have_exact_length() {
        let mut m = mixture(&MixtureSpec::long_only(), 2);
        for _ in 0..200 {
            let e = m.next_example();
            assert_eq!(e.kind, LengthType::Maximum);
            assert_eq!(e.tokens.len(), 128);
        }
    }

    #[test]
    fn single_cell_spec() {
        let mut m = mixture(&MixtureSpec::single(2, LengthType::Variable), 3);
        for _ in 0..100 {
            let e = m.next_example();
            assert_eq!((e.source, e.kind), (2, LengthType::Variable));
            assert!(e.tokens.len() <= 128);
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<Example> = mixture(&MixtureSpec::default(), 5).take(50).collect();
        let b: Vec<Example> = mixture(&MixtureSpec::default(), 5).take(50).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_source_is_a_data_error() {
        let mut s = desk_sources(3, 1);
        s[1].clear();
        assert!(matches!(
            Mixture::new(&s, &MixtureSpec::default(), 64, 0),
            Err(Error::Data(_))
        ));
    }
}
