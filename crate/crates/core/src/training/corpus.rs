//! Synthetic desk corpora. Three sources with disjoint statistics stand in for
//! web text, an encyclopedia and fiction: each has its own letter set,
//! lexicon, word-frequency skew, sentence shape and passage length.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SourceProfile {
    Web,
    Encyclopedia,
    Books,
}

impl SourceProfile {
    pub const ALL: [SourceProfile; 3] = [Self::Web, Self::Encyclopedia, Self::Books];

    pub fn name(self) -> &'static str {
        match self {
            Self::Web => "web",
            Self::Encyclopedia => "encyclopedia",
            Self::Books => "books",
        }
    }

    fn params(self) -> Profile {
        match self {
            Self::Web => Profile {
                consonants: b"bcdfgklmnprst",
                vowels: b"aeiou",
                syllables: (1, 2),
                lexicon: 240,
                zipf: 1.1,
                words: (4, 10),
                sentences: (2, 5),
                capitalise_rate: 0.0,
                digit_rate: 0.05,
                quote_rate: 0.0,
            },
            Self::Encyclopedia => Profile {
                consonants: b"dhjkmnrstvz",
                vowels: b"aeioy",
                syllables: (2, 3),
                lexicon: 400,
                zipf: 0.9,
                words: (8, 16),
                sentences: (3, 7),
                capitalise_rate: 0.15,
                digit_rate: 0.08,
                quote_rate: 0.0,
            },
            Self::Books => Profile {
                consonants: b"bfghlmnprstw",
                vowels: b"aeou",
                syllables: (1, 3),
                lexicon: 320,
                zipf: 1.3,
                words: (5, 14),
                sentences: (4, 10),
                capitalise_rate: 0.03,
                digit_rate: 0.0,
                quote_rate: 0.3,
            },
        }
    }

    fn stream(self) -> u64 {
        match self {
            Self::Web => 0,
            Self::Encyclopedia => 1,
            Self::Books => 2,
        }
    }
}

struct Profile {
    consonants: &'static [u8],
    vowels: &'static [u8],
    syllables: (usize, usize),
    lexicon: usize,
    zipf: f64,
    words: (usize, usize),
    sentences: (usize, usize),
    capitalise_rate: f64,
    digit_rate: f64,
    quote_rate: f64,
}

fn pick<R: Rng + ?Sized>(rng: &mut R, set: &[u8]) -> char {
    set[rng.random_range(0..set.len())] as char
}

fn lexicon<R: Rng + ?Sized>(p: &Profile, rng: &mut R) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(p.lexicon);
    while out.len() < p.lexicon {
        let n = rng.random_range(p.syllables.0..=p.syllables.1);
        let w: String = (0..n)
            .flat_map(|_| [pick(rng, p.consonants), pick(rng, p.vowels)])
            .collect();
        if seen.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

/// `n_passages` passages from one synthetic source, deterministic in `seed`.
pub fn synthetic_source(profile: SourceProfile, n_passages: usize, seed: u64) -> Vec<String> {
    let p = profile.params();
    let mut rng = rng::stream(seed, rng::streams::CORPUS * 16 + profile.stream());
    let words = lexicon(&p, &mut rng);
    let zipf: Vec<f64> = (1..=words.len()).map(|r| (r as f64).powf(-p.zipf)).collect();
    let unigram = WeightedIndex::new(&zipf).expect("positive weights");

    (0..n_passages)
        .map(|_| {
            // each passage leans on a small topic set drawn once
            let topic: Vec<usize> = (0..6).map(|_| unigram.sample(&mut rng)).collect();
            let n_sent = rng.random_range(p.sentences.0..=p.sentences.1);
            let mut text = String::new();
            for s in 0..n_sent {
                if s > 0 {
                    text.push(' ');
                }
                let quoted = rng.random_bool(p.quote_rate);
                if quoted {
                    text.push('"');
                }
                let n_words = rng.random_range(p.words.0..=p.words.1);
                for w in 0..n_words {
                    if w > 0 {
                        text.push(' ');
                    }
                    if rng.random_bool(p.digit_rate) {
                        text.push_str(&rng.random_range(1..2000u32).to_string());
                        continue;
                    }
                    let idx = if rng.random_bool(0.3) {
                        topic[rng.random_range(0..topic.len())]
                    } else {
                        unigram.sample(&mut rng)
                    };
                    let word = &words[idx];
                    if w == 0 || rng.random_bool(p.capitalise_rate) {
                        let mut c = word.chars();
                        let first = c.next().expect("non-empty word").to_ascii_uppercase();
                        text.push(first);
                        text.push_str(c.as_str());
                    } else {
                        text.push_str(word);
                    }
                }
                text.push('.');
                if quoted {
                    text.push('"');
                }
            }
            text
        })
        .collect()
}

/// The three default desk sources in mixture order (web, encyclopedia, books).
pub fn desk_sources(n_passages: usize, seed: u64) -> Vec<Vec<String>> {
    SourceProfile::ALL
        .iter()
        .map(|&p| synthetic_source(p, n_passages, seed))
        .collect()
}
