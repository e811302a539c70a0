use crate::error::{Error, Result};

/// Vocabulary layout: regular ids first, then the four specials.
///
/// For the byte tokenizer (`size = 260`) this gives PAD=256, CLS=257,
/// SEP=258, MASK=259.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    size: usize,
}

pub const BYTE_VOCAB_SIZE: usize = 260;
const SPECIALS: usize = 4;

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size <= SPECIALS {
            return Err(Error::Config(format!("vocabulary of {size} leaves no regular tokens")));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Number of non-special ids, `[0, regular)`.
    pub fn regular(&self) -> usize {
        self.size - SPECIALS
    }

    pub fn pad(&self) -> u32 {
        (self.size - 4) as u32
    }

    pub fn cls(&self) -> u32 {
        (self.size - 3) as u32
    }

    pub fn sep(&self) -> u32 {
        (self.size - 2) as u32
    }

    pub fn mask(&self) -> u32 {
        (self.size - 1) as u32
    }

    pub fn is_special(&self, id: u32) -> bool {
        id as usize >= self.regular()
    }
}

/// Byte-level tokenizer: one token per UTF-8 byte, no normalisation.
#[derive(Debug, Clone, Copy)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn vocab() -> Vocab {
        Vocab { size: BYTE_VOCAB_SIZE }
    }

    pub fn encode(text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    /// Lossy inverse; special ids are rendered as bracketed names.
    pub fn decode(ids: &[u32]) -> String {
        let v = Self::vocab();
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            match id {
                i if i < 256 => out.push(i as u8),
                i if i == v.pad() => out.extend_from_slice(b"[PAD]"),
                i if i == v.cls() => out.extend_from_slice(b"[CLS]"),
                i if i == v.sep() => out.extend_from_slice(b"[SEP]"),
                i if i == v.mask() => out.extend_from_slice(b"[MASK]"),
                _ => out.extend_from_slice(b"[UNK]"),
            }
        }
        String::from_utf8_lossy(&out).into_owned()
    }
}
