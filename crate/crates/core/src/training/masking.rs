use rand::Rng;

use crate::encoder::Vocab;
use crate::rng;

/// Masks `ids` for MLM. Each non-special position is selected with
/// probability `p`; a selected token becomes MASK (80%), a random regular
/// token (10%) or stays unchanged (10%). `labels[i]` holds the original id
/// at selected positions and `None` elsewhere.
pub fn mask_tokens<R: Rng + ?Sized>(ids: &[u32], vocab: Vocab, p: f64, rng: &mut R) -> (Vec<u32>, Vec<Option<u32>>) {
    let mut out = ids.to_vec();
    let mut labels = vec![None; ids.len()];
    for (i, &t) in ids.iter().enumerate() {
        if vocab.is_special(t) || !rng.random_bool(p) {
            continue;
        }
        labels[i] = Some(t);
        let r: f64 = rng.random();
        if r < 0.8 {
            out[i] = vocab.mask();
        } else if r < 0.9 {
            out[i] = rng.random_range(0..vocab.regular() as u32);
        }
    }
    (out, labels)
}

/// [`mask_tokens`] with its own generator seeded from `seed`.
pub fn mask_tokens_seeded(ids: &[u32], vocab: Vocab, p: f64, seed: u64) -> (Vec<u32>, Vec<Option<u32>>) {
    mask_tokens(ids, vocab, p, &mut rng::stream(seed, rng::streams::MASKING))
}
