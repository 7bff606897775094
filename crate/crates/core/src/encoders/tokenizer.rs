use std::hash::Hasher;

use fnv::FnvHasher;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
/// First id available to hashed words.
pub const FIRST_WORD_ID: usize = 4;

fn word_id(word: &str, vocab_size: usize) -> usize {
    if vocab_size <= FIRST_WORD_ID {
        return UNK;
    }
    let mut h = FnvHasher::default();
    h.write(word.as_bytes());
    FIRST_WORD_ID + (h.finish() % (vocab_size - FIRST_WORD_ID) as u64) as usize
}

/// Lowercases, splits on anything that is not alphanumeric and hashes each
/// word into `[4, vocab_size)`. Output is `bos + words + eos`; when longer
/// than `max_seq_len` the tail words are dropped and `eos` is kept.
pub fn tokenize(text: &str, vocab_size: usize, max_seq_len: usize) -> Vec<usize> {
    let room = max_seq_len.saturating_sub(2);
    let lower = text.to_lowercase();
    let mut ids = vec![BOS];
    ids.extend(lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).take(room).map(|w| word_id(w, vocab_size)));
    ids.push(EOS);
    ids
}
