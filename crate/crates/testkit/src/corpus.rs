//! Synthetic text resembling a lowercased, punctuation-free article dump.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

const VOCAB_SEED: u64 = 0x5eed_0f_70c4b;
const ZIPF_EXPONENT: f64 = 1.07;
/// Size of the drifting sub-vocabulary when locality is on.
const ACTIVE_WORDS: usize = 24;
/// Chance that a token under locality is a fresh draw from the whole
/// vocabulary, which also replaces one active word.
const FRESH_DRAW: f64 = 0.08;

/// `n` distinct lowercase words, the same for every corpus seed.
pub fn vocabulary(n: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(VOCAB_SEED ^ n as u64);
    let mut seen = HashSet::with_capacity(n);
    let mut words = Vec::with_capacity(n);
    while words.len() < n {
        let len = rng.random_range(2..=10);
        let w: String = (0..len).map(|_| rng.random_range(b'a'..=b'z') as char).collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    words
}

/// Exactly `size_bytes` of LF-terminated lines of words drawn from a
/// Zipf-distributed vocabulary. With `locality`, most words come from a small
/// set that drifts through the text, so repeats cluster together.
pub fn generate_corpus(size_bytes: usize, vocabulary_size: usize, locality: bool, seed: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(size_bytes);
    if size_bytes == 0 {
        return out;
    }
    assert!(vocabulary_size > 0, "a non-empty corpus needs a vocabulary");
    let vocab = vocabulary(vocabulary_size);
    let zipf = Zipf::new(vocabulary_size as f64, ZIPF_EXPONENT).expect("valid zipf parameters");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| zipf.sample(rng) as usize - 1;
    let mut active: Vec<usize> = (0..ACTIVE_WORDS).map(|_| draw(&mut rng)).collect();
    let mut next_word = |rng: &mut ChaCha8Rng| -> usize {
        if !locality {
            return draw(rng);
        }
        if rng.random_bool(FRESH_DRAW) {
            let w = draw(rng);
            let slot = rng.random_range(0..active.len());
            active[slot] = w;
            w
        } else {
            active[rng.random_range(0..active.len())]
        }
    };
    while out.len() < size_bytes {
        let words_in_line = rng.random_range(6..=16);
        let mut placed = 0;
        loop {
            let remaining = size_bytes - out.len();
            let w = vocab[next_word(&mut rng)].as_bytes();
            let sep = usize::from(placed > 0);
            if placed < words_in_line && sep + w.len() < remaining {
                if sep == 1 {
                    out.push(b' ');
                }
                out.extend_from_slice(w);
                placed += 1;
                continue;
            }
            if placed == 0 {
                // Not even one vocabulary word fits: pad with a cut-down word.
                let fill = remaining - 1;
                out.extend((0..fill).map(|i| w[i % w.len()]));
            }
            out.push(b'\n');
            break;
        }
    }
    debug_assert_eq!(out.len(), size_bytes);
    out
}
