use std::collections::{BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

const MERSENNE_61: u64 = (1 << 61) - 1;

/// FNV-1a, used so shingle hashes are stable across runs and platforms.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Hashed word `n`-shingles of a text (lowercased). Texts shorter than `n`
/// words yield a single shingle of all their words.
pub fn shingles(text: &str, n: usize) -> BTreeSet<u64> {
    let words: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
    let mut out = BTreeSet::new();
    if words.is_empty() {
        return out;
    }
    let n = n.max(1).min(words.len());
    for w in words.windows(n) {
        out.insert(fnv1a(w.join("\u{1f}").as_bytes()));
    }
    out
}

/// Exact Jaccard similarity of two hashed shingle sets.
pub fn jaccard(a: &BTreeSet<u64>, b: &BTreeSet<u64>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    inter as f64 / (a.len() + b.len() - inter) as f64
}

fn mulmod(a: u64, b: u64) -> u64 {
    ((a as u128 * b as u128) % MERSENNE_61 as u128) as u64
}

/// A family of universal hash functions `(a·x + b) mod (2^61 - 1)`.
pub struct MinHasher {
    coeffs: Vec<(u64, u64)>,
}

impl MinHasher {
    pub fn new(permutations: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeffs = (0..permutations)
            .map(|_| (rng.gen_range(1..MERSENNE_61), rng.gen_range(0..MERSENNE_61)))
            .collect();
        MinHasher { coeffs }
    }

    pub fn signature(&self, set: &BTreeSet<u64>) -> Vec<u64> {
        self.coeffs
            .iter()
            .map(|&(a, b)| {
                set.iter()
                    .map(|&x| (mulmod(a, x % MERSENNE_61) + b) % MERSENNE_61)
                    .min()
                    .unwrap_or(u64::MAX)
            })
            .collect()
    }
}

/// Indices of items that are near-duplicates (exact Jaccard ≥ `threshold`)
/// of some earlier item, found through LSH banding.
pub fn lsh_duplicates(
    sets: &[BTreeSet<u64>],
    permutations: usize,
    bands: usize,
    threshold: f64,
    seed: u64,
) -> Vec<bool> {
    let hasher = MinHasher::new(permutations, seed);
    let signatures: Vec<Vec<u64>> = sets.par_iter().map(|s| hasher.signature(s)).collect();
    let rows = permutations / bands;
    let mut buckets: Vec<HashMap<Vec<u64>, Vec<usize>>> = vec![HashMap::new(); bands];
    let mut duplicate = vec![false; sets.len()];
    for (i, sig) in signatures.iter().enumerate() {
        let mut candidates = BTreeSet::new();
        for (band, table) in buckets.iter_mut().enumerate() {
            let key = sig[band * rows..(band + 1) * rows].to_vec();
            let slot = table.entry(key).or_default();
            candidates.extend(slot.iter().copied());
            slot.push(i);
        }
        duplicate[i] = candidates
            .into_iter()
            .any(|j| jaccard(&sets[i], &sets[j]) >= threshold);
    }
    duplicate
}
