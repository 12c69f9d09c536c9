//! Bit-packed binarized activation patterns and the Hamming kernel.
//!
//! A pattern holds one bit per spatial position of a filter's activation map,
//! set iff the activation is strictly positive. Bits are packed little-end
//! first into `u64` words; unused trailing bits are always zero.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result, Tensor};

pub(crate) fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

fn pack_into(values: &[f32], out: &mut [u64]) {
    out.fill(0);
    for (w, chunk) in out.iter_mut().zip(values.chunks(64)) {
        let mut word = 0u64;
        for (b, &v) in chunk.iter().enumerate() {
            word |= u64::from(v > 0.0) << b;
        }
        *w = word;
    }
}

/// Population count of `a XOR b`.
#[inline]
pub fn hamming(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pattern {
    bits: usize,
    words: Vec<u64>,
}

impl Pattern {
    pub fn from_bools(bits: &[bool]) -> Self {
        let mut words = vec![0u64; words_for(bits.len())];
        for (i, &b) in bits.iter().enumerate() {
            words[i / 64] |= u64::from(b) << (i % 64);
        }
        Self {
            bits: bits.len(),
            words,
        }
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn get(&self, i: usize) -> bool {
        self.words[i / 64] >> (i % 64) & 1 == 1
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.bits).map(|i| self.get(i)).collect()
    }
}

/// `value > 0` per element, packed.
pub fn binarize(values: &[f32]) -> Pattern {
    let mut words = vec![0u64; words_for(values.len())];
    pack_into(values, &mut words);
    Pattern {
        bits: values.len(),
        words,
    }
}

/// Normalized Hamming distance `popcount(a ⊕ b) / P`.
pub fn pairwise_dissimilarity(a: &Pattern, b: &Pattern) -> Result<f64> {
    if a.bits != b.bits {
        return Err(Error::Shape(format!(
            "pattern lengths differ: {} vs {}",
            a.bits, b.bits
        )));
    }
    if a.bits == 0 {
        return Err(Error::Shape("empty patterns".into()));
    }
    Ok(f64::from(hamming(&a.words, &b.words)) / a.bits as f64)
}

/// The `N` activation patterns of one filter over a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternSet {
    pub layer: usize,
    pub filter: usize,
    samples: usize,
    bits: usize,
    stride: usize,
    words: Vec<u64>,
}

impl PatternSet {
    pub fn from_patterns(layer: usize, filter: usize, patterns: &[Pattern]) -> Result<Self> {
        let bits = patterns.first().map_or(0, |p| p.bits);
        if bits == 0 || patterns.iter().any(|p| p.bits != bits) {
            return Err(Error::Shape(
                "patterns must be non-empty and of equal length".into(),
            ));
        }
        let stride = words_for(bits);
        let mut words = Vec::with_capacity(stride * patterns.len());
        for p in patterns {
            words.extend_from_slice(&p.words);
        }
        Ok(Self {
            layer,
            filter,
            samples: patterns.len(),
            bits,
            stride,
            words,
        })
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Pattern length `P` in bits.
    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn words(&self, sample: usize) -> &[u64] {
        &self.words[sample * self.stride..(sample + 1) * self.stride]
    }

    pub fn pattern(&self, sample: usize) -> Pattern {
        Pattern {
            bits: self.bits,
            words: self.words(sample).to_vec(),
        }
    }

    /// Integer Hamming distance between samples `i` and `j`.
    #[inline]
    pub fn distance(&self, i: usize, j: usize) -> u32 {
        hamming(self.words(i), self.words(j))
    }
}

/// Splits a captured `(N, C, H, W)` activation batch into `C` pattern sets
/// of `N` patterns with `P = H·W` bits.
pub fn binarize_capture(layer: usize, activation: &Tensor) -> Result<Vec<PatternSet>> {
    let s = activation.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!(
            "captured activations must be (N, C, H, W), got {s:?}"
        )));
    }
    let (n, c, p) = (s[0], s[1], s[2] * s[3]);
    let stride = words_for(p);
    let data = activation.data();
    Ok((0..c)
        .map(|k| {
            let mut words = vec![0u64; stride * n];
            for smp in 0..n {
                let base = (smp * c + k) * p;
                pack_into(&data[base..base + p], &mut words[smp * stride..(smp + 1) * stride]);
            }
            PatternSet {
                layer,
                filter: k,
                samples: n,
                bits: p,
                stride,
                words,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn strict_positivity() {
        let p = binarize(&[-1.0, 0.0, 1e-30, 3.0, -0.0]);
        assert_eq!(p.to_bools(), vec![false, false, true, true, false]);
        let neg = binarize(&[-0.5; 130]);
        assert!(neg.words().iter().all(|&w| w == 0));
    }

    #[test]
    fn identical_and_complementary() {
        let a = Pattern::from_bools(&[true, false, true, true, false]);
        let b = Pattern::from_bools(&[false, true, false, false, true]);
        assert_eq!(pairwise_dissimilarity(&a, &a).unwrap(), 0.0);
        assert_eq!(pairwise_dissimilarity(&a, &b).unwrap(), 1.0);
        let c = Pattern::from_bools(&[true; 4]);
        assert!(pairwise_dissimilarity(&a, &c).is_err());
    }

    #[test]
    fn kernel_matches_bit_loop_on_random_pairs() {
        let mut rng = seeded(1);
        for _ in 0..500 {
            let bits = 1000;
            let a: Vec<bool> = (0..bits).map(|_| rng.gen()).collect();
            let b: Vec<bool> = (0..bits).map(|_| rng.gen()).collect();
            let naive = a.iter().zip(&b).filter(|(x, y)| x != y).count();
            let got = hamming(Pattern::from_bools(&a).words(), Pattern::from_bools(&b).words());
            assert_eq!(got as usize, naive);
        }
    }

    #[test]
    fn capture_split_matches_elementwise() {
        let mut rng = seeded(4);
        let (n, c, h, w) = (3, 2, 5, 14);
        let t = Tensor::new(
            vec![n, c, h, w],
            (0..n * c * h * w).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        )
        .unwrap();
        let sets = binarize_capture(7, &t).unwrap();
        assert_eq!(sets.len(), c);
        for (k, set) in sets.iter().enumerate() {
            assert_eq!((set.layer, set.filter, set.bits()), (7, k, h * w));
            for s in 0..n {
                let base = (s * c + k) * h * w;
                let want: Vec<bool> = t.data()[base..base + h * w].iter().map(|&v| v > 0.0).collect();
                assert_eq!(set.pattern(s).to_bools(), want);
            }
        }
    }

    proptest! {
        #[test]
        fn pack_unpack_roundtrip(bits in proptest::collection::vec(any::<bool>(), 1..300)) {
            let p = Pattern::from_bools(&bits);
            prop_assert_eq!(p.to_bools(), bits.clone());
            // trailing bits stay clear
            let tail = bits.len() % 64;
            if tail != 0 {
                prop_assert_eq!(p.words().last().unwrap() >> tail, 0);
            }
            let repacked = Pattern::from_bools(&p.to_bools());
            prop_assert_eq!(repacked, p);
        }
    }
}
