//! Reliability, uniformity and uniqueness of packed PUF responses.
//!
//! Single-bit responses are packed, in generation order, into words of `m`
//! bits. All three metrics are percentages based on Hamming distance or
//! weight normalized by `m`.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

/// Fixed-width bit word.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Word {
    limbs: Vec<u64>,
    width: usize,
}

impl Word {
    pub fn from_bits(bits: &[bool]) -> Self {
        let mut limbs = vec![0u64; bits.len().div_ceil(64)];
        for (i, &b) in bits.iter().enumerate() {
            if b {
                limbs[i / 64] |= 1 << (i % 64);
            }
        }
        Word {
            limbs,
            width: bits.len(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bit(&self, i: usize) -> bool {
        (self.limbs[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn weight(&self) -> usize {
        self.limbs.iter().map(|l| l.count_ones() as usize).sum()
    }

    pub fn complement(&self) -> Self {
        let bits: Vec<bool> = (0..self.width).map(|i| !self.bit(i)).collect();
        Word::from_bits(&bits)
    }

    pub fn hamming(&self, other: &Word) -> Result<usize> {
        if self.width != other.width {
            return Err(Error::WidthMismatch {
                expected: self.width,
                got: other.width,
            });
        }
        Ok(self
            .limbs
            .iter()
            .zip(&other.limbs)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum())
    }
}

/// Responses of one device packed into equal-width words.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseSet {
    pub words: Vec<Word>,
    pub width: usize,
    /// Trailing bits that did not fill a whole word.
    pub dropped: usize,
}

pub fn pack(bits: &[bool], m: usize) -> Result<ResponseSet> {
    if bits.is_empty() {
        return Err(Error::InsufficientData("no response bits to pack".into()));
    }
    if m == 0 {
        return Err(Error::InvalidParams("word width must be >= 1".into()));
    }
    let words: Vec<Word> = bits.chunks_exact(m).map(Word::from_bits).collect();
    Ok(ResponseSet {
        words,
        width: m,
        dropped: bits.len() % m,
    })
}

pub fn reliability(reference: &Word, repeats: &[Word]) -> Result<f64> {
    if repeats.is_empty() {
        return Err(Error::InsufficientData("reliability needs at least one repeat".into()));
    }
    let m = reference.width() as f64;
    let mut acc = 0.0;
    for r in repeats {
        acc += reference.hamming(r)? as f64 / m;
    }
    Ok(100.0 * (1.0 - acc / repeats.len() as f64))
}

pub fn uniformity(word: &Word) -> f64 {
    100.0 * word.weight() as f64 / word.width() as f64
}

/// Mean pairwise normalized Hamming distance between devices.
pub fn uniqueness(words: &[Word]) -> Result<f64> {
    let n = words.len();
    if n < 2 {
        return Err(Error::InsufficientData(
            "uniqueness needs responses from at least 2 devices".into(),
        ));
    }
    let m = words[0].width() as f64;
    let mut acc = 0.0;
    for i in 0..n - 1 {
        for j in i + 1..n {
            acc += words[i].hamming(&words[j])? as f64 / m;
        }
    }
    Ok(100.0 * 2.0 / (n * (n - 1)) as f64 * acc)
}

/// Hamming weight of every word, as a histogram over `0..=width`.
pub fn weight_histogram(set: &ResponseSet) -> Vec<u64> {
    let mut h = vec![0; set.width + 1];
    for w in &set.words {
        h[w.weight()] += 1;
    }
    h
}

/// Word-by-word Hamming distances between two devices answering the same
/// challenges, as a histogram over `0..=width`.
pub fn distance_histogram(a: &ResponseSet, b: &ResponseSet) -> Result<Vec<u64>> {
    if a.width != b.width {
        return Err(Error::WidthMismatch {
            expected: a.width,
            got: b.width,
        });
    }
    let mut h = vec![0; a.width + 1];
    for (x, y) in a.words.iter().zip(&b.words) {
        h[x.hamming(y)?] += 1;
    }
    Ok(h)
}

pub fn histogram_mean(h: &[u64]) -> f64 {
    let total: u64 = h.iter().sum();
    if total == 0 {
        return f64::NAN;
    }
    h.iter()
        .enumerate()
        .map(|(k, &c)| k as f64 * c as f64)
        .sum::<f64>()
        / total as f64
}

pub fn write_histogram_csv<W: Write>(h: &[u64], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["bin", "count"])?;
    for (k, c) in h.iter().enumerate() {
        wr.write_record([k.to_string(), c.to_string()])?;
    }
    wr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsSummary {
    pub width: usize,
    pub words_per_device: Vec<usize>,
    pub dropped_bits: Vec<usize>,
    /// Mean uniformity per device, percent.
    pub uniformity: Vec<f64>,
    /// Mean word-by-word uniqueness across all device pairs, percent.
    pub uniqueness: Option<f64>,
    pub reliability: Option<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Word {
        Word::from_bits(&s.chars().map(|c| c == '1').collect::<Vec<_>>())
    }

    #[test]
    fn packing() {
        let bits: Vec<bool> = (0..130).map(|i| i % 3 == 0).collect();
        let p = pack(&bits, 128).unwrap();
        assert_eq!(p.words.len(), 1);
        assert_eq!(p.dropped, 2);
        assert_eq!(p.words[0], Word::from_bits(&bits[..128]));
        let p = pack(&vec![true; 102_400], 128).unwrap();
        assert_eq!(p.words.len(), 800);
        assert!(pack(&[], 128).is_err());
    }

    #[test]
    fn reliability_edges() {
        let r = w("10110010");
        assert_eq!(reliability(&r, &[r.clone(), r.clone()]).unwrap(), 100.0);
        assert_eq!(reliability(&r, &[r.complement()]).unwrap(), 0.0);
        assert!(reliability(&r, &[]).is_err());
        assert!(reliability(&r, &[w("1011")]).is_err());
    }

    #[test]
    fn uniformity_edges() {
        assert_eq!(uniformity(&Word::from_bits(&[false; 128])), 0.0);
        let alt: Vec<bool> = (0..128).map(|i| i % 2 == 1).collect();
        assert_eq!(uniformity(&Word::from_bits(&alt)), 50.0);
    }

    #[test]
    fn uniqueness_edges() {
        let a = w("1100101011110000");
        assert_eq!(uniqueness(&[a.clone(), a.clone()]).unwrap(), 0.0);
        assert_eq!(uniqueness(&[a.clone(), a.complement()]).unwrap(), 100.0);
        assert!(uniqueness(&[a]).is_err());
    }

    #[test]
    fn histograms() {
        let a = pack(&[true, true, false, false, true, false, false, false], 4).unwrap();
        let b = pack(&[true, false, false, false, true, false, false, true], 4).unwrap();
        assert_eq!(weight_histogram(&a), vec![0, 1, 1, 0, 0]);
        assert_eq!(distance_histogram(&a, &b).unwrap(), vec![0, 2, 0, 0, 0]);
        assert_eq!(histogram_mean(&[0, 2, 0, 0, 0]), 1.0);
    }
}
