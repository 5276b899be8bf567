#![allow(dead_code)]

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng;
use rand_distr::{Binomial, Distribution};

use pufwear::chain::{ChainDocument, OpTag, StateSpec};
use pufwear::dist::CountDistribution;

pub fn binomial_coeff(n: u64, k: u64) -> BigInt {
    let mut c = BigInt::one();
    for i in 0..k {
        c = c * BigInt::from(n - i) / BigInt::from(i + 1);
    }
    c
}

/// Exact `P(X = k)` for `X ~ Binomial(n, num/den)`.
pub fn binomial_pmf_exact(n: u64, k: u64, num: u64, den: u64) -> BigRational {
    let p = BigRational::new(BigInt::from(num), BigInt::from(den));
    let q = BigRational::one() - &p;
    BigRational::from_integer(binomial_coeff(n, k)) * pow(&p, k) * pow(&q, n - k)
}

/// Exact `P(X > t)` for `X ~ Binomial(n, num/den)`.
pub fn binomial_tail_exact(n: u64, t: u64, num: u64, den: u64) -> BigRational {
    let mut acc = BigRational::zero();
    for k in t + 1..=n {
        acc += binomial_pmf_exact(n, k, num, den);
    }
    acc
}

fn pow(x: &BigRational, e: u64) -> BigRational {
    let mut r = BigRational::one();
    for _ in 0..e {
        r *= x;
    }
    r
}

pub fn to_f64(x: &BigRational) -> f64 {
    x.to_f64().expect("finite")
}

/// Plain double-loop convolution of two pmfs.
pub fn naive_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, x) in a.iter().enumerate() {
        for (j, y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

/// `n`-fold sum by repeated one-at-a-time convolution.
pub fn naive_n_fold(pmf: &[f64], n: u64) -> Vec<f64> {
    let mut acc = vec![1.0];
    for _ in 0..n {
        acc = naive_convolve(&acc, pmf);
    }
    acc
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    (0..a.len().max(b.len()))
        .map(|k| (a.get(k).copied().unwrap_or(0.0) - b.get(k).copied().unwrap_or(0.0)).abs())
        .fold(0.0, f64::max)
}

/// Random absorbing chain with `states` states (last one terminal) and random
/// op tags. Every transient row keeps at least 10% mass on the terminal.
pub fn random_chain<R: Rng>(rng: &mut R, states: usize) -> ChainDocument {
    assert!(states >= 2);
    let term = states - 1;
    let tags = [OpTag::Set, OpTag::Reset, OpTag::None];
    let mut transition = vec![vec![0.0; states]; states];
    for (i, row) in transition.iter_mut().enumerate().take(term) {
        let mut w: Vec<f64> = (0..states)
            .map(|j| if j != i && rng.random_bool(0.3) { 0.0 } else { rng.random::<f64>() })
            .collect();
        w[term] = 0.0;
        let s: f64 = w.iter().sum();
        let to_term = 0.1 + 0.8 * rng.random::<f64>();
        for (j, x) in w.iter().enumerate() {
            row[j] = if s > 0.0 { (1.0 - to_term) * x / s } else { 0.0 };
        }
        row[term] += if s > 0.0 { to_term } else { 1.0 };
        let total: f64 = row.iter().sum();
        row[term] += 1.0 - total;
    }
    transition[term][term] = 1.0;
    let st = (0..states)
        .map(|id| StateSpec {
            id,
            label: format!("s{id}"),
            op_tag: if id == term { OpTag::None } else { tags[rng.random_range(0..3)] },
        })
        .collect();
    ChainDocument {
        states: st,
        transition,
        initial: 0,
        terminal: vec![term],
    }
}

/// Samples one value from a pmf by inversion.
pub fn sample_pmf<R: Rng>(rng: &mut R, cdf: &[f64]) -> usize {
    let u: f64 = rng.random();
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

pub fn cdf(pmf: &[f64]) -> Vec<f64> {
    pmf.iter()
        .scan(0.0, |acc, p| {
            *acc += p;
            Some(*acc)
        })
        .collect()
}

/// Monte Carlo of the `n`-challenge total of a per-challenge count: draw how
/// many challenges produce a nonzero count, then draw each nonzero count.
pub fn binomial_skip_totals<R: Rng>(rng: &mut R, per: &CountDistribution, n: u64, cells: usize) -> Vec<usize> {
    let p0 = per.prob(0);
    let rest: Vec<f64> = per.pmf.iter().enumerate().map(|(k, &p)| if k == 0 { 0.0 } else { p / (1.0 - p0) }).collect();
    let c = cdf(&rest);
    let hits = Binomial::new(n, 1.0 - p0).unwrap();
    (0..cells)
        .map(|_| {
            let k = hits.sample(rng);
            (0..k).map(|_| sample_pmf(rng, &c)).sum()
        })
        .collect()
}

pub fn empirical(samples: &[usize]) -> Vec<f64> {
    let max = samples.iter().copied().max().unwrap_or(0);
    let mut h = vec![0.0; max + 1];
    for &s in samples {
        h[s] += 1.0;
    }
    h.iter().map(|c| c / samples.len() as f64).collect()
}
