//! Truncated probability mass functions over nonnegative operation counts.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Trailing pmf entries below this are folded into `truncated_mass`.
pub const TAIL_DROP: f64 = 1e-12;

/// Normalization tolerance for `pmf + truncated_mass + overflow_mass`.
pub const NORM_TOL: f64 = 1e-9;

/// `pmf[k]` is the probability of exactly `k` operations.
///
/// `truncated_mass` is probability that lives at counts beyond the stored
/// support but was dropped (geometric tails). `overflow_mass` is probability
/// at counts strictly greater than `pmf.len() - 1` when the distribution was
/// built in capped mode; unlike truncated mass, its location is known to be
/// above the cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountDistribution {
    pub pmf: Vec<f64>,
    pub truncated_mass: f64,
    pub overflow_mass: f64,
}

impl CountDistribution {
    pub fn new(pmf: Vec<f64>, truncated_mass: f64, overflow_mass: f64) -> Result<Self> {
        let d = CountDistribution {
            pmf,
            truncated_mass,
            overflow_mass,
        };
        d.check()?;
        Ok(d)
    }

    pub fn point_mass(k: usize) -> Self {
        let mut pmf = vec![0.0; k + 1];
        pmf[k] = 1.0;
        CountDistribution {
            pmf,
            truncated_mass: 0.0,
            overflow_mass: 0.0,
        }
    }

    pub fn bernoulli(p: f64) -> Self {
        CountDistribution {
            pmf: vec![1.0 - p, p],
            truncated_mass: 0.0,
            overflow_mass: 0.0,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.pmf.iter().any(|&p| !(p >= 0.0))
            || !(self.truncated_mass >= 0.0)
            || !(self.overflow_mass >= 0.0)
        {
            return Err(Error::InvalidParams("negative or NaN probability in pmf".into()));
        }
        let total = self.total_mass();
        if (total - 1.0).abs() > NORM_TOL {
            return Err(Error::InvalidParams(format!("pmf mass {total} is not 1")));
        }
        Ok(())
    }

    pub fn total_mass(&self) -> f64 {
        self.pmf.iter().sum::<f64>() + self.truncated_mass + self.overflow_mass
    }

    pub fn prob(&self, k: usize) -> f64 {
        self.pmf.get(k).copied().unwrap_or(0.0)
    }

    /// Mean over the stored support.
    pub fn mean(&self) -> f64 {
        self.pmf.iter().enumerate().map(|(k, p)| k as f64 * p).sum()
    }

    pub fn second_moment(&self) -> f64 {
        self.pmf
            .iter()
            .enumerate()
            .map(|(k, p)| (k * k) as f64 * p)
            .sum()
    }

    /// `P(count > k)` including overflow; truncated mass is not counted.
    pub fn tail_above(&self, k: usize) -> f64 {
        let stored: f64 = self.pmf.iter().skip(k + 1).rev().sum();
        stored + self.overflow_mass
    }

    /// Total-variation distance over the stored supports plus the
    /// difference in unplaced mass.
    pub fn tv_distance(&self, other: &CountDistribution) -> f64 {
        let n = self.pmf.len().max(other.pmf.len());
        let body: f64 = (0..n).map(|k| (self.prob(k) - other.prob(k)).abs()).sum();
        let extra = (self.truncated_mass + self.overflow_mass
            - other.truncated_mass
            - other.overflow_mass)
            .abs();
        0.5 * (body + extra)
    }

    /// Drops trailing entries below `threshold`, moving their mass into
    /// `truncated_mass`.
    pub fn drop_tail(&mut self, threshold: f64) {
        while self.pmf.len() > 1 {
            let last = *self.pmf.last().unwrap();
            if last >= threshold {
                break;
            }
            self.truncated_mass += last;
            self.pmf.pop();
        }
    }

    /// Distribution of the sum of two independent counts, keeping counts up
    /// to `cap` and folding everything above into `overflow_mass`.
    pub fn convolve_capped(&self, other: &CountDistribution, cap: usize) -> CountDistribution {
        let (a, b) = (&self.pmf, &other.pmf);
        let len = (a.len() + b.len() - 1).min(cap + 1);
        let mut pmf = vec![0.0; len];
        for (i, &x) in a.iter().enumerate().take(len) {
            if x == 0.0 {
                continue;
            }
            let upper = (len - i).min(b.len());
            for (slot, &y) in pmf[i..i + upper].iter_mut().zip(&b[..upper]) {
                *slot += x * y;
            }
        }
        // Mass of the stored-by-stored product landing above the cap.
        let suffix_b = suffix_sums(b);
        let mut beyond = 0.0;
        for (i, &x) in a.iter().enumerate() {
            let first = (cap + 1).saturating_sub(i);
            if first < b.len() {
                beyond += x * suffix_b[first];
            }
        }
        let (pa, pb) = (sum(a), sum(b));
        let (ta, tb) = (self.truncated_mass, other.truncated_mass);
        let (oa, ob) = (self.overflow_mass, other.overflow_mass);
        let overflow = beyond + oa * (pb + ob + tb) + ob * (pa + ta);
        let truncated = ta * pb + pa * tb + ta * tb;
        let mut out = CountDistribution {
            pmf,
            truncated_mass: truncated,
            overflow_mass: overflow,
        };
        trim_zeros(&mut out.pmf);
        out
    }

    /// Exact (uncapped) sum of two independent counts.
    pub fn convolve(&self, other: &CountDistribution) -> CountDistribution {
        self.convolve_capped(other, self.pmf.len() + other.pmf.len())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("distribution serializes")
    }

    /// Two-column `count,probability` CSV.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["count", "probability"])?;
        for (k, p) in self.pmf.iter().enumerate() {
            wr.write_record([k.to_string(), p.to_string()])?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

fn sum(v: &[f64]) -> f64 {
    v.iter().sum()
}

/// `out[k] = sum(v[k..])`, accumulated from the small end of the tail.
fn suffix_sums(v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len() + 1];
    for k in (0..v.len()).rev() {
        out[k] = out[k + 1] + v[k];
    }
    out
}

fn trim_zeros(pmf: &mut Vec<f64>) {
    while pmf.len() > 1 && *pmf.last().unwrap() == 0.0 {
        pmf.pop();
    }
}
