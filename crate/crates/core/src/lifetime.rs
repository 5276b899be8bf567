//! From per-challenge operation counts to the probability that a PUF is dead
//! after `N` challenges, and the half-life derived from it.
//!
//! Per-challenge counts are treated as i.i.d. across challenges. The `N`-fold
//! sum is formed by binary powering with every count above the endurance
//! limit folded into a single overflow bucket, which is exactly the mass the
//! cell-death probability needs. Cells die independently, so the number of
//! dead cells among `M` is binomial and the PUF is dead when strictly more
//! than `floor(dead_fraction * M)` of them are.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::MarkovChainSpec;
use crate::dist::CountDistribution;
use crate::error::{Error, Result};
use crate::occupancy::{per_challenge_ops, EvolveOptions, PerChallengeOps};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    SetOnly,
    ResetOnly,
    Combined,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::SetOnly => "set",
            Mode::ResetOnly => "reset",
            Mode::Combined => "combined",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "set" | "set-only" => Ok(Mode::SetOnly),
            "reset" | "reset-only" => Ok(Mode::ResetOnly),
            "combined" => Ok(Mode::Combined),
            other => Err(Error::InvalidParams(format!("unknown mode '{other}'"))),
        }
    }
}

/// How set and reset wear combine into cell death in [`Mode::Combined`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombineRule {
    /// The cell dies when set + reset operations exceed the limit.
    Sum,
    /// The cell dies when either count alone exceeds the limit. The two
    /// totals are taken as independent.
    EitherExceeds,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LifetimeParams {
    pub endurance_limit: usize,
    pub cell_count: usize,
    pub dead_fraction: f64,
    pub mode: Mode,
    pub combine: CombineRule,
}

impl Default for LifetimeParams {
    fn default() -> Self {
        LifetimeParams {
            endurance_limit: 1000,
            cell_count: 256,
            dead_fraction: 0.15,
            mode: Mode::SetOnly,
            combine: CombineRule::Sum,
        }
    }
}

impl LifetimeParams {
    pub fn with_mode(mode: Mode) -> Self {
        LifetimeParams {
            mode,
            ..Default::default()
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.endurance_limit < 1 {
            return Err(Error::InvalidParams("endurance_limit must be >= 1".into()));
        }
        if self.cell_count < 1 {
            return Err(Error::InvalidParams("cell_count must be >= 1".into()));
        }
        if !(self.dead_fraction > 0.0 && self.dead_fraction < 1.0) {
            return Err(Error::InvalidParams(format!(
                "dead_fraction must be in (0, 1), got {}",
                self.dead_fraction
            )));
        }
        Ok(())
    }

    /// Largest dead-cell count that still leaves the PUF alive.
    pub fn dead_threshold(&self) -> usize {
        // Guard against products like 0.29 * 100 = 28.999999999999996.
        (self.dead_fraction * self.cell_count as f64 + 1e-9).floor() as usize
    }
}

/// Distribution of the sum of `n` i.i.d. copies of `per_challenge`, with all
/// mass above `cap` collected in `overflow_mass`.
pub fn total_ops_after_n(per_challenge: &CountDistribution, n: u64, cap: usize) -> CountDistribution {
    let mut result = CountDistribution::point_mass(0);
    if n == 0 {
        return result;
    }
    let mut base = per_challenge.convolve_capped(&CountDistribution::point_mass(0), cap);
    let mut k = n;
    loop {
        if k & 1 == 1 {
            result = result.convolve_capped(&base, cap);
        }
        k >>= 1;
        if k == 0 {
            break;
        }
        base = base.convolve_capped(&base, cap);
    }
    result
}

/// `P(count > limit)`. Above one half it is taken as the complement of the
/// head and truncated mass, so rounding deficits in the stored mass do not
/// pull a nearly certain death below its value at smaller `N`.
pub fn cell_dead_prob(total: &CountDistribution, limit: usize) -> f64 {
    let tail = total.tail_above(limit);
    if tail <= 0.5 {
        return tail.clamp(0.0, 1.0);
    }
    let head: f64 = total.pmf.iter().take(limit + 1).sum();
    (1.0 - head - total.truncated_mass).clamp(0.0, 1.0)
}

/// `ln C(m, k)` for all `k in 0..=m`.
fn ln_binomials(m: usize) -> Vec<f64> {
    let mut ln_fact = vec![0.0; m + 1];
    for i in 1..=m {
        ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
    }
    (0..=m)
        .map(|k| ln_fact[m] - ln_fact[k] - ln_fact[m - k])
        .collect()
}

/// Probability that strictly more than `threshold` of `m` independent cells,
/// each dead with probability `p`, are dead. Summed in log space.
pub fn binomial_upper_tail(m: usize, threshold: usize, p: f64) -> f64 {
    if threshold >= m || p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let (lp, lq) = (p.ln(), (-p).ln_1p());
    let lc = ln_binomials(m);
    let ln_term = |k: usize| lc[k] + k as f64 * lp + (m - k) as f64 * lq;
    let upper = log_sum_exp((threshold + 1..=m).map(ln_term)).exp();
    if upper <= 0.5 {
        return upper.clamp(0.0, 1.0);
    }
    // Near 1 the complement keeps the result from dipping by an ulp.
    let lower = log_sum_exp((0..=threshold).map(ln_term)).exp();
    (1.0 - lower).clamp(0.0, 1.0)
}

fn log_sum_exp(terms: impl Iterator<Item = f64>) -> f64 {
    let terms: Vec<f64> = terms.collect();
    let peak = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if peak == f64::NEG_INFINITY {
        return peak;
    }
    peak + terms.iter().map(|&t| (t - peak).exp()).sum::<f64>().ln()
}

pub fn puf_dead_prob(p_cell: f64, params: &LifetimeParams) -> f64 {
    binomial_upper_tail(params.cell_count, params.dead_threshold(), p_cell)
}

/// Per-challenge distributions of a chain, ready for repeated `P(dead | N)`
/// queries.
#[derive(Debug, Clone)]
pub struct LifetimeModel {
    pub ops: PerChallengeOps,
    pub params: LifetimeParams,
}

impl LifetimeModel {
    pub fn new(chain: &MarkovChainSpec, params: LifetimeParams, opts: &EvolveOptions) -> Result<Self> {
        params.check()?;
        let ops = per_challenge_ops(chain, opts)?;
        Ok(LifetimeModel { ops, params })
    }

    pub fn from_ops(ops: PerChallengeOps, params: LifetimeParams) -> Result<Self> {
        params.check()?;
        Ok(LifetimeModel { ops, params })
    }

    pub fn cell_dead(&self, n: u64) -> f64 {
        let limit = self.params.endurance_limit;
        let tail = |d: &CountDistribution| cell_dead_prob(&total_ops_after_n(d, n, limit), limit);
        match (self.params.mode, self.params.combine) {
            (Mode::SetOnly, _) => tail(&self.ops.set_dist),
            (Mode::ResetOnly, _) => tail(&self.ops.reset_dist),
            (Mode::Combined, CombineRule::Sum) => tail(&self.ops.combined_dist),
            (Mode::Combined, CombineRule::EitherExceeds) => {
                let (s, r) = (tail(&self.ops.set_dist), tail(&self.ops.reset_dist));
                1.0 - (1.0 - s) * (1.0 - r)
            }
        }
    }

    pub fn p_dead(&self, n: u64) -> f64 {
        puf_dead_prob(self.cell_dead(n), &self.params)
    }

    /// Smallest integer `N` with `P(dead | N) >= 0.5`, searched up to `max_n`.
    pub fn half_life(&self, max_n: u64) -> Result<u64> {
        let mut lo = 0u64;
        let mut hi = 1u64;
        loop {
            let p = self.p_dead(hi);
            if p >= 0.5 {
                break;
            }
            if hi >= max_n {
                return Err(Error::NoCrossing { max_n: hi, max_p: p });
            }
            lo = hi;
            hi = (hi * 2).min(max_n);
        }
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if self.p_dead(mid) >= 0.5 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }

    pub fn curve(&self, grid: &[u64]) -> Result<LifetimeCurve> {
        if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParams("grid must be nonempty and strictly increasing".into()));
        }
        let p_dead = grid.par_iter().map(|&n| self.p_dead(n)).collect();
        Ok(LifetimeCurve {
            challenge_grid: grid.to_vec(),
            p_dead,
            params: self.params,
        })
    }

    /// Curve on `grid`, with extra integer points bisected into the interval
    /// where the curve first crosses 0.5 until it brackets a single step.
    pub fn refined_curve(&self, grid: &[u64]) -> Result<LifetimeCurve> {
        let mut curve = self.curve(grid)?;
        let Some(i) = curve.p_dead.iter().position(|&p| p >= 0.5) else {
            return Ok(curve);
        };
        if i == 0 {
            return Ok(curve);
        }
        let (mut lo, mut hi) = (curve.challenge_grid[i - 1], curve.challenge_grid[i]);
        let mut extra = Vec::new();
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            let p = self.p_dead(mid);
            extra.push((mid, p));
            if p >= 0.5 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let mut points: Vec<(u64, f64)> = curve
            .challenge_grid
            .iter()
            .copied()
            .zip(curve.p_dead.iter().copied())
            .chain(extra)
            .collect();
        points.sort_by_key(|&(n, _)| n);
        curve.challenge_grid = points.iter().map(|&(n, _)| n).collect();
        curve.p_dead = points.iter().map(|&(_, p)| p).collect();
        Ok(curve)
    }
}

/// Geometric grid `1, 1.2, 1.44, ...` rounded to integers, deduplicated, up to
/// and including `max_n`.
pub fn geometric_grid(min_n: u64, max_n: u64, factor: f64) -> Vec<u64> {
    assert!(factor > 1.0 && min_n >= 1 && max_n >= min_n);
    let mut out = Vec::new();
    let mut x = min_n as f64;
    while x < max_n as f64 {
        let n = x.round() as u64;
        if out.last() != Some(&n) {
            out.push(n);
        }
        x *= factor;
    }
    if out.last() != Some(&max_n) {
        out.push(max_n);
    }
    out
}

pub fn default_grid() -> Vec<u64> {
    geometric_grid(1, 10_000_000, 1.2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LifetimeCurve {
    pub challenge_grid: Vec<u64>,
    pub p_dead: Vec<f64>,
    pub params: LifetimeParams,
}

impl LifetimeCurve {
    pub fn is_monotone(&self) -> bool {
        self.p_dead.windows(2).all(|w| w[1] >= w[0])
    }

    /// Ratio between the first grid point with `P > hi` and the last grid
    /// point with `P < lo`; `None` if the curve does not cover both levels.
    pub fn transition_span(&self, lo: f64, hi: f64) -> Option<f64> {
        let last_low = self
            .challenge_grid
            .iter()
            .zip(&self.p_dead)
            .filter(|(_, &p)| p < lo)
            .map(|(&n, _)| n)
            .next_back()?;
        let first_high = self
            .challenge_grid
            .iter()
            .zip(&self.p_dead)
            .find(|(_, &p)| p > hi)
            .map(|(&n, _)| n)?;
        Some(first_high as f64 / last_low as f64)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["N", "p_dead"])?;
        for (n, p) in self.challenge_grid.iter().zip(&self.p_dead) {
            wr.write_record([n.to_string(), p.to_string()])?;
        }
        wr.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Smallest `N` with `P(dead) >= 0.5`, interpolating linearly in `log N`
/// between grid points and rounding up.
pub fn half_life(curve: &LifetimeCurve) -> Result<u64> {
    let g = &curve.challenge_grid;
    let p = &curve.p_dead;
    let Some(i) = p.iter().position(|&x| x >= 0.5) else {
        let (max_n, max_p) = g
            .iter()
            .zip(p)
            .next_back()
            .map(|(&n, &x)| (n, x))
            .unwrap_or((0, 0.0));
        return Err(Error::NoCrossing { max_n, max_p });
    };
    if i == 0 || p[i] == 0.5 {
        return Ok(g[i]);
    }
    let (n0, n1) = (g[i - 1] as f64, g[i] as f64);
    let frac = (0.5 - p[i - 1]) / (p[i] - p[i - 1]);
    let ln_n = n0.ln() + frac * (n1.ln() - n0.ln());
    Ok((ln_n.exp() - 1e-9).ceil().clamp(n0 + 1.0, n1) as u64)
}

/// Finds the knob value whose half-life equals `target`, assuming the
/// half-life is nonincreasing in the knob over `[lo, hi]`.
pub fn calibrate<F>(target: u64, mut lo: f64, mut hi: f64, iters: usize, half_life_at: F) -> Result<f64>
where
    F: Fn(f64) -> Result<u64>,
{
    let at_lo = half_life_at(lo)?;
    let at_hi = half_life_at(hi)?;
    if !(at_lo >= target && target >= at_hi) {
        return Err(Error::InvalidParams(format!(
            "target {target} not bracketed: half-life {at_lo} at {lo}, {at_hi} at {hi}"
        )));
    }
    for _ in 0..iters {
        let mid = 0.5 * (lo + hi);
        if half_life_at(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// One row per PUF: half-life under each mode that was evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfLifeRow {
    pub puf: String,
    pub set: Option<u64>,
    pub reset: Option<u64>,
    pub combined: Option<u64>,
}

pub fn write_half_life_table<W: Write>(rows: &[HalfLifeRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["PUF", "Half-life (Set)", "Half-life (Reset)", "Half-life (Combined)"])?;
    let cell = |x: Option<u64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        wr.write_record([r.puf.clone(), cell(r.set), cell(r.reset), cell(r.combined)])?;
    }
    wr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
