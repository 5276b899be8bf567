//! State-occupancy evolution and per-challenge visit-count distributions.
//!
//! [`evolve`] pushes the one-hot initial vector through the transition matrix
//! until the terminal states hold at least `1 - epsilon` of the mass. The
//! visit-count distribution of a group of states is then obtained by a
//! recursion over iterations: at each step the running count either advances
//! by one (the group is occupied) or stays put.
//!
//! Two forms of that recursion are provided. [`visit_count_distribution`]
//! conditions the advance on the current state, carrying one count vector per
//! state, and is exact for any absorbing chain.
//! [`marginal_visit_count_distribution`] uses only the marginal occupancy
//! `P_m(t, group)` at each step, which treats visits at different iterations
//! as independent; it is kept for comparison and is exact only when that holds
//! (for example, when no group state can be revisited).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::chain::{MarkovChainSpec, OpTag};
use crate::dist::{CountDistribution, TAIL_DROP};
use crate::error::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MAX_ITERS: usize = 1_000_000;

/// Row-normalization tolerance for occupancy vectors.
const ROW_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolveOptions {
    pub epsilon: f64,
    pub max_iters: usize,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions {
            epsilon: DEFAULT_EPSILON,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

/// `probs[t][s]` is the probability that the chain occupies `s` at iteration `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateOccupancy {
    pub probs: Vec<Vec<f64>>,
    pub converged_at: usize,
}

impl StateOccupancy {
    /// `sum_{s in group} P_m(t, s)`.
    pub fn group_prob(&self, t: usize, group: &[usize]) -> f64 {
        group.iter().map(|&s| self.probs[t][s]).sum()
    }

    /// Expected number of group visits over iterations `0..=converged_at`.
    pub fn expected_visits(&self, group: &[usize]) -> f64 {
        (0..self.probs.len()).map(|t| self.group_prob(t, group)).sum()
    }

    pub fn terminal_mass(&self, chain: &MarkovChainSpec, t: usize) -> f64 {
        chain.terminal().iter().map(|&s| self.probs[t][s]).sum()
    }
}

pub fn evolve(chain: &MarkovChainSpec, opts: &EvolveOptions) -> Result<StateOccupancy> {
    let n = chain.len();
    let target = 1.0 - opts.epsilon;
    let m = chain.transition();
    let mut row = vec![0.0; n];
    row[chain.initial()] = 1.0;
    let mut probs = vec![row];
    let terminal_mass = |v: &[f64]| chain.terminal().iter().map(|&s| v[s]).sum::<f64>();
    loop {
        let cur = probs.last().unwrap();
        let reached = terminal_mass(cur);
        if reached >= target {
            break;
        }
        let t = probs.len() - 1;
        if t >= opts.max_iters {
            return Err(Error::NonConvergence {
                max_iters: opts.max_iters,
                target,
                reached,
            });
        }
        let mut next = vec![0.0; n];
        for (s, &p) in cur.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            for (slot, &q) in next.iter_mut().zip(&m[s]) {
                *slot += p * q;
            }
        }
        debug_assert!((next.iter().sum::<f64>() - 1.0).abs() < ROW_TOL);
        probs.push(next);
    }
    let converged_at = probs.len() - 1;
    Ok(StateOccupancy {
        probs,
        converged_at,
    })
}

fn check_group(chain: &MarkovChainSpec, group: &[usize]) -> Result<()> {
    if group.is_empty() {
        return Err(Error::InvalidParams("state group is empty".into()));
    }
    for &s in group {
        if s >= chain.len() {
            return Err(Error::InvalidParams(format!("state {s} does not exist")));
        }
        if chain.is_terminal(s) {
            return Err(Error::InvalidParams(format!("state {s} is terminal")));
        }
    }
    Ok(())
}

fn finish(mut pmf: Vec<f64>) -> CountDistribution {
    while pmf.len() > 1 && *pmf.last().unwrap() == 0.0 {
        pmf.pop();
    }
    let mut d = CountDistribution {
        pmf,
        truncated_mass: 0.0,
        overflow_mass: 0.0,
    };
    d.drop_tail(TAIL_DROP);
    d
}

/// Distribution of the number of iterations `t in 0..=converged_at` at which
/// the chain occupies a state of `group`.
///
/// Carries `P(state = s, count = k)` forward step by step, so dependence
/// between successive visits (self-loops, cycles) is preserved. Mass not yet
/// absorbed at `converged_at` is reported at its count so far.
pub fn visit_count_distribution(
    chain: &MarkovChainSpec,
    occupancy: &StateOccupancy,
    group: &[usize],
) -> Result<CountDistribution> {
    check_group(chain, group)?;
    let n = chain.len();
    let m = chain.transition();
    let mut in_group = vec![false; n];
    for &s in group {
        in_group[s] = true;
    }
    let steps = occupancy.converged_at;
    // joint[s][k] for live (non-terminal) states; absorbed mass by count.
    let mut joint: Vec<Vec<f64>> = vec![Vec::new(); n];
    let init = chain.initial();
    let start = usize::from(in_group[init]);
    joint[init] = vec![0.0; start + 1];
    joint[init][start] = 1.0;
    let mut absorbed: Vec<f64> = Vec::new();

    for _ in 0..steps {
        let mut next: Vec<Vec<f64>> = vec![Vec::new(); n];
        for (s, counts) in joint.iter().enumerate() {
            if counts.is_empty() {
                continue;
            }
            for (to, &p) in m[s].iter().enumerate() {
                if p == 0.0 {
                    continue;
                }
                let shift = usize::from(in_group[to]);
                let dst = if chain.is_terminal(to) {
                    &mut absorbed
                } else {
                    &mut next[to]
                };
                if dst.len() < counts.len() + shift {
                    dst.resize(counts.len() + shift, 0.0);
                }
                for (k, &c) in counts.iter().enumerate() {
                    dst[k + shift] += c * p;
                }
            }
        }
        joint = next;
    }
    let len = joint
        .iter()
        .map(Vec::len)
        .chain(std::iter::once(absorbed.len()))
        .max()
        .unwrap_or(1)
        .max(1);
    let mut pmf = vec![0.0; len];
    for v in joint.iter().chain(std::iter::once(&absorbed)) {
        for (k, &c) in v.iter().enumerate() {
            pmf[k] += c;
        }
    }
    Ok(finish(pmf))
}

/// The marginal form of the recursion:
/// `P_c(N | t) = P_c(N-1 | t-1) P_m(t-1) + P_c(N | t-1) (1 - P_m(t-1))`,
/// with `P_c(0 | 0) = 1`. Counts the same iterations as
/// [`visit_count_distribution`] but ignores correlation between visits.
pub fn marginal_visit_count_distribution(
    chain: &MarkovChainSpec,
    occupancy: &StateOccupancy,
    group: &[usize],
) -> Result<CountDistribution> {
    check_group(chain, group)?;
    let mut pc = vec![1.0];
    for t in 0..=occupancy.converged_at {
        let pm = occupancy.group_prob(t, group);
        let mut next = vec![0.0; pc.len() + 1];
        for (k, &c) in pc.iter().enumerate() {
            // KEEP term
            next[k] += c * (1.0 - pm);
            next[k + 1] += c * pm;
        }
        pc = next;
    }
    Ok(finish(pc))
}

/// Set, reset and combined (set or reset) operation counts for one challenge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerChallengeOps {
    pub set_dist: CountDistribution,
    pub reset_dist: CountDistribution,
    /// Visits to the union of Set- and Reset-tagged states.
    pub combined_dist: CountDistribution,
}

pub fn per_challenge_ops(chain: &MarkovChainSpec, opts: &EvolveOptions) -> Result<PerChallengeOps> {
    let set = chain.tagged(OpTag::Set);
    let reset = chain.tagged(OpTag::Reset);
    if set.is_empty() && reset.is_empty() {
        return Err(Error::InvalidParams(
            "chain has no Set- or Reset-tagged states".into(),
        ));
    }
    let occ = evolve(chain, opts)?;
    let group_dist = |g: &[usize]| -> Result<CountDistribution> {
        if g.is_empty() {
            Ok(CountDistribution::point_mass(0))
        } else {
            visit_count_distribution(chain, &occ, g)
        }
    };
    let both: Vec<usize> = set.iter().chain(&reset).copied().collect();
    Ok(PerChallengeOps {
        set_dist: group_dist(&set)?,
        reset_dist: group_dist(&reset)?,
        combined_dist: group_dist(&both)?,
    })
}

/// Trajectories per RNG substream in [`sample_trajectories`].
const BLOCK: u64 = 4096;

/// Sparse cumulative rows for sampling successors.
pub(crate) struct Sampler {
    rows: Vec<Vec<(usize, f64)>>,
}

impl Sampler {
    pub(crate) fn new(chain: &MarkovChainSpec) -> Self {
        let rows = chain
            .transition()
            .iter()
            .map(|row| {
                let mut acc = 0.0;
                let mut out: Vec<(usize, f64)> = row
                    .iter()
                    .enumerate()
                    .filter(|(_, &p)| p > 0.0)
                    .map(|(j, &p)| {
                        acc += p;
                        (j, acc)
                    })
                    .collect();
                if let Some(last) = out.last_mut() {
                    last.1 = f64::INFINITY;
                }
                out
            })
            .collect();
        Sampler { rows }
    }

    pub(crate) fn step<R: Rng>(&self, s: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let row = &self.rows[s];
        row.iter().find(|&&(_, c)| u < c).map(|&(j, _)| j).unwrap()
    }
}

fn histogram_to_dist(h: &[u64], n: u64) -> CountDistribution {
    let mut pmf: Vec<f64> = h.iter().map(|&c| c as f64 / n as f64).collect();
    if pmf.is_empty() {
        pmf.push(0.0);
    }
    while pmf.len() > 1 && *pmf.last().unwrap() == 0.0 {
        pmf.pop();
    }
    CountDistribution {
        pmf,
        truncated_mass: 0.0,
        overflow_mass: 0.0,
    }
}

fn bump(h: &mut Vec<u64>, k: usize) {
    if h.len() <= k {
        h.resize(k + 1, 0);
    }
    h[k] += 1;
}

/// Monte Carlo estimate of [`per_challenge_ops`] from `n` independent runs to
/// absorption. Block `b` of 4096 runs draws from ChaCha8 stream `b` of `seed`,
/// so results do not depend on the thread count.
pub fn sample_trajectories(chain: &MarkovChainSpec, n: u64, seed: u64) -> PerChallengeOps {
    let sampler = Sampler::new(chain);
    let tags: Vec<OpTag> = chain.states().iter().map(|s| s.op_tag).collect();
    let blocks = n.div_ceil(BLOCK);
    let hists: Vec<[Vec<u64>; 3]> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b);
            let runs = BLOCK.min(n - b * BLOCK);
            let mut h: [Vec<u64>; 3] = Default::default();
            for _ in 0..runs {
                let (mut sets, mut resets) = (0usize, 0usize);
                let mut s = chain.initial();
                loop {
                    match tags[s] {
                        OpTag::Set => sets += 1,
                        OpTag::Reset => resets += 1,
                        OpTag::None => {}
                    }
                    if chain.is_terminal(s) {
                        break;
                    }
                    s = sampler.step(s, &mut rng);
                }
                bump(&mut h[0], sets);
                bump(&mut h[1], resets);
                bump(&mut h[2], sets + resets);
            }
            h
        })
        .collect();
    let mut total: [Vec<u64>; 3] = Default::default();
    for h in hists {
        for (acc, part) in total.iter_mut().zip(h) {
            if acc.len() < part.len() {
                acc.resize(part.len(), 0);
            }
            for (a, p) in acc.iter_mut().zip(part) {
                *a += p;
            }
        }
    }
    PerChallengeOps {
        set_dist: histogram_to_dist(&total[0], n),
        reset_dist: histogram_to_dist(&total[1], n),
        combined_dist: histogram_to_dist(&total[2], n),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::{build_ampuf_chain, build_reap_nvm_chain, load_chain_str, ChainParams};

    fn two_state(p_stay: f64, tag: &str) -> MarkovChainSpec {
        load_chain_str(&format!(
            r#"{{"states":[{{"id":0,"label":"A","op_tag":"{tag}"}},{{"id":1,"label":"B","op_tag":"none"}}],
               "transition":[[{p_stay},{}],[0,1]],"initial":0,"terminal":[1]}}"#,
            1.0 - p_stay
        ))
        .unwrap()
    }

    #[test]
    fn deterministic_step() {
        let c = two_state(0.0, "none");
        let occ = evolve(&c, &EvolveOptions::default()).unwrap();
        assert_eq!(occ.converged_at, 1);
        assert_eq!(occ.probs, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    #[test]
    fn half_self_loop_converges_at_17() {
        // 1 - 0.5^t >= 1 - 1e-5  <=>  t >= log2(1e5) = 16.6
        let expected = (1e5f64).log2().ceil() as usize;
        assert_eq!(expected, 17);
        let c = two_state(0.5, "set");
        let occ = evolve(&c, &EvolveOptions::default()).unwrap();
        assert_eq!(occ.converged_at, expected);
        for t in 1..occ.probs.len() {
            assert!(occ.terminal_mass(&c, t) >= occ.terminal_mass(&c, t - 1));
        }
    }

    #[test]
    fn non_convergence_is_an_error() {
        let c = two_state(0.999, "set");
        let opts = EvolveOptions {
            max_iters: 100,
            ..Default::default()
        };
        assert!(matches!(evolve(&c, &opts), Err(Error::NonConvergence { .. })));
    }

    #[test]
    fn geometric_sojourn_matches_closed_form() {
        let c = two_state(0.5, "set");
        let occ = evolve(&c, &EvolveOptions::default()).unwrap();
        let d = visit_count_distribution(&c, &occ, &[0]).unwrap();
        assert_eq!(d.prob(0), 0.0);
        // P(visits = k) = 0.5^k for k >= 1, up to the count reached by iteration 17;
        // unabsorbed mass 0.5^17 sits at count 18.
        for k in 1..=17 {
            assert!((d.prob(k) - 0.5f64.powi(k as i32)).abs() < 1e-15, "k={k}");
        }
        assert!((d.prob(18) - 0.5f64.powi(17)).abs() < 1e-15);
        assert!((d.total_mass() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn marginal_recursion_misses_self_loop_dependence() {
        let c = two_state(0.5, "set");
        let occ = evolve(&c, &EvolveOptions::default()).unwrap();
        let exact = visit_count_distribution(&c, &occ, &[0]).unwrap();
        let marginal = marginal_visit_count_distribution(&c, &occ, &[0]).unwrap();
        assert!((exact.mean() - marginal.mean()).abs() < 1e-9);
        assert!(exact.tv_distance(&marginal) > 0.1);
    }

    #[test]
    fn deterministic_double_visit() {
        let c = load_chain_str(
            r#"{"states":[{"id":0,"label":"x1","op_tag":"set"},{"id":1,"label":"x2","op_tag":"set"},{"id":2,"label":"end","op_tag":"none"}],
                "transition":[[0,1,0],[0,0,1],[0,0,1]],"initial":0,"terminal":[2]}"#,
        )
        .unwrap();
        let occ = evolve(&c, &EvolveOptions::default()).unwrap();
        let d = visit_count_distribution(&c, &occ, &[0, 1]).unwrap();
        assert_eq!(d.pmf, vec![0.0, 0.0, 1.0]);
        let m = marginal_visit_count_distribution(&c, &occ, &[0, 1]).unwrap();
        assert_eq!(m.pmf, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn reap_zero_set_probability() {
        let c = build_reap_nvm_chain(&ChainParams::default()).unwrap();
        let ops = per_challenge_ops(&c, &EvolveOptions::default()).unwrap();
        assert!((ops.set_dist.prob(0) - 127.0 / 128.0).abs() < 1e-12);
        assert!(ops.set_dist.mean() > ops.reset_dist.mean());
        let occ = evolve(&c, &EvolveOptions::default()).unwrap();
        assert!(occ.terminal_mass(&c, occ.converged_at) >= 0.99999);
    }

    #[test]
    fn ampuf_always_sets() {
        let c = build_ampuf_chain(&ChainParams::default()).unwrap();
        let ops = per_challenge_ops(&c, &EvolveOptions::default()).unwrap();
        assert_eq!(ops.set_dist.prob(0), 0.0);
    }

    #[test]
    fn missing_reset_group_is_point_mass() {
        let c = two_state(0.5, "set");
        let ops = per_challenge_ops(&c, &EvolveOptions::default()).unwrap();
        assert_eq!(ops.reset_dist, CountDistribution::point_mass(0));
        let untagged = two_state(0.5, "none");
        assert!(per_challenge_ops(&untagged, &EvolveOptions::default()).is_err());
    }

    #[test]
    fn bad_groups_rejected() {
        let c = two_state(0.5, "set");
        let occ = evolve(&c, &EvolveOptions::default()).unwrap();
        assert!(visit_count_distribution(&c, &occ, &[1]).is_err());
        assert!(visit_count_distribution(&c, &occ, &[5]).is_err());
        assert!(visit_count_distribution(&c, &occ, &[]).is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_exact_on_deterministic_chain() {
        let c = two_state(0.0, "set");
        let a = sample_trajectories(&c, 10_000, 3);
        assert_eq!(a.set_dist.pmf, vec![0.0, 1.0]);
        let r = build_reap_nvm_chain(&ChainParams::default()).unwrap();
        assert_eq!(sample_trajectories(&r, 20_000, 9), sample_trajectories(&r, 20_000, 9));
    }
}
