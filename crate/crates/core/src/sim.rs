//! Behavioral simulation of the REAP-NVM arbiter PUF and of a plain arbiter
//! PUF baseline.
//!
//! Delays follow the linear additive arbiter model: each of the 128 stages
//! has four delays (top/bottom path, straight/crossed), and the running delay
//! difference is either extended (straight) or negated and extended
//! (crossed). In REAP-NVM a pair of NVM cells sits after every stage, one cell
//! on each path. Each cell's delay grows linearly with its programmed level at
//! a cell-specific rate, so the pair adds `offset + slope * level` to the
//! difference. A challenge programs one pair to its requested level; all
//! other pairs sit at the default level.
//!
//! Stage `j` is driven by bit `127 - j` of `switch_bits`, so the hex encoding
//! of a challenge lists stages in traversal order.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STAGES: usize = 128;
pub const PAIRS: usize = 128;
pub const CELLS: usize = 2 * PAIRS;
pub const LEVELS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Challenge {
    pub switch_bits: u128,
    pub pair_index: u8,
    pub level: u8,
}

impl Challenge {
    pub fn new(switch_bits: u128, pair_index: u8, level: u8) -> Result<Self> {
        if pair_index as usize >= PAIRS || level as usize >= LEVELS {
            return Err(Error::InvalidParams(format!(
                "pair {pair_index} / level {level} out of range"
            )));
        }
        Ok(Challenge {
            switch_bits,
            pair_index,
            level,
        })
    }

    /// Switch bit of stage `j` (0 = straight, 1 = crossed).
    pub fn stage_bit(&self, j: usize) -> bool {
        (self.switch_bits >> (STAGES - 1 - j)) & 1 == 1
    }

    pub fn random<R: Rng>(rng: &mut R, kind: PufKind) -> Self {
        let switch_bits: u128 = rng.random();
        match kind {
            PufKind::ReapNvm => Challenge {
                switch_bits,
                pair_index: rng.random_range(0..PAIRS as u8),
                level: rng.random_range(0..LEVELS as u8),
            },
            PufKind::Apuf => Challenge {
                switch_bits,
                pair_index: 0,
                level: 0,
            },
        }
    }

    pub fn switch_hex(&self) -> String {
        format!("{:032x}", self.switch_bits)
    }
}

/// Program pulses needed to reach `level` from the default level.
pub fn pulses_for_level(level: u8) -> u64 {
    u64::from(level.max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PufKind {
    ReapNvm,
    Apuf,
}

impl std::str::FromStr for PufKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reap-nvm" | "reap" => Ok(PufKind::ReapNvm),
            "apuf" => Ok(PufKind::Apuf),
            other => Err(Error::InvalidParams(format!("unknown device kind '{other}'"))),
        }
    }
}

/// Spread of the per-cell level rate (lognormal sigma).
const RATE_SPREAD: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceConfig {
    pub kind: PufKind,
    /// Standard deviation of each stage delay.
    pub variation_sigma: f64,
    /// Standard deviation of the per-evaluation arbiter noise.
    pub noise_sigma: f64,
    /// RMS of the NVM pair contribution over uniformly drawn levels, as a
    /// multiple of the standard deviation of the total stage-delay difference.
    pub nvm_strength: f64,
    pub default_level: u8,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        DeviceConfig {
            kind: PufKind::ReapNvm,
            variation_sigma: 1.0,
            noise_sigma: 0.0,
            nvm_strength: 8.0,
            default_level: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PufInstance {
    pub seed: u64,
    pub config: DeviceConfig,
    /// Per stage: [top straight, bottom straight, top crossed, bottom crossed].
    pub stage_deltas: Vec<[f64; 4]>,
    /// Cell `2p` is on the top path after stage `p`, cell `2p + 1` on the bottom.
    pub nvm_delay_table: Vec<[f64; LEVELS]>,
    pub set_wear: Vec<u64>,
    pub reset_wear: Vec<u64>,
    pub last_used_pair: Option<u8>,
}

/// Device with the default REAP-NVM configuration and the given sigmas.
pub fn new_device(seed: u64, variation_sigma: f64, noise_sigma: f64) -> Result<PufInstance> {
    PufInstance::new(
        seed,
        DeviceConfig {
            variation_sigma,
            noise_sigma,
            ..Default::default()
        },
    )
}

impl PufInstance {
    pub fn new(seed: u64, config: DeviceConfig) -> Result<Self> {
        if !(config.variation_sigma >= 0.0) || !(config.noise_sigma >= 0.0) || !(config.nvm_strength >= 0.0) {
            return Err(Error::InvalidParams("sigmas must be nonnegative".into()));
        }
        if config.default_level as usize >= LEVELS {
            return Err(Error::InvalidParams("default_level out of range".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stage = Normal::new(0.0, config.variation_sigma).expect("finite sigma");
        let stage_deltas: Vec<[f64; 4]> = (0..STAGES)
            .map(|_| std::array::from_fn(|_| stage.sample(&mut rng)))
            .collect();

        // Std of the final stage-delay difference: every stage adds the
        // difference of two independent delays.
        let stage_total = (2.0 * STAGES as f64).sqrt() * config.variation_sigma;
        let rms_level = ((0..LEVELS).map(|l| (l * l) as f64).sum::<f64>() / LEVELS as f64).sqrt();
        // Slope difference of two lognormal rates has std ~ base * spread * sqrt(2).
        let slope_sigma = config.nvm_strength * stage_total / rms_level;
        let base_rate = slope_sigma / (RATE_SPREAD * std::f64::consts::SQRT_2);
        let nvm_delay_table: Vec<[f64; LEVELS]> = (0..CELLS)
            .map(|_| {
                let z0: f64 = StandardNormal.sample(&mut rng);
                let offset = config.variation_sigma * z0;
                let z: f64 = StandardNormal.sample(&mut rng);
                let rate = base_rate * (RATE_SPREAD * z).exp();
                std::array::from_fn(|l| offset + rate * l as f64)
            })
            .collect();

        Ok(PufInstance {
            seed,
            config,
            stage_deltas,
            nvm_delay_table,
            set_wear: vec![0; CELLS],
            reset_wear: vec![0; CELLS],
            last_used_pair: None,
        })
    }

    pub fn kind(&self) -> PufKind {
        self.config.kind
    }

    /// Differential NVM delay of `pair` at `level` (top minus bottom).
    pub fn pair_delay(&self, pair: usize, level: usize) -> f64 {
        self.nvm_delay_table[2 * pair][level] - self.nvm_delay_table[2 * pair + 1][level]
    }

    /// Noise-free arbiter delay difference with `challenge.pair_index` at
    /// `challenge.level` and every other pair at the default level.
    pub fn delay_difference(&self, challenge: &Challenge) -> f64 {
        let nvm = self.config.kind == PufKind::ReapNvm;
        let default = self.config.default_level as usize;
        let mut delta = 0.0;
        for (j, d) in self.stage_deltas.iter().enumerate() {
            delta = if challenge.stage_bit(j) {
                -delta + (d[2] - d[3])
            } else {
                delta + (d[0] - d[1])
            };
            if nvm {
                let level = if j == challenge.pair_index as usize {
                    challenge.level as usize
                } else {
                    default
                };
                delta += self.pair_delay(j, level);
            }
        }
        delta
    }

    /// Response bit for a given noise sample, without touching wear state.
    pub fn response(&self, challenge: &Challenge, noise: f64) -> bool {
        self.delay_difference(challenge) + noise > 0.0
    }

    fn record_write(&mut self, challenge: &Challenge) {
        if self.config.kind != PufKind::ReapNvm {
            return;
        }
        let pair = challenge.pair_index;
        if let Some(prev) = self.last_used_pair {
            if prev != pair {
                let p = prev as usize;
                self.reset_wear[2 * p] += 1;
                self.reset_wear[2 * p + 1] += 1;
            }
        }
        let pulses = pulses_for_level(challenge.level);
        let p = pair as usize;
        self.set_wear[2 * p] += pulses;
        self.set_wear[2 * p + 1] += pulses;
        self.last_used_pair = Some(pair);
    }

    /// Evaluates one challenge with noise drawn from `rng`, recording wear.
    pub fn eval_with<R: Rng>(&mut self, challenge: &Challenge, rng: &mut R) -> bool {
        self.record_write(challenge);
        let noise = if self.config.noise_sigma > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            z * self.config.noise_sigma
        } else {
            0.0
        };
        self.response(challenge, noise)
    }

    pub fn eval(&mut self, challenge: &Challenge, noise_seed: u64) -> bool {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        self.eval_with(challenge, &mut rng)
    }

    pub fn total_set_wear(&self) -> u64 {
        self.set_wear.iter().sum()
    }

    pub fn total_reset_wear(&self) -> u64 {
        self.reset_wear.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CrpRecord {
    pub challenge: Challenge,
    pub response: bool,
}

/// On-disk form: `{"c":"<32 hex>","p":<pair>,"l":<level>,"r":0|1}`.
#[derive(Serialize, Deserialize)]
struct CrpLine {
    c: String,
    p: u8,
    l: u8,
    r: u8,
}

impl CrpRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&CrpLine {
            c: self.challenge.switch_hex(),
            p: self.challenge.pair_index,
            l: self.challenge.level,
            r: u8::from(self.response),
        })
        .expect("record serializes")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        let raw: CrpLine = serde_json::from_str(line)?;
        if raw.c.len() != 32 {
            return Err(Error::Dataset(format!("challenge hex must be 32 chars: {}", raw.c)));
        }
        let bits = u128::from_str_radix(&raw.c, 16)
            .map_err(|e| Error::Dataset(format!("bad challenge hex {}: {e}", raw.c)))?;
        if raw.r > 1 {
            return Err(Error::Dataset(format!("response must be 0 or 1, got {}", raw.r)));
        }
        Ok(CrpRecord {
            challenge: Challenge::new(bits, raw.p, raw.l)?,
            response: raw.r == 1,
        })
    }
}

fn mix(a: u64, b: u64) -> u64 {
    // splitmix64 finalizer over a combined word
    let mut z = a ^ b.rotate_left(29) ^ 0x9e37_79b9_7f4a_7c15;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Challenge sequence for `seed`; identical across devices of the same kind.
pub fn challenge_stream(kind: PufKind, seed: u64) -> impl Iterator<Item = Challenge> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::iter::repeat_with(move || Challenge::random(&mut rng, kind))
}

/// Evaluates the given challenges in order, recording wear. Noise comes from a
/// stream keyed by (`noise_seed`, device seed).
pub fn eval_all(device: &mut PufInstance, challenges: &[Challenge], noise_seed: u64) -> Vec<CrpRecord> {
    let mut noise = ChaCha8Rng::seed_from_u64(mix(noise_seed, device.seed));
    noise.set_stream(1);
    challenges
        .iter()
        .map(|c| CrpRecord {
            challenge: *c,
            response: device.eval_with(c, &mut noise),
        })
        .collect()
}

/// `n` uniformly random challenges (from `seed`) evaluated on `device`.
pub fn gen_crps(device: &mut PufInstance, n: usize, seed: u64) -> Vec<CrpRecord> {
    let challenges: Vec<Challenge> = challenge_stream(device.kind(), seed).take(n).collect();
    eval_all(device, &challenges, seed)
}

pub fn write_dataset<W: Write>(records: &[CrpRecord], mut w: W) -> Result<()> {
    for r in records {
        writeln!(w, "{}", r.to_json_line()).map_err(|e| Error::io("<dataset>", e))?;
    }
    Ok(())
}

pub fn read_dataset<R: BufRead>(r: R) -> Result<Vec<CrpRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<dataset>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            CrpRecord::from_json_line(&line)
                .map_err(|e| Error::Dataset(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}
