//! Logistic-regression modeling attack on arbiter-style PUFs.
//!
//! Challenges are mapped to the classic parity features
//! `phi_k = prod_{j >= k} (1 - 2 c_j)` over stage bits, plus a bias. For
//! REAP-NVM data the attacker also sees the selected pair (one-hot) and the
//! requested level (scaled to `[0, 1]`).

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{Challenge, CrpRecord, PufKind, LEVELS, PAIRS, STAGES};

pub const APUF_FEATURES: usize = STAGES + 1;
pub const REAP_FEATURES: usize = APUF_FEATURES + PAIRS + 1;

pub fn parity_features(challenge: &Challenge) -> Vec<f64> {
    let mut phi = vec![1.0; APUF_FEATURES];
    let mut acc = 1.0;
    for k in (0..STAGES).rev() {
        if challenge.stage_bit(k) {
            acc = -acc;
        }
        phi[k] = acc;
    }
    phi
}

pub fn featurize(challenge: &Challenge, source: PufKind) -> Vec<f64> {
    let mut x = parity_features(challenge);
    if source == PufKind::ReapNvm {
        let mut pair = vec![0.0; PAIRS];
        pair[challenge.pair_index as usize] = 1.0;
        x.extend(pair);
        x.push(challenge.level as f64 / (LEVELS - 1) as f64);
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackDataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    pub source: PufKind,
}

impl AttackDataset {
    pub fn from_records(records: &[CrpRecord], source: PufKind) -> Self {
        AttackDataset {
            features: records.iter().map(|r| featurize(&r.challenge, source)).collect(),
            labels: records.iter().map(|r| r.response).collect(),
            source,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// First index of the held-out tail (last 20%).
    pub fn test_start(&self) -> usize {
        self.len() - self.len() / 5
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop once the epoch-over-epoch change in training loss drops below this.
    pub loss_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 128,
            max_epochs: 200,
            loss_tol: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LogisticModel {
    pub fn predict(&self, x: &[f64]) -> bool {
        dot(&self.weights, x) > 0.0
    }

    pub fn accuracy(&self, xs: &[Vec<f64>], ys: &[bool]) -> f64 {
        if xs.is_empty() {
            return f64::NAN;
        }
        let hits = xs
            .iter()
            .zip(ys)
            .filter(|(x, &y)| self.predict(x) == y)
            .count();
        hits as f64 / xs.len() as f64
    }

    fn mean_loss(&self, xs: &[Vec<f64>], ys: &[bool]) -> f64 {
        let total: f64 = xs
            .iter()
            .zip(ys)
            .map(|(x, &y)| {
                let z = dot(&self.weights, x);
                // log(1 + e^{-z}) for y = 1, log(1 + e^{z}) for y = 0
                let m = if y { -z } else { z };
                m.max(0.0) + (-m.abs()).exp().ln_1p()
            })
            .sum();
        total / xs.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub source: PufKind,
    pub train_size: usize,
    pub test_accuracy: f64,
    pub train_accuracy: f64,
    pub epochs: usize,
    pub seed: u64,
}

/// Trains on the first `train_size` records and scores on the last 20%.
pub fn train(
    data: &AttackDataset,
    train_size: usize,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<(LogisticModel, AttackResult)> {
    let test_start = data.test_start();
    if train_size == 0 || train_size > test_start || test_start == data.len() {
        return Err(Error::InsufficientData(format!(
            "{} records hold {} training records before the 20% test split; asked for {train_size}",
            data.len(),
            test_start
        )));
    }
    let xs = &data.features[..train_size];
    let ys = &data.labels[..train_size];
    let width = xs[0].len();
    let mut model = LogisticModel {
        weights: vec![0.0; width],
    };
    let mut order: Vec<usize> = (0..train_size).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grad = vec![0.0; width];
    let mut prev_loss = model.mean_loss(xs, ys);
    let mut epochs = 0;
    while epochs < cfg.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in batch {
                let err = sigmoid(dot(&model.weights, &xs[i])) - if ys[i] { 1.0 } else { 0.0 };
                for (g, x) in grad.iter_mut().zip(&xs[i]) {
                    *g += err * x;
                }
            }
            let step = cfg.learning_rate / batch.len() as f64;
            for (w, g) in model.weights.iter_mut().zip(&grad) {
                *w -= step * g;
            }
        }
        epochs += 1;
        let loss = model.mean_loss(xs, ys);
        if (prev_loss - loss).abs() < cfg.loss_tol {
            break;
        }
        prev_loss = loss;
    }
    let result = AttackResult {
        source: data.source,
        train_size,
        test_accuracy: model.accuracy(&data.features[test_start..], &data.labels[test_start..]),
        train_accuracy: model.accuracy(xs, ys),
        epochs,
        seed,
    };
    Ok((model, result))
}

/// One training run per size; run `i` uses seed `seed + i`.
pub fn attack_curve(
    data: &AttackDataset,
    sizes: &[usize],
    seed: u64,
    cfg: &TrainConfig,
) -> Result<Vec<AttackResult>> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidParams("training sizes must be increasing".into()));
    }
    sizes
        .par_iter()
        .enumerate()
        .map(|(i, &n)| train(data, n, seed + i as u64, cfg).map(|(_, r)| r))
        .collect()
}

pub fn write_curve_csv<W: Write>(results: &[AttackResult], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["source", "train_size", "accuracy", "seed"])?;
    for r in results {
        let source = match r.source {
            PufKind::ReapNvm => "reap-nvm",
            PufKind::Apuf => "apuf",
        };
        wr.write_record([
            source.to_string(),
            r.train_size.to_string(),
            r.test_accuracy.to_string(),
            r.seed.to_string(),
        ])?;
    }
    wr.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_challenge_parities_are_one() {
        let c = Challenge::new(0, 0, 0).unwrap();
        assert!(parity_features(&c).iter().all(|&x| x == 1.0));
        assert_eq!(featurize(&c, PufKind::Apuf).len(), APUF_FEATURES);
        assert_eq!(featurize(&c, PufKind::ReapNvm).len(), REAP_FEATURES);
    }

    #[test]
    fn flipping_bit_127_flips_one_feature() {
        let a = Challenge::new(0x0123_4567_89ab_cdef_0011_2233_4455_6677, 3, 2).unwrap();
        let b = Challenge {
            switch_bits: a.switch_bits ^ (1u128 << 127),
            ..a
        };
        let (fa, fb) = (parity_features(&a), parity_features(&b));
        let diff = fa.iter().zip(&fb).filter(|(x, y)| x != y).count();
        assert_eq!(diff, 1);
        assert_ne!(fa[0], fb[0]);
        assert_eq!(featurize(&a, PufKind::ReapNvm), featurize(&a, PufKind::ReapNvm));
    }

    #[test]
    fn too_little_data_is_rejected() {
        let recs: Vec<CrpRecord> = (0..100u128)
            .map(|i| CrpRecord {
                challenge: Challenge::new(i, 0, 0).unwrap(),
                response: i % 2 == 0,
            })
            .collect();
        let d = AttackDataset::from_records(&recs, PufKind::Apuf);
        assert_eq!(d.test_start(), 80);
        assert!(train(&d, 81, 0, &TrainConfig::default()).is_err());
        assert!(train(&d, 80, 0, &TrainConfig::default()).is_ok());
        assert!(attack_curve(&d, &[], 0, &TrainConfig::default()).unwrap().is_empty());
    }
}
