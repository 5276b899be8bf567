use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pufwear::attack::{train, AttackDataset, TrainConfig};
use pufwear::metrics::{pack, reliability, uniqueness};
use pufwear::sim::{
    challenge_stream, eval_all, gen_crps, new_device, pulses_for_level, read_dataset, write_dataset, Challenge,
    CrpRecord, DeviceConfig, PufInstance, PufKind, LEVELS,
};

fn bits(records: &[CrpRecord]) -> Vec<bool> {
    records.iter().map(|r| r.response).collect()
}

#[test]
fn wear_totals_match_replayed_pulses() {
    let mut d = new_device(5, 1.0, 0.2).unwrap();
    let recs = gen_crps(&mut d, 5000, 8);
    let pulses: u64 = recs.iter().map(|r| pulses_for_level(r.challenge.level)).sum();
    assert_eq!(d.total_set_wear(), 2 * pulses);
    let switches = recs
        .windows(2)
        .filter(|w| w[0].challenge.pair_index != w[1].challenge.pair_index)
        .count() as u64;
    assert_eq!(d.total_reset_wear(), 2 * switches);
}

#[test]
fn single_switch_flips_sometimes() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut flips = 0;
    for i in 0..1000u64 {
        let d = new_device(i, 1.0, 0.0).unwrap();
        let c = Challenge::random(&mut rng, PufKind::ReapNvm);
        let bit = rng.random_range(0..128);
        let c2 = Challenge {
            switch_bits: c.switch_bits ^ (1u128 << bit),
            ..c
        };
        if d.response(&c, 0.0) != d.response(&c2, 0.0) {
            flips += 1;
        }
    }
    assert!(flips > 0 && flips < 1000, "{flips}");
}

#[test]
fn response_changes_at_most_once_across_levels() {
    let d = new_device(21, 1.0, 0.0).unwrap();
    for c in challenge_stream(PufKind::ReapNvm, 4).take(2000) {
        let r: Vec<bool> = (0..LEVELS as u8)
            .map(|l| d.response(&Challenge { level: l, ..c }, 0.0))
            .collect();
        let changes = r.windows(2).filter(|w| w[0] != w[1]).count();
        assert!(changes <= 1, "{r:?}");
    }
}

#[test]
fn identical_devices_without_variation() {
    let cfg = DeviceConfig {
        variation_sigma: 0.0,
        ..Default::default()
    };
    let challenges: Vec<_> = challenge_stream(PufKind::ReapNvm, 2).take(1280).collect();
    let words: Vec<_> = (0..2)
        .map(|s| {
            let mut d = PufInstance::new(s, cfg).unwrap();
            pack(&bits(&eval_all(&mut d, &challenges, 0)), 128).unwrap().words
        })
        .collect();
    let u: f64 = (0..10).map(|w| uniqueness(&[words[0][w].clone(), words[1][w].clone()]).unwrap()).sum::<f64>() / 10.0;
    assert_eq!(u, 0.0);
}

#[test]
fn noiseless_repeats_are_fully_reliable() {
    let challenges: Vec<_> = challenge_stream(PufKind::ReapNvm, 6).take(1280).collect();
    let mut d = new_device(2, 1.0, 0.0).unwrap();
    let reference = pack(&bits(&eval_all(&mut d, &challenges, 0)), 128).unwrap();
    let repeats: Vec<_> = (1..=10)
        .map(|k| pack(&bits(&eval_all(&mut d, &challenges, k)), 128).unwrap())
        .collect();
    for (w, r) in reference.words.iter().enumerate() {
        let reps: Vec<_> = repeats.iter().map(|s| s.words[w].clone()).collect();
        assert_eq!(reliability(r, &reps).unwrap(), 100.0);
    }
}

#[test]
fn dataset_files_are_byte_identical_and_round_trip() {
    let write = || {
        let mut d = new_device(3, 1.0, 0.5).unwrap();
        let mut buf = Vec::new();
        write_dataset(&gen_crps(&mut d, 2000, 12), &mut buf).unwrap();
        buf
    };
    let (a, b) = (write(), write());
    assert_eq!(a, b);
    let back = read_dataset(&a[..]).unwrap();
    assert_eq!(back.len(), 2000);
    let mut again = Vec::new();
    write_dataset(&back, &mut again).unwrap();
    assert_eq!(again, a);
    assert!(read_dataset(&b"{\"c\":\"zz\",\"p\":0,\"l\":0,\"r\":0}\n"[..]).is_err());
}

#[test]
fn coin_flip_labels_are_unlearnable() {
    let mut d = PufInstance::new(
        1,
        DeviceConfig {
            kind: PufKind::Apuf,
            ..Default::default()
        },
    )
    .unwrap();
    let mut recs = gen_crps(&mut d, 50_000, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for r in &mut recs {
        r.response = rng.random_bool(0.5);
    }
    let data = AttackDataset::from_records(&recs, PufKind::Apuf);
    let cfg = TrainConfig {
        max_epochs: 20,
        ..Default::default()
    };
    let (_, res) = train(&data, 40_000, 0, &cfg).unwrap();
    assert!((res.test_accuracy - 0.5).abs() <= 0.02, "{}", res.test_accuracy);
}

#[test]
fn training_accuracy_is_not_below_test_accuracy() {
    let mut d = new_device(9, 1.0, 0.5).unwrap();
    let recs = gen_crps(&mut d, 6000, 3);
    let data = AttackDataset::from_records(&recs, PufKind::ReapNvm);
    let (model, res) = train(&data, 4000, 1, &TrainConfig::default()).unwrap();
    assert!(res.train_accuracy >= res.test_accuracy - 0.02);
    let (again, _) = train(&data, 4000, 1, &TrainConfig::default()).unwrap();
    assert_eq!(model, again);
}
