use std::collections::hash_map::DefaultHasher;
use std::collections::HashSet;
use std::hash::{Hash, Hasher};

use mubert::config::TrainConfig;
use mubert::data::synth::{generate_labeled_set, generate_pair, masked_energy, FramePairSample, GenConfig};
use mubert::rng::mix_seed;
use mubert::train::labeled_sets;

fn fingerprint(s: &FramePairSample) -> u64 {
    let mut h = DefaultHasher::new();
    for v in s.frame_t.data().iter().chain(s.frame_td.data()) {
        v.to_bits().hash(&mut h);
    }
    h.finish()
}

#[test]
fn masked_energy_dominates_over_a_thousand_samples() {
    let cfg = GenConfig::default();
    let (mut on, mut off) = (Vec::new(), Vec::new());
    for i in 0..1000 {
        let s = generate_pair(&cfg, mix_seed(42, i)).unwrap();
        let (a, b) = masked_energy(&s, cfg.patch_size).unwrap();
        assert!(!a.is_empty());
        on.extend(a);
        off.extend(b);
    }
    // Mann-Whitney statistic: probability a masked patch outranks an
    // unmasked one.
    off.sort_by(f64::total_cmp);
    let mut wins = 0.0;
    for &x in &on {
        let below = off.partition_point(|&y| y < x);
        let ties = off[below..].partition_point(|&y| y == x);
        wins += below as f64 + ties as f64 / 2.0;
    }
    let statistic = wins / (on.len() as f64 * off.len() as f64);
    assert_eq!(statistic, 1.0);
    assert!(off.iter().all(|&e| e == 0.0));
}

#[test]
fn same_seed_same_sample() {
    let cfg = GenConfig::default();
    for seed in [0, 1, u64::MAX] {
        assert_eq!(generate_pair(&cfg, seed).unwrap(), generate_pair(&cfg, seed).unwrap());
    }
}

#[test]
fn splits_are_disjoint() {
    let cfg = TrainConfig::default();
    let (train, test) = labeled_sets(&cfg).unwrap();
    let pretrain: Vec<_> = (0..cfg.gen_count as u64)
        .map(|i| generate_pair(&cfg.gen, mix_seed(cfg.train_data_seed, i)).unwrap())
        .collect();
    let a: HashSet<u64> = train.iter().map(fingerprint).collect();
    let b: HashSet<u64> = test.iter().map(fingerprint).collect();
    let c: HashSet<u64> = pretrain.iter().map(fingerprint).collect();
    assert_eq!(a.len(), train.len());
    assert_eq!(b.len(), test.len());
    assert!(a.is_disjoint(&b));
    assert!(b.is_disjoint(&c));
}

fn difference(s: &FramePairSample) -> Vec<f64> {
    s.frame_td.data().iter().zip(s.frame_t.data()).map(|(b, a)| (b - a) as f64).collect()
}

#[test]
fn nearest_centroid_on_frame_differences_beats_chance() {
    let cfg = GenConfig::default();
    let train = generate_labeled_set(&cfg, 40, 1).unwrap();
    let test = generate_labeled_set(&cfg, 40, 2).unwrap();
    let dim = cfg.image_size * cfg.image_size * cfg.channels;
    let mut centroids = vec![vec![0.0; dim]; cfg.classes];
    let mut counts = vec![0usize; cfg.classes];
    for s in &train {
        let k = s.label.unwrap();
        counts[k] += 1;
        for (c, d) in centroids[k].iter_mut().zip(difference(s)) {
            *c += d;
        }
    }
    for (c, &n) in centroids.iter_mut().zip(&counts) {
        c.iter_mut().for_each(|v| *v /= n as f64);
    }
    let correct = test
        .iter()
        .filter(|s| {
            let d = difference(s);
            let dist = |c: &Vec<f64>| c.iter().zip(&d).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..cfg.classes).min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b]))).unwrap();
            best == s.label.unwrap()
        })
        .count();
    let accuracy = correct as f64 / test.len() as f64;
    eprintln!("nearest-centroid accuracy {accuracy:.3}");
    assert!(accuracy >= 0.6, "accuracy {accuracy}");
}
