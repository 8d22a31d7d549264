#![allow(dead_code)]

use cdfs_gad::data_io::{gen_synthetic_pair, make_split, sample_few_shot, DomainBundle, SyntheticPairConfig};
use cdfs_gad::training::TrainConfig;

/// A 60+60-node pair small enough for many full training runs per test.
pub fn small_pair_config(seed: u64) -> SyntheticPairConfig {
    SyntheticPairConfig {
        nodes: 60,
        blocks: 2,
        p_intra: 0.15,
        p_inter: 0.01,
        source_dim: 6,
        target_dim: 8,
        anomaly_fraction: 0.1,
        clique_size: 3,
        seed,
        ..SyntheticPairConfig::default()
    }
}

pub fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        hidden_width: 16,
        out_width: 8,
        m_bases: 3,
        learning_rate: 0.005,
        epochs_joint: 50,
        epochs_self: 30,
        beta1: 0.1,
        ..TrainConfig::default()
    }
}

/// Small bundle whose training mask is guaranteed to hold a shot.
pub fn small_bundle(seed: u64) -> (DomainBundle<f64>, TrainConfig) {
    let pair = gen_synthetic_pair::<f64>(&small_pair_config(seed)).unwrap().pair;
    let config = small_config(seed);
    let (masks, shots) = (seed..)
        .find_map(|s| {
            let masks = make_split(pair.target.num_nodes(), s).unwrap();
            sample_few_shot(&pair.target, &masks, 1, s).ok().map(|shots| (masks, shots))
        })
        .unwrap();
    let bundle = DomainBundle::new(pair.source, &pair.target, masks, shots).unwrap();
    (bundle, config)
}
