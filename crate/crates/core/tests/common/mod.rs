#![allow(dead_code)]

use esrf::data::{holdout, kfold_split, SocialDataset};
use esrf::synthetic::{planted, PlantedConfig};
use esrf::trainer::{TrainingConfig, TrainingData};

pub fn toy_dataset(users: usize, seed: u64) -> SocialDataset {
    planted(&PlantedConfig {
        users,
        items: 40,
        communities: 4,
        items_per_user: 6,
        friends_per_user: 3,
        noise: 0.1,
        reciprocity: 0.5,
        seed,
    })
    .unwrap()
}

pub fn toy_config(seed: u64) -> TrainingConfig {
    TrainingConfig {
        dim: 8,
        layers: 2,
        k: 4,
        batch_size: 32,
        pretrain_epochs_d: 3,
        pretrain_epochs_g: 3,
        adversarial_epochs: 2,
        baseline_epochs: 3,
        learning_rate: 0.01,
        init_std: 0.1,
        decoder_hidden: 8,
        patience: 0,
        seed,
        ..TrainingConfig::default()
    }
}

/// Fold 0 of a 5-fold split; optionally a validation share carved from train.
pub fn toy_data(users: usize, config: &TrainingConfig, validation: f64) -> (TrainingData, esrf::data::InteractionLog) {
    let ds = toy_dataset(users, config.seed);
    let plan = kfold_split(&ds.feedback, 5, config.seed).unwrap();
    let (train, test) = plan.train_test(&ds.feedback, 0).unwrap();
    let (train, val) = if validation > 0.0 {
        let (t, v) = holdout(&train, validation, config.seed).unwrap();
        (t, Some(v))
    } else {
        (train, None)
    };
    let data = TrainingData::prepare(train, val, ds.social.s.clone(), config).unwrap();
    (data, test)
}
