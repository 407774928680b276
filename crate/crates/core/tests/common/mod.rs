#![allow(dead_code)]

use tima_core::data::{generate_synthetic, Dataset, SyntheticSpec};
use tima_core::harness::{pretrain_clean, TrainConfig};
use tima_core::model::{snapshot_teacher, DualEncoder, EncoderConfig, TeacherSnapshot};

/// Small dataset that trains in well under a second.
pub fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        image_side: 8,
        train_count: 400,
        test_count: 200,
        seed,
        ..SyntheticSpec::default()
    }
}

pub fn small_config(seed: u64) -> EncoderConfig {
    EncoderConfig {
        input_dim: 64,
        hidden_dims: vec![32],
        embed_dim: 16,
        num_classes: 8,
        seed,
    }
}

pub struct Fixture {
    pub train: Dataset,
    pub test: Dataset,
    pub model: DualEncoder,
    pub teacher: TeacherSnapshot,
}

/// Cleanly pretrained small model with its teacher snapshot.
pub fn pretrained(seed: u64) -> Fixture {
    let (train, test) = generate_synthetic(&small_spec(seed)).unwrap();
    let fresh = DualEncoder::new(small_config(seed)).unwrap();
    let cfg = TrainConfig {
        epochs: 8,
        seed,
        ..TrainConfig::pretrain()
    };
    let model = pretrain_clean(&fresh, &train, &cfg).unwrap().model;
    let teacher = snapshot_teacher(&model).unwrap();
    Fixture {
        train,
        test,
        model,
        teacher,
    }
}

/// Small dataset with an untrained model over it.
pub fn small_untrained(seed: u64) -> (Dataset, DualEncoder) {
    let (train, _) = generate_synthetic(&small_spec(seed)).unwrap();
    (train, DualEncoder::new(small_config(seed)).unwrap())
}
