#![allow(dead_code)]

use brainteacher::data::{build_bundle, DatasetBundle, SubsetOptions, SyntheticCifar};
use brainteacher::eval::SuperclassMap;
use brainteacher::nn::NetworkSpec;
use brainteacher::teacher::{TeacherKind, TeacherSpec};
use brainteacher::training::TrainConfig;

/// Four fine classes, 24 train and 10 test images each, 8 stimuli.
pub fn tiny_bundle() -> DatasetBundle {
    let syn = SyntheticCifar {
        fine_classes: vec![0, 1, 4, 30],
        train_per_class: 26,
        test_per_class: 10,
        ..Default::default()
    };
    let (train, test) = syn.generate().unwrap();
    let opts = SubsetOptions {
        fine_classes: Some(vec![0, 1, 4, 30]),
        stimuli: 8,
        ..Default::default()
    };
    build_bundle(&train, &test, &opts, &SuperclassMap::cifar100()).unwrap()
}

pub fn tiny_config(bundle: &DatasetBundle, teacher: TeacherKind, r: f64) -> TrainConfig {
    let mut c = TrainConfig::for_network(NetworkSpec::cornet_z_mini(bundle.num_classes(), [3, 32, 32]));
    c.teacher = TeacherSpec { seed: 3, ..TeacherSpec::of_kind(teacher) };
    c.r = r;
    c.total_epochs = 2;
    c.neural_epochs = 2;
    c.batch_size = 16;
    c.stimulus_batch = 6;
    c.seeds = vec![1];
    c.variance_images = 16;
    c
}
