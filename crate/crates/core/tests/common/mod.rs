#![allow(dead_code)]

use dkvb::bottleneck::BottleneckConfig;
use dkvb::embed_store::{build_scenario, generate_synthetic, Dataset, Grouping, ScenarioRequest, SyntheticSpec};
use dkvb::harness::{ScenarioKind, ScenarioSpec};

pub fn small_spec(classes: usize, train: usize, test: usize, seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        classes,
        train_per_class: train,
        test_per_class: test,
        seed,
        ..Default::default()
    }
}

pub fn dataset(spec: &SyntheticSpec) -> Dataset {
    generate_synthetic(spec).unwrap()
}

/// 4 tasks x 2 classes, multi-head.
pub fn cil_4x2(seed: u64) -> ScenarioSpec {
    let ds = dataset(&small_spec(8, 40, 20, seed));
    build_scenario(&ds, &ScenarioRequest::new(ScenarioKind::Cil, seed).grouping(Grouping::ClassesPerTask(2))).unwrap()
}

/// 8 increments x 1 class, fixed order.
pub fn single_head_cil(train: usize, test: usize, seed: u64) -> ScenarioSpec {
    let ds = dataset(&small_spec(8, train, test, seed));
    let mut req = ScenarioRequest::new(ScenarioKind::SingleHeadCil, seed).grouping(Grouping::ClassesPerTask(1));
    req.shuffle = false;
    build_scenario(&ds, &req).unwrap()
}

/// Small hidden-segmented bottleneck for the 32-wide toy encoder.
pub fn np_config(n_classes: usize, k: usize) -> BottleneckConfig {
    BottleneckConfig {
        d_key: 8,
        codebook_size: k,
        d_value: n_classes,
        ..Default::default()
    }
}
