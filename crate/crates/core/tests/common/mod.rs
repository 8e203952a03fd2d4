#![allow(dead_code)]

use std::path::PathBuf;

use gcprune::graph::toy::toy_exclusions;
use gcprune::oracle::dataset::EvalDataset;
use gcprune::{load_model, LoadOptions, ModelGraph, ToyArch};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn exclusions(arch: ToyArch) -> Vec<String> {
    toy_exclusions(arch).iter().map(|s| s.to_string()).collect()
}

pub fn load_fixture_model(arch: ToyArch) -> ModelGraph {
    let bytes = std::fs::read(fixture(&format!("{}.onnx", arch.id()))).expect("fixture model");
    load_model(&bytes, &LoadOptions::with_exclusions(&exclusions(arch))).expect("fixture loads")
}

pub fn load_fixture_dataset(arch: ToyArch) -> EvalDataset {
    EvalDataset::load(&fixture(&format!("{}_dataset.json", arch.id()))).expect("fixture dataset")
}
