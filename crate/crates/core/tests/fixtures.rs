mod common;

use std::collections::BTreeMap;

use gcprune::graph::onnx::sha256_hex;
use gcprune::oracle::dataset::{toy_dataset, toy_task_specs};
use gcprune::{build_channel_groups, build_toy_model, export_model, ToyArch};

fn recorded_sums() -> BTreeMap<String, String> {
    std::fs::read_to_string(common::fixture("SHA256SUMS"))
        .expect("checksum file")
        .lines()
        .filter_map(|l| l.split_once("  "))
        .map(|(h, f)| (f.to_string(), h.to_string()))
        .collect()
}

#[test]
fn fixture_files_match_checksums() {
    for (file, hash) in recorded_sums() {
        let bytes = std::fs::read(common::fixture(&file)).unwrap();
        assert_eq!(sha256_hex(&bytes), hash, "{file}");
    }
}

#[test]
fn regenerated_toys_are_byte_identical() {
    let sums = recorded_sums();
    for (arch, samples) in [(ToyArch::ToyMtA, 128), (ToyArch::ToyMtB, 64)] {
        let g = build_toy_model(0, arch);
        let model = export_model(&g);
        assert_eq!(sha256_hex(&model), sums[&format!("{}.onnx", arch.id())]);
        let data = toy_dataset(&g, &toy_task_specs(arch), samples, 1).unwrap();
        assert_eq!(sha256_hex(data.to_json().unwrap().as_bytes()), sums[&format!("{}_dataset.json", arch.id())]);
    }
}

#[test]
fn fixtures_load_and_fit() {
    for arch in [ToyArch::ToyMtA, ToyArch::ToyMtB] {
        let g = common::load_fixture_model(arch);
        let data = common::load_fixture_dataset(arch);
        data.validate_for(&g).unwrap();
        assert_eq!(data.task_specs, toy_task_specs(arch));
        let a = build_channel_groups(&g, &common::exclusions(arch)).unwrap();
        assert!(a.prunable_groups().count() > 0);
        let (cls, reg) = arch.heads();
        for head in [cls, reg] {
            assert!(a.layers().iter().all(|l| l.name != head), "{head} is excluded");
        }
    }
}
