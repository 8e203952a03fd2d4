mod common;

use std::collections::BTreeSet;
use std::time::Duration;

use gcprune::oracle::dataset::toy_task_specs;
use gcprune::oracle::external::{ExternalConfig, ExternalEvaluator};
use gcprune::pruner::{Checkpoint, PruneConfig, RunOptions, RunStatus};
use gcprune::{build_channel_groups, export_model, run_pruning, Error, LossOracle, ToyArch};

fn config(args: &[&str], timeout: Duration) -> ExternalConfig {
    let mut command = vec![env!("CARGO_BIN_EXE_echo_evaluator").to_string()];
    command.extend(args.iter().map(|s| s.to_string()));
    ExternalConfig {
        command,
        task_specs: toy_task_specs(ToyArch::ToyMtA),
        dataset: "probe".into(),
        timeout,
        work_dir: None,
    }
}

fn opts() -> RunOptions {
    RunOptions {
        exclusions: common::exclusions(ToyArch::ToyMtA),
        ..RunOptions::default()
    }
}

#[test]
fn handshake_and_single_evaluation() {
    let g = common::load_fixture_model(ToyArch::ToyMtA);
    let a = build_channel_groups(&g, &common::exclusions(ToyArch::ToyMtA)).unwrap();
    let mut ev = ExternalEvaluator::spawn(config(&["--value", "2.5"], Duration::from_secs(30))).unwrap();
    assert_eq!(ev.task_names(), vec!["cls".to_string(), "reg".to_string()]);
    let mask: BTreeSet<_> = a.prunable_groups().take(3).map(|g| g.id).collect();
    let l = ev.evaluate(&g, &a, &mask).unwrap();
    assert_eq!(l.losses(), vec![2.5, 2.5]);
}

#[test]
fn task_arity_mismatch_is_rejected() {
    let err = ExternalEvaluator::spawn(config(&["--extra-task"], Duration::from_secs(30))).err().unwrap();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
}

#[test]
fn silent_evaluator_times_out() {
    let g = common::load_fixture_model(ToyArch::ToyMtA);
    let a = build_channel_groups(&g, &common::exclusions(ToyArch::ToyMtA)).unwrap();
    let mut ev = ExternalEvaluator::spawn(config(&["--silent"], Duration::from_millis(300))).unwrap();
    let err = ev.evaluate(&g, &a, &BTreeSet::new()).unwrap_err();
    assert!(matches!(err, Error::Timeout(_)), "{err}");
}

#[test]
fn evaluator_crash_aborts_with_checkpoint() {
    let g = common::load_fixture_model(ToyArch::ToyMtA);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("checkpoint.json");
    let mut ev = ExternalEvaluator::spawn(config(&["--fail-after", "5"], Duration::from_secs(30))).unwrap();
    let o = RunOptions {
        checkpoint: Some(ckpt.clone()),
        ..opts()
    };
    let err = run_pruning(&g, &mut ev, &PruneConfig::default(), &o).unwrap_err();
    match err {
        Error::Aborted { checkpoint, .. } => assert_eq!(checkpoint, ckpt),
        other => panic!("expected an aborted run, got {other}"),
    }
    let c = Checkpoint::load(&ckpt).unwrap();
    assert_eq!(c.plan.status, RunStatus::InProgress);
    assert!(c.plan.iterations.is_empty());
}

#[test]
fn flat_losses_prune_to_the_minimum() {
    let g = common::load_fixture_model(ToyArch::ToyMtA);
    let cfg = PruneConfig {
        reserved_ratio: 0.01,
        filtering_ratio: 1.0,
        ..PruneConfig::default()
    };
    let run = || {
        let mut ev = ExternalEvaluator::spawn(config(&[], Duration::from_secs(30))).unwrap();
        run_pruning(&g, &mut ev, &cfg, &opts()).unwrap()
    };
    let (pruned, plan) = run();
    assert_eq!(plan.status, RunStatus::Completed);
    assert_eq!(plan.iterations.len(), 1);
    assert!(gcprune::pruner::verify_constraints(&plan).is_empty());
    let a = build_channel_groups(&pruned, &common::exclusions(ToyArch::ToyMtA)).unwrap();
    for layer in a.layers() {
        assert_eq!(layer.groups.len(), cfg.min_channels, "{}", layer.name);
    }
    let (again, plan2) = run();
    assert_eq!(plan.to_json(), plan2.to_json());
    assert_eq!(export_model(&pruned), export_model(&again));
}
