use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{anyhow, Context};
use gcprune::graph::groups::GroupId;
use gcprune::graph::toy::toy_exclusions;
use gcprune::oracle::dataset::{toy_dataset, toy_task_specs, EvalDataset};
use gcprune::oracle::external::{ExternalConfig, ExternalEvaluator};
use gcprune::oracle::BuiltinOracle;
use gcprune::pruner::{Checkpoint, FineTuneHook, RunOptions};
use gcprune::report::{sensitivity_csv, width_table_csv, Summary};
use gcprune::saliency::filter_l1_saliency;
use gcprune::scheduler::{sequence_csv, sequence_matrix, solve_lambda};
use gcprune::{
    build_channel_groups, build_toy_model, count_cost, export_model, load_model, run_pruning, CostConfig, LoadOptions, LossOracle, ModelGraph,
    PruningPlan, ToyArch,
};

use crate::config::{DatasetConfig, OracleConfig, RunConfig};

/// A failed command: usage and input problems exit with 2, runtime failures with 1.
#[derive(Debug)]
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => e,
        }
    }
}

pub type CmdResult<T = ()> = Result<T, Failure>;

pub trait Classify<T> {
    fn usage(self) -> CmdResult<T>;
    fn runtime(self) -> CmdResult<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn usage(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Usage(e.into()))
    }

    fn runtime(self) -> CmdResult<T> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

pub fn load_model_file(path: &Path, exclusions: &[String]) -> CmdResult<ModelGraph> {
    if !path.is_file() {
        return Err(Failure::Usage(anyhow!("model file not found: {}", path.display())));
    }
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display())).usage()?;
    load_model(&bytes, &LoadOptions::with_exclusions(exclusions))
        .with_context(|| format!("cannot load model {}", path.display()))
        .usage()
}

fn load_dataset(cfg: &RunConfig, g: &ModelGraph) -> CmdResult<EvalDataset> {
    let data = match &cfg.dataset {
        DatasetConfig::File { path } => EvalDataset::load(path)
            .with_context(|| format!("cannot load dataset {}", path.display()))
            .usage()?,
        DatasetConfig::Toy { arch, samples, seed } => toy_dataset(g, &toy_task_specs(*arch), *samples, *seed).runtime()?,
    };
    data.validate_for(g).context("dataset does not fit the model").usage()?;
    Ok(data)
}

fn make_oracle(cfg: &RunConfig, data: EvalDataset) -> CmdResult<Box<dyn LossOracle>> {
    Ok(match &cfg.oracle {
        OracleConfig::Builtin { probe_size } => {
            let data = match probe_size {
                Some(n) => data.probe(*n, cfg.prune.seed),
                None => data,
            };
            Box::new(BuiltinOracle::new(data))
        }
        OracleConfig::External {
            command,
            timeout_secs,
            dataset_tag,
            tasks,
        } => Box::new(
            ExternalEvaluator::spawn(ExternalConfig {
                command: command.clone(),
                task_specs: tasks.clone().unwrap_or_else(|| data.task_specs.clone()),
                dataset: dataset_tag.clone(),
                timeout: Duration::from_secs(*timeout_secs),
                work_dir: Some(cfg.output_dir.join("evaluator")),
            })
            .runtime()?,
        ),
    })
}

fn write(dir: &Path, name: &str, contents: impl AsRef<[u8]>) -> CmdResult<PathBuf> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .runtime()?;
    let path = dir.join(name);
    std::fs::write(&path, contents)
        .with_context(|| format!("cannot write {}", path.display()))
        .runtime()?;
    Ok(path)
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

pub fn analyze(cfg: &RunConfig) -> CmdResult {
    let g = load_model_file(&cfg.model, &cfg.exclusions)?;
    let analysis = build_channel_groups(&g, &cfg.exclusions).usage()?;
    let cost = count_cost(&g, CostConfig::default());
    let saliency = filter_l1_saliency(&g, &analysis);
    write(&cfg.output_dir, "cost.json", to_json(&cost))?;
    write(&cfg.output_dir, "groups.json", to_json(&analysis.group_table()))?;
    write(&cfg.output_dir, "saliency.csv", saliency.to_csv())?;
    for w in analysis.warnings() {
        log::warn!("{w}");
    }
    println!("model: {}", g.name());
    println!("flops: {}", cost.total_flops);
    println!("params: {}", cost.total_params);
    println!("groups: {} prunable of {}", analysis.prunable_groups().count(), analysis.groups().len());
    for layer in analysis.layers() {
        println!("  layer {:>2} {:<16} {} groups", layer.index, layer.name, layer.groups.len());
    }
    println!("wrote cost.json, groups.json, saliency.csv to {}", cfg.output_dir.display());
    Ok(())
}

pub fn sequence(cfg: &RunConfig, ratios: Option<Vec<f64>>) -> CmdResult {
    let g = load_model_file(&cfg.model, &cfg.exclusions)?;
    let analysis = build_channel_groups(&g, &cfg.exclusions).usage()?;
    let layers = analysis.layers().len();
    if layers == 0 {
        return Err(Failure::Usage(anyhow!("the model has no prunable layers")));
    }
    let lambda = if layers == 1 {
        1.0
    } else {
        solve_lambda(cfg.prune.alpha, cfg.prune.d1, layers).usage()?
    };
    let ratios = ratios.unwrap_or_else(|| cfg.sequence.ratios.clone());
    let saliency = filter_l1_saliency(&g, &analysis);
    let orders = sequence_matrix(&g, &analysis, &saliency, &ratios, lambda, cfg.prune.min_channels).usage()?;
    let csv = sequence_csv(&orders);
    write(&cfg.output_dir, "sequence.csv", &csv)?;
    println!("lambda: {lambda}");
    print!("{csv}");
    Ok(())
}

pub fn prune(cfg: &RunConfig, resume: Option<&Path>) -> CmdResult {
    let g = load_model_file(&cfg.model, &cfg.exclusions)?;
    let data = load_dataset(cfg, &g)?;
    let mut oracle = make_oracle(cfg, data)?;
    let checkpoint = cfg.output_dir.join("checkpoint.json");
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("cannot create {}", cfg.output_dir.display()))
        .runtime()?;
    let resume = resume
        .map(|p| Checkpoint::load(p).with_context(|| format!("cannot load checkpoint {}", p.display())))
        .transpose()
        .usage()?;
    let opts = RunOptions {
        exclusions: cfg.exclusions.clone(),
        checkpoint: Some(checkpoint),
        resume,
        max_iterations: cfg.run.max_iterations,
        fine_tune: cfg.run.fine_tune.clone().map(|command| FineTuneHook {
            command,
            work_dir: cfg.output_dir.join("fine_tune"),
        }),
    };
    let (pruned, plan) = run_pruning(&g, oracle.as_mut(), &cfg.prune, &opts).runtime()?;
    write(&cfg.output_dir, "pruned.onnx", export_model(&pruned))?;
    write(&cfg.output_dir, "plan.json", plan.to_json())?;
    let mut summary = Summary::from_plan(&plan);
    if summary.final_losses.is_none() {
        let a = build_channel_groups(&pruned, &cfg.exclusions).runtime()?;
        let l = oracle.evaluate(&pruned, &a, &BTreeSet::new()).runtime()?;
        summary = summary.with_losses(l.clone(), l);
    }
    let csv = summary.to_csv();
    write(&cfg.output_dir, "summary.csv", &csv)?;
    print!("{csv}");
    println!("wrote pruned.onnx, plan.json, summary.csv to {}", cfg.output_dir.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig, model: Option<&Path>, mask: &[GroupId]) -> CmdResult {
    let g = load_model_file(model.unwrap_or(&cfg.model), &cfg.exclusions)?;
    let analysis = build_channel_groups(&g, &cfg.exclusions).usage()?;
    let data = load_dataset(cfg, &g)?;
    let mut oracle = make_oracle(cfg, data)?;
    let mask: BTreeSet<GroupId> = mask.iter().copied().collect();
    analysis.validate_drop(&mask).usage()?;
    let losses = oracle.evaluate(&g, &analysis, &mask).runtime()?;
    print!("{}", to_json(&losses));
    Ok(())
}

pub fn report(plan_path: &Path, out: &Path) -> CmdResult {
    let text = std::fs::read_to_string(plan_path)
        .with_context(|| format!("cannot read plan {}", plan_path.display()))
        .usage()?;
    let plan = PruningPlan::from_json(&text)
        .with_context(|| format!("malformed plan {}", plan_path.display()))
        .usage()?;
    let widths = width_table_csv(&plan).context("malformed plan").usage()?;
    write(out, "widths.csv", &widths)?;
    write(out, "sensitivity.csv", sensitivity_csv(&plan))?;
    write(out, "summary.csv", Summary::from_plan(&plan).to_csv())?;
    print!("{widths}");
    println!("wrote widths.csv, sensitivity.csv, summary.csv to {}", out.display());
    Ok(())
}

pub fn toy(arch: ToyArch, seed: u64, out: &Path, dataset: Option<(&Path, usize, u64)>) -> CmdResult {
    let g = build_toy_model(seed, arch);
    let bytes = export_model(&g);
    std::fs::write(out, &bytes)
        .with_context(|| format!("cannot write {}", out.display()))
        .runtime()?;
    println!("{}  {}", gcprune::graph::onnx::sha256_hex(&bytes), out.display());
    println!("exclusions: {}", toy_exclusions(arch).join(", "));
    if let Some((path, samples, data_seed)) = dataset {
        let data = toy_dataset(&g, &toy_task_specs(arch), samples, data_seed).runtime()?;
        data.save(path)
            .with_context(|| format!("cannot write {}", path.display()))
            .runtime()?;
        println!("dataset: {samples} samples  {}", path.display());
    }
    Ok(())
}
