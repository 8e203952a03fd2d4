//! Evaluation datasets and their JSON file format.
//!
//! Tensors are stored as `{"shape": [...], "data": "<base64 little-endian f32>"}`.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::toy::ToyArch;
use crate::graph::ModelGraph;
use crate::oracle::forward::{forward, ChannelMask};
use crate::oracle::loss::{select_rows, LossKind, Targets};
use crate::tensor::Tensor;

pub const DATASET_FORMAT: &str = "gcprune-dataset-v1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub loss: LossKind,
    /// Graph output this task's loss is computed on.
    pub head: String,
}

impl TaskSpec {
    pub fn new(name: &str, loss: LossKind, head: &str) -> Self {
        Self {
            name: name.into(),
            loss,
            head: head.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalDataset {
    pub task_specs: Vec<TaskSpec>,
    /// Batched tensors keyed by graph input name.
    pub inputs: BTreeMap<String, Tensor>,
    /// One entry per task spec, same order.
    pub targets: Vec<Targets>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorJson {
    shape: Vec<usize>,
    data: String,
}

impl TensorJson {
    fn encode(t: &Tensor) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: B64.encode(t.to_le_bytes()),
        }
    }

    fn decode(&self) -> Result<Tensor> {
        let bytes = B64
            .decode(&self.data)
            .map_err(|e| Error::Dataset(format!("bad base64 tensor data: {e}")))?;
        Tensor::from_le_bytes(self.shape.clone(), &bytes).map_err(|e| Error::Dataset(e.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum TargetJson {
    Labels { labels: Vec<usize> },
    Values(TensorJson),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    format: String,
    task_specs: Vec<TaskSpec>,
    inputs: BTreeMap<String, TensorJson>,
    targets: BTreeMap<String, TargetJson>,
}

impl EvalDataset {
    pub fn len(&self) -> usize {
        self.inputs.values().next().map_or(0, |t| t.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task_names(&self) -> Vec<String> {
        self.task_specs.iter().map(|t| t.name.clone()).collect()
    }

    /// Input tensors in the graph's input order.
    pub fn inputs_for(&self, g: &ModelGraph) -> Result<Vec<Tensor>> {
        g.inputs()
            .iter()
            .map(|s| {
                self.inputs
                    .get(&s.name)
                    .cloned()
                    .ok_or_else(|| Error::Dataset(format!("dataset has no tensor for graph input `{}`", s.name)))
            })
            .collect()
    }

    /// Checks that every head exists and that inputs and targets fit `g`.
    pub fn validate_for(&self, g: &ModelGraph) -> Result<()> {
        let n = self.len();
        if n == 0 {
            return Err(Error::Dataset("dataset is empty".into()));
        }
        if self.task_specs.is_empty() {
            return Err(Error::Dataset("dataset declares no tasks".into()));
        }
        if self.targets.len() != self.task_specs.len() {
            return Err(Error::Dataset("one target set per task is required".into()));
        }
        for s in g.inputs() {
            let t = self
                .inputs
                .get(&s.name)
                .ok_or_else(|| Error::Dataset(format!("dataset has no tensor for graph input `{}`", s.name)))?;
            if t.shape()[0] != n || t.shape()[1..] != s.dims[..] {
                return Err(Error::Dataset(format!(
                    "input `{}` has shape {:?}, graph expects [{n}, {:?}]",
                    s.name,
                    t.shape(),
                    s.dims
                )));
            }
        }
        for (spec, targets) in self.task_specs.iter().zip(&self.targets) {
            let head = g
                .outputs()
                .iter()
                .find(|o| o.name == spec.head)
                .ok_or_else(|| Error::Dataset(format!("task `{}`: `{}` is not a graph output", spec.name, spec.head)))?;
            if targets.len() != n {
                return Err(Error::Dataset(format!("task `{}` has {} targets for {n} samples", spec.name, targets.len())));
            }
            match (spec.loss, targets) {
                (LossKind::CrossEntropy, Targets::Labels(l)) => {
                    if head.dims.len() != 1 {
                        return Err(Error::Dataset(format!("task `{}`: classification head must be a vector", spec.name)));
                    }
                    if let Some(bad) = l.iter().find(|&&y| y >= head.dims[0]) {
                        return Err(Error::Dataset(format!("task `{}`: label {bad} out of range", spec.name)));
                    }
                }
                (LossKind::Mse | LossKind::SmoothL1, Targets::Values(t)) => {
                    if t.shape()[1..] != head.dims[..] {
                        return Err(Error::Dataset(format!(
                            "task `{}`: targets {:?} do not match head {:?}",
                            spec.name,
                            &t.shape()[1..],
                            head.dims
                        )));
                    }
                }
                _ => return Err(Error::Dataset(format!("task `{}`: target kind does not match loss", spec.name))),
            }
        }
        Ok(())
    }

    pub fn subset(&self, idx: &[usize]) -> EvalDataset {
        EvalDataset {
            task_specs: self.task_specs.clone(),
            inputs: self.inputs.iter().map(|(k, t)| (k.clone(), select_rows(t, idx))).collect(),
            targets: self.targets.iter().map(|t| t.subset(idx)).collect(),
        }
    }

    /// Seeded probe subset of `size` samples (all samples if `size` covers them).
    pub fn probe(&self, size: usize, seed: u64) -> EvalDataset {
        if size >= self.len() {
            return self.clone();
        }
        self.subset(&probe_indices(self.len(), size, seed))
    }

    pub fn to_json(&self) -> Result<String> {
        let file = DatasetFile {
            format: DATASET_FORMAT.into(),
            task_specs: self.task_specs.clone(),
            inputs: self.inputs.iter().map(|(k, t)| (k.clone(), TensorJson::encode(t))).collect(),
            targets: self
                .task_specs
                .iter()
                .zip(&self.targets)
                .map(|(s, t)| {
                    let j = match t {
                        Targets::Labels(l) => TargetJson::Labels { labels: l.clone() },
                        Targets::Values(v) => TargetJson::Values(TensorJson::encode(v)),
                    };
                    (s.name.clone(), j)
                })
                .collect(),
        };
        Ok(serde_json::to_string(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: DatasetFile = serde_json::from_str(text).map_err(|e| Error::Dataset(format!("invalid dataset file: {e}")))?;
        if file.format != DATASET_FORMAT {
            return Err(Error::Dataset(format!("unsupported dataset format `{}`", file.format)));
        }
        let inputs = file
            .inputs
            .iter()
            .map(|(k, t)| Ok((k.clone(), t.decode()?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let targets = file
            .task_specs
            .iter()
            .map(|s| match file.targets.get(&s.name) {
                Some(TargetJson::Labels { labels }) => Ok(Targets::Labels(labels.clone())),
                Some(TargetJson::Values(t)) => Ok(Targets::Values(t.decode()?)),
                None => Err(Error::Dataset(format!("no targets for task `{}`", s.name))),
            })
            .collect::<Result<Vec<_>>>()?;
        let data = EvalDataset {
            task_specs: file.task_specs,
            inputs,
            targets,
        };
        let n = data.len();
        if data.inputs.values().any(|t| t.shape().is_empty() || t.shape()[0] != n) {
            return Err(Error::Dataset("input tensors disagree on the sample count".into()));
        }
        Ok(data)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Dataset(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    /// Short content hash used as the batch id of loss vectors.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, t) in &self.inputs {
            h.update(k.as_bytes());
            h.update(t.to_le_bytes());
        }
        for (s, t) in self.task_specs.iter().zip(&self.targets) {
            h.update(s.name.as_bytes());
            match t {
                Targets::Labels(l) => l.iter().for_each(|&y| h.update((y as u64).to_le_bytes())),
                Targets::Values(v) => h.update(v.to_le_bytes()),
            }
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Sorted, seeded sample of `size` distinct indices below `n`.
pub fn probe_indices(n: usize, size: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(size.min(n));
    idx.sort_unstable();
    idx
}

/// Regression target noise relative to the teacher output's spread.
pub const REG_NOISE: f64 = 0.5;

/// Classification logits head and regression head of the toy networks.
pub fn toy_task_specs(arch: ToyArch) -> Vec<TaskSpec> {
    let (cls, reg) = arch.heads();
    let reg_loss = match arch {
        ToyArch::ToyMtA => LossKind::Mse,
        ToyArch::ToyMtB => LossKind::SmoothL1,
    };
    vec![TaskSpec::new("cls", LossKind::CrossEntropy, cls), TaskSpec::new("reg", reg_loss, reg)]
}

/// Synthetic dataset labelled by `teacher`: standard-normal inputs; class
/// labels are the teacher's argmax with probability 0.75 and uniform
/// otherwise; regression targets are the teacher's output plus Gaussian noise
/// with half the standard deviation of that output.
pub fn toy_dataset(teacher: &ModelGraph, task_specs: &[TaskSpec], n: usize, seed: u64) -> Result<EvalDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = BTreeMap::new();
    for s in teacher.inputs() {
        let mut shape = vec![n];
        shape.extend_from_slice(&s.dims);
        let t = Tensor::from_fn(shape, |_| StandardNormal.sample(&mut rng));
        inputs.insert(s.name.clone(), t);
    }
    let ordered: Vec<Tensor> = teacher.inputs().iter().map(|s| inputs[&s.name].clone()).collect();
    let outputs = forward(teacher, &ordered, &ChannelMask::empty())?;
    let mut targets = Vec::with_capacity(task_specs.len());
    for spec in task_specs {
        let pos = teacher
            .outputs()
            .iter()
            .position(|o| o.name == spec.head)
            .ok_or_else(|| Error::Dataset(format!("task `{}`: `{}` is not a graph output", spec.name, spec.head)))?;
        let out = &outputs[pos];
        let per: usize = out.shape()[1..].iter().product();
        targets.push(match spec.loss {
            LossKind::CrossEntropy => Targets::Labels(
                out.data()
                    .chunks(per)
                    .map(|row| {
                        let argmax = row
                            .iter()
                            .enumerate()
                            .fold((0, f32::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                            .0;
                        if rng.random_bool(0.75) {
                            argmax
                        } else {
                            rng.random_range(0..per)
                        }
                    })
                    .collect(),
            ),
            LossKind::Mse | LossKind::SmoothL1 => {
                let m = out.data().iter().map(|&v| f64::from(v)).sum::<f64>() / out.len() as f64;
                let var = out.data().iter().map(|&v| (f64::from(v) - m).powi(2)).sum::<f64>() / out.len() as f64;
                let sd = (REG_NOISE * var.sqrt()) as f32;
                let noise = rand_distr::Normal::new(0.0f32, sd.max(f32::MIN_POSITIVE)).expect("valid");
                Targets::Values(Tensor::from_fn(out.shape().to_vec(), |i| out.data()[i] + noise.sample(&mut rng)))
            }
        });
    }
    Ok(EvalDataset {
        task_specs: task_specs.to_vec(),
        inputs,
        targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::toy::build_toy_model;

    #[test]
    fn json_round_trip() {
        let g = build_toy_model(0, ToyArch::ToyMtB);
        let d = toy_dataset(&g, &toy_task_specs(ToyArch::ToyMtB), 6, 1).unwrap();
        d.validate_for(&g).unwrap();
        let back = EvalDataset::from_json(&d.to_json().unwrap()).unwrap();
        assert_eq!(back, d);
        assert_eq!(back.fingerprint(), d.fingerprint());
    }

    #[test]
    fn probe_is_seeded_and_sorted() {
        let a = probe_indices(100, 10, 7);
        assert_eq!(a, probe_indices(100, 10, 7));
        assert_ne!(a, probe_indices(100, 10, 8));
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn validation_catches_missing_head() {
        let g = build_toy_model(0, ToyArch::ToyMtA);
        let mut d = toy_dataset(&g, &toy_task_specs(ToyArch::ToyMtA), 4, 1).unwrap();
        d.task_specs[1].head = "conv1".into();
        assert!(matches!(d.validate_for(&g), Err(Error::Dataset(_))));
    }
}
