//! Client side of the external evaluator protocol.
//!
//! One JSON object per line over the child's stdin/stdout, tagged by `kind`:
//!
//! * engine → evaluator: `hello {protocol, task_specs}`,
//!   `eval_request {request_id, mask, dataset, model_path?, group_table?}`, `shutdown`
//! * evaluator → engine: `ready {task_names}`, `eval_response {request_id, losses}`,
//!   `error {request_id?, message}`
//!
//! The model and its group table are written to the work directory whenever
//! the graph changes and passed by path. One request is in flight at a time.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::groups::{ChannelAnalysis, GroupId};
use crate::graph::onnx::{export_model, sha256_hex};
use crate::graph::ModelGraph;
use crate::oracle::dataset::TaskSpec;
use crate::oracle::{LossOracle, TaskLossVector};

pub const PROTOCOL_VERSION: &str = "gcprune-eval/1";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EngineMessage {
    Hello {
        protocol: String,
        task_specs: Vec<TaskSpec>,
    },
    EvalRequest {
        request_id: u64,
        mask: Vec<GroupId>,
        dataset: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        model_path: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        group_table: Option<PathBuf>,
    },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvaluatorMessage {
    Ready {
        task_names: Vec<String>,
    },
    EvalResponse {
        request_id: u64,
        losses: BTreeMap<String, f64>,
    },
    Error {
        #[serde(default)]
        request_id: Option<u64>,
        message: String,
    },
}

#[derive(Debug, Clone)]
pub struct ExternalConfig {
    /// Program followed by its arguments.
    pub command: Vec<String>,
    pub task_specs: Vec<TaskSpec>,
    pub dataset: String,
    pub timeout: Duration,
    /// Where model and group-table files are written; a temp dir if unset.
    pub work_dir: Option<PathBuf>,
}

pub struct ExternalEvaluator {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    task_names: Vec<String>,
    dataset: String,
    timeout: Duration,
    next_id: u64,
    work_dir: PathBuf,
    _temp: Option<tempfile::TempDir>,
    current: Option<(String, PathBuf, PathBuf)>,
}

impl ExternalEvaluator {
    /// Launches the evaluator and completes the handshake.
    pub fn spawn(cfg: ExternalConfig) -> Result<Self> {
        let (program, args) = cfg
            .command
            .split_first()
            .ok_or_else(|| Error::Config("external evaluator command is empty".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::Evaluator(format!("cannot launch `{program}`: {e}")))?;
        let stdout = child.stdout.take().expect("piped");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        let (temp, work_dir) = match cfg.work_dir {
            Some(d) => {
                std::fs::create_dir_all(&d)?;
                (None, d)
            }
            None => {
                let t = tempfile::tempdir()?;
                let p = t.path().to_path_buf();
                (Some(t), p)
            }
        };
        let mut ev = Self {
            stdin: child.stdin.take(),
            child,
            lines: rx,
            task_names: Vec::new(),
            dataset: cfg.dataset,
            timeout: cfg.timeout,
            next_id: 1,
            work_dir,
            _temp: temp,
            current: None,
        };
        ev.send(&EngineMessage::Hello {
            protocol: PROTOCOL_VERSION.into(),
            task_specs: cfg.task_specs.clone(),
        })?;
        match ev.recv()? {
            EvaluatorMessage::Ready { task_names } => {
                if task_names.len() != cfg.task_specs.len() {
                    return Err(Error::Protocol(format!(
                        "evaluator reports {} tasks, configuration has {}",
                        task_names.len(),
                        cfg.task_specs.len()
                    )));
                }
                let expected: Vec<&str> = cfg.task_specs.iter().map(|t| t.name.as_str()).collect();
                if task_names.iter().map(String::as_str).ne(expected.iter().copied()) {
                    return Err(Error::Protocol(format!("evaluator task names {task_names:?} differ from {expected:?}")));
                }
                ev.task_names = task_names;
            }
            EvaluatorMessage::Error { message, .. } => return Err(Error::Evaluator(message)),
            other => return Err(Error::Protocol(format!("expected `ready`, got {other:?}"))),
        }
        Ok(ev)
    }

    pub fn work_dir(&self) -> &Path {
        &self.work_dir
    }

    fn send(&mut self, msg: &EngineMessage) -> Result<()> {
        let mut line = serde_json::to_string(msg)?;
        line.push('\n');
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| Error::Evaluator("evaluator input is closed".into()))?;
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| Error::Evaluator(format!("evaluator exited or closed its input: {e}")))
    }

    fn recv(&mut self) -> Result<EvaluatorMessage> {
        match self.lines.recv_timeout(self.timeout) {
            Ok(Ok(line)) => serde_json::from_str(&line).map_err(|e| Error::Protocol(format!("cannot parse `{line}`: {e}"))),
            Ok(Err(e)) => Err(Error::Evaluator(format!("reading evaluator output failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => Err(Error::Timeout(self.timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                let status = self.child.try_wait().ok().flatten();
                Err(Error::Evaluator(match status {
                    Some(s) => format!("evaluator exited ({s})"),
                    None => "evaluator closed its output".into(),
                }))
            }
        }
    }

    fn files_for(&mut self, g: &ModelGraph, analysis: &ChannelAnalysis) -> Result<(PathBuf, PathBuf)> {
        let bytes = export_model(g);
        let fp = sha256_hex(&bytes);
        if let Some((cur, m, t)) = &self.current {
            if *cur == fp {
                return Ok((m.clone(), t.clone()));
            }
        }
        let model = self.work_dir.join(format!("model-{}.onnx", &fp[..16]));
        let table = self.work_dir.join(format!("groups-{}.json", &fp[..16]));
        std::fs::write(&model, &bytes)?;
        std::fs::write(&table, serde_json::to_vec(&analysis.group_table())?)?;
        self.current = Some((fp, model.clone(), table.clone()));
        Ok((model, table))
    }
}

impl LossOracle for ExternalEvaluator {
    fn task_names(&self) -> Vec<String> {
        self.task_names.clone()
    }

    fn evaluate(&mut self, g: &ModelGraph, analysis: &ChannelAnalysis, mask: &BTreeSet<GroupId>) -> Result<TaskLossVector> {
        for &id in mask {
            analysis.group(id)?;
        }
        let (model, table) = self.files_for(g, analysis)?;
        let request_id = self.next_id;
        self.next_id += 1;
        self.send(&EngineMessage::EvalRequest {
            request_id,
            mask: mask.iter().copied().collect(),
            dataset: self.dataset.clone(),
            model_path: Some(model),
            group_table: Some(table),
        })?;
        match self.recv()? {
            EvaluatorMessage::EvalResponse { request_id: rid, losses } => {
                if rid != request_id {
                    return Err(Error::Protocol(format!("response id {rid} does not match request {request_id}")));
                }
                if losses.len() != self.task_names.len() {
                    return Err(Error::Protocol(format!("response carries {} losses, expected {}", losses.len(), self.task_names.len())));
                }
                let values = self
                    .task_names
                    .iter()
                    .map(|t| {
                        let v = *losses.get(t).ok_or_else(|| Error::Protocol(format!("response lacks task `{t}`")))?;
                        if !v.is_finite() || v < 0.0 {
                            return Err(Error::Protocol(format!("task `{t}` loss {v} is not a finite non-negative number")));
                        }
                        Ok(v)
                    })
                    .collect::<Result<Vec<f64>>>()?;
                TaskLossVector::new(&self.task_names, &values, &self.dataset)
            }
            EvaluatorMessage::Error { message, .. } => Err(Error::Evaluator(message)),
            other => Err(Error::Protocol(format!("expected `eval_response`, got {other:?}"))),
        }
    }
}

impl Drop for ExternalEvaluator {
    fn drop(&mut self) {
        let _ = self.send(&EngineMessage::Shutdown);
        self.stdin = None;
        for _ in 0..50 {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            std::thread::sleep(Duration::from_millis(10));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::loss::LossKind;

    #[test]
    fn message_framing() {
        let m = EngineMessage::EvalRequest {
            request_id: 3,
            mask: vec![1, 4],
            dataset: "probe".into(),
            model_path: None,
            group_table: None,
        };
        assert_eq!(
            serde_json::to_string(&m).unwrap(),
            r#"{"kind":"eval_request","request_id":3,"mask":[1,4],"dataset":"probe"}"#
        );
        let hello = EngineMessage::Hello {
            protocol: PROTOCOL_VERSION.into(),
            task_specs: vec![TaskSpec::new("cls", LossKind::CrossEntropy, "head_cls")],
        };
        let text = serde_json::to_string(&hello).unwrap();
        assert!(text.starts_with(r#"{"kind":"hello""#));
        let r: EvaluatorMessage = serde_json::from_str(r#"{"kind":"eval_response","request_id":3,"losses":{"cls":0.1}}"#).unwrap();
        assert!(matches!(r, EvaluatorMessage::EvalResponse { request_id: 3, .. }));
        assert_eq!(serde_json::to_string(&EngineMessage::Shutdown).unwrap(), r#"{"kind":"shutdown"}"#);
    }

    #[test]
    fn floats_round_trip_exactly() {
        let x = 0.1f64 + 0.2 + 1e-17 * 3.0;
        let mut losses = BTreeMap::new();
        losses.insert("t".to_string(), x);
        losses.insert("u".to_string(), 1.0000000000000002);
        let m = EvaluatorMessage::EvalResponse { request_id: 1, losses };
        let back: EvaluatorMessage = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
