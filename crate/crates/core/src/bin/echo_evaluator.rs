//! Minimal external evaluator: answers every request with constant losses.
//!
//! Flags: `--value X` loss for every task (default 1), `--fail-after N`
//! exit after N answered requests, `--extra-task` report one task too many,
//! `--silent` never answer requests.

use std::io::{BufRead, Write};

use gcprune::oracle::external::{EngineMessage, EvaluatorMessage};

fn main() {
    let mut value = 1.0f64;
    let mut fail_after: Option<u64> = None;
    let mut extra_task = false;
    let mut silent = false;
    let mut args = std::env::args().skip(1);
    while let Some(a) = args.next() {
        match a.as_str() {
            "--value" => value = args.next().and_then(|v| v.parse().ok()).expect("--value takes a number"),
            "--fail-after" => fail_after = args.next().and_then(|v| v.parse().ok()),
            "--extra-task" => extra_task = true,
            "--silent" => silent = true,
            other => {
                eprintln!("echo_evaluator: unknown argument `{other}`");
                std::process::exit(2);
            }
        }
    }
    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    let mut tasks: Vec<String> = Vec::new();
    let mut answered = 0u64;
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        let msg: EngineMessage = match serde_json::from_str(&line) {
            Ok(m) => m,
            Err(e) => {
                eprintln!("echo_evaluator: bad message: {e}");
                std::process::exit(1);
            }
        };
        let reply = match msg {
            EngineMessage::Hello { task_specs, .. } => {
                tasks = task_specs.into_iter().map(|t| t.name).collect();
                let mut names = tasks.clone();
                if extra_task {
                    names.push("extra".into());
                }
                EvaluatorMessage::Ready { task_names: names }
            }
            EngineMessage::EvalRequest { request_id, .. } => {
                if fail_after.is_some_and(|n| answered >= n) {
                    std::process::exit(3);
                }
                if silent {
                    continue;
                }
                answered += 1;
                EvaluatorMessage::EvalResponse {
                    request_id,
                    losses: tasks.iter().map(|t| (t.clone(), value)).collect(),
                }
            }
            EngineMessage::Shutdown => break,
        };
        let text = serde_json::to_string(&reply).expect("serializable");
        if writeln!(out, "{text}").and_then(|_| out.flush()).is_err() {
            break;
        }
    }
}
