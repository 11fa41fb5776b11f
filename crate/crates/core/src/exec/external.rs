//! Subprocess adapter for external engines.
//!
//! Request: a directory containing `model.json` plus `input_<i>.tns`.
//! Invocation: `<engine_cmd> --dir <request_dir>`; exit 0 means outputs are
//! present as `output_<i>.tns`. Nonzero exits report through `status.json`
//! (`{stage, code, message, op?}`): a convert-stage failure classifies as
//! MCF, anything else at run time as IF. A hung engine is killed at the
//! deadline and classified IF(timeout). Malformed replies are infrastructure
//! errors, never engine exceptions.

use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::exec::InfraError;
use crate::ir::{serialize_model, ModelSpec};
use crate::tensor::{read_tns_file, write_tns_file, Tensor};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EngineStatus {
    pub stage: String,
    pub code: i32,
    pub message: String,
    #[serde(default)]
    pub op: Option<String>,
}

#[derive(Debug, Clone)]
pub enum EngineReply {
    Outputs(Vec<Tensor>),
    ConvertFail {
        code: i32,
        op: String,
        message: String,
    },
    InferCrash {
        op: String,
        message: String,
    },
    Timeout,
}

#[derive(Debug, Clone)]
pub struct ExternalEngine {
    /// Command line, split; `--dir <request_dir>` is appended.
    pub cmd: Vec<String>,
    pub timeout: Duration,
    /// Base directory for per-trial request directories.
    pub workdir: PathBuf,
}

impl ExternalEngine {
    pub fn new(cmd_line: &str, workdir: &Path) -> ExternalEngine {
        ExternalEngine {
            cmd: cmd_line.split_whitespace().map(str::to_string).collect(),
            timeout: DEFAULT_TIMEOUT,
            workdir: workdir.to_path_buf(),
        }
    }

    pub fn run(&self, model: &ModelSpec, inputs: &[Tensor]) -> Result<EngineReply, InfraError> {
        let dir = request_dir(&self.workdir)?;
        write_request(&dir, model, inputs)?;
        let reply = self.invoke(&dir, model);
        // Request dirs are kept on failure for postmortems.
        if matches!(reply, Ok(EngineReply::Outputs(_))) {
            let _ = std::fs::remove_dir_all(&dir);
        }
        reply
    }

    fn invoke(&self, dir: &Path, model: &ModelSpec) -> Result<EngineReply, InfraError> {
        if self.cmd.is_empty() {
            return Err(InfraError::Protocol("empty engine command".to_string()));
        }
        let mut child = Command::new(&self.cmd[0])
            .args(&self.cmd[1..])
            .arg("--dir")
            .arg(dir)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .map_err(InfraError::Io)?;

        let deadline = Instant::now() + self.timeout;
        let status = loop {
            match child.try_wait().map_err(InfraError::Io)? {
                Some(status) => break status,
                None if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    return Ok(EngineReply::Timeout);
                }
                None => std::thread::sleep(Duration::from_millis(5)),
            }
        };

        if status.success() {
            let expected = model.sink_ids().len();
            let mut outputs = Vec::with_capacity(expected);
            for i in 0..expected {
                let path = dir.join(format!("output_{i}.tns"));
                let tensor = read_tns_file(&path).map_err(|e| {
                    InfraError::Protocol(format!(
                        "engine exited 0 but {} is unreadable: {e}",
                        path.display()
                    ))
                })?;
                outputs.push(tensor);
            }
            return Ok(EngineReply::Outputs(outputs));
        }

        let status_path = dir.join("status.json");
        match std::fs::read_to_string(&status_path) {
            Ok(raw) => {
                let parsed: EngineStatus = serde_json::from_str(&raw).map_err(|e| {
                    InfraError::Protocol(format!("malformed status.json: {e}"))
                })?;
                let op = parsed.op.unwrap_or_default();
                if parsed.stage == "convert" {
                    Ok(EngineReply::ConvertFail {
                        code: parsed.code,
                        op,
                        message: parsed.message,
                    })
                } else {
                    Ok(EngineReply::InferCrash {
                        op,
                        message: parsed.message,
                    })
                }
            }
            // No status file and a nonzero exit: the engine crashed.
            Err(_) => Ok(EngineReply::InferCrash {
                op: String::new(),
                message: format!("engine exited abnormally: {status}"),
            }),
        }
    }
}

fn request_dir(base: &Path) -> Result<PathBuf, InfraError> {
    std::fs::create_dir_all(base)?;
    for attempt in 0.. {
        let candidate = base.join(format!(
            "trial_{}_{attempt}",
            std::process::id(),
        ));
        match std::fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(InfraError::Io(e)),
        }
    }
    unreachable!()
}

pub fn write_request(dir: &Path, model: &ModelSpec, inputs: &[Tensor]) -> Result<(), InfraError> {
    std::fs::write(dir.join("model.json"), serialize_model(model))?;
    for (i, tensor) in inputs.iter().enumerate() {
        write_tns_file(tensor, &dir.join(format!("input_{i}.tns")))
            .map_err(|e| InfraError::Protocol(format!("cannot write input {i}: {e}")))?;
    }
    Ok(())
}

/// The engine side of the protocol: reads a request directory, returns the
/// parsed model and inputs. Used by the built-in engine double.
pub fn read_request(dir: &Path) -> Result<(ModelSpec, Vec<Tensor>), String> {
    let bytes = std::fs::read(dir.join("model.json"))
        .map_err(|e| format!("cannot read model.json: {e}"))?;
    let model =
        crate::ir::deserialize_model(&bytes).map_err(|e| format!("model.json invalid: {e}"))?;
    let mut inputs = Vec::new();
    for i in 0..model.placeholder_ids().len() {
        let path = dir.join(format!("input_{i}.tns"));
        let tensor = read_tns_file(&path).map_err(|e| format!("cannot read input {i}: {e}"))?;
        inputs.push(tensor);
    }
    Ok((model, inputs))
}

pub fn write_reply_outputs(dir: &Path, outputs: &[Tensor]) -> Result<(), String> {
    for (i, tensor) in outputs.iter().enumerate() {
        write_tns_file(tensor, &dir.join(format!("output_{i}.tns")))
            .map_err(|e| format!("cannot write output {i}: {e}"))?;
    }
    Ok(())
}

pub fn write_reply_status(dir: &Path, status: &EngineStatus) -> Result<(), String> {
    let raw = serde_json::to_string_pretty(status).expect("status serializes");
    std::fs::write(dir.join("status.json"), raw).map_err(|e| format!("cannot write status: {e}"))
}
