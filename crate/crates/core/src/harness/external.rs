//! Client side of the external-learner protocol.
//!
//! The adapter is a child process speaking one JSON object per line on its
//! standard streams. Requests:
//!
//! ```text
//! {"op":"hello"}
//! {"op":"train","labeled_ids":[..],"manifest_path":"..","seed":N}
//! {"op":"predict","ids":[..],"out_dir":".."}
//! {"op":"shutdown"}
//! ```
//!
//! Every response carries `"ok"`; failures add `"error"`. A successful
//! predict names two `ALTENS01` files: `proba` with dims `[n, H, W]` and
//! `embeddings` with dims `[n, embedding_dim]`, rows in request order.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::PatchId;
use crate::learner::ProbabilityMap;
use crate::scalar::Scalar;
use crate::tensor::read_tensor;

use super::port::{LearnerFactory, LearnerPort, PortError};

#[derive(Debug, Serialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request<'a> {
    Hello,
    Train { labeled_ids: &'a [PatchId], manifest_path: &'a Path, seed: u64 },
    Predict { ids: &'a [PatchId], out_dir: &'a Path },
    Shutdown,
}

#[derive(Debug, Clone, Deserialize)]
pub struct Response {
    pub ok: bool,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub embedding_dim: Option<usize>,
    #[serde(default)]
    pub proba: Option<PathBuf>,
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
}

/// A running adapter process.
pub struct AdapterLearner<T> {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
    manifest_path: PathBuf,
    out_dir: PathBuf,
    transcript: Option<File>,
    name: String,
    embedding_dim: usize,
    prob_clamp: f64,
    cached: Option<(Vec<PatchId>, Vec<Vec<T>>)>,
    shut_down: bool,
}

fn adapter_err(msg: impl Into<String>) -> PortError {
    PortError::Adapter(msg.into())
}

impl<T: Scalar> AdapterLearner<T> {
    /// Spawns `command` through the shell and performs the handshake.
    ///
    /// `manifest_path` must cover every id the harness will train on or
    /// predict; tensors are written under `out_dir`.
    pub fn spawn(
        command: &str,
        manifest_path: &Path,
        out_dir: &Path,
        transcript: Option<&Path>,
        prob_clamp: f64,
    ) -> Result<Self, PortError> {
        fs::create_dir_all(out_dir).map_err(|e| adapter_err(format!("cannot create {}: {e}", out_dir.display())))?;
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| adapter_err(format!("cannot start adapter `{command}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        let transcript = transcript
            .map(|p| OpenOptions::new().create(true).write(true).truncate(true).open(p))
            .transpose()
            .map_err(|e| adapter_err(format!("cannot open transcript: {e}")))?;
        let mut learner = Self {
            child,
            stdin,
            stdout,
            manifest_path: manifest_path.to_path_buf(),
            out_dir: out_dir.to_path_buf(),
            transcript,
            name: String::new(),
            embedding_dim: 0,
            prob_clamp,
            cached: None,
            shut_down: false,
        };
        let hello = learner.call(&Request::Hello)?;
        learner.name = hello.name.unwrap_or_default();
        learner.embedding_dim = hello.embedding_dim.ok_or_else(|| adapter_err("hello response lacks embedding_dim"))?;
        Ok(learner)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn embedding_dim(&self) -> usize {
        self.embedding_dim
    }

    /// Sends one request and reads exactly one response line.
    pub fn call(&mut self, request: &Request<'_>) -> Result<Response, PortError> {
        let line = serde_json::to_string(request).expect("request serializes");
        writeln!(self.stdin, "{line}").map_err(|e| adapter_err(format!("write failed: {e}")))?;
        self.stdin.flush().map_err(|e| adapter_err(format!("flush failed: {e}")))?;
        let mut reply = String::new();
        let n = self.stdout.read_line(&mut reply).map_err(|e| adapter_err(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(adapter_err("adapter closed its output"));
        }
        if let Some(t) = self.transcript.as_mut() {
            // The transcript is a debugging aid; a failed write is not fatal.
            let _ = writeln!(t, "> {line}").and_then(|_| write!(t, "< {reply}"));
        }
        let value: Value = serde_json::from_str(reply.trim()).map_err(|e| adapter_err(format!("bad response {reply:?}: {e}")))?;
        let response: Response =
            serde_json::from_value(value).map_err(|e| adapter_err(format!("bad response {reply:?}: {e}")))?;
        if !response.ok {
            return Err(adapter_err(response.error.unwrap_or_else(|| "unspecified adapter error".into())));
        }
        Ok(response)
    }

    fn predict_both(&mut self, ids: &[PatchId]) -> Result<(Vec<ProbabilityMap<T>>, Vec<Vec<T>>), PortError> {
        let out_dir = self.out_dir.clone();
        let resp = self.call(&Request::Predict { ids, out_dir: &out_dir })?;
        let proba_path = resp.proba.ok_or_else(|| adapter_err("predict response lacks proba"))?;
        let emb_path = resp.embeddings.ok_or_else(|| adapter_err("predict response lacks embeddings"))?;
        let proba = read_tensor(&proba_path)?;
        let emb = read_tensor(&emb_path)?;
        let n = ids.len() as u64;
        if proba.dims.len() != 3 || proba.dims[0] != n {
            return Err(adapter_err(format!("proba dims {:?}, expected [{n}, H, W]", proba.dims)));
        }
        if emb.dims != [n, self.embedding_dim as u64] {
            return Err(adapter_err(format!("embedding dims {:?}, expected [{n}, {}]", emb.dims, self.embedding_dim)));
        }
        if let Some(v) = proba.data.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(adapter_err(format!("probability {v} outside the open unit interval")));
        }
        let (h, w) = (proba.dims[1] as usize, proba.dims[2] as usize);
        let eps = T::lit(self.prob_clamp);
        let maps = (0..ids.len())
            .map(|i| {
                let vals = proba.row(i).iter().map(|&v| T::lit(v as f64)).collect();
                ProbabilityMap::clamped(h, w, vals, eps).map_err(PortError::from)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let embeddings: Vec<Vec<T>> =
            (0..ids.len()).map(|i| emb.row(i).iter().map(|&v| T::lit(v as f64)).collect()).collect();
        self.cached = Some((ids.to_vec(), embeddings.clone()));
        Ok((maps, embeddings))
    }

    pub fn shutdown(&mut self) -> Result<(), PortError> {
        if self.shut_down {
            return Ok(());
        }
        self.shut_down = true;
        let result = self.call(&Request::Shutdown).map(|_| ());
        let _ = self.child.wait();
        result
    }
}

impl<T: Scalar> LearnerPort<T> for AdapterLearner<T> {
    fn train(&mut self, labeled: &[PatchId], seed: u64) -> Result<(), PortError> {
        self.cached = None;
        let manifest = self.manifest_path.clone();
        self.call(&Request::Train { labeled_ids: labeled, manifest_path: &manifest, seed })?;
        Ok(())
    }

    fn predict(&mut self, ids: &[PatchId]) -> Result<Vec<ProbabilityMap<T>>, PortError> {
        Ok(self.predict_both(ids)?.0)
    }

    fn embed(&mut self, ids: &[PatchId]) -> Result<Vec<Vec<T>>, PortError> {
        if let Some((cached_ids, emb)) = &self.cached {
            if cached_ids == ids {
                return Ok(emb.clone());
            }
        }
        Ok(self.predict_both(ids)?.1)
    }
}

impl<T> Drop for AdapterLearner<T> {
    fn drop(&mut self) {
        if !self.shut_down {
            self.shut_down = true;
            let _ = writeln!(self.stdin, "{}", serde_json::to_string(&Request::Shutdown).expect("serializes"));
            let _ = self.stdin.flush();
            let mut sink = String::new();
            let _ = self.stdout.read_line(&mut sink);
            let _ = self.child.wait();
        }
    }
}

/// Spawns one adapter per repetition under `work_dir/rep{r}`.
pub struct AdapterFactory {
    pub command: String,
    pub manifest_path: PathBuf,
    pub work_dir: PathBuf,
    pub prob_clamp: f64,
}

impl<T: Scalar> LearnerFactory<T> for AdapterFactory {
    fn create(&self, repetition: usize) -> Result<Box<dyn LearnerPort<T>>, PortError> {
        let dir = self.work_dir.join(format!("rep{repetition}"));
        let transcript = self.work_dir.join(format!("rep{repetition}_transcript.jsonl"));
        Ok(Box::new(AdapterLearner::<T>::spawn(
            &self.command,
            &self.manifest_path,
            &dir,
            Some(&transcript),
            self.prob_clamp,
        )?))
    }
}
