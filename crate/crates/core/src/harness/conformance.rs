//! Protocol conformance checks for external-learner adapters.
//!
//! Each check drives a fresh adapter process at the raw line level, so
//! ordering errors (train before hello, predict before train) can be
//! provoked directly.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};

use serde_json::{json, Value};

use crate::data::PatchId;
use crate::tensor::{read_tensor, FlatTensor};

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct ConformanceReport {
    pub checks: Vec<CheckResult>,
}

impl ConformanceReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

struct RawSession {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl RawSession {
    fn spawn(command: &str) -> Result<Self, String> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| format!("cannot start `{command}`: {e}"))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self { child, stdin, stdout })
    }

    fn call(&mut self, request: &Value) -> Result<Value, String> {
        writeln!(self.stdin, "{request}").and_then(|_| self.stdin.flush()).map_err(|e| format!("write failed: {e}"))?;
        let mut line = String::new();
        match self.stdout.read_line(&mut line) {
            Ok(0) => Err("adapter closed its output".into()),
            Ok(_) => serde_json::from_str(line.trim()).map_err(|e| format!("bad response {line:?}: {e}")),
            Err(e) => Err(format!("read failed: {e}")),
        }
    }

    fn close(mut self) -> Result<(), String> {
        let r = self.call(&json!({"op": "shutdown"}));
        let _ = self.child.wait();
        match r {
            Ok(v) if is_ok(&v) => Ok(()),
            Ok(v) => Err(format!("shutdown answered {v}")),
            Err(e) => Err(e),
        }
    }
}

impl Drop for RawSession {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn is_ok(v: &Value) -> bool {
    v.get("ok").and_then(Value::as_bool) == Some(true)
}

fn error_text(v: &Value) -> Option<&str> {
    (v.get("ok").and_then(Value::as_bool) == Some(false)).then(|| v.get("error").and_then(Value::as_str)).flatten()
}

fn expect_error(v: &Value, needle: &str) -> Result<(), String> {
    match error_text(v) {
        Some(e) if e.contains(needle) => Ok(()),
        _ => Err(format!("expected an error mentioning {needle:?}, got {v}")),
    }
}

fn train_req(ids: &[PatchId], manifest: &Path, seed: u64) -> Value {
    json!({"op": "train", "labeled_ids": ids, "manifest_path": manifest, "seed": seed})
}

fn predict_req(ids: &[PatchId], out_dir: &Path) -> Value {
    json!({"op": "predict", "ids": ids, "out_dir": out_dir})
}

fn tensors(v: &Value) -> Result<(FlatTensor, FlatTensor), String> {
    if !is_ok(v) {
        return Err(format!("predict failed: {v}"));
    }
    let path = |k: &str| v.get(k).and_then(Value::as_str).map(PathBuf::from).ok_or(format!("missing {k}"));
    let p = read_tensor(&path("proba")?).map_err(|e| e.to_string())?;
    let e = read_tensor(&path("embeddings")?).map_err(|e| e.to_string())?;
    Ok((p, e))
}

/// Runs every check against `command`. `manifest` must cover `train_ids`
/// and `predict_ids`; tensors are written below `work_dir`.
pub fn run_conformance(
    command: &str,
    manifest: &Path,
    train_ids: &[PatchId],
    predict_ids: &[PatchId],
    work_dir: &Path,
) -> ConformanceReport {
    let mut report = ConformanceReport::default();
    let mut check = |name: &'static str, f: &mut dyn FnMut() -> Result<String, String>| {
        let (passed, detail) = match f() {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        report.checks.push(CheckResult { name, passed, detail });
    };
    let out = work_dir.join("conformance");
    let hello = json!({"op": "hello"});

    check("train before hello is refused", &mut || {
        let mut s = RawSession::spawn(command)?;
        expect_error(&s.call(&train_req(train_ids, manifest, 0))?, "handshake required")?;
        s.close().map(|_| String::new())
    });
    check("hello declares embedding_dim and is idempotent", &mut || {
        let mut s = RawSession::spawn(command)?;
        let a = s.call(&hello)?;
        let b = s.call(&hello)?;
        let dim = a.get("embedding_dim").and_then(Value::as_u64).filter(|d| *d > 0);
        if !is_ok(&a) || dim.is_none() || a.get("name").and_then(Value::as_str).is_none() {
            return Err(format!("bad hello response {a}"));
        }
        if a != b {
            return Err(format!("second hello differs: {a} vs {b}"));
        }
        s.close().map(|_| format!("embedding_dim {}", dim.unwrap_or(0)))
    });
    check("predict before train is refused", &mut || {
        let mut s = RawSession::spawn(command)?;
        s.call(&hello)?;
        expect_error(&s.call(&predict_req(predict_ids, &out))?, "model not trained")?;
        s.close().map(|_| String::new())
    });
    check("empty training set is refused", &mut || {
        let mut s = RawSession::spawn(command)?;
        s.call(&hello)?;
        expect_error(&s.call(&train_req(&[], manifest, 0))?, "empty training set")?;
        s.close().map(|_| String::new())
    });
    check("missing manifest is named", &mut || {
        let mut s = RawSession::spawn(command)?;
        s.call(&hello)?;
        let missing = work_dir.join("no_such_manifest.json");
        expect_error(&s.call(&train_req(train_ids, &missing, 0))?, &missing.display().to_string())?;
        s.close().map(|_| String::new())
    });
    check("predict shapes, clamping and normalization", &mut || {
        let mut s = RawSession::spawn(command)?;
        let dim = s.call(&hello)?.get("embedding_dim").and_then(Value::as_u64).unwrap_or(0);
        let t = s.call(&train_req(train_ids, manifest, 7))?;
        if !is_ok(&t) {
            return Err(format!("train failed: {t}"));
        }
        let (p, e) = tensors(&s.call(&predict_req(predict_ids, &out))?)?;
        let n = predict_ids.len() as u64;
        if p.dims.len() != 3 || p.dims[0] != n {
            return Err(format!("proba dims {:?}", p.dims));
        }
        if e.dims != [n, dim] {
            return Err(format!("embedding dims {:?}, expected [{n}, {dim}]", e.dims));
        }
        if let Some(v) = p.data.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(format!("probability {v} not clamped"));
        }
        for i in 0..predict_ids.len() {
            let norm = e.row(i).iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(format!("embedding row {i} has norm {norm}"));
            }
        }
        s.close().map(|_| format!("proba {:?}, embeddings {:?}", p.dims, e.dims))
    });
    check("same seed gives identical predictions", &mut || {
        let mut s = RawSession::spawn(command)?;
        s.call(&hello)?;
        let mut run = |sub: &str| -> Result<(FlatTensor, FlatTensor), String> {
            let t = s.call(&train_req(train_ids, manifest, 3))?;
            if !is_ok(&t) {
                return Err(format!("train failed: {t}"));
            }
            tensors(&s.call(&predict_req(predict_ids, &out.join(sub)))?)
        };
        let a = run("a")?;
        let b = run("b")?;
        if a != b {
            return Err("predictions differ between identical trainings".into());
        }
        s.close().map(|_| String::new())
    });
    report
}
