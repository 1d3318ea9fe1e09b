//! End-to-end checks of the `albench` binary on a small synthetic corpus.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const FAST: &[&str] = &["--epochs", "5", "--learning-rate", "0.5", "--scales", "3,7"];

fn albench(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_albench")).arg("--out").arg(out).args(args).output().expect("albench starts")
}

fn ok(output: Output) -> Output {
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    output
}

struct Corpus {
    _dir: tempfile::TempDir,
    root: PathBuf,
    pool: PathBuf,
    test: PathBuf,
}

/// 40 synthetic images cut into 160 patches, split into a 60-patch pool and
/// a 40-patch test set.
fn corpus() -> &'static Corpus {
    static C: OnceLock<Corpus> = OnceLock::new();
    C.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        ok(albench(&root.join("images"), &["synth", "--n-images", "40"]));
        let images = root.join("images/manifest.json");
        ok(albench(&root.join("patches"), &["patchify", "--manifest", images.to_str().unwrap()]));
        let patches = root.join("patches/manifest.json");
        let pools = root.join("pools");
        let args = ["pool", "--source", patches.to_str().unwrap(), "--pi-u", "0.3", "--size", "60"];
        ok(albench(&pools, &[&args[..], &["--pi-t", "0.3", "--test-size", "40"]].concat()));
        Corpus { _dir: dir, pool: pools.join("pool.json"), test: pools.join("test.json"), root }
    })
}

fn run_args<'a>(c: &'a Corpus, cycles: &'a str, reps: &'a str, extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec!["run", "--pool", c.pool.to_str().unwrap(), "--test", c.test.to_str().unwrap()];
    args.extend_from_slice(&["--cycles", cycles, "--budget", "0.05", "--reps", reps]);
    args.extend_from_slice(extra);
    args
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        let target = to.join(entry.file_name());
        if entry.file_type().unwrap().is_dir() {
            copy_dir(&entry.path(), &target);
        } else {
            fs::copy(entry.path(), target).unwrap();
        }
    }
}

#[test]
fn missing_test_manifest_is_a_config_error() {
    let c = corpus();
    let out = c.root.join("no_test");
    let r = albench(&out, &["run", "--pool", c.pool.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("--test"));
}

#[test]
fn full_run_report_and_replay() {
    let c = corpus();
    let out = c.root.join("full");
    let args = run_args(c, "5", "3", &[&["--strategy", "all", "--workers", "2"][..], FAST].concat());
    ok(albench(&out, &args));

    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3 * 3 * 5);
    assert!(out.join("uniqueness.csv").exists());
    let provenance: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("provenance.json")).unwrap()).unwrap();
    assert_eq!(provenance["arguments"]["seed"], 42);
    let runs: Vec<PathBuf> = fs::read_dir(out.join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 3);
    for run in &runs {
        assert_eq!(fs::read_dir(run.join("selections")).unwrap().count(), 15);
    }

    let report = c.root.join("full_report");
    ok(albench(&report, &["report", "--run", out.to_str().unwrap()]));
    let svgs: Vec<String> = fs::read_dir(&report)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".svg"))
        .collect();
    assert!(svgs.iter().any(|n| n.starts_with("f1_curves_")), "{svgs:?}");
    assert!(svgs.iter().any(|n| n.starts_with("selection_diag_")), "{svgs:?}");

    ok(albench(&c.root.join("full_replay"), &["replay", out.to_str().unwrap()]));

    // One altered digit in a stored metrics row.
    let tampered = c.root.join("tampered");
    copy_dir(&out, &tampered);
    let run = &runs[0];
    let csv_path = tampered.join("runs").join(run.file_name().unwrap()).join("metrics.csv");
    let text = fs::read_to_string(&csv_path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    let last = lines[3].pop().unwrap();
    lines[3].push(if last == '1' { '2' } else { '1' });
    fs::write(&csv_path, lines.join("\n") + "\n").unwrap();
    let r = albench(&c.root.join("tampered_replay"), &["replay", tampered.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(4), "{}", String::from_utf8_lossy(&r.stderr));
    assert!(String::from_utf8_lossy(&r.stderr).contains("line 4"), "{}", String::from_utf8_lossy(&r.stderr));

    // A missing selection log cannot be replayed.
    let gutted = c.root.join("gutted");
    copy_dir(&out, &gutted);
    fs::remove_file(gutted.join("runs").join(run.file_name().unwrap()).join("selections/rep1_cycle2.json")).unwrap();
    let r = albench(&c.root.join("gutted_replay"), &["replay", gutted.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2), "{}", String::from_utf8_lossy(&r.stderr));
}

#[test]
fn reruns_are_byte_identical() {
    let c = corpus();
    let (a, b) = (c.root.join("same_a"), c.root.join("same_b"));
    let args = run_args(c, "5", "3", &[&["--strategy", "coreset"][..], FAST].concat());
    ok(albench(&a, &args));
    ok(albench(&b, &[&["--workers", "3"][..], &args].concat()));
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn invalid_budget_is_rejected_before_training() {
    let c = corpus();
    let out = c.root.join("too_big");
    let r = albench(&out, &run_args(c, "5", "3", &["--budget", "0.5"]));
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("--budget"));
}

fn mock_adapter() -> Option<String> {
    let has_pil = Command::new("python3").args(["-c", "import PIL"]).output().is_ok_and(|o| o.status.success());
    if !has_pil {
        eprintln!("python3 with Pillow not found; skipping adapter checks");
        return None;
    }
    let script = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/mock_adapter.py");
    Some(format!("python3 {}", script.canonicalize().unwrap().display()))
}

#[test]
fn external_adapter_runs_are_reproducible() {
    let Some(cmd) = mock_adapter() else { return };
    let c = corpus();
    let (a, b) = (c.root.join("adapter_a"), c.root.join("adapter_b"));
    let args = run_args(c, "2", "2", &["--strategy", "entropy", "--model-cmd", &cmd]);
    ok(albench(&a, &args));
    ok(albench(&b, &args));
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
    let adapter_dir = |out: &Path| {
        let run = fs::read_dir(out.join("runs")).unwrap().next().unwrap().unwrap().path();
        run.join("adapter")
    };
    for rep in 0..2 {
        let name = format!("rep{rep}_transcript.jsonl");
        let ta = fs::read_to_string(adapter_dir(&a).join(&name)).unwrap();
        let tb = fs::read_to_string(adapter_dir(&b).join(&name)).unwrap();
        assert_eq!(ta.replace(a.to_str().unwrap(), "OUT"), tb.replace(b.to_str().unwrap(), "OUT"));
    }
}

#[test]
fn adapter_failure_exits_with_learner_code() {
    let Some(cmd) = mock_adapter() else { return };
    let c = corpus();
    let out = c.root.join("adapter_fail");
    let failing = format!("MOCK_ADAPTER_FAIL_TRAIN=2 {cmd}");
    let r = albench(&out, &run_args(c, "3", "2", &["--strategy", "random", "--model-cmd", &failing]));
    assert_eq!(r.status.code(), Some(3), "{}", String::from_utf8_lossy(&r.stderr));
    let status: serde_json::Value = {
        let run = fs::read_dir(out.join("runs")).unwrap().next().unwrap().unwrap().path();
        serde_json::from_str(&fs::read_to_string(run.join("status.json")).unwrap()).unwrap()
    };
    assert_eq!(status["state"], "incomplete");
}
