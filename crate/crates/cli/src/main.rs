//! `albench`: synthetic data, pool construction, active-learning runs,
//! figures and replay.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 learner
//! failure, 4 replay mismatch.

mod experiment;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use albench_core::data::{load_manifest, save_manifest, Role};
use albench_core::report::{parse_metrics_csv, parse_uniqueness_csv, render_report};
use albench_core::seed::{derive_seed, SeedPurpose};
use albench_core::synth::{build_disjoint_pools, build_pool, generate_synthetic, patchify, PoolSpec, SynthConfig};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Learner(String),
    Mismatch(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Learner(_) => 3,
            CliError::Mismatch(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Learner(m) | CliError::Mismatch(m) => m,
        }
    }
}

pub fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Debug, Parser, Serialize)]
#[command(name = "albench", version, about = "Pool-based active learning simulator for defect segmentation")]
pub struct Cli {
    /// Base seed for every random draw.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    /// Worker threads for repetitions (1 keeps a serial baseline).
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Output directory; all files are written below it.
    #[arg(long, global = true, env = "ALBENCH_OUT", default_value = "albench-out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "lowercase", tag = "name")]
pub enum Command {
    /// Generate synthetic images with elliptical defects.
    Synth(SynthArgs),
    /// Cut images into non-overlapping patches.
    Patchify(PatchifyArgs),
    /// Sample a pool (and optionally a disjoint test set) at fixed faulty fractions.
    Pool(PoolArgs),
    /// Run active-learning experiments.
    Run(experiment::RunArgs),
    /// Render figures from metrics.csv and uniqueness.csv.
    Report(ReportArgs),
    /// Recompute a run from its stored selections and compare metrics.
    Replay(experiment::ReplayArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 600)]
    pub n_images: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Probability that an image carries defects.
    #[arg(long, default_value_t = 0.6)]
    pub defect_probability: f64,
    #[arg(long, default_value_t = 1)]
    pub min_defects: usize,
    #[arg(long, default_value_t = 3)]
    pub max_defects: usize,
    #[arg(long, default_value_t = 4.0)]
    pub min_radius: f64,
    #[arg(long, default_value_t = 10.0)]
    pub max_radius: f64,
    #[arg(long, default_value_t = 0.06)]
    pub noise_sd: f64,
    /// Intensity drop inside defects.
    #[arg(long, default_value_t = 0.10)]
    pub contrast: f64,
}

impl SynthArgs {
    pub fn config(&self, seed: u64) -> SynthConfig {
        SynthConfig {
            n_images: self.n_images,
            height: self.height,
            width: self.width,
            defect_probability: self.defect_probability,
            defect_count_range: (self.min_defects, self.max_defects),
            defect_radius_range: (self.min_radius, self.max_radius),
            background_noise_sd: self.noise_sd,
            defect_contrast: self.contrast,
            seed,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct PatchifyArgs {
    /// Manifest of the source images.
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 32)]
    pub patch_height: usize,
    #[arg(long, default_value_t = 32)]
    pub patch_width: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct PoolArgs {
    /// Manifest of the patch source.
    #[arg(long)]
    pub source: PathBuf,
    /// Target faulty fraction of the pool.
    #[arg(long)]
    pub pi_u: f64,
    #[arg(long)]
    pub size: usize,
    /// Target faulty fraction of the test set; requires --test-size.
    #[arg(long, requires = "test_size")]
    pub pi_t: Option<f64>,
    #[arg(long, requires = "pi_t")]
    pub test_size: Option<usize>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Directory holding metrics.csv and, optionally, uniqueness.csv.
    #[arg(long, conflicts_with = "metrics")]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    #[arg(long)]
    pub uniqueness: Option<PathBuf>,
}

/// Writes `provenance.json` into `out`: the parsed arguments, the resolved
/// configuration and the raw command line.
pub fn write_provenance(cli: &Cli, resolved: serde_json::Value) -> Result<(), CliError> {
    fs::create_dir_all(&cli.out).map_err(|e| config_err(format!("--out {}: {e}", cli.out.display())))?;
    let doc = serde_json::json!({
        "tool": "albench",
        "version": env!("CARGO_PKG_VERSION"),
        "argv": std::env::args().collect::<Vec<_>>(),
        "arguments": cli,
        "resolved": resolved,
    });
    let text = serde_json::to_string_pretty(&doc).expect("provenance serializes") + "\n";
    let path = cli.out.join("provenance.json");
    fs::write(&path, text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

fn cmd_synth(cli: &Cli, args: &SynthArgs) -> Result<(), CliError> {
    let config = args.config(cli.seed);
    write_provenance(cli, serde_json::json!({ "synth": config }))?;
    let manifest = generate_synthetic(&config, &cli.out).map_err(config_err)?;
    println!("wrote {} images ({} faulty) to {}", manifest.len(), manifest.faulty_count(), cli.out.display());
    Ok(())
}

fn cmd_patchify(cli: &Cli, args: &PatchifyArgs) -> Result<(), CliError> {
    let source = load_manifest(&args.manifest).map_err(|e| config_err(format!("--manifest: {e}")))?;
    write_provenance(cli, serde_json::json!({ "patch_height": args.patch_height, "patch_width": args.patch_width }))?;
    let patches = patchify(&source, args.patch_height, args.patch_width, &cli.out).map_err(config_err)?;
    println!("wrote {} patches ({} faulty) to {}", patches.len(), patches.faulty_count(), cli.out.display());
    Ok(())
}

/// Seeds for the pool and test samplers of grid entry `index`.
pub fn pool_seeds(seed: u64, index: usize) -> (u64, u64) {
    (
        derive_seed(seed, index as u64, 0, SeedPurpose::Synthesis),
        derive_seed(seed, index as u64, 1, SeedPurpose::Synthesis),
    )
}

fn cmd_pool(cli: &Cli, args: &PoolArgs) -> Result<(), CliError> {
    let source = load_manifest(&args.source).map_err(|e| config_err(format!("--source: {e}")))?;
    let (pool_seed, test_seed) = pool_seeds(cli.seed, 0);
    let pool_spec = PoolSpec { target_faulty_fraction: args.pi_u, size: args.size, seed: pool_seed, role: Role::Pool };
    let test_spec = args.pi_t.zip(args.test_size).map(|(pi_t, size)| PoolSpec {
        target_faulty_fraction: pi_t,
        size,
        seed: test_seed,
        role: Role::Test,
    });
    write_provenance(cli, serde_json::json!({ "pool": pool_spec, "test": test_spec }))?;
    let save = |m: &albench_core::DatasetManifest, name: &str| {
        let path = cli.out.join(name);
        save_manifest(m, &path).map_err(config_err)?;
        println!("{name}: {} patches, {} faulty", m.len(), m.faulty_count());
        Ok::<_, CliError>(())
    };
    match test_spec {
        Some(t) => {
            let (pool, test) = build_disjoint_pools(&source, &pool_spec, &t).map_err(config_err)?;
            save(&pool, "pool.json")?;
            save(&test, "test.json")
        }
        None => save(&build_pool(&source, &pool_spec).map_err(config_err)?, "pool.json"),
    }
}

fn cmd_report(cli: &Cli, args: &ReportArgs) -> Result<(), CliError> {
    let (metrics, uniqueness) = match (&args.run, &args.metrics) {
        (Some(dir), _) => {
            let u = dir.join("uniqueness.csv");
            (dir.join("metrics.csv"), args.uniqueness.clone().or_else(|| u.exists().then_some(u)))
        }
        (None, Some(m)) => (m.clone(), args.uniqueness.clone()),
        (None, None) => return Err(config_err("one of --run or --metrics is required")),
    };
    let read = |p: &Path, flag: &str| fs::read_to_string(p).map_err(|e| config_err(format!("{flag} {}: {e}", p.display())));
    let rows = parse_metrics_csv(&read(&metrics, "--metrics")?).map_err(config_err)?;
    let uniq = match &uniqueness {
        Some(p) => Some(parse_uniqueness_csv(&read(p, "--uniqueness")?).map_err(config_err)?),
        None => None,
    };
    write_provenance(cli, serde_json::json!({ "metrics": metrics, "uniqueness": uniqueness }))?;
    let rendered = render_report(&rows, uniq.as_deref(), &cli.out).map_err(config_err)?;
    for n in &rendered.notices {
        eprintln!("notice: {n}");
    }
    for f in &rendered.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(cli, a),
        Command::Patchify(a) => cmd_patchify(cli, a),
        Command::Pool(a) => cmd_pool(cli, a),
        Command::Run(a) => experiment::cmd_run(cli, a),
        Command::Report(a) => cmd_report(cli, a),
        Command::Replay(a) => experiment::cmd_replay(cli, a),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}
