//! Command-line entry point.
//!
//! Every command validates its inputs and configuration before writing
//! anything, then records a `run_manifest.json` in its output directory
//! before producing outputs.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::align::{align_pair, warp, AlignConfig};
use crate::analysis::{gap_report, write_gap_report, GapConfig, HausdorffAggregation, Representation};
use crate::error::{Error, Result};
use crate::eval::{evaluate, render_table, EvalConfig};
use crate::image::Image;
use crate::netcore::{load_checkpoint, Checkpoint};
use crate::synthgen::{generate_dataset, load_dataset, CaptureConfig, Profile, SceneConfig};
use crate::train::{train_run, TrainConfig, Variant};

/// Environment variable supplying the default seed.
pub const SEED_ENV: &str = "LOWLIGHT_POSE_SEED";
pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

/// Exit codes by error category.
pub mod exit {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const INPUT: i32 = 4;
    pub const RUNTIME: i32 = 5;
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Schema { .. } => exit::CONFIG,
        Error::Io { .. } | Error::Format { .. } | Error::Metadata(_) | Error::Contract(_) | Error::Shape(_) => {
            exit::INPUT
        }
        Error::Degenerate(_)
        | Error::Estimation(_)
        | Error::AlignmentImpossible(_)
        | Error::Rejected(_)
        | Error::Diverged { .. } => exit::RUNTIME,
    }
}

fn category(code: i32) -> &'static str {
    match code {
        exit::CONFIG => "configuration error",
        exit::INPUT => "input error",
        _ => "runtime error",
    }
}

#[derive(Parser, Debug)]
#[command(name = "lowlight-pose", version, about = "Lighting-robust pose estimation on paired low-light captures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic paired dataset.
    Generate(GenerateArgs),
    /// Estimate the homography between two reference captures and warp images with it.
    Align(AlignArgs),
    /// Train a model variant.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the low-light splits and the well-lit set.
    Eval(EvalArgs),
    /// Style and feature gaps between lighting conditions.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    scenes: usize,
    #[arg(long, default_value = "outdoor")]
    profile: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// JSON file with `capture` and `scene` sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// 8 or 16.
    #[arg(long)]
    bit_depth: Option<u8>,
    /// Start from the benchmark capture settings (16-bit).
    #[arg(long)]
    benchmark: bool,
}

#[derive(Args, Debug)]
struct AlignArgs {
    /// Reference capture of the target view.
    #[arg(long)]
    ref_a: PathBuf,
    /// Reference capture of the view to be mapped onto `--ref-a`.
    #[arg(long)]
    ref_b: PathBuf,
    /// Images from the second view to warp.
    #[arg(long, num_args = 1..)]
    apply: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Start from the short benchmark schedule instead of the defaults.
    /// Ignored when `--config` is given.
    #[arg(long)]
    benchmark: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// JSON report path; a text table is written next to it.
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// `NAME=PATH` pairs.
    #[arg(long, num_args = 1.., required = true)]
    checkpoints: Vec<String>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `max` or `mean` of the directed terms.
    #[arg(long, default_value = "max")]
    aggregation: String,
    /// Compare raw flattened feature maps instead of pooled ones.
    #[arg(long)]
    flat_features: bool,
}

/// Provenance record written before any output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub code_version: String,
    pub started_unix: u64,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

fn write_manifest(dir: &Path, m: &RunManifest) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(RUN_MANIFEST_FILE);
    let text = serde_json::to_string_pretty(m).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

fn manifest(command: &str, config: impl Serialize, seed: Option<u64>, inputs: &[&Path], outputs: &[&Path]) -> RunManifest {
    RunManifest {
        command: command.into(),
        config: serde_json::to_value(config).expect("config serializes"),
        seed,
        code_version: env!("CARGO_PKG_VERSION").into(),
        started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|p| p.display().to_string()).collect(),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema {
        context: path.display().to_string(),
        field: e.to_string().split('`').nth(1).unwrap_or("<document>").to_string(),
        reason: e.to_string(),
    })
}

/// Seed from the environment, if set.
fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenerateFile {
    capture: Option<CaptureConfig>,
    scene: Option<SceneConfig>,
    seed: Option<u64>,
}

#[derive(Serialize)]
struct GenerateResolved<'a> {
    scenes: usize,
    profile: Profile,
    capture: &'a CaptureConfig,
    scene: &'a SceneConfig,
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let profile: Profile = a.profile.parse()?;
    let file: GenerateFile = match &a.config {
        Some(p) => read_json(p)?,
        None => GenerateFile::default(),
    };
    let mut capture = file.capture.unwrap_or_else(|| {
        if a.benchmark {
            CaptureConfig::benchmark(profile)
        } else {
            CaptureConfig::new(profile)
        }
    });
    if let Some(b) = a.bit_depth {
        capture.bit_depth = b;
    }
    let scene = file.scene.unwrap_or_default();
    capture.validate()?;
    scene.validate()?;
    if a.scenes == 0 {
        return Err(Error::Config("--scenes must be at least 1".into()));
    }
    let seed = a.seed.or(file.seed).or(env_seed()?).unwrap_or(0);
    let resolved = GenerateResolved {
        scenes: a.scenes,
        profile,
        capture: &capture,
        scene: &scene,
    };
    write_manifest(&a.out, &manifest("generate", &resolved, Some(seed), &[], &[&a.out]))?;
    let m = generate_dataset(a.scenes, &capture, &scene, profile, &a.out, seed)?;
    println!("wrote {} pairs from {} scenes to {}", m.pairs.len(), a.scenes, a.out.display());
    Ok(())
}

fn cmd_align(a: AlignArgs) -> Result<()> {
    let cfg: AlignConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => AlignConfig::default(),
    };
    let img_a = Image::load_png(&a.ref_a)?;
    let img_b = Image::load_png(&a.ref_b)?;
    let mut sources = Vec::with_capacity(a.apply.len());
    for p in &a.apply {
        let name = p
            .file_name()
            .ok_or_else(|| Error::Config(format!("--apply path {} has no file name", p.display())))?;
        sources.push((Image::load_png(p)?, name.to_owned()));
    }
    let mut inputs: Vec<&Path> = vec![&a.ref_a, &a.ref_b];
    inputs.extend(a.apply.iter().map(PathBuf::as_path));
    write_manifest(&a.out, &manifest("align", &cfg, None, &inputs, &[&a.out]))?;
    let h = align_pair(&img_a, &img_b, &cfg)?;
    let hp = a.out.join("homography.json");
    let text = serde_json::to_string_pretty(&h).expect("homography serializes");
    fs::write(&hp, text + "\n").map_err(|e| Error::io(&hp, e))?;
    for (img, name) in sources {
        warp(&img, &h)?.save_png(&a.out.join(name), 16)?;
    }
    println!("homography written to {}", hp.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let mut cfg: TrainConfig = read_json(p)?;
            // a seed from the file beats the environment; otherwise the environment beats the default
            let raw: serde_json::Value = serde_json::from_str(&text).unwrap_or_default();
            if raw.get("seed").is_none() {
                if let Some(s) = env_seed()? {
                    cfg.seed = s;
                }
            }
            cfg
        }
        None => {
            let seed = env_seed()?.unwrap_or(0);
            if a.benchmark {
                TrainConfig::benchmark(Variant::Ours, seed)
            } else {
                TrainConfig {
                    seed,
                    ..TrainConfig::default()
                }
            }
        }
    };
    if let Some(v) = &a.variant {
        cfg.variant = v.parse::<Variant>()?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate()?;
    let data = load_dataset(&a.data)?;
    write_manifest(&a.out, &manifest("train", &cfg, Some(cfg.seed), &[&a.data], &[&a.out]))?;
    let out = train_run(&cfg, &data, &a.out)?;
    println!("{} steps; checkpoint {}", out.steps, out.checkpoint.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg: EvalConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => EvalConfig::default(),
    };
    cfg.splits.validate()?;
    let mut ck = load_checkpoint(&a.checkpoint)?;
    let data = load_dataset(&a.data)?;
    let dir = match a.report.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let table_path = a.report.with_extension("txt");
    write_manifest(
        &dir,
        &manifest("eval", &cfg, None, &[&a.checkpoint, &a.data], &[&a.report, &table_path]),
    )?;
    let report = evaluate(&mut ck, &data, &cfg)?;
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    fs::write(&a.report, text + "\n").map_err(|e| Error::io(&a.report, e))?;
    let name = ck.meta.get("variant").and_then(|v| v.as_str()).unwrap_or("model").to_string();
    let table = render_table(&[(&name, &report)]);
    fs::write(&table_path, &table).map_err(|e| Error::io(&table_path, e))?;
    print!("{table}");
    Ok(())
}

fn parse_named(spec: &str) -> Result<(String, PathBuf)> {
    match spec.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_string(), PathBuf::from(p))),
        _ => Err(Error::Config(format!("--checkpoints expects NAME=PATH, got `{spec}`"))),
    }
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let aggregation = match a.aggregation.as_str() {
        "max" => HausdorffAggregation::Max,
        "mean" => HausdorffAggregation::Mean,
        other => return Err(Error::Config(format!("--aggregation must be max or mean, got `{other}`"))),
    };
    let cfg = GapConfig {
        aggregation,
        feature_representation: if a.flat_features {
            Representation::FeatureFlat
        } else {
            Representation::Feature
        },
        ..GapConfig::default()
    };
    let named = a.checkpoints.iter().map(|s| parse_named(s)).collect::<Result<Vec<_>>>()?;
    let mut cks: Vec<(String, Checkpoint)> = Vec::with_capacity(named.len());
    for (n, p) in &named {
        if cks.iter().any(|(m, _)| m == n) {
            return Err(Error::Config(format!("checkpoint name `{n}` given twice")));
        }
        cks.push((n.clone(), load_checkpoint(p)?));
    }
    let data = load_dataset(&a.data)?;
    let mut inputs: Vec<&Path> = named.iter().map(|(_, p)| p.as_path()).collect();
    inputs.push(&a.data);
    write_manifest(&a.out, &manifest("analyze", &cfg, None, &inputs, &[&a.out]))?;
    let report = gap_report(&mut cks, &data, &cfg)?;
    write_gap_report(&report, &a.out)?;
    println!("gap report written to {}", a.out.display());
    Ok(())
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return if code == 0 { exit::OK } else { exit::USAGE };
        }
    };
    let result = match cli.command {
        Command::Generate(a) => cmd_generate(a),
        Command::Align(a) => cmd_align(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
    };
    match result {
        Ok(()) => exit::OK,
        Err(e) => {
            let code = exit_code(&e);
            eprintln!("error ({}): {e}", category(code));
            code
        }
    }
}
