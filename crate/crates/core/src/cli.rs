//! The `otrecon` command line: argument parsing, config resolution and
//! dispatch. Configs come from an optional JSON file with flag overrides on
//! top; the resolved config is always written next to the outputs.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{attribute, dump_slices, evaluate, write_attribution, MetricReport};
use crate::io::{read_json, write_json};
use crate::models::tensor_volumes;
use crate::neural::{AdamWConfig, Checkpoint};
use crate::projector::{generate_dataset, load_dataset, project, ViewGeometry};
use crate::sinkhorn::{sinkhorn_divergence_with_grads, EmpiricalMeasure, SinkhornConfig, SinkhornResult};
use crate::training::{prepare_inputs, train, InputSpec, Networks, TrainConfig, TrainOptions};
use crate::volgrid::{read_volume, write_projection};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_CONTRACT: i32 = 5;

/// Exit code for each error class.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::InvalidValue(_) => EXIT_USAGE,
        Error::Io { .. } | Error::Json { .. } => EXIT_IO,
        Error::NumericInput(_) => EXIT_NUMERIC,
        Error::Contract(_)
        | Error::InvalidDimension(_)
        | Error::EmptyInput(_)
        | Error::NotARepetition { .. }
        | Error::InvalidPhantom(_) => EXIT_CONTRACT,
    }
}

#[derive(Parser, Debug)]
#[command(name = "otrecon", version, about = "2D to 3D volume translation with Sinkhorn-divergence neural optimal transport")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize a phantom dataset with DRR views and a manifest.
    Generate(GenerateArgs),
    /// Project one volume to a DRR.
    Project(ProjectArgs),
    /// Train the mapping network against the potential network.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Input-gradient attribution maps for one sample.
    Attribute(AttributeArgs),
    /// Sinkhorn divergence between two point sets (debug tool).
    Sinkhorn(SinkhornArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Output directory; receives manifest.json, the samples and config.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n_samples: Option<usize>,
    /// Grid extents: one value for a cube or `H,W,D`.
    #[arg(long)]
    pub grid: Option<String>,
    /// Comma-separated `azimuth:elevation` pairs in degrees, e.g. `0:0,90:0`.
    #[arg(long)]
    pub views: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ProjectArgs {
    /// Volume file (`.json` header or `.raw`, or their common stem).
    #[arg(long)]
    pub volume: PathBuf,
    /// Output stem; `<out>.raw` and `<out>.json` are written.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    pub azimuth: f64,
    #[arg(long, default_value_t = 0.0)]
    pub elevation: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset manifest (or its directory).
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Held-out manifest used to keep checkpoints/best.ckpt.
    #[arg(long)]
    pub validation: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub inner_k: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Learning rate of every optimizer.
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated view indices fed to the generator.
    #[arg(long)]
    pub views: Option<String>,
    /// none, transpose_perpendicular or rotate3d.
    #[arg(long)]
    pub alignment: Option<String>,
    /// views, noise_fixed or noise_resampled.
    #[arg(long)]
    pub input_mode: Option<String>,
    /// unet or baseline_ae.
    #[arg(long)]
    pub generator: Option<String>,
    #[arg(long)]
    pub base_width: Option<usize>,
    #[arg(long)]
    pub checkpoint_every: Option<usize>,
    #[arg(long)]
    pub log_every: Option<usize>,
    #[arg(long)]
    pub cotrain_f: bool,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report file (JSON).
    #[arg(long)]
    pub out: PathBuf,
    /// View indices; defaults to those recorded in the checkpoint.
    #[arg(long)]
    pub views: Option<String>,
    /// Alignment; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    pub alignment: Option<String>,
    /// Also dump PGM depth slices of every reconstruction into this directory.
    #[arg(long)]
    pub slices: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AttributeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Sample index in the manifest.
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    /// Output directory for the maps and norms.json.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub views: Option<String>,
    #[arg(long)]
    pub alignment: Option<String>,
}

#[derive(Args, Debug)]
pub struct SinkhornArgs {
    /// JSON point set `{"points": [[..], ..], "weights": [..]}`; weights optional.
    #[arg(long)]
    pub a: PathBuf,
    #[arg(long)]
    pub b: PathBuf,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Result file; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Resolved `generate` settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub n_samples: usize,
    pub grid: [usize; 3],
    pub views: Vec<ViewGeometry>,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            n_samples: 32,
            grid: [16, 16, 16],
            views: vec![ViewGeometry::frontal(), ViewGeometry::lateral()],
            seed: 0,
        }
    }
}

/// Everything needed to reproduce a training run; written as `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub version: String,
    pub data: PathBuf,
    pub validation: Option<PathBuf>,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub version: String,
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub input: InputSpec,
    pub step: u64,
}

#[derive(Clone, Debug, Serialize)]
struct EvalOutput<'a> {
    config: &'a EvalRecord,
    /// `psnr` is `null` when it is `+∞` (identical volumes).
    report: &'a MetricReport,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PointSet {
    points: Vec<Vec<f64>>,
    #[serde(default)]
    weights: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct SinkhornOutput {
    config: SinkhornConfig,
    result: SinkhornResult,
    grad_a: Vec<Vec<f64>>,
    grad_b: Vec<Vec<f64>>,
}

fn version() -> String {
    env!("CARGO_PKG_VERSION").to_string()
}

/// Parses a snake_case enum name the same way config files spell it.
fn parse_enum<T: DeserializeOwned>(s: &str, what: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Error::Usage(format!("unknown {what} '{s}'")))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim().parse().map_err(|_| Error::Usage(format!("bad {what} '{p}' in '{s}'"))))
        .collect()
}

fn parse_grid(s: &str) -> Result<[usize; 3]> {
    match parse_list::<usize>(s, "grid extent")?.as_slice() {
        [n] => Ok([*n; 3]),
        [h, w, d] => Ok([*h, *w, *d]),
        _ => Err(Error::Usage(format!("grid must be N or H,W,D, got '{s}'"))),
    }
}

fn parse_views(s: &str) -> Result<Vec<ViewGeometry>> {
    s.split(',')
        .map(|p| {
            let (az, el) = p.split_once(':').unwrap_or((p, "0"));
            let num = |x: &str| x.trim().parse::<f64>().map_err(|_| Error::Usage(format!("bad view '{p}'")));
            ViewGeometry::new(num(az)?, num(el)?)
        })
        .collect()
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => read_json(p),
        None => Ok(T::default()),
    }
}

pub fn resolve_generate(args: &GenerateArgs) -> Result<GenerateConfig> {
    let mut cfg: GenerateConfig = load_config(args.config.as_deref())?;
    if let Some(n) = args.n_samples {
        cfg.n_samples = n;
    }
    if let Some(g) = &args.grid {
        cfg.grid = parse_grid(g)?;
    }
    if let Some(v) = &args.views {
        cfg.views = parse_views(v)?;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    for v in &cfg.views {
        v.validate()?;
    }
    Ok(cfg)
}

fn apply_input_flags(spec: &mut InputSpec, views: Option<&str>, alignment: Option<&str>) -> Result<()> {
    if let Some(v) = views {
        spec.view_indices = parse_list(v, "view index")?;
    }
    if let Some(a) = alignment {
        spec.alignment = a.parse()?;
    }
    Ok(())
}

pub fn resolve_train(args: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = load_config(args.config.as_deref())?;
    if let Some(v) = args.steps {
        cfg.total_steps = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.inner_k {
        cfg.inner_k = v;
    }
    if let Some(v) = args.lambda {
        cfg.lambda = v;
    }
    if let Some(lr) = args.lr {
        for opt in [&mut cfg.optimizer_g, &mut cfg.optimizer_d, &mut cfg.optimizer_f] {
            *opt = AdamWConfig { lr, ..*opt };
        }
    }
    if let Some(v) = args.epsilon {
        cfg.sinkhorn.epsilon = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    apply_input_flags(&mut cfg.input, args.views.as_deref(), args.alignment.as_deref())?;
    if let Some(m) = &args.input_mode {
        cfg.input.mode = parse_enum(m, "input mode")?;
    }
    if let Some(g) = &args.generator {
        cfg.model.generator = parse_enum(g, "generator")?;
    }
    if let Some(v) = args.base_width {
        cfg.model.base_width = v;
    }
    if let Some(v) = args.checkpoint_every {
        cfg.checkpoint_every = v;
    }
    if let Some(v) = args.log_every {
        cfg.log_every = v;
    }
    if args.cotrain_f {
        cfg.cotrain_f = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_generate(args: &GenerateArgs) -> Result<()> {
    let cfg = resolve_generate(args)?;
    let [h, w, d] = cfg.grid;
    let manifest = generate_dataset(cfg.n_samples, (h, w, d), &cfg.views, cfg.seed, &args.out)?;
    write_json(&args.out.join("config.json"), &cfg)?;
    eprintln!("wrote {} samples to {}", manifest.samples.len(), args.out.display());
    Ok(())
}

fn run_project(args: &ProjectArgs) -> Result<()> {
    let volume = read_volume(&args.volume)?;
    let view = project(&volume, &ViewGeometry::new(args.azimuth, args.elevation)?)?;
    write_projection(&args.out, &view)
}

fn run_train(args: &TrainArgs) -> Result<()> {
    let cfg = resolve_train(args)?;
    let data = load_dataset(&args.data)?;
    let validation = args.validation.as_deref().map(load_dataset).transpose()?;
    write_json(
        &args.out.join("run.json"),
        &RunRecord {
            version: version(),
            data: args.data.clone(),
            validation: args.validation.clone(),
            config: cfg.clone(),
        },
    )?;
    let state = train(
        &data,
        &cfg,
        TrainOptions {
            out_dir: Some(&args.out),
            validation: validation.as_ref(),
        },
        &mut (),
    )?;
    if let Some(last) = state.history.last() {
        eprintln!(
            "trained {} steps: L_g {:.5} L_d {:.5} S {:.5}",
            state.step, last.l_g, last.l_d, last.sinkhorn_term
        );
    }
    Ok(())
}

fn load_networks(path: &Path) -> Result<(Networks, InputSpec, u64)> {
    let ck = Checkpoint::load(path)?;
    let (nets, spec) = Networks::from_checkpoint(&ck)?;
    Ok((nets, spec, ck.step))
}

fn run_evaluate(args: &EvaluateArgs) -> Result<()> {
    let (nets, mut spec, step) = load_networks(&args.ckpt)?;
    apply_input_flags(&mut spec, args.views.as_deref(), args.alignment.as_deref())?;
    let data = load_dataset(&args.data)?;
    let report = evaluate(&nets.g, &data, &spec)?;
    let record = EvalRecord {
        version: version(),
        checkpoint: args.ckpt.clone(),
        data: args.data.clone(),
        input: spec.clone(),
        step,
    };
    write_json(
        &args.out,
        &EvalOutput {
            config: &record,
            report: &report,
        },
    )?;
    if let Some(dir) = &args.slices {
        for i in 0..data.len() {
            let input = prepare_inputs(&data, &[i], &spec, None, 0)?;
            let recon = tensor_volumes(&nets.g.reconstruct(&input)?)?.remove(0);
            dump_slices(&recon, dir, &format!("sample_{i:04}_recon"))?;
            dump_slices(&data.samples[i].volume, dir, &format!("sample_{i:04}_truth"))?;
        }
    }
    println!(
        "ssim {:.4} psnr {:.3} mse {:.6} mae {:.6} over {} samples",
        report.ssim, report.psnr, report.mse, report.mae, report.n_samples
    );
    Ok(())
}

#[derive(Serialize)]
struct AttributionRecord {
    version: String,
    checkpoint: PathBuf,
    sample: usize,
    input: InputSpec,
    norms: Vec<f64>,
}

fn run_attribute(args: &AttributeArgs) -> Result<()> {
    let (nets, mut spec, _) = load_networks(&args.ckpt)?;
    apply_input_flags(&mut spec, args.views.as_deref(), args.alignment.as_deref())?;
    let data = load_dataset(&args.data)?;
    if args.sample >= data.len() {
        return Err(Error::Usage(format!("sample {} out of range (dataset has {})", args.sample, data.len())));
    }
    let map = attribute(&nets.g, &data, args.sample, &spec)?;
    write_attribution(&map, &args.out)?;
    write_json(
        &args.out.join("norms.json"),
        &AttributionRecord {
            version: version(),
            checkpoint: args.ckpt.clone(),
            sample: args.sample,
            input: spec,
            norms: map.norms.clone(),
        },
    )
}

fn load_points(path: &Path) -> Result<EmpiricalMeasure> {
    let set: PointSet = read_json(path)?;
    match set.weights {
        Some(w) => EmpiricalMeasure::with_weights(&set.points, w),
        None => EmpiricalMeasure::uniform(&set.points),
    }
}

fn run_sinkhorn(args: &SinkhornArgs) -> Result<()> {
    let a = load_points(&args.a)?;
    let b = load_points(&args.b)?;
    let mut cfg = SinkhornConfig::default();
    if let Some(e) = args.epsilon {
        cfg.epsilon = e;
    }
    if let Some(n) = args.max_iters {
        cfg.max_iters = n;
    }
    if let Some(t) = args.tolerance {
        cfg.tolerance = t;
    }
    cfg.validate()?;
    let (result, ga, gb) = sinkhorn_divergence_with_grads(&a, &b, &cfg)?;
    let rows = |g: Vec<f64>, dim: usize| g.chunks(dim).map(<[f64]>::to_vec).collect();
    let out = SinkhornOutput {
        config: cfg,
        result,
        grad_a: rows(ga, a.dim()),
        grad_b: rows(gb, b.dim()),
    };
    match &args.out {
        Some(p) => write_json(p, &out),
        None => {
            let text = serde_json::to_string_pretty(&out).map_err(|e| Error::json("sinkhorn result", e))?;
            println!("{text}");
            Ok(())
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Generate(a) => run_generate(a),
        Command::Project(a) => run_project(a),
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Attribute(a) => run_attribute(a),
        Command::Sinkhorn(a) => run_sinkhorn(a),
    }
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
