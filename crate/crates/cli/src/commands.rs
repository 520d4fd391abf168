//! Subcommands. Each `cmd_*` returns a report value so it can be driven
//! in-process; `run` prints the reports the way the binary does.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use omlc_core::bitstream::{self, Bpp};
use omlc_core::checkpoint;
use omlc_core::codec::train_base;
use omlc_core::data::texture_corpus;
use omlc_core::meta::{meta_train_model, MetaReport};
use omlc_core::metrics::{msssim, msssim_db, psnr, read_rd_report, rd_report};
use omlc_core::{
    decode_image, encode_image, CodecModel, EncodeOptions, EncodeOutput, GradientMode, ImageTensor, Metric, PatchStats,
    RdEval, RdPoint,
};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::image_io::{read_dataset, read_image, write_image, EXTENSIONS};

pub const CONTAINER_EXT: &str = "omlc";

#[derive(Debug, Parser)]
#[command(name = "omlc", version, about = "Variable-rate learned image codec with online tradeoff adaptation")]
pub struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train encoder, decoder and entropy model for one tradeoff.
    TrainBase(TrainBaseArgs),
    /// Meta-train the conditional decoder over a grid of base models.
    MetaTrain(MetaTrainArgs),
    /// Compress an image, adapting each patch's tradeoffs online.
    Encode(EncodeArgs),
    /// Reconstruct an image from a container.
    Decode(DecodeArgs),
    /// Score (original, reconstruction, container) triples in a directory.
    Eval(EvalArgs),
    /// Aggregate a directory of triples into an RD curve per setting.
    RdReport(RdReportArgs),
    /// Write a synthetic texture corpus.
    MakeCorpus(MakeCorpusArgs),
    /// Print the effective run configuration as JSON.
    PrintConfig(PrintConfigArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MetricArg {
    Psnr,
    Mse,
    Msssim,
}

impl From<MetricArg> for Metric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Psnr | MetricArg::Mse => Metric::Mse,
            MetricArg::Msssim => Metric::Msssim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GradModeArg {
    Autodiff,
    Fd,
}

impl From<GradModeArg> for GradientMode {
    fn from(m: GradModeArg) -> Self {
        match m {
            GradModeArg::Autodiff => GradientMode::Autodiff,
            GradModeArg::Fd => GradientMode::FiniteDifference,
        }
    }
}

#[derive(Clone, Debug, Default, Args)]
pub struct TrainBaseArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lambda: f64,
    /// Directory of training images.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Checkpoint directory to create.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Clone, Debug, Default, Args)]
pub struct MetaTrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Tradeoff grid, one value per base checkpoint.
    #[arg(long, value_delimiter = ',')]
    pub lambdas: Vec<f64>,
    #[arg(long, num_args = 1.., required = true)]
    pub bases: Vec<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Inner step size; 0 gives plain joint training.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Index into --bases of the checkpoint whose decoder is shared.
    #[arg(long, default_value_t = 0)]
    pub decoder_from: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, Args)]
pub struct EncodeArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub oml_iters: Option<usize>,
    #[arg(long, value_enum)]
    pub metric: Option<MetricArg>,
    #[arg(long)]
    pub patch_size: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub gamma_grid: Option<Vec<f64>>,
    #[arg(long, value_enum)]
    pub grad_mode: Option<GradModeArg>,
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Leave patches cut by the image border at the target tradeoff.
    #[arg(long)]
    pub no_adapt_boundary: bool,
    /// Also write the reconstruction the decoder will produce.
    #[arg(long)]
    pub recon: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl EncodeArgs {
    pub fn new(input: impl Into<PathBuf>, model: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            input: input.into(),
            config: None,
            model: Some(model.into()),
            lambda: None,
            oml_iters: None,
            metric: None,
            patch_size: None,
            gamma_grid: None,
            grad_mode: None,
            jobs: None,
            no_adapt_boundary: false,
            recon: None,
            out: out.into(),
            seed: None,
        }
    }
}

#[derive(Clone, Debug, Args)]
pub struct DecodeArgs {
    pub input: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Clone, Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub dir: PathBuf,
    /// CSV destination; defaults to `<dir>/eval.csv`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Args)]
pub struct RdReportArgs {
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args)]
pub struct MakeCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub count: usize,
    #[arg(long, default_value_t = 96)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Debug, Args)]
pub struct PrintConfigArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if seed.is_some() {
        cfg.seed = seed;
        cfg.apply_seed();
    }
    Ok(cfg)
}

fn required(flag: Option<&PathBuf>, fallback: Option<&PathBuf>, name: &str) -> CliResult<PathBuf> {
    flag.or(fallback)
        .cloned()
        .ok_or_else(|| CliError::usage(format!("--{name} is required (or set paths.{name} in the config)")))
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainBaseReport {
    pub out: PathBuf,
    pub lambda: f64,
    pub steps: usize,
    pub checksum: u32,
    pub initial_holdout: RdEval,
    pub final_holdout: RdEval,
}

pub fn cmd_train_base(args: &TrainBaseArgs) -> CliResult<TrainBaseReport> {
    let mut cfg = load_config(args.config.as_deref(), args.seed)?;
    let data = required(args.data.as_ref(), cfg.paths.data.as_ref(), "data")?;
    let out = required(args.out.as_ref(), cfg.paths.out.as_ref(), "out")?;
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    let dims = cfg.model.dims()?;
    let dataset = read_dataset(&data)?;
    info!("training base at lambda {} on {} images", args.lambda, dataset.len());
    let (base, report) = train_base(&dataset, args.lambda, dims, &cfg.train)?;
    let model = CodecModel::from_base(base, args.lambda)?;
    checkpoint::save(&model, &out)?;
    Ok(TrainBaseReport {
        out,
        lambda: args.lambda,
        steps: cfg.train.steps,
        checksum: model.checksum(),
        initial_holdout: report.initial_holdout,
        final_holdout: report.final_holdout,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct MetaTrainReport {
    pub out: PathBuf,
    pub lambdas: Vec<f64>,
    pub alpha: f64,
    pub iterations: usize,
    pub checksum: u32,
    pub initial_holdout: Vec<RdEval>,
    pub final_holdout: Vec<RdEval>,
}

pub fn cmd_meta_train(args: &MetaTrainArgs) -> CliResult<MetaTrainReport> {
    let mut cfg = load_config(args.config.as_deref(), args.seed)?;
    let data = required(args.data.as_ref(), cfg.paths.data.as_ref(), "data")?;
    let out = required(args.out.as_ref(), cfg.paths.out.as_ref(), "out")?;
    let lambdas = if args.lambdas.is_empty() { cfg.lambdas.clone() } else { args.lambdas.clone() };
    if lambdas.len() != args.bases.len() {
        return Err(CliError::usage(format!(
            "{} base checkpoints for {} tradeoffs",
            args.bases.len(),
            lambdas.len()
        )));
    }
    if args.decoder_from >= args.bases.len() {
        return Err(CliError::usage("--decoder-from is out of range"));
    }
    if let Some(a) = args.alpha {
        cfg.meta.alpha = a;
    }
    if let Some(n) = args.iterations {
        cfg.meta.outer_iterations = n;
    }
    let mut bases = Vec::with_capacity(lambdas.len());
    for (dir, &lambda) in args.bases.iter().zip(&lambdas) {
        let m = checkpoint::load(dir)?;
        if m.qualities.len() != 1 {
            return Err(CliError::usage(format!("{} is not a single-tradeoff base checkpoint", dir.display())));
        }
        let trained = m.qualities[0].lambda;
        if (trained - lambda).abs() > 1e-9 * lambda.abs() {
            warn!("{} was trained at {trained}, used as {lambda}", dir.display());
        }
        bases.push((lambda, m.base(0)?));
    }
    let mut model = CodecModel::from_bases(bases, args.decoder_from)?;
    let dataset = read_dataset(&data)?;
    info!(
        "meta-training over {} tradeoffs, alpha {}, {} iterations",
        lambdas.len(),
        cfg.meta.alpha,
        cfg.meta.outer_iterations
    );
    let report: MetaReport = meta_train_model(&mut model, &dataset, &cfg.meta)?;
    checkpoint::save(&model, &out)?;
    Ok(MetaTrainReport {
        out,
        lambdas: model.lambdas(),
        alpha: cfg.meta.alpha,
        iterations: cfg.meta.outer_iterations,
        checksum: model.checksum(),
        initial_holdout: report.initial_holdout,
        final_holdout: report.final_holdout,
    })
}

/// The stats line of `encode`, also written next to the container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodeStats {
    pub input: PathBuf,
    pub out: PathBuf,
    pub width: usize,
    pub height: usize,
    pub lambda: f64,
    pub quality_index: usize,
    pub oml_iters: usize,
    pub metric: Metric,
    pub bytes: usize,
    pub bpp: f64,
    pub payload_bpp: f64,
    pub side_info_bpp: f64,
    pub header_bpp: f64,
    /// Pixel-weighted mean over patches.
    pub initial_distortion: f64,
    pub adapted_distortion: f64,
    pub psnr: f64,
    pub patch_lambdas: Vec<Vec<f64>>,
    pub wall_time: f64,
}

pub struct EncodeReport {
    pub stats: EncodeStats,
    pub patches: Vec<PatchStats>,
    pub output: EncodeOutput,
}

pub fn sidecar_path(container: &Path) -> PathBuf {
    let mut s = container.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn weighted_mean(patches: &[PatchStats], f: impl Fn(&PatchStats) -> f64) -> f64 {
    let px: usize = patches.iter().map(|p| p.height * p.width).sum();
    patches.iter().map(|p| f(p) * (p.height * p.width) as f64).sum::<f64>() / px as f64
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn cmd_encode(args: &EncodeArgs) -> CliResult<EncodeReport> {
    let cfg = load_config(args.config.as_deref(), args.seed)?;
    let model_dir = required(args.model.as_ref(), cfg.paths.model.as_ref(), "model")?;
    let mut opts = EncodeOptions {
        lambda: args.lambda.unwrap_or(EncodeOptions::default().lambda),
        oml: cfg.oml.clone(),
        patch_size: args.patch_size.unwrap_or(cfg.encode.patch_size),
        adapt_boundary: cfg.encode.adapt_boundary && !args.no_adapt_boundary,
        jobs: args.jobs.unwrap_or(cfg.encode.jobs),
    };
    if let Some(n) = args.oml_iters {
        opts.oml.iterations = n;
    }
    if let Some(m) = args.metric {
        opts.oml.metric = m.into();
    }
    if let Some(g) = &args.gamma_grid {
        opts.oml.gamma_grid = g.clone();
    }
    if let Some(g) = args.grad_mode {
        opts.oml.gradient_mode = g.into();
    }
    if opts.jobs == 0 {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    let model = checkpoint::load(&model_dir)?;
    let x = read_image(&args.input)?;
    let start = Instant::now();
    let output = encode_image(&model, &x, &opts)?;
    let wall_time = start.elapsed().as_secs_f64();
    write_file(&args.out, &output.bytes)?;
    if let Some(r) = &args.recon {
        write_image(r, &output.reconstruction)?;
    }
    let b: Bpp = bitstream::bpp(&output.bytes, x.width(), x.height())?;
    let stats = EncodeStats {
        input: args.input.clone(),
        out: args.out.clone(),
        width: x.width(),
        height: x.height(),
        lambda: opts.lambda,
        quality_index: output.quality_index,
        oml_iters: opts.oml.iterations,
        metric: opts.oml.metric,
        bytes: output.bytes.len(),
        bpp: b.total,
        payload_bpp: b.payload,
        side_info_bpp: b.side_info,
        header_bpp: b.header,
        initial_distortion: weighted_mean(&output.patches, |p| p.initial_distortion),
        adapted_distortion: weighted_mean(&output.patches, |p| p.best_distortion),
        psnr: psnr(&x, &output.reconstruction)?,
        patch_lambdas: output.patches.iter().map(|p| p.lambdas.clone()).collect(),
        wall_time,
    };
    let side = sidecar_path(&args.out);
    let json = serde_json::to_vec_pretty(&stats).map_err(|e| CliError::Core(e.into()))?;
    write_file(&side, &json)?;
    Ok(EncodeReport {
        patches: output.patches.clone(),
        stats,
        output,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DecodeSummary {
    pub out: PathBuf,
    pub width: usize,
    pub height: usize,
}

pub struct DecodeReport {
    pub summary: DecodeSummary,
    pub image: ImageTensor,
}

pub fn cmd_decode(args: &DecodeArgs) -> CliResult<DecodeReport> {
    if args.jobs == 0 {
        return Err(CliError::usage("--jobs must be at least 1"));
    }
    let model = checkpoint::load(&args.model)?;
    let bytes = fs::read(&args.input).map_err(|e| CliError::io(&args.input, e))?;
    let image = decode_image(&model, &bytes, args.jobs)?;
    write_image(&args.out, &image)?;
    Ok(DecodeReport {
        summary: DecodeSummary {
            out: args.out.clone(),
            width: image.width(),
            height: image.height(),
        },
        image,
    })
}

fn with_image_ext(dir: &Path, stem: &str) -> Option<PathBuf> {
    EXTENSIONS.iter().map(|e| dir.join(format!("{stem}.{e}"))).find(|p| p.is_file())
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalItem {
    pub name: String,
    pub point: RdPoint,
}

/// One RD point per `<stem>.omlc` in `dir`, next to `<stem>.png|ppm` and
/// `<stem>.recon.png|ppm`. `<stem>.omlc.json` from `encode` supplies the
/// tradeoff, iteration count and timing; without it the first stored
/// tradeoff is used.
pub fn evaluate_dir(dir: &Path) -> CliResult<Vec<EvalItem>> {
    let mut containers = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let p = entry.map_err(|e| CliError::io(dir, e))?.path();
        if p.is_file() && p.extension().and_then(|e| e.to_str()) == Some(CONTAINER_EXT) {
            containers.push(p);
        }
    }
    containers.sort();
    if containers.is_empty() {
        return Err(CliError::usage(format!("{}: no .{CONTAINER_EXT} files", dir.display())));
    }
    let mut items = Vec::with_capacity(containers.len());
    for c in containers {
        let stem = c.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let orig = with_image_ext(dir, &stem)
            .ok_or_else(|| CliError::usage(format!("{}: no original image for {stem}", dir.display())))?;
        let recon = with_image_ext(dir, &format!("{stem}.recon"))
            .ok_or_else(|| CliError::usage(format!("{}: no reconstruction for {stem}", dir.display())))?;
        let x = read_image(&orig)?;
        let y = read_image(&recon)?;
        let bytes = fs::read(&c).map_err(|e| CliError::io(&c, e))?;
        let bpp = bitstream::bpp(&bytes, x.width(), x.height())?.total;
        let side = sidecar_path(&c);
        let (lambda, oml_iters, encode_time) = if side.is_file() {
            let text = fs::read_to_string(&side).map_err(|e| CliError::io(&side, e))?;
            let s: EncodeStats =
                serde_json::from_str(&text).map_err(|source| CliError::Config { path: side.clone(), source })?;
            if (s.bpp - bpp).abs() > 1e-9 {
                return Err(CliError::Mismatch(format!(
                    "{}: stats bpp {} disagrees with container bpp {bpp}",
                    side.display(),
                    s.bpp
                )));
            }
            (s.lambda, s.oml_iters, s.wall_time)
        } else {
            let parsed = bitstream::read_container(&bytes, None).map_err(omlc_core::Error::from)?;
            (parsed.patches[0].lambdas()[0], 0, 0.0)
        };
        let ms = msssim(&x, &y)?;
        items.push(EvalItem {
            name: stem,
            point: RdPoint {
                lambda,
                bpp,
                psnr: psnr(&x, &y)?,
                msssim: ms,
                msssim_db: msssim_db(ms),
                oml_iters,
                encode_time,
            },
        });
    }
    Ok(items)
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<Vec<EvalItem>> {
    let items = evaluate_dir(&args.dir)?;
    let out = args.out.clone().unwrap_or_else(|| args.dir.join("eval.csv"));
    let points: Vec<RdPoint> = items.iter().map(|i| i.point.clone()).collect();
    rd_report(&points, &out)?;
    Ok(items)
}

/// Means per (tradeoff, iteration count), sorted by bpp.
pub fn group_points(points: &[RdPoint]) -> Vec<RdPoint> {
    let mut groups: BTreeMap<(u64, usize), Vec<&RdPoint>> = BTreeMap::new();
    for p in points {
        groups.entry((p.lambda.to_bits(), p.oml_iters)).or_default().push(p);
    }
    let mut out: Vec<RdPoint> = groups
        .into_values()
        .map(|g| {
            let n = g.len() as f64;
            let mean = |f: fn(&RdPoint) -> f64| g.iter().map(|p| f(p)).sum::<f64>() / n;
            let ms = mean(|p| p.msssim);
            RdPoint {
                lambda: g[0].lambda,
                bpp: mean(|p| p.bpp),
                psnr: mean(|p| p.psnr),
                msssim: ms,
                msssim_db: msssim_db(ms),
                oml_iters: g[0].oml_iters,
                encode_time: mean(|p| p.encode_time),
            }
        })
        .collect();
    out.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    out
}

pub fn cmd_rd_report(args: &RdReportArgs) -> CliResult<Vec<RdPoint>> {
    let items = evaluate_dir(&args.dir)?;
    let points: Vec<RdPoint> = items.into_iter().map(|i| i.point).collect();
    let grouped = group_points(&points);
    rd_report(&grouped, &args.out)?;
    Ok(read_rd_report(&args.out)?)
}

pub fn cmd_make_corpus(args: &MakeCorpusArgs) -> CliResult<Vec<PathBuf>> {
    if args.count == 0 || args.size == 0 {
        return Err(CliError::usage("--count and --size must be positive"));
    }
    fs::create_dir_all(&args.out).map_err(|e| CliError::io(&args.out, e))?;
    let mut paths = Vec::with_capacity(args.count);
    for (i, img) in texture_corpus(args.count, args.size, args.size, args.seed).iter().enumerate() {
        let p = args.out.join(format!("tex_{i:04}.png"));
        write_image(&p, img)?;
        paths.push(p);
    }
    Ok(paths)
}

pub fn cmd_print_config(args: &PrintConfigArgs) -> CliResult<RunConfig> {
    RunConfig::load(args.config.as_deref())
}

fn print_json<T: Serialize>(v: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string(v).map_err(|e| CliError::Core(e.into()))?);
    Ok(())
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::TrainBase(a) => print_json(&cmd_train_base(a)?),
        Command::MetaTrain(a) => print_json(&cmd_meta_train(a)?),
        Command::Encode(a) => print_json(&cmd_encode(a)?.stats),
        Command::Decode(a) => print_json(&cmd_decode(a)?.summary),
        Command::Eval(a) => {
            for item in cmd_eval(a)? {
                print_json(&item)?;
            }
            Ok(())
        }
        Command::RdReport(a) => {
            let points = cmd_rd_report(a)?;
            info!("{} RD points written to {}", points.len(), a.out.display());
            Ok(())
        }
        Command::MakeCorpus(a) => {
            let n = cmd_make_corpus(a)?.len();
            info!("{n} images written to {}", a.out.display());
            Ok(())
        }
        Command::PrintConfig(a) => {
            let cfg = cmd_print_config(a)?;
            println!("{}", serde_json::to_string_pretty(&cfg).map_err(|e| CliError::Core(e.into()))?);
            Ok(())
        }
    }
}
