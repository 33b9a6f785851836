//! Command-line interface: cube generation, noise synthesis, training,
//! inference, evaluation, and chart emission.
//!
//! Stdout carries machine-readable output only (the resolved configuration
//! and the evaluation summary line); progress and diagnostics go to stderr.
//! Exit codes: 0 success, 2 bad flags or configuration, 3 I/O failure,
//! 4 unusable data or shapes, 5 training divergence.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cube::{smooth_random_cube, HSICube};
use crate::error::{Error, Result};
use crate::metrics::MetricsTable;
use crate::model::{load_checkpoint, NetworkConfig};
use crate::noise::{synthesize_case, NoiseCase, NoiseSpec};
use crate::plot::{loss_overlay_chart, metrics_charts, parse_train_log};
use crate::train::{
    init_state, load_state, run_schedule, save_state, PatchDims, StageKind, TrainConfig,
    LR_DECAY_DEFAULT, LR_INIT_DEFAULT,
};

/// Hyperspectral image denoising toolkit.
#[derive(Parser, Debug)]
#[command(name = "mafnet", version, about)]
pub struct Cli {
    /// Master seed for every stochastic component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Configuration file of `key=value` lines, applied before flags.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Print the resolved configuration to stdout and exit.
    #[arg(long, global = true)]
    pub print_config: bool,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a smooth synthetic reflectance cube.
    SynthData(SynthDataArgs),
    /// Corrupt a clean cube with one of the noise protocols.
    Synth(SynthArgs),
    /// Train the denoiser with the staged curriculum.
    Train(TrainArgs),
    /// Denoise a cube with a trained checkpoint.
    Denoise(DenoiseArgs),
    /// Compare an estimate against a reference and report quality metrics.
    Eval(EvalArgs),
    /// Render charts from a metrics table or training logs.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct SynthDataArgs {
    /// Output cube path.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub bands: usize,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Smallest generated value.
    #[arg(long, default_value_t = 0.05)]
    pub lo: f32,
    /// Largest generated value.
    #[arg(long, default_value_t = 0.95)]
    pub hi: f32,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Clean input cube.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Noise case: g30, g50, g70, blind, or 1-5.
    #[arg(long, value_name = "CASE")]
    pub case: String,
    /// Output noisy cube path.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
    /// Noise report path (default: output path with `.noise.txt`).
    #[arg(long, value_name = "FILE")]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Clean training cubes (repeatable).
    #[arg(long, value_name = "FILE", required = true, num_args = 1..)]
    pub data: Vec<PathBuf>,
    /// Output directory for checkpoints and the training log.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
    /// Network variant: S, B, or L.
    #[arg(long)]
    pub variant: Option<String>,
    /// Comma-separated stage subset (default: the full curriculum
    /// sigma30,sigma50,sigma70,blind,complex).
    #[arg(long, value_name = "LIST")]
    pub stages: Option<String>,
    /// Resume from a checkpoint written by a previous run.
    #[arg(long, value_name = "FILE")]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub patch_bands: Option<usize>,
    #[arg(long)]
    pub patch_height: Option<usize>,
    #[arg(long)]
    pub patch_width: Option<usize>,
    #[arg(long)]
    pub patches_per_epoch: Option<usize>,
    /// Override the variant's channel width (advanced).
    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Override the number of coarse fusion stages (advanced).
    #[arg(long)]
    pub coarse_blocks: Option<usize>,
    /// Override the number of fine fusion layers (advanced).
    #[arg(long)]
    pub fine_layers: Option<usize>,
}

#[derive(Args, Debug)]
pub struct DenoiseArgs {
    /// Trained checkpoint.
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Noisy input cube.
    #[arg(long, value_name = "FILE")]
    pub input: PathBuf,
    /// Denoised output path.
    #[arg(long, value_name = "FILE")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Estimated (denoised) cube.
    #[arg(long, value_name = "FILE")]
    pub estimate: PathBuf,
    /// Clean reference cube.
    #[arg(long, value_name = "FILE")]
    pub reference: PathBuf,
    /// Metrics table output path.
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Metrics table to chart (emits *_psnr_per_band.svg and
    /// *_ssim_per_band.svg).
    #[arg(long, value_name = "FILE")]
    pub metrics: Option<PathBuf>,
    /// Training log to overlay (repeatable).
    #[arg(long = "log", value_name = "FILE")]
    pub logs: Vec<PathBuf>,
    /// Directory for metrics charts (default: alongside the table).
    #[arg(long, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    /// Output path of the loss overlay (default: loss_curve.svg).
    #[arg(long, value_name = "FILE")]
    pub out: Option<PathBuf>,
}

// ----------------------------------------------------------------------
// Resolved settings
// ----------------------------------------------------------------------

/// Tunables resolvable from defaults, a configuration file, and flags.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub seed: u64,
    pub variant: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub patch_bands: usize,
    pub patch_height: usize,
    pub patch_width: usize,
    pub patches_per_epoch: usize,
    pub lr_init: f64,
    pub lr_decay: f64,
    pub lambda: f64,
    pub val_fraction: f64,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            seed: 0,
            variant: "S".into(),
            epochs: 5,
            batch_size: 4,
            patch_bands: 8,
            patch_height: 32,
            patch_width: 32,
            patches_per_epoch: 32,
            lr_init: LR_INIT_DEFAULT,
            lr_decay: LR_DECAY_DEFAULT,
            lambda: crate::loss::LAMBDA_DEFAULT,
            val_fraction: 0.1,
        }
    }
}

impl Settings {
    /// Apply `key=value` lines; `#` comments and blank lines are skipped.
    pub fn apply_file(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("config line {} is not key=value: '{line}'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Config(format!("bad {what} '{value}' on line {}", lineno + 1));
            match key {
                "seed" => self.seed = value.parse().map_err(|_| bad("seed"))?,
                "variant" => self.variant = value.to_string(),
                "epochs" => self.epochs = value.parse().map_err(|_| bad("epochs"))?,
                "batch_size" => self.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
                "patch_bands" => self.patch_bands = value.parse().map_err(|_| bad("patch_bands"))?,
                "patch_height" => self.patch_height = value.parse().map_err(|_| bad("patch_height"))?,
                "patch_width" => self.patch_width = value.parse().map_err(|_| bad("patch_width"))?,
                "patches_per_epoch" => {
                    self.patches_per_epoch = value.parse().map_err(|_| bad("patches_per_epoch"))?
                }
                "lr_init" => self.lr_init = value.parse().map_err(|_| bad("lr_init"))?,
                "lr_decay" => self.lr_decay = value.parse().map_err(|_| bad("lr_decay"))?,
                "lambda" => self.lambda = value.parse().map_err(|_| bad("lambda"))?,
                "val_fraction" => {
                    self.val_fraction = value.parse().map_err(|_| bad("val_fraction"))?
                }
                _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
            }
        }
        Ok(())
    }

    /// The `key=value` echo of [`Settings::apply_file`]'s accepted keys.
    pub fn to_text(&self) -> String {
        format!(
            "seed={}\nvariant={}\nepochs={}\nbatch_size={}\npatch_bands={}\n\
             patch_height={}\npatch_width={}\npatches_per_epoch={}\nlr_init={}\n\
             lr_decay={}\nlambda={}\nval_fraction={}\n",
            self.seed,
            self.variant,
            self.epochs,
            self.batch_size,
            self.patch_bands,
            self.patch_height,
            self.patch_width,
            self.patches_per_epoch,
            self.lr_init,
            self.lr_decay,
            self.lambda,
            self.val_fraction
        )
    }
}

// ----------------------------------------------------------------------
// Entry point
// ----------------------------------------------------------------------

/// Parse arguments, run, and return the process exit code.
pub fn run() -> i32 {
    if let Err(e) = check_threads_env() {
        eprintln!("error: {e}");
        return e.exit_code();
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// The compute kernels are single-threaded; any cap (0 means explicit
/// single-threaded deterministic mode) is therefore honored trivially, but
/// the value must still parse as a non-negative integer.
fn check_threads_env() -> Result<()> {
    if let Some(v) = std::env::var_os("MAFNET_THREADS") {
        let s = v.to_string_lossy();
        if s.parse::<usize>().is_err() {
            return Err(Error::Config(format!(
                "MAFNET_THREADS must be a non-negative integer, got '{s}'"
            )));
        }
    }
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn execute(cli: Cli) -> Result<()> {
    let mut settings = Settings::default();
    if let Some(path) = &cli.config {
        settings.apply_file(&read_text(path)?)?;
    }
    if let Some(seed) = cli.seed {
        settings.seed = seed;
    }
    if cli.print_config {
        print!("{}", settings.to_text());
        return Ok(());
    }
    let command = cli
        .command
        .ok_or_else(|| Error::Config("no command given; run with --help".into()))?;
    match command {
        Command::SynthData(args) => cmd_synth_data(&settings, args),
        Command::Synth(args) => cmd_synth(&settings, args),
        Command::Train(args) => cmd_train(&settings, args),
        Command::Denoise(args) => cmd_denoise(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Plot(args) => cmd_plot(args),
    }
}

fn cmd_synth_data(settings: &Settings, args: SynthDataArgs) -> Result<()> {
    let cube = smooth_random_cube(
        args.bands,
        args.height,
        args.width,
        args.lo,
        args.hi,
        settings.seed,
    )?;
    cube.save_hsd(&args.out)?;
    eprintln!(
        "wrote {} ({} bands, {}x{})",
        args.out.display(),
        args.bands,
        args.height,
        args.width
    );
    Ok(())
}

/// Map a case token onto a noise protocol.
fn parse_case(tok: &str) -> Result<NoiseCase> {
    Ok(match tok {
        "g30" => NoiseCase::GaussFixed(30.0),
        "g50" => NoiseCase::GaussFixed(50.0),
        "g70" => NoiseCase::GaussFixed(70.0),
        "blind" => NoiseCase::GaussBlind,
        "1" => NoiseCase::Case1,
        "2" => NoiseCase::Case2,
        "3" => NoiseCase::Case3,
        "4" => NoiseCase::Case4,
        "5" => NoiseCase::Case5,
        _ => {
            return Err(Error::Config(format!(
                "unknown case '{tok}' (expected g30, g50, g70, blind, or 1-5)"
            )))
        }
    })
}

fn cmd_synth(settings: &Settings, args: SynthArgs) -> Result<()> {
    let clean = HSICube::load_hsd(&args.input)?;
    let spec = NoiseSpec::new(parse_case(&args.case)?, settings.seed);
    let (noisy, report) = synthesize_case(&clean, &spec)?;
    noisy.save_hsd(&args.out)?;
    let report_path = args
        .report
        .unwrap_or_else(|| args.out.with_extension("noise.txt"));
    write_text(&report_path, &report.to_text())?;
    eprintln!(
        "wrote {} and {}",
        args.out.display(),
        report_path.display()
    );
    Ok(())
}

fn cmd_train(settings: &Settings, args: TrainArgs) -> Result<()> {
    let mut sources = Vec::new();
    for path in &args.data {
        sources.push(HSICube::load_hsd(path)?);
    }
    let stages: Vec<StageKind> = match &args.stages {
        None => StageKind::SCHEDULE.to_vec(),
        Some(list) => list
            .split(',')
            .map(|s| StageKind::from_name(s.trim()))
            .collect::<Result<_>>()?,
    };
    if stages.is_empty() {
        return Err(Error::Config("no stages requested".into()));
    }

    let patch = PatchDims {
        bands: args.patch_bands.unwrap_or(settings.patch_bands),
        height: args.patch_height.unwrap_or(settings.patch_height),
        width: args.patch_width.unwrap_or(settings.patch_width),
    };
    let train_cfg = TrainConfig {
        epochs_per_stage: args.epochs.unwrap_or(settings.epochs),
        batch_size: args.batch_size.unwrap_or(settings.batch_size),
        patch,
        patches_per_epoch: args.patches_per_epoch.unwrap_or(settings.patches_per_epoch),
        lr_init: settings.lr_init,
        lr_decay: settings.lr_decay,
        lambda: settings.lambda,
        val_fraction: settings.val_fraction,
        seed: settings.seed,
    };

    let mut state = match &args.resume {
        Some(path) => {
            let state = load_state(path)?;
            eprintln!(
                "resuming from {} (stage index {}, {} epochs done)",
                path.display(),
                state.stage_index,
                state.epochs_done
            );
            state
        }
        None => {
            let variant = args.variant.clone().unwrap_or_else(|| settings.variant.clone());
            let mut net_cfg = NetworkConfig::variant(&variant, settings.seed)?;
            net_cfg.bands = patch.bands;
            if let Some(v) = args.base_channels {
                net_cfg.base_channels = v;
            }
            if let Some(v) = args.coarse_blocks {
                net_cfg.coarse_blocks = v;
            }
            if let Some(v) = args.fine_layers {
                net_cfg.fine_layers = v;
            }
            init_state(net_cfg)?
        }
    };

    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    let log_path = args.out_dir.join("train.log");
    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut sink = |line: &str| {
        let _ = writeln!(log_file, "{line}");
        eprintln!("{line}");
    };
    run_schedule(
        &mut state,
        &train_cfg,
        &sources,
        &stages,
        Some(&args.out_dir),
        &mut sink,
    )?;
    let final_path = args.out_dir.join("final.mafw");
    save_state(&final_path, &state)?;
    eprintln!("wrote {}", final_path.display());
    Ok(())
}

fn cmd_denoise(args: DenoiseArgs) -> Result<()> {
    let (net, store, _) = load_checkpoint(&args.checkpoint)?;
    let noisy = HSICube::load_hsd(&args.input)?;
    let denoised = net.denoise_flexible(&store, &noisy)?;
    denoised.save_hsd(&args.out)?;
    eprintln!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let est = HSICube::load_hsd(&args.estimate)?;
    let reference = HSICube::load_hsd(&args.reference)?;
    let table = MetricsTable::compute(&est, &reference, 1.0)?;
    if let Some(out) = &args.out {
        write_text(out, &table.to_text())?;
        eprintln!("wrote {}", out.display());
    }
    println!("{}", table.summary_line());
    Ok(())
}

fn cmd_plot(args: PlotArgs) -> Result<()> {
    let mut did_anything = false;
    if let Some(metrics_path) = &args.metrics {
        let table = MetricsTable::from_text(&read_text(metrics_path)?)?;
        let (psnr, ssim) = metrics_charts(&table);
        let stem = metrics_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "metrics".into());
        let dir = match &args.out_dir {
            Some(d) => d.clone(),
            None => metrics_path
                .parent()
                .map(Path::to_path_buf)
                .unwrap_or_else(|| PathBuf::from(".")),
        };
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (chart, kind) in [(psnr, "psnr_per_band"), (ssim, "ssim_per_band")] {
            let path = dir.join(format!("{stem}_{kind}.svg"));
            write_text(&path, &chart.to_svg())?;
            eprintln!("wrote {}", path.display());
        }
        did_anything = true;
    }
    if !args.logs.is_empty() {
        let mut named = Vec::new();
        for path in &args.logs {
            let records = parse_train_log(&read_text(path)?)?;
            let name = path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string());
            named.push((name, records));
        }
        let chart = loss_overlay_chart(&named)?;
        let out = args.out.clone().unwrap_or_else(|| PathBuf::from("loss_curve.svg"));
        write_text(&out, &chart.to_svg())?;
        eprintln!("wrote {}", out.display());
        did_anything = true;
    }
    if !did_anything {
        return Err(Error::Config(
            "plot needs --metrics and/or at least one --log".into(),
        ));
    }
    Ok(())
}
