//! Command-line front end.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::colorlab::{simulate_cvd, CvdKind, RgbImage};
use crate::cudnet::{predict, ModelConfig, MIN_SIDE};
use crate::datagen::{gen_dataset, read_dataset, write_dataset, GenConfig, SamplePair};
use crate::gradsuite::{run_suite, DEFAULT_POINTS, DEFAULT_TOLERANCE};
use crate::imageio::{read_png, write_png};
use crate::metrics::{cud_gap, psnr_mae, ssim_mae, write_report, SsimChannel};
use crate::trainer::{evaluate_pairs, load_checkpoint, save_checkpoint, train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_FAILURE,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "cudkit", version, about = "Color-universal-design image conversion")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset of confusable color pairs.
    GenData(GenDataArgs),
    /// Train a filter network on a generated dataset.
    Train(TrainArgs),
    /// Apply a trained filter to one image.
    Infer(InferArgs),
    /// Simulate dichromat vision on one image.
    Simulate(SimulateArgs),
    /// Score a checkpoint on a dataset and write a CSV report.
    Evaluate(EvaluateArgs),
    /// Run the finite-difference gradient suite.
    GradCheck(GradCheckArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Size {
    pub width: usize,
    pub height: usize,
}

fn parse_size(s: &str) -> Result<Size, String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got `{s}`"))?;
    let num = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|e| format!("bad dimension `{t}`: {e}"))
    };
    let size = Size {
        width: num(w)?,
        height: num(h)?,
    };
    if size.width < MIN_SIDE || size.height < MIN_SIDE {
        return Err(format!("size {s} is below the {MIN_SIDE}x{MIN_SIDE} minimum"));
    }
    Ok(size)
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("`{s}`: {e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is not in [0, 1]"))
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value = "64x64", value_parser = parse_size)]
    pub size: Size,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "deutan")]
    pub kind: CvdKind,
    /// Share of already-CUD pairs whose target equals the input.
    #[arg(long, default_value = "0", value_parser = parse_fraction)]
    pub cud_ratio: f64,
    /// Share of pairs written to the validation split.
    #[arg(long, default_value = "0", value_parser = parse_fraction)]
    pub val_fraction: f64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Shrink the last feature stage to 16 channels.
    #[arg(long)]
    pub low_bottleneck: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Per-step CSV log; defaults to `<out>.log.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Write the 64 knot values (saturation curve, then value curve).
    #[arg(long)]
    pub dump_curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "deutan")]
    pub kind: CvdKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitChoice {
    Train,
    Val,
    All,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Score SSIM on the mean of the RGB channels instead of lightness.
    #[arg(long)]
    pub ssim_rgb: bool,
    #[arg(long, value_enum, default_value_t = SplitChoice::All)]
    pub split: SplitChoice,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Restrict the suite to one operator or loss term.
    #[arg(long)]
    pub op: Option<String>,
    #[arg(long, default_value_t = DEFAULT_POINTS)]
    pub points: usize,
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    match run(cli.command, &mut stdout.lock()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("usage error: {m}"),
                CliError::Runtime(m) => eprintln!("error: {m}"),
            }
            e.code()
        }
    }
}

pub fn run(cmd: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::GenData(a) => gen_data(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Infer(a) => infer(a, out),
        Command::Simulate(a) => simulate(a),
        Command::Evaluate(a) => evaluate(a, out),
        Command::GradCheck(a) => grad_check(a, out),
    }
}

fn say(out: &mut dyn Write, line: impl std::fmt::Display) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(runtime)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn check_min_size(img: &RgbImage, path: &Path) -> Result<(), CliError> {
    if img.height() < MIN_SIDE || img.width() < MIN_SIDE {
        return Err(CliError::Usage(format!(
            "{}: image is {}x{}, below the {MIN_SIDE}x{MIN_SIDE} minimum",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

fn require_dir(dir: &Path) -> Result<(), CliError> {
    if dir.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!(
            "data directory {} does not exist",
            dir.display()
        )))
    }
}

fn gen_data(a: GenDataArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.count == 0 {
        return Err(CliError::Usage("--count must be at least 1".into()));
    }
    let cfg = GenConfig {
        height: a.size.height,
        width: a.size.width,
        kind: a.kind,
        ..GenConfig::default()
    };
    let pairs = gen_dataset(a.count, a.seed, a.cud_ratio, &cfg).map_err(runtime)?;
    let n_val = (a.count as f64 * a.val_fraction).round() as usize;
    let (train, val) = pairs.split_at(a.count - n_val);
    std::fs::create_dir_all(&a.out).map_err(|e| runtime(format!("{}: {e}", a.out.display())))?;
    write_dataset(&a.out, train, val).map_err(runtime)?;

    let gaps = |p: &SamplePair, img: &RgbImage| cud_gap(img, &p.regions[0], &p.regions[1], a.kind);
    let mut input_gaps = Vec::with_capacity(pairs.len());
    let mut target_gaps = Vec::with_capacity(pairs.len());
    for p in &pairs {
        input_gaps.push(gaps(p, &p.input).map_err(runtime)?);
        target_gaps.push(gaps(p, &p.target).map_err(runtime)?);
    }
    say(out, format_args!("pairs: {}", pairs.len()))?;
    say(out, format_args!("train: {}", train.len()))?;
    say(out, format_args!("val: {}", val.len()))?;
    say(
        out,
        format_args!("already_cud: {}", pairs.iter().filter(|p| p.meta.already_cud).count()),
    )?;
    say(
        out,
        format_args!("mean_normal_gap: {:.6}", mean(pairs.iter().map(|p| p.meta.normal_gap))),
    )?;
    say(
        out,
        format_args!("mean_input_sim_gap: {:.6}", mean(input_gaps.into_iter())),
    )?;
    say(
        out,
        format_args!("mean_target_sim_gap: {:.6}", mean(target_gaps.into_iter())),
    )
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    require_dir(&a.data)?;
    if a.epochs == 0 {
        return Err(CliError::Usage("--epochs must be at least 1".into()));
    }
    let data = read_dataset(&a.data).map_err(runtime)?;
    let pairs = data.train;
    let Some(first) = pairs.first() else {
        return Err(CliError::Usage(format!("{} has no training pairs", a.data.display())));
    };
    let kind = first.meta.kind;
    if pairs.iter().any(|p| p.meta.kind != kind) {
        return Err(CliError::Usage("training pairs mix deficiency kinds".into()));
    }
    if let Some(p) = pairs
        .iter()
        .find(|p| p.input.height() < MIN_SIDE || p.input.width() < MIN_SIDE)
    {
        return Err(CliError::Usage(format!(
            "pair {} is below the {MIN_SIDE}x{MIN_SIDE} minimum",
            p.meta.seed
        )));
    }
    let defaults = TrainConfig::default();
    let log = a.log.clone().unwrap_or_else(|| {
        let mut s = a.out.clone().into_os_string();
        s.push(".log.csv");
        PathBuf::from(s)
    });
    let cfg = TrainConfig {
        lr: a.lr.unwrap_or(defaults.lr),
        batch_size: a.batch_size.unwrap_or(defaults.batch_size),
        epochs: a.epochs,
        kind,
        seed: a.seed,
        model: if a.low_bottleneck {
            ModelConfig::low_bottleneck()
        } else {
            ModelConfig::default()
        },
        log_path: Some(log.clone()),
        checkpoint_path: Some(a.out.clone()),
        ..defaults
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let outcome = train(&cfg, &pairs).map_err(runtime)?;
    save_checkpoint(&outcome.checkpoint, &a.out).map_err(runtime)?;
    say(out, format_args!("steps: {}", outcome.steps.len()))?;
    say(out, format_args!("initial_total: {:.6}", outcome.initial.total))?;
    say(out, format_args!("final_total: {:.6}", outcome.final_loss.total))?;
    say(out, format_args!("checkpoint: {}", a.out.display()))?;
    say(out, format_args!("log: {}", log.display()))
}

fn infer(a: InferArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ckpt = load_checkpoint(&a.ckpt).map_err(runtime)?;
    let img = read_png(&a.input).map_err(runtime)?;
    check_min_size(&img, &a.input)?;
    let (pred, curve) = predict(&img, &ckpt.weights, ckpt.config.kind).map_err(runtime)?;
    write_png(&pred, &a.out).map_err(runtime)?;
    if let Some(path) = &a.dump_curve {
        let file = File::create(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        let mut w = csv::Writer::from_writer(BufWriter::new(file));
        let csv_err = |e: csv::Error| runtime(format!("{}: {e}", path.display()));
        w.write_record(["curve", "index", "value"]).map_err(csv_err)?;
        for (name, knots) in [("s", &curve.s_knots), ("v", &curve.v_knots)] {
            for (i, k) in knots.iter().enumerate() {
                w.write_record([name.to_string(), i.to_string(), format!("{k:.17e}")])
                    .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    }
    say(
        out,
        format_args!("curve_deviation: {:.6}", curve.mean_abs_deviation_from_identity()),
    )
}

fn simulate(a: SimulateArgs) -> Result<(), CliError> {
    let img = read_png(&a.input).map_err(runtime)?;
    check_min_size(&img, &a.input)?;
    write_png(&simulate_cvd(&img, a.kind), &a.out).map_err(runtime)
}

fn evaluate(a: EvaluateArgs, out: &mut dyn Write) -> Result<(), CliError> {
    require_dir(&a.data)?;
    let ckpt = load_checkpoint(&a.ckpt).map_err(runtime)?;
    let data = read_dataset(&a.data).map_err(runtime)?;
    let (pairs, ids): (Vec<SamplePair>, Vec<String>) = {
        let train_ids = data
            .manifest
            .entries
            .iter()
            .filter(|e| e.split == crate::datagen::Split::Train);
        let val_ids = data
            .manifest
            .entries
            .iter()
            .filter(|e| e.split == crate::datagen::Split::Val);
        let mut pairs = Vec::new();
        let mut ids = Vec::new();
        if matches!(a.split, SplitChoice::Train | SplitChoice::All) {
            pairs.extend(data.train.iter().cloned());
            ids.extend(train_ids.map(|e| e.id.clone()));
        }
        if matches!(a.split, SplitChoice::Val | SplitChoice::All) {
            pairs.extend(data.val.iter().cloned());
            ids.extend(val_ids.map(|e| e.id.clone()));
        }
        (pairs, ids)
    };
    if pairs.is_empty() {
        return Err(CliError::Usage(format!(
            "{} has no pairs in the selected split",
            a.data.display()
        )));
    }
    let channel = if a.ssim_rgb {
        SsimChannel::RgbMean
    } else {
        SsimChannel::Lightness
    };
    let samples = evaluate_pairs(&ckpt.weights, &pairs, ckpt.config.kind, channel).map_err(runtime)?;
    let rows: Vec<_> = samples.iter().map(|s| s.row).collect();
    let file = File::create(&a.out).map_err(|e| runtime(format!("{}: {e}", a.out.display())))?;
    write_report(BufWriter::new(file), &ids, &rows).map_err(runtime)?;
    say(out, format_args!("pairs: {}", rows.len()))?;
    say(out, format_args!("ssim_mae: {:.6}", ssim_mae(&rows).map_err(runtime)?))?;
    say(out, format_args!("psnr_mae: {:.6}", psnr_mae(&rows).map_err(runtime)?))?;
    say(
        out,
        format_args!("mean_input_sim_gap: {:.6}", mean(samples.iter().map(|s| s.gap_input))),
    )?;
    say(
        out,
        format_args!("mean_pred_sim_gap: {:.6}", mean(samples.iter().map(|s| s.gap_pred))),
    )?;
    say(
        out,
        format_args!("mean_target_sim_gap: {:.6}", mean(samples.iter().map(|s| s.gap_target))),
    )
}

fn grad_check(a: GradCheckArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.points == 0 {
        return Err(CliError::Usage("--points must be at least 1".into()));
    }
    if let Some(op) = &a.op {
        if crate::gradsuite::find_case(op).is_none() {
            let names: Vec<_> = crate::gradsuite::CASES
                .iter()
                .filter(|c| c.kind != crate::gradsuite::CaseKind::Fixture)
                .map(|c| c.name)
                .collect();
            return Err(CliError::Usage(format!(
                "unknown operator `{op}`; known: {}",
                names.join(", ")
            )));
        }
    }
    let results = run_suite(a.seed, a.points, a.op.as_deref()).map_err(runtime)?;
    let mut failures = Vec::new();
    for r in &results {
        let ok = r.passed(DEFAULT_TOLERANCE);
        say(
            out,
            format_args!(
                "{:<22} {} max_rel_error={:.3e} checked={} skipped={}",
                r.name,
                if ok { "ok  " } else { "FAIL" },
                r.worst.max_rel_error,
                r.checked,
                r.skipped
            ),
        )?;
        if !ok {
            failures.push(format!(
                "{} (input {} index {}: analytic {:.6e} numeric {:.6e})",
                r.name, r.worst.input, r.worst.index, r.worst.analytic, r.worst.numeric
            ));
        }
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: {}",
            failures.join("; ")
        )))
    }
}
