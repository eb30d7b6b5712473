//! Command-line front end: format reports, tensor quantization, SNR models
//! and sweeps, exponent histograms, bias suggestion, loss-scaling replay,
//! and the desk-scale training demo. JSON for single objects, CSV for
//! sweeps; all randomized subcommands take `--seed` (or `LP8_SEED`).

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lp8::noise::{named_descriptor, FloatDescriptor, FormatReport, GENERATOR_ID};
use lp8::scaling::{BackoffConfig, LogMaxConfig, SimRow, StepAction, TraceRecord};
use lp8::trainer::{
    sweep_bias, train, QuantRecipe, RecipeSpec, SweepSite, TaskConfig, TrainConfig,
};
use lp8::{
    coverage, quantize_tensor, simulate_backoff, simulate_logmax, snr_db_empirical,
    snr_db_fixed_model, suggest_bias, ExponentHistogram, FloatFormat, Overflow, QuantizerConfig,
    Rounding, Tensor,
};

const SCHEMA_VERSION: u32 = 1;

#[derive(Parser)]
#[command(
    name = "lp8",
    version,
    about = "narrow floating-point formats: codecs, noise models, bias selection, loss scaling, and a QAT demo"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Dynamic-range and SNR report for formats (JSON)
    FormatReport(FormatReportArgs),
    /// Quantize a tensor file through a format
    Quantize(QuantizeArgs),
    /// Fixed-point noise decomposition over a grid of steps (CSV)
    SnrSweep(SnrSweepArgs),
    /// Fixed-point noise model at one quantization step (JSON)
    FixedSnr(FixedSnrArgs),
    /// Exponent histogram of a tensor file (CSV)
    Hist(HistArgs),
    /// Pick an exponent bias from a tensor's histogram (JSON)
    SuggestBias(SuggestBiasArgs),
    /// Replay a gradient trace through a loss-scaling automaton (CSV)
    ScaleSim(ScaleSimArgs),
    /// Train the built-in MLP task with a quantization recipe
    TrainDemo(TrainDemoArgs),
}

#[derive(Args)]
struct FormatReportArgs {
    /// `1.<E>.<p>[:b<bias>]` or a named format (float-32, float-16,
    /// bfloat-16, dlfloat)
    formats: Vec<String>,
    /// Report the seven reference table rows
    #[arg(long)]
    table: bool,
}

#[derive(Args)]
struct QuantizeArgs {
    #[arg(long)]
    format: FloatFormat,
    #[arg(long, value_enum, default_value = "nearest-even")]
    rounding: RoundingArg,
    #[arg(long, value_enum, default_value = "clip")]
    overflow: OverflowArg,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long = "out")]
    output: PathBuf,
    /// Random stream for stochastic rounding (or LP8_SEED)
    #[arg(long, env = "LP8_SEED", required_if_eq("rounding", "stochastic"))]
    seed: Option<u64>,
}

#[derive(Clone, Copy, PartialEq, clap::ValueEnum)]
enum RoundingArg {
    NearestEven,
    Stochastic,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum OverflowArg {
    Clip,
    SignalNan,
}

#[derive(Args)]
struct SnrSweepArgs {
    /// Integer bits of the fixed-point quantizer
    #[arg(long, default_value_t = 7)]
    bits: u32,
    /// log2 of the smallest quantization step
    #[arg(long, default_value_t = -8.0, allow_hyphen_values = true)]
    lo_log2: f64,
    /// log2 of the largest quantization step
    #[arg(long, default_value_t = -2.0, allow_hyphen_values = true)]
    hi_log2: f64,
    /// Grid points per octave
    #[arg(long, default_value_t = 16)]
    per_octave: u32,
}

#[derive(Args)]
struct FixedSnrArgs {
    #[arg(long, default_value_t = 7)]
    bits: u32,
    /// Quantization step (e.g. 0.03125)
    #[arg(long)]
    q: f64,
    /// Also run a Monte-Carlo measurement with the matching 1.0.p format
    #[arg(long)]
    empirical: bool,
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, default_value_t = 1_000_000)]
    samples: u64,
    /// Random stream for the Monte-Carlo run (or LP8_SEED)
    #[arg(long, env = "LP8_SEED", required_if_eq("empirical", "true"))]
    seed: Option<u64>,
}

#[derive(Args)]
struct HistArgs {
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Args)]
struct SuggestBiasArgs {
    #[arg(long = "in")]
    input: PathBuf,
    /// Format family whose bias to choose, e.g. `1.4.3` (bias part ignored)
    #[arg(long)]
    format: FloatFormat,
    /// Largest tolerable fraction of nonzero mass above max_normal
    #[arg(long, default_value_t = 0.0)]
    clip_quantile: f64,
}

#[derive(Args)]
struct ScaleSimArgs {
    /// `backoff` or `logmax`
    #[arg(long)]
    algo: String,
    /// CSV with header `step,max_abs_grad,overflow`
    #[arg(long = "in")]
    input: PathBuf,
    /// Gradient format (sets the LogMax target; required for logmax)
    #[arg(long)]
    format: Option<FloatFormat>,
    /// LogMax sigma multiplier
    #[arg(long, default_value_t = 0.0)]
    c: f64,
    #[arg(long, default_value_t = 15, allow_hyphen_values = true)]
    initial_scale_log2: i32,
    #[arg(long, default_value_t = 2000)]
    patience: u32,
}

#[derive(Args)]
struct TrainDemoArgs {
    /// Recipe JSON: a file path or an inline object
    #[arg(long)]
    recipe: Option<String>,
    /// Run seed (or LP8_SEED)
    #[arg(long, env = "LP8_SEED")]
    seed: u64,
    #[arg(long, default_value_t = 30)]
    epochs: u32,
    #[arg(long = "batch-size", default_value_t = 32)]
    batch_size: usize,
    /// log2 of the per-sample base learning rate
    #[arg(long, default_value_t = -9.0, allow_hyphen_values = true)]
    base_lr_log2: f64,
    /// Heavy-tail std of per-sample input scales, in octaves
    #[arg(long, default_value_t = 0.0)]
    input_scale_log2_std: f64,
    /// Fraction of flipped training labels
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    /// Sweep one site's exponent bias: `--sweep-bias <site> <lo>..<hi>`
    #[arg(long, num_args = 2, value_names = ["SITE", "LO..HI"], allow_hyphen_values = true)]
    sweep_bias: Option<Vec<String>>,
    /// Seeds per sweep point
    #[arg(long, default_value_t = 1)]
    repeats: u64,
}

fn parse_report_format(spec: &str) -> Result<FormatReport> {
    if let Some((name, desc)) = named_descriptor(spec) {
        return Ok(FormatReport::for_descriptor(name, &desc)?);
    }
    let format: FloatFormat = spec
        .parse()
        .map_err(|e| anyhow!("{e}; known named formats: float-32, float-16, bfloat-16, dlfloat"))?;
    if format.exponent_bits() == 0 {
        Ok(FormatReport::for_fixed_point(
            &format.to_string(),
            format.significand_bits(),
        ))
    } else {
        Ok(FormatReport::for_descriptor(
            &format!("1.{}.{}", format.exponent_bits(), format.significand_bits()),
            &FloatDescriptor::from(format),
        )?)
    }
}

fn cmd_format_report(args: &FormatReportArgs) -> Result<()> {
    let mut specs = args.formats.clone();
    if args.table {
        for name in [
            "float-32",
            "float-16",
            "bfloat-16",
            "dlfloat",
            "1.5.2",
            "1.4.3",
            "1.3.4",
        ] {
            specs.push(name.to_string());
        }
    }
    if specs.is_empty() {
        bail!("no formats given (pass format strings or --table)");
    }
    let reports: Vec<FormatReport> = specs
        .iter()
        .map(|s| parse_report_format(s))
        .collect::<Result<_>>()?;
    let payload = serde_json::json!({
        "schema": SCHEMA_VERSION,
        "reports": reports,
    });
    println!("{}", serde_json::to_string_pretty(&payload)?);
    Ok(())
}

fn cmd_quantize(args: &QuantizeArgs) -> Result<()> {
    let rounding = match args.rounding {
        RoundingArg::NearestEven => Rounding::NearestEven,
        RoundingArg::Stochastic => Rounding::Stochastic,
    };
    let overflow = match args.overflow {
        OverflowArg::Clip => Overflow::Clip,
        OverflowArg::SignalNan => Overflow::SignalNan,
    };
    let config = QuantizerConfig {
        format: args.format,
        rounding,
        overflow,
    };
    let tensor =
        Tensor::load(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let mut rng_store;
    let rng: Option<&mut dyn rand::RngCore> = if rounding == Rounding::Stochastic {
        let seed = args
            .seed
            .expect("clap requires --seed for stochastic rounding");
        rng_store = lp8::trainer::seeded_stream(seed, 0);
        Some(&mut rng_store)
    } else {
        None
    };
    let (quantized, overflowed) = quantize_tensor(&tensor, &config, rng)?;
    quantized
        .save_binary(&args.output)
        .with_context(|| format!("writing {}", args.output.display()))?;
    let payload = serde_json::json!({
        "schema": SCHEMA_VERSION,
        "format": args.format.to_string(),
        "elements": quantized.len(),
        "overflow": overflowed,
    });
    println!("{}", serde_json::to_string_pretty(&payload)?);
    Ok(())
}

fn cmd_snr_sweep(args: &SnrSweepArgs) -> Result<()> {
    if args.hi_log2 < args.lo_log2 {
        bail!("--hi-log2 must be >= --lo-log2");
    }
    let grid = lp8::noise::log2_grid(args.lo_log2, args.hi_log2, args.per_octave);
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "q,rounding_noise,clipping_noise,total,snr_db")?;
    for row in lp8::noise_components_fixed(&grid, args.bits) {
        writeln!(
            out,
            "{},{},{},{},{}",
            row.q, row.rounding_noise, row.clipping_noise, row.total, row.snr_db
        )?;
    }
    Ok(())
}

fn cmd_fixed_snr(args: &FixedSnrArgs) -> Result<()> {
    if args.q <= 0.0 {
        bail!("--q must be positive");
    }
    let model = snr_db_fixed_model(args.q, args.bits);
    let mut payload = serde_json::json!({
        "schema": SCHEMA_VERSION,
        "bits": args.bits,
        "q": model.q,
        "rounding_noise": model.rounding_noise,
        "clipping_noise": model.clipping_noise,
        "total": model.total,
        "snr_db": model.snr_db,
    });
    if args.empirical {
        let seed = args.seed.expect("clap requires --seed for --empirical");
        let q_log2 = args.q.log2();
        if q_log2.fract() != 0.0 {
            bail!("--empirical needs a power-of-two --q (it drives the 1.0.p codec)");
        }
        let format = FloatFormat::new(0, args.bits, -(q_log2 as i32))?;
        let mc = snr_db_empirical(
            &QuantizerConfig::new(format),
            args.sigma,
            args.samples,
            seed,
        );
        payload["empirical_snr_db"] = serde_json::json!(mc);
        payload["sigma"] = serde_json::json!(args.sigma);
        payload["samples"] = serde_json::json!(args.samples);
        payload["seed"] = serde_json::json!(seed);
        payload["generator"] = serde_json::json!(GENERATOR_ID);
    }
    println!("{}", serde_json::to_string_pretty(&payload)?);
    Ok(())
}

fn cmd_hist(args: &HistArgs) -> Result<()> {
    let tensor =
        Tensor::load(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let hist = ExponentHistogram::from_tensor(&tensor);
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "# zero_count={}", hist.zero_count())?;
    writeln!(out, "# total={}", hist.total())?;
    writeln!(out, "exponent,count")?;
    for (e, c) in hist.bins() {
        writeln!(out, "{e},{c}")?;
    }
    Ok(())
}

fn cmd_suggest_bias(args: &SuggestBiasArgs) -> Result<()> {
    let tensor =
        Tensor::load(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let hist = ExponentHistogram::from_tensor(&tensor);
    let e = args.format.exponent_bits();
    let p = args.format.significand_bits();
    let bias = suggest_bias(&hist, e, p, args.clip_quantile)?;
    let chosen = FloatFormat::new(e, p, bias)?;
    let cov = coverage(&hist, &chosen)?;
    let payload = serde_json::json!({
        "schema": SCHEMA_VERSION,
        "format": chosen.to_string(),
        "exponent_bits": e,
        "significand_bits": p,
        "bias": bias,
        "clip_quantile": args.clip_quantile,
        "coverage": cov,
    });
    println!("{}", serde_json::to_string_pretty(&payload)?);
    Ok(())
}

fn parse_trace(path: &PathBuf) -> Result<Vec<TraceRecord>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with("step") {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            bail!(
                "trace line {} needs `step,max_abs_grad,overflow`",
                lineno + 1
            );
        }
        records.push(TraceRecord {
            step: fields[0].parse().context("step column")?,
            max_abs_grad: fields[1].parse().context("max_abs_grad column")?,
            overflow: match fields[2] {
                "0" | "false" => false,
                "1" | "true" => true,
                other => bail!("overflow column must be 0/1/true/false, got `{other}`"),
            },
        });
    }
    Ok(records)
}

fn cmd_scale_sim(args: &ScaleSimArgs) -> Result<()> {
    let records = parse_trace(&args.input)?;
    let rows: Vec<SimRow> = match args.algo.as_str() {
        "backoff" => simulate_backoff(
            &records,
            BackoffConfig {
                initial_scale_log2: args.initial_scale_log2,
                patience: args.patience,
                ..BackoffConfig::default()
            },
        ),
        "logmax" => {
            let format = args
                .format
                .ok_or_else(|| anyhow!("logmax needs --format for the representable maximum"))?;
            simulate_logmax(&records, LogMaxConfig::for_gradient_format(&format, args.c))?
        }
        other => bail!("unknown algorithm `{other}` (use backoff or logmax)"),
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "step,scale,action")?;
    for row in rows {
        let action = match row.action {
            StepAction::ApplyUpdate => "apply",
            StepAction::SkipUpdate => "skip",
        };
        writeln!(out, "{},{},{}", row.step, row.scale, action)?;
    }
    Ok(())
}

fn load_recipe(spec: &Option<String>) -> Result<QuantRecipe> {
    let Some(text) = spec else {
        return Ok(QuantRecipe::fp32());
    };
    let json = if text.trim_start().starts_with('{') {
        text.clone()
    } else {
        std::fs::read_to_string(text).with_context(|| format!("reading recipe file {text}"))?
    };
    let spec: RecipeSpec = serde_json::from_str(&json).context("parsing recipe JSON")?;
    Ok(QuantRecipe::try_from(&spec)?)
}

fn cmd_train_demo(args: &TrainDemoArgs) -> Result<()> {
    let recipe = load_recipe(&args.recipe)?;
    let seed = args.seed;
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        base_learning_rate: args.base_lr_log2.exp2(),
        seed,
        recipe,
        task: TaskConfig {
            input_scale_log2_std: args.input_scale_log2_std,
            label_noise: args.label_noise,
            ..TaskConfig::default()
        },
        ..TrainConfig::default()
    };

    if let Some(sweep) = &args.sweep_bias {
        let site: SweepSite = sweep[0].parse().map_err(|e: String| anyhow!(e))?;
        let (lo, hi) = sweep[1]
            .split_once("..")
            .ok_or_else(|| anyhow!("bias range must look like `-16..16`"))?;
        let lo: i32 = lo.trim().parse().context("sweep lower bound")?;
        let hi: i32 = hi.trim().parse().context("sweep upper bound")?;
        if hi < lo {
            bail!("empty sweep range {lo}..{hi}");
        }
        let points = sweep_bias(&config, site, lo..=hi, args.repeats.max(1))?;
        let stdout = std::io::stdout();
        let mut out = stdout.lock();
        writeln!(out, "bias,mean_accuracy,std_accuracy,diverged_runs")?;
        for p in points {
            writeln!(
                out,
                "{},{},{},{}",
                p.bias, p.mean_accuracy, p.std_accuracy, p.diverged_runs
            )?;
        }
        return Ok(());
    }

    let trace = train(&config)?;
    let payload = serde_json::json!({
        "schema": SCHEMA_VERSION,
        "seed": seed,
        "epochs": args.epochs,
        "final_accuracy": trace.final_accuracy,
        "overflow_steps": trace.overflow_steps,
        "skipped_steps": trace.skipped_steps,
        "scale_trajectory": trace.scale_trajectory,
        "trace": trace.epochs,
    });
    println!("{}", serde_json::to_string_pretty(&payload)?);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::FormatReport(args) => cmd_format_report(args),
        Command::Quantize(args) => cmd_quantize(args),
        Command::SnrSweep(args) => cmd_snr_sweep(args),
        Command::FixedSnr(args) => cmd_fixed_snr(args),
        Command::Hist(args) => cmd_hist(args),
        Command::SuggestBias(args) => cmd_suggest_bias(args),
        Command::ScaleSim(args) => cmd_scale_sim(args),
        Command::TrainDemo(args) => cmd_train_demo(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
