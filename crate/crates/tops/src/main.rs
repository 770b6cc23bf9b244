use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use tops::bench::{run_bench, write_cells, write_rows, BenchConfig};
use tops::config::{RunConfig, SmootherSpec};
use tops::error::{Result, ToolError, EXIT_CONFIG};
use tops::formats::{
    read_published, write_aggregates, write_density, write_json, write_published, write_reports, write_trace,
    RunManifest, ThresholdRecord, TreeDump,
};
use tops::io::{load_stream, write_lines, ColumnSelector, StreamFormat};
use tops_core::perturber::HierarchyRelease;
use tops_core::pipeline::{Mode, Pipeline};
use tops_core::rng::streams;
use tops_core::threshold::{
    em_threshold, oracle_threshold, pak_threshold, sp_threshold, truncate, PakParams, StreamConfig, DEFAULT_BIAS_SCALE,
    DEFAULT_FANOUT, DEFAULT_RANGE,
};
use tops_core::workload::{evaluate_with, gen_queries, gen_synthetic, QueryMode, SyntheticSpec, DEFAULT_QUERY_COUNT};
use tops_core::RandomSource;

#[derive(Parser)]
#[command(name = "tops", version, about = "Private release of bounded numeric streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select the truncation threshold from a holdout file.
    Threshold(ThresholdArgs),
    /// Run a full pipeline over a stream file.
    Run(RunArgs),
    /// Generate a synthetic stream.
    Synth(SynthArgs),
    /// Score a published stream against the true one.
    Eval(EvalArgs),
    /// Run an experiment matrix.
    Bench(BenchArgs),
}

#[derive(Args)]
struct InputArgs {
    /// Stream file: one value per line, or CSV with --column.
    #[arg(long)]
    input: Option<PathBuf>,
    /// CSV column, by 0-based index or header name.
    #[arg(long)]
    column: Option<String>,
}

impl InputArgs {
    fn format(&self) -> StreamFormat {
        format_for(self.column.as_deref())
    }
}

fn format_for(column: Option<&str>) -> StreamFormat {
    column.map(|c| StreamFormat::Csv(ColumnSelector::parse(c))).unwrap_or_default()
}

#[derive(Clone, Copy, ValueEnum)]
enum ThresholdKind {
    EmE,
    SPak,
    SP,
    Oracle,
}

#[derive(Args)]
struct ThresholdArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long = "bound", short = 'B')]
    bound: f64,
    #[arg(long)]
    epsilon: f64,
    /// Budget for the selection itself; defaults to --epsilon.
    #[arg(long)]
    threshold_epsilon: Option<f64>,
    /// Use only the first m readings; all of them by default.
    #[arg(long, short = 'm')]
    holdout: Option<usize>,
    #[arg(long, short = 'r', default_value_t = DEFAULT_RANGE)]
    range: u64,
    #[arg(long, short = 'b', default_value_t = DEFAULT_FANOUT)]
    fanout: u32,
    #[arg(long, short = 'c', default_value_t = DEFAULT_BIAS_SCALE)]
    bias_scale: f64,
    #[arg(long, value_enum, default_value = "em-e")]
    method: ThresholdKind,
    /// Percentile targeted by S-PAK and S-P; 99.575 by default.
    #[arg(long)]
    percentile: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON decision record; standard output by default.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Per-candidate scores as CSV.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long = "bound", short = 'B')]
    bound: Option<f64>,
    #[arg(long, short = 'r')]
    range: Option<u64>,
    #[arg(long, short = 'b')]
    fanout: Option<u32>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    threshold_epsilon: Option<f64>,
    #[arg(long, short = 'm')]
    holdout: Option<usize>,
    #[arg(long, short = 'c')]
    bias_scale: Option<f64>,
    /// recent, mean, median, moving_average or exponential.
    #[arg(long)]
    smoother: Option<String>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Spend this share of ε on the threshold and the rest on the release.
    #[arg(long)]
    sequential_share: Option<f64>,
    /// Skip threshold selection.
    #[arg(long)]
    theta: Option<f64>,
    /// Smoother level, instead of the optimised one.
    #[arg(long)]
    levels: Option<u32>,
    #[command(flatten)]
    input: InputArgs,
    /// Published stream CSV; standard output by default.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Run manifest JSON; defaults to `<output>.manifest.json` when --output is set.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    aggregates: Option<PathBuf>,
    #[arg(long)]
    density: Option<PathBuf>,
    #[arg(long)]
    reports: Option<PathBuf>,
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    tree_dump: Option<PathBuf>,
}

impl RunArgs {
    fn overrides(&self) -> RunConfig {
        let smoother = if self.smoother.is_some() || self.window.is_some() || self.alpha.is_some() {
            Some(SmootherSpec {
                kind: self.smoother.clone().unwrap_or_else(|| "recent".to_string()),
                w: self.window,
                alpha: self.alpha,
            })
        } else {
            None
        };
        RunConfig {
            mode: self.mode.clone(),
            bound: self.bound,
            r: self.range,
            b: self.fanout,
            epsilon: self.epsilon,
            m: self.holdout,
            c: self.bias_scale,
            smoother,
            seed: Some(self.seed),
            input_path: self.input.input.clone(),
            output_path: self.output.clone(),
            column: self.input.column.clone(),
            threshold_epsilon: self.threshold_epsilon,
            sequential_share: self.sequential_share,
            theta: self.theta,
            s: self.levels,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Constant,
    Uniform,
    HeavyTail,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    kind: SynthKind,
    #[arg(long, short = 'n')]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    value: f64,
    #[arg(long, default_value_t = 0.0)]
    low: f64,
    #[arg(long, default_value_t = 100.0)]
    high: f64,
    #[arg(long, default_value_t = 0.995)]
    body_mass: f64,
    #[arg(long, default_value_t = 100.0)]
    body_max: f64,
    #[arg(long, default_value_t = 2000.0)]
    tail_max: f64,
    /// One value per line; standard output by default.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum QueryLaw {
    LengthThenStart,
    UniformPair,
}

impl From<QueryLaw> for QueryMode {
    fn from(law: QueryLaw) -> Self {
        match law {
            QueryLaw::LengthThenStart => QueryMode::LengthThenStart,
            QueryLaw::UniformPair => QueryMode::UniformPair,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// True stream.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    column: Option<String>,
    /// Published `index,value` CSV.
    #[arg(long)]
    published: PathBuf,
    #[arg(long, short = 'r', default_value_t = DEFAULT_RANGE)]
    range: u64,
    #[arg(long, default_value_t = DEFAULT_QUERY_COUNT)]
    queries: usize,
    #[arg(long, value_enum, default_value = "length-then-start")]
    query_mode: QueryLaw,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Summary CSV; standard output by default.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Per-repetition CSV.
    #[arg(long)]
    cells: Option<PathBuf>,
    /// Worker threads; all cores by default.
    #[arg(long)]
    threads: Option<usize>,
}

fn threshold_command(args: ThresholdArgs) -> Result<()> {
    let path = args.input.input.as_deref().ok_or_else(|| ToolError::config("--input is required"))?;
    let loaded = load_stream(path, &args.input.format())?;
    let m = args.holdout.unwrap_or(loaded.values.len()).min(loaded.values.len());
    let holdout = &loaded.values[..m];
    let mut stream = StreamConfig::new(args.bound, args.epsilon, m).with_range(args.range).with_fanout(args.fanout);
    stream.bias_scale = args.bias_scale;
    stream.threshold_epsilon = args.threshold_epsilon;
    let mut rng = RandomSource::new(args.seed, streams::THRESHOLD);
    let mut pak = PakParams::default();
    if let Some(p) = args.percentile {
        pak.percentile = p;
    }
    let decision = match args.method {
        ThresholdKind::EmE => em_threshold(holdout, &stream, &mut rng)?,
        ThresholdKind::SPak => pak_threshold(holdout, &pak, &stream, &mut rng)?,
        ThresholdKind::SP => sp_threshold(holdout, pak.percentile, pak.delta_for(m), &stream, &mut rng)?,
        ThresholdKind::Oracle => oracle_threshold(holdout, &stream)?,
    };
    if let Some(trace) = &args.trace {
        write_trace(trace, &decision)?;
    }
    write_json(args.output.as_deref(), &ThresholdRecord::new(&decision, args.trace.as_deref()))
}

fn default_manifest(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

fn run_command(args: RunArgs) -> Result<()> {
    let base = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let config = base.overlay(args.overrides());
    let pipeline_config = config.pipeline_config()?;
    let input = config.input_path.as_deref().ok_or_else(|| ToolError::config("no input path"))?;
    let loaded = load_stream(input, &format_for(config.column.as_deref()))?;
    log::info!("loaded {} readings, max {}", loaded.profile.n, loaded.profile.max);

    let rng = RandomSource::new(args.seed, 0);
    let started = Instant::now();
    let mut pipeline = Pipeline::new(pipeline_config.clone(), rng.clone())?;
    let mut published = Vec::with_capacity(loaded.values.len());
    for &v in &loaded.values {
        published.push(pipeline.push(v)?);
    }
    let summary = pipeline.finish()?;
    let elapsed_ms = started.elapsed().as_secs_f64() * 1e3;

    let output = config.output_path.as_deref();
    write_published(output, &published)?;
    let manifest_path = args.manifest.clone().or_else(|| output.map(default_manifest));
    if let Some(path) = &manifest_path {
        let count = published.iter().filter(|p| p.is_some()).count() as u64;
        write_json(Some(path), &RunManifest::new(&summary, args.seed, count, args.trace.as_deref(), elapsed_ms))?;
    }
    if let Some(path) = &args.trace {
        write_trace(path, &summary.decision)?;
    }
    if let Some(path) = &args.aggregates {
        write_aggregates(path, &summary.aggregates)?;
    }
    if let Some(path) = &args.density {
        let est = summary.density.as_ref().ok_or_else(|| ToolError::config("--density needs mode topl"))?;
        write_density(path, est)?;
    }
    if let Some(path) = &args.reports {
        if summary.mode != Mode::Topl {
            return Err(ToolError::config("--reports needs mode topl"));
        }
        write_reports(path, &summary.client_reports)?;
    }
    if let Some(path) = &args.tree_dump {
        let plan = summary.plan.ok_or_else(|| ToolError::config("--tree-dump needs mode tops or pak"))?;
        let theta = summary.decision.theta;
        let m = pipeline_config.stream.holdout.min(loaded.values.len());
        let clipped: Vec<f64> = loaded.values[m..].iter().map(|&v| truncate(v, theta)).collect();
        let consistent = summary.mode == Mode::Tops;
        let release = HierarchyRelease::build(plan, theta, &clipped, &rng.derive(streams::PERTURBER), consistent)?;
        write_json(Some(path), &TreeDump::new(theta, &release))?;
    }
    for w in &summary.warnings {
        eprintln!("warning: {w}");
    }
    Ok(())
}

fn synth_command(args: SynthArgs) -> Result<()> {
    let spec = match args.kind {
        SynthKind::Constant => SyntheticSpec::Constant { value: args.value },
        SynthKind::Uniform => SyntheticSpec::Uniform {
            low: args.low,
            high: args.high,
        },
        SynthKind::HeavyTail => SyntheticSpec::HeavyTail {
            body_mass: args.body_mass,
            body_max: args.body_max,
            tail_max: args.tail_max,
        },
    };
    let values = gen_synthetic(&spec, args.count, args.seed)?;
    match &args.output {
        Some(path) => write_lines(path, &values),
        None => {
            for v in values {
                println!("{v}");
            }
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct EvalRecord {
    mse: f64,
    queries: usize,
    query_mode: QueryMode,
    mean_length: f64,
    /// Leading held-out readings excluded from the queries.
    skipped: usize,
}

fn eval_command(args: EvalArgs) -> Result<()> {
    let truth = load_stream(&args.truth, &format_for(args.column.as_deref()))?.values;
    let published = read_published(&args.published)?;
    if published.len() != truth.len() {
        return Err(tops_core::Error::LengthMismatch {
            expected: truth.len(),
            actual: published.len(),
        }
        .into());
    }
    let skipped = published.iter().take_while(|p| p.is_none()).count();
    if skipped == published.len() {
        return Err(ToolError::BadRow {
            path: args.published.clone(),
            line: 0,
            reason: "no published values".to_string(),
        });
    }
    let region: Vec<f64> = published[skipped..].iter().map(|p| p.unwrap_or(0.0)).collect();
    let workload = gen_queries(region.len(), args.range, args.queries, args.seed, args.query_mode.into())?;
    let report = evaluate_with(&truth[skipped..], &workload, |i, j| Ok(region[i - 1..j].iter().sum()))?;
    write_json(
        None,
        &EvalRecord {
            mse: report.mse,
            queries: workload.queries.len(),
            query_mode: workload.mode,
            mean_length: workload.mean_length(),
            skipped,
        },
    )
}

fn bench_command(args: BenchArgs) -> Result<()> {
    let config = BenchConfig::load(&args.config)?;
    let report = match args.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| ToolError::config(e.to_string()))?
            .install(|| run_bench(&config, args.seed))?,
        None => run_bench(&config, args.seed)?,
    };
    if let Some(path) = &args.cells {
        write_cells(path, &report.cells)?;
    }
    write_rows(args.output.as_deref(), &report.rows)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Threshold(a) => threshold_command(a),
        Command::Run(a) => run_command(a),
        Command::Synth(a) => synth_command(a),
        Command::Eval(a) => eval_command(a),
        Command::Bench(a) => bench_command(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            ExitCode::from(u8::try_from(code).unwrap_or(EXIT_CONFIG as u8))
        }
    }
}
