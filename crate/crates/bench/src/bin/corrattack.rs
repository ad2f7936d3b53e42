use std::fs::File;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use corrattack_bench::config::{OracleSource, SyntheticKind};
use corrattack_bench::dataset::{load_png, synthetic_images, Ingest};
use corrattack_bench::probe::{bo_rank_probe, ProbeConfig, RewardField};
use corrattack_bench::runner::ModelSource;
use corrattack_bench::{BenchConfig, BenchError};
use corrattack_core::attack::{hierarchical_attack, AttackConfig, AttackMode, NoObserver, Selection};
use corrattack_core::image::{make_grid, BlockIndex, Image, Shape};
use corrattack_core::oracle::{
    argmax, change_map, finite_difference_map, CountingOracle, LossSpec, BENCH_SEED, DEFAULT_MARGIN, ORACLE_URL_ENV,
};

#[derive(Parser)]
#[command(name = "corrattack", version, about = "Score-based black-box attack with GP-guided block search")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Attack a single image and write the result as JSON.
    Attack(AttackArgs),
    /// Run a benchmark described by a config file.
    Bench(BenchArgs),
    /// Loss-landscape and selection diagnostics, written as CSV.
    Diagnose {
        #[command(subcommand)]
        what: Diagnose,
    },
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Logits server; falls back to the CORRATTACK_ORACLE_URL environment variable.
    #[arg(long)]
    oracle: Option<String>,
    /// Built-in model used when no server is given.
    #[arg(long, value_enum, default_value = "linear")]
    synthetic: Kind,
    #[arg(long, default_value_t = BENCH_SEED)]
    model_seed: u64,
}

#[derive(Args, Clone)]
struct InputArgs {
    /// PNG input; a seeded noise image is used when omitted.
    #[arg(long)]
    image: Option<PathBuf>,
    /// True class; defaults to the model's prediction.
    #[arg(long)]
    label: Option<usize>,
    /// Side length for noise images, or the resize target for PNGs.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 0)]
    image_seed: u64,
}

#[derive(Args)]
struct AttackArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    target: Option<usize>,
    #[arg(long, value_enum, default_value = "flip")]
    mode: Mode,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long, default_value_t = 10_000)]
    budget: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "bench-out")]
    out_dir: PathBuf,
    /// `key=value` override, repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Any config key as a flag: `--query_budget 500`, `--mode=diff`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    flags: Vec<String>,
}

#[derive(Subcommand)]
enum Diagnose {
    /// Per-block finite differences of the loss.
    Fdmap(MapArgs),
    /// Finite-difference map before and after one block step.
    Changemap {
        #[command(flatten)]
        map: MapArgs,
        /// Block to step as `i,j,k`; the largest difference otherwise.
        #[arg(long)]
        step_block: Option<String>,
    },
    /// Best-found rank of the GP + EI rule on a frozen smooth field.
    Borank {
        #[arg(long, default_value_t = 14)]
        grid: usize,
        #[arg(long, default_value_t = 3)]
        grid_channels: usize,
        #[arg(long, default_value_t = 2.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.15)]
        fraction: f64,
        #[arg(long)]
        random: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct MapArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 4)]
    block: usize,
    #[arg(long, default_value_t = 0.03)]
    eta: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Linear,
    Mlp,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Diff,
    Flip,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<(), BenchError> {
    match cli.command {
        Command::Attack(args) => attack(args),
        Command::Bench(args) => bench(args),
        Command::Diagnose { what } => diagnose(what),
    }
}

fn output(path: Option<&PathBuf>) -> Result<Box<dyn Write>, BenchError> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn oracle_source(model: &ModelArgs) -> OracleSource {
    match model.oracle.clone().or_else(|| std::env::var(ORACLE_URL_ENV).ok()) {
        Some(url) => OracleSource::Remote { url },
        None => OracleSource::Synthetic {
            kind: match model.synthetic {
                Kind::Linear => SyntheticKind::Linear,
                Kind::Mlp => SyntheticKind::Mlp,
            },
            seed: model.model_seed,
        },
    }
}

/// Loads or synthesizes the input, opens the model, and resolves the label.
fn setup(input: &InputArgs, model: &ModelArgs, block: usize) -> Result<(Image, ModelSource, usize), BenchError> {
    let image = match &input.image {
        Some(path) => load_png(
            path,
            &Ingest {
                channels: input.channels,
                size: input.size,
                block,
                num_classes: None,
            },
        )?,
        None => {
            let side = input.size.unwrap_or(32);
            synthetic_images(1, input.image_seed, Shape::new(input.channels, side, side)).remove(0)
        }
    };
    let source = ModelSource::open(&oracle_source(model), image.shape)?;
    let label = match input.label {
        Some(l) => l,
        None => argmax(&source.handle().logits(&image)?),
    };
    Ok((image, source, label))
}

fn attack(args: AttackArgs) -> Result<(), BenchError> {
    let mode = match args.mode {
        Mode::Diff => AttackMode::Diff,
        Mode::Flip => AttackMode::Flip,
    };
    let mut config = AttackConfig::new(mode);
    if let Some(e) = args.epsilon {
        config.epsilon = e;
    }
    config.query_budget = args.budget;
    config.seed = args.seed;
    config.target = args.target;
    let (image, source, label) = setup(&args.input, &args.model, config.initial_block)?;
    let mut oracle = CountingOracle::new(source.handle());
    let result = hierarchical_attack(&mut oracle, &image, label, &config, &mut NoObserver)?;
    let mut out = output(args.out.as_ref())?;
    serde_json::to_writer_pretty(&mut out, &result).map_err(|e| BenchError::Io(e.into()))?;
    writeln!(out)?;
    eprintln!(
        "success={} queries={} final_loss={:.6}",
        result.success, result.queries, result.final_loss
    );
    Ok(())
}

fn bench(args: BenchArgs) -> Result<(), BenchError> {
    let mut config = match &args.config {
        Some(path) => BenchConfig::from_file(path)?,
        None => BenchConfig::default(),
    };
    let bad = |message: String| BenchError::Config(corrattack_bench::ConfigError { line: None, message });
    let mut pairs: Vec<(String, String)> = Vec::new();
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| bad(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        pairs.push((k.trim().into(), v.trim().into()));
    }
    let mut rest = args.flags.iter();
    while let Some(flag) = rest.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| bad(format!("expected --KEY VALUE, got {flag:?}")))?;
        match key.split_once('=') {
            Some((k, v)) => pairs.push((k.into(), v.into())),
            None => {
                let value = rest.next().ok_or_else(|| bad(format!("--{key} needs a value")))?;
                pairs.push((key.into(), value.clone()));
            }
        }
    }
    config.apply_overrides(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let report = corrattack_bench::run_benchmark_to(&config, &args.out_dir)?;
    let fmt = |v: Option<f64>| v.map(|q| format!("{q:.1}")).unwrap_or_else(|| "-".into());
    println!(
        "attempted={} skipped={} success_rate={:.3} mean_queries={} median_queries={}",
        report.attempted,
        report.skipped,
        report.success_rate,
        fmt(report.mean_queries),
        fmt(report.median_queries)
    );
    Ok(())
}

fn write_map(
    out: &mut dyn Write,
    grid: &corrattack_core::BlockGrid,
    columns: &[&str],
    rows: &[&[f64]],
) -> Result<(), BenchError> {
    writeln!(out, "i,j,k,{}", columns.join(","))?;
    for (n, block) in grid.blocks().enumerate() {
        let values: Vec<String> = rows.iter().map(|r| format!("{:.17e}", r[n])).collect();
        writeln!(out, "{},{},{},{}", block.i, block.j, block.k, values.join(","))?;
    }
    Ok(())
}

fn parse_block(text: &str) -> Result<BlockIndex, BenchError> {
    let parts: Vec<usize> = text
        .split(',')
        .map(|p| p.trim().parse())
        .collect::<Result<_, _>>()
        .map_err(|_| BenchError::Dataset(format!("block must be i,j,k, got {text:?}")))?;
    match parts[..] {
        [i, j, k] => Ok(BlockIndex::new(i, j, k)),
        _ => Err(BenchError::Dataset(format!("block must be i,j,k, got {text:?}"))),
    }
}

fn diagnose(what: Diagnose) -> Result<(), BenchError> {
    match what {
        Diagnose::Fdmap(map) => {
            let (image, source, label) = setup(&map.input, &map.model, map.block)?;
            let grid = make_grid(image.shape, map.block)?;
            let spec = LossSpec::untargeted(label, DEFAULT_MARGIN);
            let mut oracle = CountingOracle::new(source.handle());
            let fd = finite_difference_map(&mut oracle, &image, &grid, map.eta, &spec)?;
            write_map(&mut *output(map.out.as_ref())?, &grid, &["fd"], &[&fd])
        }
        Diagnose::Changemap { map, step_block } => {
            let (image, source, label) = setup(&map.input, &map.model, map.block)?;
            let grid = make_grid(image.shape, map.block)?;
            let spec = LossSpec::untargeted(label, DEFAULT_MARGIN);
            let block = step_block.as_deref().map(parse_block).transpose()?;
            let mut oracle = CountingOracle::new(source.handle());
            let cm = change_map(&mut oracle, &image, &grid, map.eta, &spec, block)?;
            eprintln!("stepped block {},{},{}", cm.stepped.i, cm.stepped.j, cm.stepped.k);
            write_map(
                &mut *output(map.out.as_ref())?,
                &grid,
                &["before", "after", "difference"],
                &[&cm.before, &cm.after, &cm.difference],
            )
        }
        Diagnose::Borank { grid, grid_channels, sigma, seed, fraction, random, out } => {
            let field = RewardField::smooth(grid, grid, grid_channels, sigma, seed);
            let config = ProbeConfig {
                query_fraction: fraction,
                selection: if random { Selection::UniformRandom } else { Selection::BayesOpt },
                seed,
                ..ProbeConfig::default()
            };
            let trace = bo_rank_probe(&field, &config)?;
            if let Some(rank) = trace.rank_at(fraction) {
                eprintln!("best rank after {:.0}% of actions: {rank:.4}", fraction * 100.0);
            }
            trace.write_csv(output(out.as_ref())?)
        }
    }
}
