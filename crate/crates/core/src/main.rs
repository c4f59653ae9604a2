use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sparse_unmix::metrics::RmseConvention;
use sparse_unmix::pipeline::{
    cmd_evaluate, cmd_extract, cmd_optimize, cmd_synth, cmd_unmix, ExtractMode, LabelSource,
    PipelineConfig,
};

#[derive(Parser)]
#[command(
    name = "sparse-unmix",
    version,
    about = "Sparse sub-pixel quantification of hyperspectral images"
)]
struct Cli {
    /// TOML configuration; command-line flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print the effective configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene: endmember library, raster, reference fractions.
    Synth(SynthArgs),
    /// Build an archetype library from labeled raster pixels.
    Extract(ExtractArgs),
    /// Prune a library with annealed rjMCMC.
    Optimize(OptimizeArgs),
    /// Unmix a raster into a fraction map and a usage histogram.
    Unmix(UnmixArgs),
    /// Compare an estimated fraction map with a reference.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_endmembers: Option<usize>,
    #[arg(long)]
    n_classes: Option<usize>,
    #[arg(long)]
    bands: Option<usize>,
    #[arg(long)]
    n_pixels: Option<usize>,
    #[arg(long)]
    sparsity: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    dirichlet_alpha: Option<f64>,
}

#[derive(Args)]
struct ExtractArgs {
    #[arg(long)]
    raster: PathBuf,
    /// Fraction map labeling each listed pixel with its dominant class.
    #[arg(long, conflicts_with = "labels", required_unless_present = "labels")]
    reference: Option<PathBuf>,
    /// `row,col,class` label file.
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mode: Option<ExtractMode>,
    #[arg(long)]
    k_archetypes: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    no_lof: bool,
    #[arg(long)]
    neighbors_k: Option<usize>,
    #[arg(long)]
    quantile: Option<f64>,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    pool: PathBuf,
    #[arg(long)]
    raster: PathBuf,
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long)]
    run_repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    prior_lambda: Option<f64>,
    #[arg(long)]
    max_elements: Option<usize>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    initial_temperature: Option<f64>,
    #[arg(long)]
    cooling_factor: Option<f64>,
    #[arg(long)]
    sparsity_w: Option<usize>,
    #[arg(long)]
    require_all_classes: bool,
    #[arg(long)]
    incremental: bool,
}

#[derive(Args)]
struct UnmixArgs {
    #[arg(long)]
    library: PathBuf,
    #[arg(long)]
    raster: PathBuf,
    #[arg(long)]
    fractions: PathBuf,
    #[arg(long)]
    histogram: PathBuf,
    #[arg(long)]
    sparsity_w: Option<usize>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    estimated: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    table: Option<PathBuf>,
    #[arg(long)]
    scatter_dir: Option<PathBuf>,
    #[arg(long, value_parser = parse_rmse)]
    rmse_convention: Option<RmseConvention>,
}

fn parse_rmse(s: &str) -> Result<RmseConvention, String> {
    match s {
        "standard" => Ok(RmseConvention::Standard),
        "literal" => Ok(RmseConvention::Literal),
        _ => Err(format!(
            "unknown convention `{s}` (expected standard or literal)"
        )),
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_overrides(cfg: &mut PipelineConfig, command: &Command) {
    match command {
        Command::Synth(a) => {
            let s = &mut cfg.synth;
            set(&mut s.seed, a.seed);
            set(&mut s.n_endmembers, a.n_endmembers);
            set(&mut s.n_classes, a.n_classes);
            set(&mut s.bands, a.bands);
            set(&mut s.n_pixels, a.n_pixels);
            set(&mut s.sparsity, a.sparsity);
            set(&mut s.noise_sigma, a.noise_sigma);
            set(&mut s.dirichlet_alpha, a.dirichlet_alpha);
        }
        Command::Extract(a) => {
            let x = &mut cfg.archetypes;
            set(&mut x.mode, a.mode);
            set(&mut x.k_archetypes, a.k_archetypes);
            set(&mut x.runs, a.runs);
            set(&mut x.seed, a.seed);
            if a.sigma.is_some() {
                x.sigma = a.sigma;
            }
            if a.no_lof {
                cfg.preprocess.lof_enabled = false;
            }
            set(&mut cfg.preprocess.neighbors_k, a.neighbors_k);
            set(&mut cfg.preprocess.quantile, a.quantile);
        }
        Command::Optimize(a) => {
            set(&mut cfg.run.run_repeats, a.run_repeats);
            let m = &mut cfg.mcmc;
            set(&mut m.seed, a.seed);
            set(&mut m.prior_lambda, a.prior_lambda);
            set(&mut m.max_elements, a.max_elements);
            set(&mut m.iterations, a.iterations);
            if a.initial_temperature.is_some() {
                m.initial_temperature = a.initial_temperature;
            }
            set(&mut m.cooling_factor, a.cooling_factor);
            set(&mut m.sparsity_w, a.sparsity_w);
            m.require_all_classes |= a.require_all_classes;
            m.incremental |= a.incremental;
        }
        Command::Unmix(a) => set(&mut cfg.solver.sparsity_w, a.sparsity_w),
        Command::Evaluate(a) => set(&mut cfg.metrics.rmse_convention, a.rmse_convention),
    }
}

fn run(cli: Cli) -> sparse_unmix::Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    apply_overrides(&mut cfg, &cli.command);
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    match &cli.command {
        Command::Synth(a) => {
            let out = cmd_synth(&cfg, &a.out_dir)?;
            log::info!(
                "wrote {}, {}, {}",
                out.endmembers.display(),
                out.raster.display(),
                out.reference.display()
            );
        }
        Command::Extract(a) => {
            let labels = match (&a.reference, &a.labels) {
                (Some(r), _) => LabelSource::Reference(r.clone()),
                (None, Some(l)) => LabelSource::Labels(l.clone()),
                (None, None) => unreachable!("clap requires one label source"),
            };
            let report = cmd_extract(&cfg, &a.raster, &labels, &a.out)?;
            for (path, lib) in report.outputs.iter().zip(&report.libraries) {
                println!("{}: {} archetypes", path.display(), lib.len());
            }
        }
        Command::Optimize(a) => {
            let report =
                cmd_optimize(&cfg, &a.pool, &a.raster, a.reference.as_deref(), &a.out_dir)?;
            print!("{}", report.to_key_value());
        }
        Command::Unmix(a) => {
            let report = cmd_unmix(&cfg, &a.library, &a.raster, &a.fractions, &a.histogram)?;
            println!("unmixed {} pixels", report.fractions.len());
        }
        Command::Evaluate(a) => {
            let report = cmd_evaluate(
                &cfg,
                &a.estimated,
                &a.reference,
                &a.out,
                a.table.as_deref(),
                a.scatter_dir.as_deref(),
            )?;
            print!("{}", report.to_key_value());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
