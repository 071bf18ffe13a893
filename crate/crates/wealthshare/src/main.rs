//! Command-line driver for the wealth-share simulator.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use std::fs;
use std::path::PathBuf;
use wealthshare::config::RunConfig;
use wealthshare::csvio;
use wealthshare::experiment::{
    emit_fig1, emit_fig2, emit_fig3, run_experiment, sweep, SweepPoint, SweepSpec,
    FIG1_PROGRESSIVITIES, WORKERS_ENV,
};
use wealthshare::meanfield::{
    duplicate_to_fixed_point, relax_to_fixed_point, DiscreteShareList, RankingFunction,
    DEFAULT_RELAX_MAX_ITERATIONS, DEFAULT_RELAX_TOLERANCE,
};
use wealthshare::model::{
    field_to_redistribution, FactorDistribution, ModelParams, TaxBase, DEFAULT_FLOOR,
};
use wealthshare::stats::fit_power_law;

#[derive(Parser)]
#[command(
    name = "wealthshare",
    about = "Wealth-share dynamics under wealth-dependent taxation",
    long_about = None,
    after_help = format!("Set {WORKERS_ENV} to bound the number of worker threads.")
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one multi-replica simulation and write its run directory.
    Simulate(RunArgs),
    /// Run the order parameter over a grid of progressivity or field values.
    Sweep(SweepArgs),
    /// Solve the deterministic mean-field steady state.
    Meanfield(MeanfieldArgs),
    /// Fit a power law to (x, y[, yerr]) CSV data.
    Fit(FitArgs),
    /// Emit residual-share trajectories per progressivity value.
    Fig1(Fig1Args),
    /// Emit the steady-state rank profile (decimal logarithm).
    Fig2(RunArgs),
    /// Emit order-parameter curves and power-law fit summaries.
    Fig3(Fig3Args),
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Load a run configuration file; explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of agents N.
    #[arg(long)]
    agents: Option<usize>,
    /// Flat tax rate A in (0, 1).
    #[arg(long)]
    flat_rate: Option<f64>,
    /// Progressivity slope p (negative = regressive).
    #[arg(long, short = 'p', allow_hyphen_values = true)]
    progressivity: Option<f64>,
    /// Redistributed fraction R of collected taxes.
    #[arg(long, conflicts_with = "field")]
    redistribution: Option<f64>,
    /// External field strength h; sets R = exp(-1/h).
    #[arg(long)]
    field: Option<f64>,
    /// Tax base: accumulated-wealth or annual-gains.
    #[arg(long)]
    tax_base: Option<String>,
    /// Share floor; entries below it copy their richer neighbour.
    #[arg(long)]
    floor: Option<f64>,
    /// Growth factor atoms as f:q pairs, e.g. 2:0.5,1:0.5.
    #[arg(long)]
    factors: Option<String>,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// Years per replica T.
    #[arg(long)]
    years: Option<u64>,
    /// Number of replicas S.
    #[arg(long)]
    samples: Option<u32>,
    /// Master seed; replica streams derive from (seed, replica index).
    #[arg(long)]
    seed: Option<u64>,
    /// Trailing fraction of years entering time averages.
    #[arg(long)]
    window_fraction: Option<f64>,
    /// Years between checkpoints (0 = none).
    #[arg(long)]
    checkpoint_interval: Option<u64>,
    /// Comma-separated 1-based ranks to time-average.
    #[arg(long)]
    ranks: Option<String>,
    /// Output directory.
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated progressivity grid (floor regime).
    #[arg(long, allow_hyphen_values = true)]
    p_values: Option<String>,
    /// Comma-separated field strengths applied at the base progressivity.
    #[arg(long)]
    h_values: Option<String>,
}

#[derive(Args)]
struct MeanfieldArgs {
    #[command(flatten)]
    model: ModelArgs,
    /// relaxation, duplicate, or both.
    #[arg(long, default_value = "relaxation")]
    solver: String,
    #[arg(long, default_value_t = DEFAULT_RELAX_TOLERANCE)]
    tolerance: f64,
    #[arg(long, default_value_t = DEFAULT_RELAX_MAX_ITERATIONS)]
    max_iterations: u64,
    #[arg(long, short = 'o')]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// CSV with header x,y[,yerr].
    #[arg(long, short = 'i')]
    input: PathBuf,
    /// Lower edge of the fit range.
    #[arg(long, default_value_t = 0.0)]
    min_x: f64,
    /// Upper edge of the fit range.
    #[arg(long, default_value_t = f64::MAX)]
    max_x: f64,
}

#[derive(Args)]
struct Fig1Args {
    #[command(flatten)]
    run: RunArgs,
    /// Progressivity values; default: the critical point plus four pairs.
    #[arg(long, allow_hyphen_values = true)]
    p_values: Option<String>,
}

#[derive(Args)]
struct Fig3Args {
    #[command(flatten)]
    run: RunArgs,
    /// Progressivity grid for the main curve and field curves.
    #[arg(long, allow_hyphen_values = true)]
    p_grid: String,
    /// Field strengths for the smooth curves and the response fit.
    #[arg(long, default_value = "0.05,0.03,0.01")]
    h_values: String,
    /// Upper progressivity edge of the beta fit.
    #[arg(long, default_value_t = 0.01)]
    beta_fit_max_p: f64,
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .with_context(|| format!("bad number {v:?}"))
        })
        .collect()
}

fn build_model(args: &ModelArgs, base: Option<ModelParams>) -> Result<ModelParams> {
    let mut model = base.unwrap_or(ModelParams {
        agents: 1000,
        flat_rate: 0.1,
        progressivity: 0.0,
        redistribution: 0.0,
        tax_base: TaxBase::AccumulatedWealth,
        floor: DEFAULT_FLOOR,
        dist: FactorDistribution::binary_half(),
    });
    if let Some(n) = args.agents {
        model.agents = n;
    }
    if let Some(a) = args.flat_rate {
        model.flat_rate = a;
    }
    if let Some(p) = args.progressivity {
        model.progressivity = p;
    }
    if let Some(r) = args.redistribution {
        model.redistribution = r;
    }
    if let Some(h) = args.field {
        model.redistribution = field_to_redistribution(h)?;
    }
    if let Some(tb) = &args.tax_base {
        model.tax_base = TaxBase::parse(tb)?;
    }
    if let Some(f) = args.floor {
        model.floor = f;
    }
    if let Some(spec) = &args.factors {
        let atoms = spec
            .split(',')
            .map(|pair| -> Result<(f64, f64)> {
                let (f, q) = pair
                    .split_once(':')
                    .with_context(|| format!("bad factor atom {pair:?}"))?;
                Ok((f.trim().parse()?, q.trim().parse()?))
            })
            .collect::<Result<Vec<_>>>()?;
        model.dist = FactorDistribution::new(atoms)?;
    }
    model.validate()?;
    Ok(model)
}

fn build_config(args: &RunArgs) -> Result<RunConfig> {
    let base = match &args.model.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            Some(RunConfig::parse(&text)?)
        }
        None => None,
    };
    let model = build_model(&args.model, base.as_ref().map(|c| c.model.clone()))?;
    let mut config = match base {
        Some(c) => RunConfig { model, ..c },
        None => RunConfig::new(model, 1 << 22, 8, 1),
    };
    if let Some(t) = args.years {
        config.years = t;
    }
    if let Some(s) = args.samples {
        config.samples = s;
    }
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    if let Some(w) = args.window_fraction {
        config.window_fraction = w;
    }
    if let Some(c) = args.checkpoint_interval {
        config.checkpoint_interval = c;
    }
    if let Some(ranks) = &args.ranks {
        config.ranks = ranks
            .split(',')
            .map(|r| r.trim().parse::<usize>().context("bad rank"))
            .collect::<Result<Vec<_>>>()?;
    }
    config.validate().map_err(|e| anyhow::anyhow!("{e}"))?;
    Ok(config)
}

fn cmd_simulate(args: &RunArgs) -> Result<()> {
    let config = build_config(args)?;
    let result = run_experiment(&config, args.out.as_deref())?;
    println!("config_hash {}", result.config_hash);
    println!(
        "order_parameter {} +- {}",
        csvio::fmt_f64(result.order_parameter.0),
        csvio::fmt_f64(result.order_parameter.1)
    );
    if let Some(dir) = &args.out {
        println!("run directory {}", dir.display());
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let base = build_config(&args.run)?;
    let mut points = Vec::new();
    if let Some(ps) = &args.p_values {
        points.extend(parse_f64_list(ps)?.into_iter().map(SweepPoint::Progressivity));
    }
    if let Some(hs) = &args.h_values {
        points.extend(parse_f64_list(hs)?.into_iter().map(SweepPoint::Field));
    }
    if points.is_empty() {
        bail!("provide --p-values and/or --h-values");
    }
    let results = sweep(&SweepSpec { base, points })?;
    let mut rows = Vec::new();
    for r in &results {
        let label = match r.point {
            SweepPoint::Progressivity(_) => "p",
            SweepPoint::Field(_) => "h",
        };
        match &r.error {
            None => {
                println!(
                    "{label} {:+} m {} +- {}",
                    r.point.value(),
                    csvio::fmt_f64(r.order_parameter),
                    csvio::fmt_f64(r.order_parameter_err)
                );
                rows.push((r.point.value(), r.order_parameter, r.order_parameter_err));
            }
            Some(e) => eprintln!("{label} {:+} failed: {e}", r.point.value()),
        }
    }
    if let Some(dir) = &args.run.out {
        fs::create_dir_all(dir)?;
        csvio::write_xy(&dir.join("sweep.csv"), "x,m,stderr", &rows)?;
        println!("wrote {}", dir.join("sweep.csv").display());
    }
    Ok(())
}

fn cmd_meanfield(args: &MeanfieldArgs) -> Result<()> {
    let mut model = build_model(&args.model, None)?;
    if args.model.agents.is_none() && args.model.config.is_none() {
        model.agents = 64; // mean-field default: modest agent count
    }
    model.validate()?;
    let run_relax = matches!(args.solver.as_str(), "relaxation" | "both");
    let run_dup = matches!(args.solver.as_str(), "duplicate" | "both");
    if !run_relax && !run_dup {
        bail!("unknown solver {:?}", args.solver);
    }
    let mut relax_shares: Option<Vec<f64>> = None;
    if run_relax {
        let init = RankingFunction::uniform_guess(model.agents);
        let (state, report) =
            relax_to_fixed_point(&model, &init, args.tolerance, args.max_iterations)?;
        println!(
            "relaxation converged in {} iterations (residual {})",
            report.iterations,
            csvio::fmt_f64(report.residual)
        );
        let shares = state.ranking.share_list().expect("discretised state");
        println!("top_share {}", csvio::fmt_f64(shares[0]));
        if let Some(dir) = &args.out {
            fs::create_dir_all(dir)?;
            let rows: Vec<(f64, f64, f64)> = shares
                .iter()
                .enumerate()
                .map(|(i, &s)| ((i + 1) as f64, s, 0.0))
                .collect();
            csvio::write_xy(&dir.join("meanfield_shares.csv"), "n,share,unused", &rows)?;
            let m = state.ranking.channel_count();
            let ranking_rows: Vec<(f64, f64, f64)> = state
                .ranking
                .channels()
                .iter()
                .enumerate()
                .map(|(j, &r)| (j as f64 / m as f64, r, 0.0))
                .collect();
            csvio::write_xy(
                &dir.join("meanfield_ranking.csv"),
                "w,r,unused",
                &ranking_rows,
            )?;
        }
        relax_shares = Some(shares);
    }
    if run_dup {
        let (fixed, iters) = duplicate_to_fixed_point(
            &model,
            &DiscreteShareList::uniform(model.agents),
            args.tolerance,
            args.max_iterations,
        )?;
        println!("duplicate-average converged in {iters} iterations");
        println!("top_share {}", csvio::fmt_f64(fixed.top()));
        if let Some(dir) = &args.out {
            fs::create_dir_all(dir)?;
            let rows: Vec<(f64, f64, f64)> = fixed
                .shares()
                .iter()
                .enumerate()
                .map(|(i, &s)| ((i + 1) as f64, s, 0.0))
                .collect();
            csvio::write_xy(
                &dir.join("meanfield_duplicate_shares.csv"),
                "n,share,unused",
                &rows,
            )?;
        }
        if let Some(relax) = &relax_shares {
            let dev = relax
                .iter()
                .zip(fixed.shares())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            println!("solver agreement sup-norm {}", csvio::fmt_f64(dev));
        }
    }
    Ok(())
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let points = csvio::read_fit_points(&args.input)?;
    let fit = fit_power_law(&points, (args.min_x, args.max_x))?;
    println!(
        "exponent {} +- {}",
        csvio::fmt_f64(fit.exponent),
        csvio::fmt_f64(fit.exponent_stderr)
    );
    println!("prefactor {}", csvio::fmt_f64(fit.prefactor));
    println!("goodness {}", csvio::fmt_f64(fit.goodness));
    println!("points {}", fit.n_points);
    Ok(())
}

fn cmd_fig1(args: &Fig1Args) -> Result<()> {
    let config = build_config(&args.run)?;
    let p_values = match &args.p_values {
        Some(list) => parse_f64_list(list)?,
        None => FIG1_PROGRESSIVITIES.to_vec(),
    };
    let dir = args
        .run
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("fig1"));
    let files = emit_fig1(&config, &p_values, &dir)?;
    println!("wrote {} files under {}", files.len(), dir.display());
    Ok(())
}

fn cmd_fig2(args: &RunArgs) -> Result<()> {
    let config = build_config(args)?;
    let dir = args.out.clone().unwrap_or_else(|| PathBuf::from("fig2"));
    let path = emit_fig2(&config, &dir)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_fig3(args: &Fig3Args) -> Result<()> {
    let config = build_config(&args.run)?;
    let p_grid = parse_f64_list(&args.p_grid)?;
    let h_values = parse_f64_list(&args.h_values)?;
    let dir = args
        .run
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("fig3"));
    let out = emit_fig3(&config, &p_grid, &h_values, args.beta_fit_max_p, &dir)?;
    for f in &out.files {
        println!("wrote {}", f.display());
    }
    if let Some(beta) = &out.beta_fit {
        println!(
            "beta {} +- {}",
            csvio::fmt_f64(beta.exponent),
            csvio::fmt_f64(beta.exponent_stderr)
        );
    }
    if let Some(delta) = &out.delta_fit {
        println!(
            "1/delta {} +- {}",
            csvio::fmt_f64(delta.exponent),
            csvio::fmt_f64(delta.exponent_stderr)
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Sweep(args) => cmd_sweep(args),
        Command::Meanfield(args) => cmd_meanfield(args),
        Command::Fit(args) => cmd_fit(args),
        Command::Fig1(args) => cmd_fig1(args),
        Command::Fig2(args) => cmd_fig2(args),
        Command::Fig3(args) => cmd_fig3(args),
    }
}
