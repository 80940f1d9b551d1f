//! The `mfe` command: solve for the mean-field equilibrium, simulate the
//! finite system under it, test deviations, and export the model inputs.
//!
//! Every command writes plot-ready CSVs and a manifest holding the effective
//! configuration, the seed and a SHA-256 of each artifact.

pub mod config;
pub mod manifest;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use mfe_core::grid::read_curve;
use mfe_core::sim::{
    chaos_correlation, eps_nash_gap, estimate_value, lqf_violation_rate, run_simulation, MeanField,
};
use mfe_core::{solve_mfe, BidCdf, BidPolicy, QueueDist};

pub use config::{parse_config, parse_str, ConfigError, RunConfig};
use manifest::Outputs;

pub const EXIT_OK: u8 = 0;
pub const EXIT_RUNTIME: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NOT_CONVERGED: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "mfe",
    version,
    about = "Mean-field auction scheduling: solver and finite-system simulator"
)]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Cap on worker threads. Results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags that take precedence over the configuration file.
#[derive(Debug, Default, Clone, Args)]
pub struct Overrides {
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    #[arg(long, global = true)]
    pub max_outer: Option<usize>,
    #[arg(long, global = true)]
    pub cells: Option<usize>,
    #[arg(long, global = true)]
    pub horizon: Option<usize>,
    #[arg(long, global = true)]
    pub replications: Option<usize>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Compute the equilibrium and write rho, pi, theta, value and residuals.
    Solve,
    /// Run the finite system and write empirical cdfs and metrics.
    Simulate {
        /// `mfe` for theta.csv from a solve run, or a `queue,bid` CSV.
        #[arg(long, default_value = "mfe")]
        policy: String,
        /// Directory holding the solve outputs; defaults to the output directory.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Estimate the gain from each configured deviation.
    BestResponse {
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Write the arrival and regeneration laws, the cost curve and the
    /// initial bid conjecture.
    Export,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::Simulate { .. } => "simulate",
            Command::BestResponse { .. } => "best-response",
            Command::Export => "export",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

/// What a successful invocation produced.
#[derive(Debug)]
pub struct Report {
    pub exit_code: u8,
    pub out_dir: PathBuf,
    pub summary: String,
}

impl Cli {
    /// Reads the file and applies flags: flag > file > default.
    pub fn effective_config(&self) -> Result<RunConfig, ConfigError> {
        let path = self.config.as_ref().ok_or_else(|| ConfigError {
            path: "--config".into(),
            reason: "a configuration file is required".into(),
        })?;
        let mut config = parse_config(path)?;
        let o = &self.overrides;
        if let Some(seed) = o.seed {
            config.simulation.seed = seed;
        }
        if let Some(eps) = o.epsilon {
            config.solver.epsilon = eps;
        }
        if let Some(n) = o.max_outer {
            config.solver.max_outer = n;
        }
        if let Some(n) = o.cells {
            config.simulation.cells = n;
        }
        if let Some(n) = o.horizon {
            config.simulation.horizon = n;
        }
        if let Some(n) = o.replications {
            config.simulation.replications = n;
        }
        if let Some(dir) = &self.out {
            config.output.dir = dir.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

pub fn run(cli: &Cli) -> Result<Report, CliError> {
    let config = cli.effective_config()?;
    match cli.workers {
        Some(0) => Err(ConfigError {
            path: "--workers".into(),
            reason: "must be at least 1".into(),
        }
        .into()),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Runtime(e.into()))?
            .install(|| dispatch(&cli.command, &config)),
        None => dispatch(&cli.command, &config),
    }
}

/// Parses `args`, runs, reports to stderr and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK });
        }
    };
    match run(&cli) {
        Ok(report) => {
            eprintln!("{}", report.summary);
            ExitCode::from(report.exit_code)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(command: &Command, config: &RunConfig) -> Result<Report, CliError> {
    let out = config.output.dir.clone();
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let mut outputs = Outputs::new(&out, command.name(), config);
    let (code, summary) = match command {
        Command::Solve => cmd_solve(config, &mut outputs)?,
        Command::Simulate { policy, from } => cmd_simulate(
            config,
            policy,
            from.as_deref().unwrap_or(&out),
            &mut outputs,
        )?,
        Command::BestResponse { from } => {
            cmd_best_response(config, from.as_deref().unwrap_or(&out), &mut outputs)?
        }
        Command::Export => cmd_export(config, &mut outputs)?,
    };
    outputs.finish(code)?;
    Ok(Report {
        exit_code: code,
        out_dir: out,
        summary,
    })
}

fn cmd_solve(config: &RunConfig, out: &mut Outputs) -> anyhow::Result<(u8, String)> {
    let params = config.model_params()?;
    let s = &config.solver;
    let sol = solve_mfe(&params, s.epsilon, s.max_outer, &config.mfe_options())?;
    out.write("rho.csv", |w| sol.rho.write_csv(w))?;
    out.write("pi.csv", |w| sol.pi.write_csv(w, "mass"))?;
    out.write("pi_cdf.csv", |w| sol.pi.write_cdf_csv(w))?;
    out.write("theta.csv", |w| sol.policy.write_csv(w))?;
    out.write("value.csv", |w| sol.value.write_csv(w))?;
    out.write("residuals.csv", |w| sol.write_residuals_csv(w))?;
    out.write_text("config.toml", &config.echo())?;
    out.result = if sol.converged {
        "converged"
    } else {
        "not_converged"
    }
    .into();
    let summary = format!(
        "{} after {} outer iterations, residual {:.3e}",
        out.result, sol.iterations, sol.residual
    );
    let code = if sol.converged {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    };
    Ok((code, summary))
}

/// The solver outputs a simulation or best-response run builds on.
pub struct Equilibrium {
    pub policy: BidPolicy,
    pub rho: BidCdf,
    pub pi: QueueDist,
}

impl Equilibrium {
    pub fn view(&self) -> MeanField<'_> {
        MeanField {
            policy: &self.policy,
            rho: &self.rho,
            pi: &self.pi,
        }
    }
}

fn read_column(
    path: &Path,
    grid: impl Iterator<Item = f64>,
    out: &mut Outputs,
) -> anyhow::Result<Vec<f64>> {
    let bytes = fs::read(path).with_context(|| format!("missing artifact {}", path.display()))?;
    out.record_input(path, &bytes);
    let (xs, ys) =
        read_curve(bytes.as_slice()).with_context(|| format!("reading {}", path.display()))?;
    let expected: Vec<f64> = grid.collect();
    if xs.len() != expected.len() {
        return Err(anyhow!(
            "{} has {} rows but the configured grid has {} points",
            path.display(),
            xs.len(),
            expected.len()
        ));
    }
    if let Some((i, (a, b))) = xs
        .iter()
        .zip(&expected)
        .enumerate()
        .find(|(_, (a, b))| (*a - *b).abs() > 1e-9)
    {
        return Err(anyhow!(
            "{} row {}: grid point {a} does not match {b}",
            path.display(),
            i + 2
        ));
    }
    Ok(ys)
}

fn read_policy(path: &Path, config: &RunConfig, out: &mut Outputs) -> anyhow::Result<BidPolicy> {
    let grid = config.state_grid()?;
    let bids = read_column(path, grid.points(), out)?;
    Ok(BidPolicy::new(grid, bids)?)
}

pub fn load_equilibrium(
    dir: &Path,
    policy: Option<&Path>,
    config: &RunConfig,
    out: &mut Outputs,
) -> anyhow::Result<Equilibrium> {
    let theta = dir.join("theta.csv");
    let policy = read_policy(policy.unwrap_or(&theta), config, out)?;
    let bid_grid = config.bid_grid()?;
    let rho = BidCdf::new(
        bid_grid,
        read_column(&dir.join("rho.csv"), bid_grid.points(), out)?,
    )?;
    let grid = config.state_grid()?;
    let pi = QueueDist::new(grid, read_column(&dir.join("pi.csv"), grid.points(), out)?)?;
    Ok(Equilibrium { policy, rho, pi })
}

fn cmd_simulate(
    config: &RunConfig,
    policy: &str,
    from: &Path,
    out: &mut Outputs,
) -> anyhow::Result<(u8, String)> {
    let custom = (policy != "mfe").then(|| PathBuf::from(policy));
    let eq = load_equilibrium(from, custom.as_deref(), config, out)?;
    let sim = config.sim_config(Some(&eq.pi))?;
    let trace = run_simulation(&sim, &eq.policy)?;
    out.write("sim_bid_cdf.csv", |w| trace.write_bid_cdf_csv(w))?;
    out.write("sim_queue_cdf.csv", |w| trace.write_queue_cdf_csv(w))?;
    if config.simulation.record_trace {
        out.write("trace.csv", |w| trace.write_records_csv(w))?;
    }

    let mut metrics: Vec<(String, f64)> = vec![
        ("cells".into(), trace.cells as f64),
        ("agents_per_cell".into(), trace.agents_per_cell as f64),
        ("horizon".into(), trace.horizon as f64),
        ("burn_in_slots".into(), trace.burn_in_slots as f64),
        ("auctions".into(), trace.auctions as f64),
        ("lqf_violations".into(), trace.lqf_violations as f64),
        ("lqf_violation_rate".into(), lqf_violation_rate(&trace)),
        ("total_payment".into(), trace.total_payment),
        ("bid_ks_distance".into(), trace.bid_ks_distance(&eq.rho)?),
    ];
    let s = &config.simulation;
    if s.value_estimate {
        let v = estimate_value(&sim, &eq.policy, &eq.rho, s.q0, s.replications)?;
        let (r, d) = (v.regenerative, v.discounted);
        metrics.extend([
            ("value_regenerative_mean".into(), r.mean),
            ("value_regenerative_half_width".into(), r.half_width),
            ("value_discounted_mean".into(), d.mean),
            ("value_discounted_half_width".into(), d.half_width),
        ]);
    }
    if s.eps_nash {
        let challengers = challenger_policies(config, &eq)?;
        let gap = eps_nash_gap(&sim, eq.view(), &challengers, s.q0, s.replications)?;
        metrics.extend([
            ("eps_nash_gap".into(), gap.gap),
            ("eps_nash_gap_half_width".into(), gap.gap_half_width),
        ]);
    }
    if s.chaos {
        let c = chaos_correlation(
            &sim,
            eq.view(),
            s.chaos_pairs,
            s.chaos_horizon,
            s.replications,
        )?;
        metrics.extend([
            ("chaos_max_abs_correlation".into(), c.max_abs),
            ("chaos_noise_band".into(), c.noise_band),
            (
                "chaos_shifted_max_abs_correlation".into(),
                c.shifted_max_abs,
            ),
        ]);
    }
    out.write("metrics.csv", |w| write_metrics(w, &metrics))?;
    let summary = format!(
        "simulated {} auctions, lqf violation rate {}, bid KS {:.4}",
        trace.auctions,
        lqf_violation_rate(&trace),
        trace.bid_ks_distance(&eq.rho)?
    );
    Ok((EXIT_OK, summary))
}

fn challenger_policies(config: &RunConfig, eq: &Equilibrium) -> anyhow::Result<Vec<BidPolicy>> {
    config
        .simulation
        .challengers
        .iter()
        .map(|c| Ok(c.policy(&eq.policy, &eq.rho)?))
        .collect()
}

fn cmd_best_response(
    config: &RunConfig,
    from: &Path,
    out: &mut Outputs,
) -> anyhow::Result<(u8, String)> {
    let eq = load_equilibrium(from, None, config, out)?;
    let sim = config.sim_config(Some(&eq.pi))?;
    let s = &config.simulation;
    let challengers = challenger_policies(config, &eq)?;
    let gap = eps_nash_gap(&sim, eq.view(), &challengers, s.q0, s.replications)?;
    out.write("nash.csv", |w| {
        let mut w = csv::Writer::from_writer(w);
        w.write_record([
            "candidate",
            "value_mean",
            "value_half_width",
            "gain_mean",
            "gain_half_width",
        ])?;
        let b = gap.baseline;
        w.write_record([
            "mfe".into(),
            b.mean.to_string(),
            b.half_width.to_string(),
            "0".into(),
            "0".into(),
        ])?;
        for (c, r) in s.challengers.iter().zip(&gap.challengers) {
            w.write_record([
                c.label(),
                r.value.mean.to_string(),
                r.value.half_width.to_string(),
                r.gain.mean.to_string(),
                r.gain.half_width.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    Ok((
        EXIT_OK,
        format!("eps-Nash gap {:.4} +/- {:.4}", gap.gap, gap.gap_half_width),
    ))
}

fn cmd_export(config: &RunConfig, out: &mut Outputs) -> anyhow::Result<(u8, String)> {
    let params = config.model_params()?;
    out.write("arrival_pmf.csv", |w| {
        params.arrival.pmf().write_csv(w, "mass")
    })?;
    out.write("arrival_cdf.csv", |w| params.arrival.pmf().write_cdf_csv(w))?;
    out.write("regeneration_pmf.csv", |w| {
        params.regen.pmf().write_csv(w, "mass")
    })?;
    out.write("regeneration_cdf.csv", |w| {
        params.regen.pmf().write_cdf_csv(w)
    })?;
    let grid = params.state_grid;
    let cost = params.cost.on_grid(&grid);
    out.write("cost.csv", |w| {
        mfe_core::grid::write_curve(w, ["queue", "cost"], grid.points(), &cost)
    })?;
    let rho0 = BidCdf::linear_ramp(params.bid_grid, mfe_core::mfe::INITIAL_RAMP_SLOPE)?;
    out.write("rho0.csv", |w| rho0.write_csv(w))?;
    Ok((EXIT_OK, "exported model inputs".into()))
}

fn write_metrics<W: std::io::Write>(w: W, metrics: &[(String, f64)]) -> mfe_core::Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["metric", "value"])?;
    for (name, value) in metrics {
        w.write_record([name.clone(), value.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
