//! Run configuration: a TOML file with `[model]`, `[solver]`, `[simulation]`
//! and `[output]` tables. Only `model.beta` and `model.agents` (alias `M`) are
//! required; everything else defaults to the reference setting.

use std::path::{Path, PathBuf};

use mfe_core::mfe::Step3Schedule;
use mfe_core::sim::{InitialQueues, SimConfig};
use mfe_core::{
    BidCdf, BidGrid, BidPolicy, DistSpec, HoldingCost, IntegralConvention, Law, MfeOptions,
    ModelParams, QueueDist, StateGrid,
};
use serde::{Deserialize, Serialize};

/// A configuration problem, tagged with the offending key.
#[derive(Debug, thiserror::Error)]
#[error("{path}: {reason}")]
pub struct ConfigError {
    pub path: String,
    pub reason: String,
}

impl ConfigError {
    fn new(path: impl Into<String>, reason: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub simulation: SimulationConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub beta: f64,
    /// Agents per cell.
    #[serde(alias = "M")]
    pub agents: usize,
    #[serde(default = "default_service")]
    pub service: f64,
    #[serde(default = "default_cost_exponent")]
    pub cost_exponent: f64,
    #[serde(default = "one")]
    pub cost_scale: f64,
    #[serde(default = "default_state_step")]
    pub state_step: f64,
    #[serde(default = "default_state_count")]
    pub state_count: usize,
    #[serde(default = "default_bid_step")]
    pub bid_step: f64,
    #[serde(default = "default_bid_count")]
    pub bid_count: usize,
    #[serde(default = "default_headroom")]
    pub value_headroom: usize,
    #[serde(default = "unit_uniform")]
    pub arrival: DistSpec,
    #[serde(default = "unit_uniform")]
    pub regeneration: DistSpec,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    SingleTransition,
    ConvergeInner,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub epsilon: f64,
    pub max_outer: usize,
    pub value_tol: f64,
    pub value_max_iter: usize,
    pub damping: f64,
    pub schedule: ScheduleKind,
    /// Only read by the `converge_inner` schedule.
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub integral: IntegralConvention,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.008,
            max_outer: 100,
            value_tol: 1e-6,
            value_max_iter: 10_000,
            damping: 0.0,
            schedule: ScheduleKind::SingleTransition,
            inner_tol: 1e-10,
            inner_max_iter: 100_000,
            integral: IntegralConvention::StepWeighted,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialKind {
    /// i.i.d. from the solver's stationary law.
    #[default]
    Stationary,
    Regeneration,
    Zero,
}

/// A deviation tried by `best-response`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Challenger {
    /// The equilibrium bid curve times `factor`.
    Scaled {
        factor: f64,
    },
    /// Always bid the `u`-quantile of the equilibrium bid law.
    Quantile {
        u: f64,
    },
    Constant {
        bid: f64,
    },
    /// Always bid the top of the bid grid.
    MaxBid,
}

impl Challenger {
    pub fn label(&self) -> String {
        match self {
            Challenger::Scaled { factor } => format!("scaled_{factor}"),
            Challenger::Quantile { u } => format!("quantile_{u}"),
            Challenger::Constant { bid } => format!("constant_{bid}"),
            Challenger::MaxBid => "max_bid".into(),
        }
    }

    pub fn policy(&self, theta: &BidPolicy, rho: &BidCdf) -> mfe_core::Result<BidPolicy> {
        let grid = *theta.grid();
        match self {
            Challenger::Scaled { factor } => theta.scaled(*factor),
            Challenger::Quantile { u } => BidPolicy::constant(grid, rho.quantile(*u)),
            Challenger::Constant { bid } => BidPolicy::constant(grid, *bid),
            Challenger::MaxBid => BidPolicy::constant(grid, rho.grid().max()),
        }
    }
}

pub fn standard_challengers() -> Vec<Challenger> {
    vec![
        Challenger::Scaled { factor: 0.5 },
        Challenger::Scaled { factor: 2.0 },
        Challenger::Quantile { u: 0.25 },
        Challenger::Quantile { u: 0.5 },
        Challenger::Quantile { u: 0.75 },
        Challenger::MaxBid,
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    /// Number of cells.
    #[serde(alias = "N")]
    pub cells: usize,
    pub horizon: usize,
    /// Fraction of the horizon excluded from the histograms.
    pub burn_in: f64,
    pub seed: u64,
    /// Monte Carlo replications for the value, best-response and chaos runs.
    pub replications: usize,
    /// Starting queue of the tagged agent in value and best-response runs.
    pub q0: f64,
    pub initial: InitialKind,
    pub record_trace: bool,
    pub value_estimate: bool,
    pub eps_nash: bool,
    pub chaos: bool,
    pub chaos_pairs: usize,
    pub chaos_horizon: usize,
    pub challengers: Vec<Challenger>,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            cells: 20,
            horizon: 1000,
            burn_in: 0.2,
            seed: 1,
            replications: 1000,
            q0: 0.0,
            initial: InitialKind::Stationary,
            record_trace: false,
            value_estimate: true,
            eps_nash: false,
            chaos: false,
            chaos_pairs: 10,
            chaos_horizon: 20,
            challengers: standard_challengers(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

fn default_service() -> f64 {
    5.0
}
fn default_cost_exponent() -> f64 {
    2.0
}
fn one() -> f64 {
    1.0
}
fn default_state_step() -> f64 {
    0.01
}
fn default_state_count() -> usize {
    2001
}
fn default_bid_step() -> f64 {
    0.15
}
fn default_bid_count() -> usize {
    3001
}
fn default_headroom() -> usize {
    mfe_core::mdp::DEFAULT_VALUE_HEADROOM
}
fn unit_uniform() -> DistSpec {
    DistSpec::Uniform { lo: 0.0, hi: 1.0 }
}

pub fn parse_str(text: &str) -> Result<RunConfig, ConfigError> {
    let de = toml::de::Deserializer::parse(text)
        .map_err(|e| ConfigError::new("<file>", e.to_string()))?;
    let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let reason = inner.message().to_string();
        ConfigError::new(if path == "." { "<root>".into() } else { path }, reason)
    })?;
    config.validate()?;
    Ok(config)
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ConfigError::new("<file>", format!("cannot read {}: {e}", path.display())))?;
    parse_str(&text)
}

fn positive(path: &str, x: f64) -> Result<(), ConfigError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::new(path, format!("must be positive, got {x}")))
    }
}

fn at_least(path: &str, n: usize, min: usize) -> Result<(), ConfigError> {
    if n >= min {
        Ok(())
    } else {
        Err(ConfigError::new(
            path,
            format!("must be at least {min}, got {n}"),
        ))
    }
}

impl RunConfig {
    /// The TOML form written next to every run's outputs.
    pub fn echo(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        if !(m.beta > 0.0 && m.beta < 1.0) {
            return Err(ConfigError::new(
                "model.beta",
                format!("must lie in (0, 1), got {}", m.beta),
            ));
        }
        at_least("model.agents", m.agents, 1)?;
        positive("model.service", m.service)?;
        if !(m.cost_exponent > 1.0 && m.cost_exponent.is_finite()) {
            return Err(ConfigError::new(
                "model.cost_exponent",
                format!(
                    "must exceed 1 for a strictly convex cost, got {}",
                    m.cost_exponent
                ),
            ));
        }
        positive("model.cost_scale", m.cost_scale)?;
        positive("model.state_step", m.state_step)?;
        at_least("model.state_count", m.state_count, 2)?;
        positive("model.bid_step", m.bid_step)?;
        at_least("model.bid_count", m.bid_count, 2)?;
        let grid = self.state_grid()?;
        m.arrival
            .discretize(grid)
            .map_err(|e| ConfigError::new("model.arrival", e.to_string()))?;
        m.regeneration
            .discretize(grid)
            .map_err(|e| ConfigError::new("model.regeneration", e.to_string()))?;
        self.model_params()?;

        let s = &self.solver;
        positive("solver.epsilon", s.epsilon)?;
        at_least("solver.max_outer", s.max_outer, 1)?;
        positive("solver.value_tol", s.value_tol)?;
        at_least("solver.value_max_iter", s.value_max_iter, 1)?;
        if !(0.0..1.0).contains(&s.damping) {
            return Err(ConfigError::new(
                "solver.damping",
                format!("must lie in [0, 1), got {}", s.damping),
            ));
        }
        positive("solver.inner_tol", s.inner_tol)?;
        at_least("solver.inner_max_iter", s.inner_max_iter, 1)?;

        let sim = &self.simulation;
        at_least("simulation.cells", sim.cells, 1)?;
        at_least("simulation.horizon", sim.horizon, 1)?;
        if !(0.0..1.0).contains(&sim.burn_in) {
            return Err(ConfigError::new(
                "simulation.burn_in",
                format!("must lie in [0, 1), got {}", sim.burn_in),
            ));
        }
        at_least("simulation.replications", sim.replications, 4)?;
        if !(sim.q0 >= 0.0 && sim.q0 <= grid.max()) {
            return Err(ConfigError::new(
                "simulation.q0",
                format!("must lie in [0, {}], got {}", grid.max(), sim.q0),
            ));
        }
        if sim.chaos {
            at_least("simulation.chaos_pairs", sim.chaos_pairs, 1)?;
            at_least("simulation.chaos_horizon", sim.chaos_horizon, 1)?;
            if 2 * sim.chaos_pairs > sim.cells * m.agents {
                return Err(ConfigError::new(
                    "simulation.chaos_pairs",
                    format!(
                        "{} pairs need more than {} agents",
                        sim.chaos_pairs,
                        sim.cells * m.agents
                    ),
                ));
            }
        }
        if sim.challengers.is_empty() {
            return Err(ConfigError::new(
                "simulation.challengers",
                "need at least one",
            ));
        }
        for (i, c) in sim.challengers.iter().enumerate() {
            let bad = match c {
                Challenger::Scaled { factor } => !(*factor >= 0.0 && factor.is_finite()),
                Challenger::Quantile { u } => !(0.0..=1.0).contains(u),
                Challenger::Constant { bid } => !(*bid >= 0.0 && bid.is_finite()),
                Challenger::MaxBid => false,
            };
            if bad {
                return Err(ConfigError::new(
                    format!("simulation.challengers[{i}]"),
                    format!("out of range: {c:?}"),
                ));
            }
        }
        Ok(())
    }

    pub fn state_grid(&self) -> Result<StateGrid, ConfigError> {
        StateGrid::new(self.model.state_step, self.model.state_count)
            .map_err(|e| ConfigError::new("model.state_count", e.to_string()))
    }

    pub fn bid_grid(&self) -> Result<BidGrid, ConfigError> {
        BidGrid::new(self.model.bid_step, self.model.bid_count)
            .map_err(|e| ConfigError::new("model.bid_count", e.to_string()))
    }

    pub fn model_params(&self) -> Result<ModelParams, ConfigError> {
        let m = &self.model;
        let state_grid = self.state_grid()?;
        let params = ModelParams {
            beta: m.beta,
            agents: m.agents,
            service: m.service,
            state_grid,
            bid_grid: self.bid_grid()?,
            arrival: Law::new(m.arrival.clone(), state_grid)
                .map_err(|e| ConfigError::new("model.arrival", e.to_string()))?,
            regen: Law::new(m.regeneration.clone(), state_grid)
                .map_err(|e| ConfigError::new("model.regeneration", e.to_string()))?,
            cost: HoldingCost {
                scale: m.cost_scale,
                exponent: m.cost_exponent,
            },
            integral: self.solver.integral,
            value_headroom: m.value_headroom,
        };
        params.validate().map_err(|e| match e {
            mfe_core::Error::InvalidParameter { name, reason } => {
                ConfigError::new(format!("model.{name}"), reason)
            }
            other => ConfigError::new("model", other.to_string()),
        })?;
        Ok(params)
    }

    pub fn mfe_options(&self) -> MfeOptions {
        let s = &self.solver;
        MfeOptions {
            value_tol: s.value_tol,
            value_max_iter: s.value_max_iter,
            schedule: match s.schedule {
                ScheduleKind::SingleTransition => Step3Schedule::SingleTransition,
                ScheduleKind::ConvergeInner => Step3Schedule::ConvergeInner {
                    tol: s.inner_tol,
                    max_iter: s.inner_max_iter,
                },
            },
            damping: s.damping,
            ..MfeOptions::default()
        }
    }

    /// `pi` is the stationary law used for `initial = "stationary"`.
    pub fn sim_config(&self, pi: Option<&QueueDist>) -> Result<SimConfig, ConfigError> {
        let sim = &self.simulation;
        let mut config = SimConfig::new(sim.cells, self.model_params()?, sim.horizon, sim.seed);
        config.burn_in = sim.burn_in;
        config.record_trace = sim.record_trace;
        config.initial = match sim.initial {
            InitialKind::Zero => InitialQueues::Zero,
            InitialKind::Regeneration => InitialQueues::Regeneration,
            InitialKind::Stationary => match pi {
                Some(pi) => InitialQueues::Tabulated(pi.clone()),
                None => {
                    return Err(ConfigError::new(
                        "simulation.initial",
                        "`stationary` needs pi.csv from a solve run",
                    ))
                }
            },
        };
        Ok(config)
    }
}
