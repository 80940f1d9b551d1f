//! The single-agent discounted bidding problem.
//!
//! Given a conjectured bid cdf `rho`, the Bellman operator is
//!
//! ```text
//! (T f)(q) = C(q) + beta E_A f(q + A) - int_0^{beta Df(q)+} p(u) du
//! Df(q)    = E_A f(q + A) - E_A f((q - s)+ + A)
//! ```
//!
//! and the optimal bid is `theta(q) = beta Df(q)+`. All expectations are exact
//! weighted sums over the arrival pmf; since arrivals live on the state grid,
//! `q + A` is a grid index shift, saturated at the last grid point.

use rayon::prelude::*;
use std::io::Write;

use crate::auction::{IntegralConvention, PaymentIntegral};
use crate::error::{Error, Result};
use crate::grid::{write_curve, BidCdf, BidGrid, Law, StateGrid};

/// Per-slot holding cost `C(q) = scale * q^exponent`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HoldingCost {
    pub scale: f64,
    pub exponent: f64,
}

impl HoldingCost {
    /// `q^exponent`; strictly convex and increasing only for `exponent > 1`.
    pub fn power(exponent: f64) -> Result<Self> {
        if !(exponent > 1.0 && exponent.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "cost_exponent",
                reason: format!("must exceed 1 for a strictly convex cost, got {exponent}"),
            });
        }
        Ok(Self {
            scale: 1.0,
            exponent,
        })
    }

    pub fn quadratic() -> Self {
        Self {
            scale: 1.0,
            exponent: 2.0,
        }
    }

    /// `C = 0`, only useful as a degenerate test case.
    pub fn zero() -> Self {
        Self {
            scale: 0.0,
            exponent: 2.0,
        }
    }

    #[inline]
    pub fn eval(&self, q: f64) -> f64 {
        if self.exponent == 2.0 {
            self.scale * q * q
        } else {
            self.scale * q.max(0.0).powf(self.exponent)
        }
    }

    pub fn on_grid(&self, grid: &StateGrid) -> Vec<f64> {
        grid.points().map(|q| self.eval(q)).collect()
    }

    /// Increments `C(q_{m+1}) - C(q_m)` strictly increasing on the grid.
    pub fn is_strictly_convex_on(&self, grid: &StateGrid) -> bool {
        let c = self.on_grid(grid);
        let d: Vec<f64> = c.windows(2).map(|w| w[1] - w[0]).collect();
        d.windows(2).all(|w| w[1] > w[0]) && d[0] >= 0.0
    }
}

/// Everything the agent's decision problem and the queue chain depend on.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// Continuation probability, equivalently the discount factor.
    pub beta: f64,
    /// Agents per cell.
    pub agents: usize,
    /// Workload removed from the winner per slot.
    pub service: f64,
    pub state_grid: StateGrid,
    pub bid_grid: BidGrid,
    pub arrival: Law,
    pub regen: Law,
    pub cost: HoldingCost,
    pub integral: IntegralConvention,
    /// Extra state cells the value function carries above the state grid.
    /// Saturating `q + A` at a hard ceiling bends the bid curve down just
    /// below it; solving on a taller grid keeps that artifact out of the
    /// states the chain actually uses.
    pub value_headroom: usize,
}

impl ModelParams {
    /// The three published settings share everything except `beta` and `M`:
    /// states `{0.01 m : m <= 2000}`, bids `{0.15 m : m <= 3000}`, uniform
    /// `[0, 1]` arrivals and regenerations, `C(q) = q^2`, 5 units of service.
    pub fn reference(beta: f64, agents: usize) -> Result<Self> {
        let state_grid = StateGrid::new(0.01, 2001)?;
        let bid_grid = BidGrid::new(0.15, 3001)?;
        let params = Self {
            beta,
            agents,
            service: 5.0,
            state_grid,
            bid_grid,
            arrival: Law::uniform(0.0, 1.0, state_grid)?,
            regen: Law::uniform(0.0, 1.0, state_grid)?,
            cost: HoldingCost::quadratic(),
            integral: IntegralConvention::StepWeighted,
            value_headroom: DEFAULT_VALUE_HEADROOM,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidParameter {
                name: "beta",
                reason: format!("must lie in (0, 1), got {}", self.beta),
            });
        }
        if self.agents == 0 {
            return Err(Error::InvalidParameter {
                name: "M",
                reason: "need at least one agent per cell".into(),
            });
        }
        if !(self.service > 0.0 && self.service.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "service_amount",
                reason: format!("must be positive, got {}", self.service),
            });
        }
        self.arrival
            .pmf()
            .grid()
            .check_same(&self.state_grid, "arrival law")?;
        self.regen
            .pmf()
            .grid()
            .check_same(&self.state_grid, "regeneration law")?;
        if self.cost.scale < 0.0 {
            return Err(Error::InvalidParameter {
                name: "cost",
                reason: "holding cost must be nonnegative".into(),
            });
        }
        Ok(())
    }

    /// The state grid extended by `value_headroom` cells.
    pub fn value_grid(&self) -> StateGrid {
        StateGrid::new(
            self.state_grid.step(),
            self.state_grid.count() + self.value_headroom,
        )
        .expect("extension of a valid grid")
    }

    /// Service amount in state-grid cells, `round(s / step)`.
    #[inline]
    pub fn service_cells(&self) -> usize {
        (self.service / self.state_grid.step()).round() as usize
    }

    /// `w(q) = max(C(q), 1)` on the value grid.
    pub fn weight(&self) -> Vec<f64> {
        self.cost
            .on_grid(&self.value_grid())
            .into_iter()
            .map(|c| c.max(1.0))
            .collect()
    }

    /// Sparse arrival support `(cells, probability)`.
    pub(crate) fn arrival_support(&self) -> Vec<(usize, f64)> {
        sparse(self.arrival.pmf().weights())
    }
}

/// Headroom used by the reference settings: one full service amount.
pub const DEFAULT_VALUE_HEADROOM: usize = 500;

pub(crate) fn sparse(weights: &[f64]) -> Vec<(usize, f64)> {
    weights
        .iter()
        .enumerate()
        .filter(|(_, w)| **w > 0.0)
        .map(|(j, w)| (j, *w))
        .collect()
}

/// `w`-norm `sup |f / w|`.
pub fn w_norm(f: &[f64], weight: &[f64]) -> f64 {
    f.iter()
        .zip(weight)
        .map(|(x, w)| (x / w).abs())
        .fold(0.0, f64::max)
}

/// Cost-to-go on the value grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueFunction {
    grid: StateGrid,
    values: Vec<f64>,
}

impl ValueFunction {
    pub fn new(grid: StateGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.count() {
            return Err(Error::GridMismatch(format!(
                "value function has {} entries for {} states",
                values.len(),
                grid.count()
            )));
        }
        Ok(Self { grid, values })
    }

    #[inline]
    pub fn grid(&self) -> &StateGrid {
        &self.grid
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_curve(writer, ["queue", "value"], self.grid.points(), &self.values)
    }
}

/// Bid as a function of queue length, linearly interpolated between grid
/// points and held constant past the last one.
#[derive(Clone, Debug, PartialEq)]
pub struct BidPolicy {
    grid: StateGrid,
    bids: Vec<f64>,
}

impl BidPolicy {
    pub fn new(grid: StateGrid, bids: Vec<f64>) -> Result<Self> {
        if bids.len() != grid.count() {
            return Err(Error::GridMismatch(format!(
                "policy has {} bids for {} states",
                bids.len(),
                grid.count()
            )));
        }
        if let Some(b) = bids.iter().find(|b| !(**b >= 0.0 && b.is_finite())) {
            return Err(Error::NegativeBid(*b));
        }
        Ok(Self { grid, bids })
    }

    pub fn constant(grid: StateGrid, bid: f64) -> Result<Self> {
        Self::new(grid, vec![bid; grid.count()])
    }

    #[inline]
    pub fn grid(&self) -> &StateGrid {
        &self.grid
    }

    #[inline]
    pub fn bids(&self) -> &[f64] {
        &self.bids
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.grid, self.bids.iter().map(|b| b * factor).collect())
    }

    pub fn eval(&self, q: f64) -> f64 {
        if q <= 0.0 {
            return self.bids[0];
        }
        let r = q / self.grid.step();
        let k = r.floor();
        let last = self.grid.count() - 1;
        if k >= last as f64 {
            return self.bids[last];
        }
        let k = k as usize;
        let t = r - k as f64;
        self.bids[k] + t * (self.bids[k + 1] - self.bids[k])
    }

    pub fn is_nondecreasing(&self) -> bool {
        self.first_decrease().is_none()
    }

    pub fn first_decrease(&self) -> Option<usize> {
        self.bids.windows(2).position(|w| w[1] < w[0])
    }

    pub fn is_strictly_increasing(&self) -> bool {
        self.bids.windows(2).all(|w| w[1] > w[0])
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        write_curve(writer, ["queue", "bid"], self.grid.points(), &self.bids)
    }
}

/// `G[m] = E_A f(q_m + A)` with saturation at the last grid point.
pub(crate) fn arrival_expectation(f: &[f64], support: &[(usize, f64)]) -> Vec<f64> {
    let last = f.len() - 1;
    (0..f.len())
        .into_par_iter()
        .with_min_len(256)
        .map(|m| {
            support
                .iter()
                .map(|(j, w)| w * f[(m + j).min(last)])
                .sum::<f64>()
        })
        .collect()
}

/// `Df(q_m) = G[m] - G[(m - s)+]` from a precomputed `G`.
#[inline]
fn delta_from(g: &[f64], m: usize, shift: usize) -> f64 {
    g[m] - g[m.saturating_sub(shift)]
}

/// `E_A f(q + A) - E_A f((q - s)+ + A)` at state index `m`.
pub fn delta_f(f: &ValueFunction, params: &ModelParams, m: usize) -> f64 {
    let support = params.arrival_support();
    let last = f.values.len() - 1;
    let at = |base: usize| -> f64 {
        support
            .iter()
            .map(|(j, w)| w * f.values[(base + j).min(last)])
            .sum()
    };
    at(m) - at(m.saturating_sub(params.service_cells()))
}

/// The Bellman operator for a fixed conjecture, with its cached ingredients.
#[derive(Clone, Debug)]
pub struct BellmanOperator<'a> {
    params: &'a ModelParams,
    integral: PaymentIntegral,
    support: Vec<(usize, f64)>,
    cost: Vec<f64>,
    weight: Vec<f64>,
    shift: usize,
}

impl<'a> BellmanOperator<'a> {
    pub fn new(rho: &BidCdf, params: &'a ModelParams) -> Result<Self> {
        rho.grid().check_same(&params.bid_grid, "bid cdf")?;
        Ok(Self {
            params,
            integral: PaymentIntegral::new(rho, params.agents, params.integral),
            support: params.arrival_support(),
            cost: params.cost.on_grid(&params.value_grid()),
            weight: params.weight(),
            shift: params.service_cells(),
        })
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        let beta = self.params.beta;
        let g = arrival_expectation(f, &self.support);
        (0..f.len())
            .into_par_iter()
            .with_min_len(256)
            .map(|m| {
                let bid = beta * delta_from(&g, m, self.shift).max(0.0);
                self.cost[m] + beta * g[m] - self.integral.eval(bid)
            })
            .collect()
    }

    /// The same operator with the infimum over bids taken explicitly on the
    /// bid grid: `C + beta G + min_x [r(x) - p(x) beta Df]`.
    pub fn apply_by_minimization(&self, f: &[f64]) -> Vec<f64> {
        let beta = self.params.beta;
        let g = arrival_expectation(f, &self.support);
        let bids = self.params.bid_grid.count();
        let payments: Vec<f64> = (0..bids).map(|k| self.integral.payment_at(k)).collect();
        (0..f.len())
            .map(|m| {
                let gain = beta * delta_from(&g, m, self.shift);
                let best = (0..bids)
                    .map(|k| payments[k] - self.integral.win_at(k) * gain)
                    .fold(f64::INFINITY, f64::min);
                self.cost[m] + beta * g[m] + best
            })
            .collect()
    }

    pub fn residual(&self, f: &[f64], tf: &[f64]) -> f64 {
        let diff: Vec<f64> = tf.iter().zip(f).map(|(a, b)| a - b).collect();
        w_norm(&diff, &self.weight)
    }
}

/// One application of `T_rho`.
pub fn bellman_apply(
    f: &ValueFunction,
    rho: &BidCdf,
    params: &ModelParams,
) -> Result<ValueFunction> {
    f.grid.check_same(&params.value_grid(), "value function")?;
    let op = BellmanOperator::new(rho, params)?;
    ValueFunction::new(f.grid, op.apply(&f.values))
}

/// Output of value iteration.
#[derive(Clone, Debug)]
pub struct ValueSolution {
    pub value: ValueFunction,
    /// Number of operator applications performed.
    pub iterations: usize,
    /// `||T f_n - f_n||_w` for every iterate, the last one below tolerance.
    pub residuals: Vec<f64>,
}

/// Value iteration from `f_0 = C` until `||T f - f||_w < tol`. The returned
/// function is the last iterate whose residual was verified.
pub fn solve_value(
    rho: &BidCdf,
    params: &ModelParams,
    tol: f64,
    max_iter: usize,
) -> Result<ValueSolution> {
    solve_value_from(
        rho,
        params,
        params.cost.on_grid(&params.value_grid()),
        tol,
        max_iter,
    )
}

pub fn solve_value_from(
    rho: &BidCdf,
    params: &ModelParams,
    start: Vec<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<ValueSolution> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter {
            name: "value_tol",
            reason: format!("must be positive, got {tol}"),
        });
    }
    let op = BellmanOperator::new(rho, params)?;
    let grid = params.value_grid();
    if start.len() != grid.count() {
        return Err(Error::GridMismatch(format!(
            "start has {} entries for {} value states",
            start.len(),
            grid.count()
        )));
    }
    let mut f = start;
    let mut residuals = Vec::new();
    for n in 0..max_iter {
        let tf = op.apply(&f);
        let r = op.residual(&f, &tf);
        residuals.push(r);
        if r < tol {
            return Ok(ValueSolution {
                value: ValueFunction::new(grid, f)?,
                iterations: n,
                residuals,
            });
        }
        f = tf;
    }
    Err(Error::NotConverged {
        what: "value iteration",
        iterations: max_iter,
        residual: residuals.last().copied().unwrap_or(f64::INFINITY),
    })
}

/// `theta(q) = beta (E_A V(q + A) - E_A V((q - s)+ + A))+`, reported on the
/// state grid.
pub fn optimal_bid(value: &ValueFunction, params: &ModelParams) -> Result<BidPolicy> {
    value
        .grid
        .check_same(&params.value_grid(), "value function")?;
    let g = arrival_expectation(&value.values, &params.arrival_support());
    let shift = params.service_cells();
    let bids = (0..params.state_grid.count())
        .map(|m| params.beta * delta_from(&g, m, shift).max(0.0))
        .collect();
    BidPolicy::new(params.state_grid, bids)
}
