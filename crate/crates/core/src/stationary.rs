//! The queue-length chain under a fixed bid cdf and bid policy.
//!
//! One slot: with probability `beta` the agent keeps its queue, is served
//! `s` units with probability `p(q) = p_rho(theta(q))`, then receives an
//! arrival; with probability `1 - beta` it regenerates to a draw from `Psi`.
//!
//! Two independent routes to the stationary law are provided: power
//! iteration of the full kernel, and the regeneration series
//! `Pi = sum_k (1 - beta) beta^k E_Psi[Y_k]` where `Y_k` is the `k`-step law
//! of the service/arrival dynamics without regeneration.

use rayon::prelude::*;

use crate::auction::win_prob;
use crate::error::{Error, Result};
use crate::grid::{BidCdf, QueueDist};
use crate::mdp::{sparse, BidPolicy, ModelParams};

/// Kernel ingredients: the model plus the per-state win probability.
#[derive(Clone, Debug)]
pub struct TransitionSpec<'a> {
    params: &'a ModelParams,
    win: Vec<f64>,
}

impl<'a> TransitionSpec<'a> {
    /// `p(q) = rho(theta(q))^(M-1)`.
    pub fn new(rho: &BidCdf, theta: &BidPolicy, params: &'a ModelParams) -> Result<Self> {
        theta.grid().check_same(&params.state_grid, "bid policy")?;
        rho.grid().check_same(&params.bid_grid, "bid cdf")?;
        let win = theta
            .bids()
            .iter()
            .map(|b| win_prob(rho, *b, params.agents))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { params, win })
    }

    /// Kernel with explicitly given win probabilities.
    pub fn with_win_probs(params: &'a ModelParams, win: Vec<f64>) -> Result<Self> {
        if win.len() != params.state_grid.count() {
            return Err(Error::GridMismatch(format!(
                "{} win probabilities for {} states",
                win.len(),
                params.state_grid.count()
            )));
        }
        if let Some(p) = win.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::InvalidParameter {
                name: "win probability",
                reason: format!("{p} outside [0, 1]"),
            });
        }
        Ok(Self { params, win })
    }

    #[inline]
    pub fn params(&self) -> &ModelParams {
        self.params
    }

    #[inline]
    pub fn win_probs(&self) -> &[f64] {
        &self.win
    }

    /// Service then arrival, without regeneration or the `beta` factor.
    fn evolve(&self, pi: &[f64], arrival: &[(usize, f64)], arrival_tail: &[f64]) -> Vec<f64> {
        let n = pi.len();
        let shift = self.params.service_cells();
        let mut pre = vec![0.0; n];
        for (m, (w, p)) in pi.iter().zip(&self.win).enumerate() {
            pre[m] += w * (1.0 - p);
            pre[m.saturating_sub(shift)] += w * p;
        }
        let last = n - 1;
        let mut out: Vec<f64> = (0..last)
            .into_par_iter()
            .with_min_len(256)
            .map(|dest| {
                arrival
                    .iter()
                    .take_while(|(j, _)| *j <= dest)
                    .map(|(j, a)| a * pre[dest - j])
                    .sum()
            })
            .collect();
        // everything landing at or beyond the last point saturates there
        let top = pre
            .iter()
            .enumerate()
            .map(|(k, w)| w * arrival_tail[last - k])
            .sum();
        out.push(top);
        out
    }
}

/// `tail[t] = P(A >= t cells)`.
fn arrival_tail(weights: &[f64]) -> Vec<f64> {
    let mut tail = vec![0.0; weights.len() + 1];
    for t in (0..weights.len()).rev() {
        tail[t] = tail[t + 1] + weights[t];
    }
    tail.truncate(weights.len());
    tail
}

/// One step of the full kernel:
/// `pi'(B) = beta sum_q pi(q) [p(q) P((q-s)+ + A in B) + (1 - p(q)) P(q + A in B)] + (1 - beta) Psi(B)`.
pub fn transition_apply(pi: &QueueDist, spec: &TransitionSpec<'_>) -> Result<QueueDist> {
    pi.grid()
        .check_same(&spec.params.state_grid, "queue distribution")?;
    let params = spec.params;
    let arrival = params.arrival.pmf().weights();
    let moved = spec.evolve(pi.weights(), &sparse(arrival), &arrival_tail(arrival));
    let beta = params.beta;
    let out = moved
        .iter()
        .zip(params.regen.pmf().weights())
        .map(|(m, r)| beta * m + (1.0 - beta) * r)
        .collect();
    Ok(QueueDist::from_raw(*pi.grid(), out))
}

/// Result of power iteration.
#[derive(Clone, Debug)]
pub struct StationaryResult {
    pub dist: QueueDist,
    pub iterations: usize,
    /// Total-variation change of the last step.
    pub residual: f64,
}

/// Power iteration from `Psi` until the total-variation change drops below
/// `tol`. The returned law is the last iterate `pi` with
/// `TV(transition_apply(pi), pi) < tol`.
pub fn stationary_power(
    spec: &TransitionSpec<'_>,
    tol: f64,
    max_iter: usize,
) -> Result<StationaryResult> {
    stationary_power_from(spec, spec.params.regen.pmf().clone(), tol, max_iter)
}

pub fn stationary_power_from(
    spec: &TransitionSpec<'_>,
    start: QueueDist,
    tol: f64,
    max_iter: usize,
) -> Result<StationaryResult> {
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter {
            name: "stationary_tol",
            reason: format!("must be positive, got {tol}"),
        });
    }
    let mut pi = start;
    let mut residual = f64::INFINITY;
    for n in 0..max_iter {
        let next = transition_apply(&pi, spec)?;
        residual = next.tv_distance(&pi);
        if residual < tol {
            return Ok(StationaryResult {
                dist: pi,
                iterations: n,
                residual,
            });
        }
        pi = next;
    }
    Err(Error::NotConverged {
        what: "stationary power iteration",
        iterations: max_iter,
        residual,
    })
}

/// Result of the regeneration series.
#[derive(Clone, Debug)]
pub struct SeriesResult {
    pub dist: QueueDist,
    /// `beta^(k_max + 1)`: total-variation bound on the truncation error.
    pub truncation_bound: f64,
}

/// Smallest `k_max` with `beta^(k_max + 1) < tail_tol`.
pub fn series_terms_for(beta: f64, tail_tol: f64) -> usize {
    let mut k = 0;
    let mut tail = beta;
    while tail >= tail_tol && k < 1_000_000 {
        tail *= beta;
        k += 1;
    }
    k
}

/// Truncated regeneration series `sum_{k <= k_max} (1 - beta) beta^k Y_k`,
/// completed with the unaccounted mass `beta^(k_max + 1)` placed on
/// `Y_{k_max + 1}`.
pub fn stationary_series(spec: &TransitionSpec<'_>, k_max: usize) -> Result<SeriesResult> {
    let params = spec.params;
    let beta = params.beta;
    let arrival = params.arrival.pmf().weights();
    let support = sparse(arrival);
    let tail = arrival_tail(arrival);

    let mut term = params.regen.pmf().weights().to_vec();
    let mut acc = vec![0.0; term.len()];
    let mut weight = 1.0 - beta;
    for _ in 0..=k_max {
        for (a, t) in acc.iter_mut().zip(&term) {
            *a += weight * t;
        }
        term = spec.evolve(&term, &support, &tail);
        weight *= beta;
    }
    let remainder = beta.powi(k_max as i32 + 1);
    for (a, t) in acc.iter_mut().zip(&term) {
        *a += remainder * t;
    }
    Ok(SeriesResult {
        dist: QueueDist::from_raw(params.state_grid, acc),
        truncation_bound: remainder,
    })
}
