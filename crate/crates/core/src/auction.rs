//! Second-price auction quantities under a conjectured opponent bid
//! distribution, and concrete auction resolution for the simulator.
//!
//! With `M - 1` opponents bidding i.i.d. from `rho`, the highest opposing bid
//! has cdf `p(x) = rho(x)^(M-1)`. Bidding `x` wins with probability `p(x)` and
//! costs `r(x) = x p(x) - int_0^x p(u) du` in expectation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BidCdf;

/// How the payment integral `int_0^b p(u) du` is evaluated on the bid grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegralConvention {
    /// Left-endpoint Riemann sum with the grid step as weight; the last
    /// partial cell contributes `p(x_k) * (b - x_k)`.
    #[default]
    StepWeighted,
    /// `sum_{x_m <= b} p(x_m)` with no width factor.
    Unweighted,
}

/// Number of agents per cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AuctionParams {
    agents: usize,
}

impl AuctionParams {
    pub fn new(agents: usize) -> Result<Self> {
        if agents == 0 {
            return Err(Error::InvalidParameter {
                name: "M",
                reason: "need at least one agent per cell".into(),
            });
        }
        Ok(Self { agents })
    }

    #[inline]
    pub fn agents(&self) -> usize {
        self.agents
    }

    #[inline]
    pub fn opponents(&self) -> i32 {
        (self.agents - 1) as i32
    }
}

/// `rho(x)^(M-1)`.
pub fn win_prob(rho: &BidCdf, x: f64, agents: usize) -> Result<f64> {
    if x < 0.0 || x.is_nan() {
        return Err(Error::NegativeBid(x));
    }
    Ok(rho.eval(x).powi(agents.saturating_sub(1) as i32))
}

/// `int_0^b p(u) du` under the step-weighted convention.
pub fn payment_integral(rho: &BidCdf, b: f64, agents: usize) -> f64 {
    PaymentIntegral::new(rho, agents, IntegralConvention::StepWeighted).eval(b)
}

/// `x p(x) - int_0^x p(u) du`.
pub fn expected_payment(rho: &BidCdf, x: f64, agents: usize) -> Result<f64> {
    let p = win_prob(rho, x, agents)?;
    Ok(x * p - payment_integral(rho, x, agents))
}

/// Precomputed cumulative sums of `p` on the bid grid, for repeated
/// evaluation of the payment integral inside the Bellman operator.
#[derive(Clone, Debug)]
pub struct PaymentIntegral {
    step: f64,
    convention: IntegralConvention,
    /// `p(x_m)`
    win: Vec<f64>,
    /// `cumulative[m] = sum_{j < m} p(x_j)`
    cumulative: Vec<f64>,
}

impl PaymentIntegral {
    pub fn new(rho: &BidCdf, agents: usize, convention: IntegralConvention) -> Self {
        let opponents = agents.saturating_sub(1) as i32;
        let win: Vec<f64> = rho.values().iter().map(|v| v.powi(opponents)).collect();
        let mut cumulative = Vec::with_capacity(win.len() + 1);
        let mut acc = 0.0;
        cumulative.push(acc);
        for p in &win {
            acc += p;
            cumulative.push(acc);
        }
        Self {
            step: rho.grid().step(),
            convention,
            win,
            cumulative,
        }
    }

    #[inline]
    pub fn convention(&self) -> IntegralConvention {
        self.convention
    }

    /// Win probability at grid index `m`.
    #[inline]
    pub fn win_at(&self, m: usize) -> f64 {
        self.win[m]
    }

    /// The integral up to `b`. Beyond the grid the step-weighted integrand
    /// is 1, while the unweighted sum stops at the last grid point.
    pub fn eval(&self, b: f64) -> f64 {
        if !(b >= 0.0) {
            return 0.0;
        }
        let last = self.win.len() - 1;
        let r = b / self.step;
        match self.convention {
            IntegralConvention::StepWeighted => {
                let k = r.floor();
                if k >= last as f64 {
                    self.step * self.cumulative[last] + (b - last as f64 * self.step)
                } else {
                    let k = k as usize;
                    self.step * self.cumulative[k] + self.win[k] * (b - k as f64 * self.step)
                }
            }
            IntegralConvention::Unweighted => {
                // number of grid points x_m <= b, guarding against x_m = m*step rounding
                let mut k = r.floor();
                if (k + 1.0) * self.step <= b {
                    k += 1.0;
                }
                if k >= last as f64 {
                    self.cumulative[last + 1]
                } else {
                    self.cumulative[k as usize + 1]
                }
            }
        }
    }

    /// Expected second-price payment when bidding grid point `m`,
    /// `x_m p(x_m) - I(x_m)`.
    pub fn payment_at(&self, m: usize) -> f64 {
        let x = m as f64 * self.step;
        x * self.win[m] - self.eval(x)
    }
}

/// Result of one sealed-bid second-price auction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AuctionOutcome {
    pub winner: usize,
    pub payment: f64,
}

/// Highest bid wins (ties uniformly at random); the winner pays the highest
/// competing bid, 0 without competitors.
pub fn resolve_auction<R: Rng + ?Sized>(bids: &[f64], rng: &mut R) -> Result<AuctionOutcome> {
    if bids.is_empty() {
        return Err(Error::EmptyAuction);
    }
    if let Some(b) = bids.iter().find(|b| !(**b >= 0.0)) {
        return Err(Error::NegativeBid(*b));
    }
    let top = bids.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tied = bids.iter().filter(|b| **b == top).count();
    let pick = if tied > 1 {
        rng.random_range(0..tied)
    } else {
        0
    };
    let winner = bids
        .iter()
        .enumerate()
        .filter(|(_, b)| **b == top)
        .nth(pick)
        .map(|(i, _)| i)
        .expect("at least one bid equals the maximum");
    let payment = bids
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != winner)
        .map(|(_, b)| *b)
        .fold(0.0, f64::max);
    Ok(AuctionOutcome { winner, payment })
}
