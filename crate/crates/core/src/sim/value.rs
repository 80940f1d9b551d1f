//! Monte Carlo cost of one agent facing opponents drawn from a bid cdf.

use rand::Rng;
use rayon::prelude::*;

use super::finite::SimConfig;
use super::rng::{StreamTag, Streams};
use crate::auction::resolve_auction;
use crate::error::{Error, Result};
use crate::grid::BidCdf;
use crate::mdp::BidPolicy;

/// Sample mean with a 95% normal half-width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub half_width: f64,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        if xs.len() < 2 {
            return Self {
                mean,
                half_width: f64::INFINITY,
            };
        }
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        Self {
            mean,
            half_width: 1.96 * (var / n).sqrt(),
        }
    }

    /// Whether the two intervals overlap.
    pub fn agrees_with(&self, other: &Estimate) -> bool {
        (self.mean - other.mean).abs() <= self.half_width + other.half_width
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValueEstimate {
    /// Undiscounted cost summed until the agent regenerates.
    pub regenerative: Estimate,
    /// `beta`-discounted cost without regeneration, truncated once
    /// `beta^t < 1e-6`.
    pub discounted: Estimate,
}

impl ValueEstimate {
    /// The regenerative estimate.
    pub fn value(&self) -> Estimate {
        self.regenerative
    }
}

/// Slots kept by the discounted estimator.
pub fn discount_horizon(beta: f64) -> usize {
    if beta <= 0.0 {
        return 1;
    }
    let mut t = 1;
    let mut w = beta;
    while w >= 1e-6 {
        w *= beta;
        t += 1;
    }
    t
}

/// Guard against `beta` near 1 making an episode endless.
const MAX_EPISODE: u64 = 1 << 22;

struct Episode<'a> {
    config: &'a SimConfig,
    policy: &'a BidPolicy,
    rho: &'a BidCdf,
    streams: Streams,
}

impl Episode<'_> {
    /// Holding cost plus payment at `q`, and the queue left after service
    /// but before arrivals.
    fn play(&self, slot: u64, q: f64) -> (f64, f64) {
        let p = &self.config.params;
        let mut bids = Vec::with_capacity(p.agents);
        bids.push(self.policy.eval(q));
        let mut opp = self.streams.rng(StreamTag::OpponentBids, 0, slot);
        for _ in 1..p.agents {
            let u: f64 = opp.random();
            bids.push(self.rho.quantile(u));
        }
        let mut tie = self.streams.rng(StreamTag::TieBreak, 0, slot);
        let out = resolve_auction(&bids, &mut tie).expect("finite nonnegative bids");
        if out.winner == 0 {
            (p.cost.eval(q) + out.payment, q - q.min(p.service))
        } else {
            (p.cost.eval(q), q)
        }
    }

    fn arrive(&self, slot: u64, q: f64) -> f64 {
        let p = &self.config.params;
        let mut rng = self.streams.rng(StreamTag::Arrival, 0, slot);
        (q + p.arrival.sample(&mut rng)).clamp(0.0, p.state_grid.max())
    }

    fn regenerative(&self, q0: f64) -> f64 {
        let beta = self.config.params.beta;
        let mut q = q0;
        let mut total = 0.0;
        for slot in 0..MAX_EPISODE {
            let (cost, left) = self.play(slot, q);
            total += cost;
            let mut coin = self.streams.rng(StreamTag::Regeneration, 0, slot);
            if coin.random::<f64>() < 1.0 - beta {
                break;
            }
            q = self.arrive(slot, left);
        }
        total
    }

    fn discounted(&self, q0: f64, horizon: usize) -> f64 {
        let beta = self.config.params.beta;
        let mut q = q0;
        let mut total = 0.0;
        let mut w = 1.0;
        for slot in 0..horizon as u64 {
            let (cost, left) = self.play(slot, q);
            total += w * cost;
            w *= beta;
            q = self.arrive(slot, left);
        }
        total
    }
}

/// Expected cost from `q0` of an agent playing `policy` while its `M - 1`
/// opponents bid i.i.d. from `population_rho` (sampled on the bid grid).
/// Both estimators reuse the same arrivals and opponent bids.
pub fn estimate_value(
    config: &SimConfig,
    policy: &BidPolicy,
    population_rho: &BidCdf,
    q0: f64,
    replications: usize,
) -> Result<ValueEstimate> {
    config.validate()?;
    if replications == 0 {
        return Err(Error::InvalidParameter {
            name: "replications",
            reason: "need at least one".into(),
        });
    }
    if !(q0 >= 0.0) {
        return Err(Error::InvalidParameter {
            name: "q0",
            reason: format!("must be nonnegative, got {q0}"),
        });
    }
    population_rho
        .grid()
        .check_same(&config.params.bid_grid, "population bid cdf")?;
    let horizon = discount_horizon(config.params.beta);
    let q0 = q0.min(config.params.state_grid.max());
    let pairs: Vec<(f64, f64)> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let ep = Episode {
                config,
                policy,
                rho: population_rho,
                streams: Streams::for_replication(config.seed, r as u64),
            };
            (ep.regenerative(q0), ep.discounted(q0, horizon))
        })
        .collect();
    let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    Ok(ValueEstimate {
        regenerative: Estimate::from_samples(&a),
        discounted: Estimate::from_samples(&b),
    })
}
