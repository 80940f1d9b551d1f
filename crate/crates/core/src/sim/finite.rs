//! The finite system: `N` cells, `N M` agents re-permuted every slot, one
//! second-price auction per cell.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use std::io::Write;

use super::rng::{StreamTag, Streams};
use crate::auction::resolve_auction;
use crate::error::{Error, Result};
use crate::grid::{cdf_of, write_curve, BidCdf, QueueDist};
use crate::mdp::{BidPolicy, ModelParams};

/// Where queues start at slot 0.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialQueues {
    /// Empty queues.
    Zero,
    /// Independent draws from the regeneration law.
    Regeneration,
    /// Independent draws from a tabulated law, e.g. a stationary one.
    Tabulated(QueueDist),
}

#[derive(Clone, Debug)]
pub struct SimConfig {
    /// Number of cells `N`; each holds `params.agents` agents.
    pub cells: usize,
    pub params: ModelParams,
    /// Number of slots `T`.
    pub horizon: usize,
    pub seed: u64,
    /// Policy played by agent 0 instead of the common one.
    pub deviant: Option<BidPolicy>,
    pub initial: InitialQueues,
    /// Fraction of slots discarded before filling the empirical histograms.
    pub burn_in: f64,
    /// Hold no auctions and serve nobody, so queues evolve independently.
    pub no_service: bool,
    /// Keep one record per agent and slot.
    pub record_trace: bool,
}

impl SimConfig {
    pub fn new(cells: usize, params: ModelParams, horizon: usize, seed: u64) -> Self {
        Self {
            cells,
            params,
            horizon,
            seed,
            deviant: None,
            initial: InitialQueues::Regeneration,
            burn_in: 0.2,
            no_service: false,
            record_trace: false,
        }
    }

    #[inline]
    pub fn agents(&self) -> usize {
        self.cells * self.params.agents
    }

    pub fn burn_in_slots(&self) -> usize {
        (self.burn_in * self.horizon as f64).floor() as usize
    }

    /// Unlike [`ModelParams::validate`], `beta` may be 0 or 1 here.
    pub fn validate(&self) -> Result<()> {
        if self.cells == 0 {
            return Err(Error::InvalidParameter {
                name: "cells",
                reason: "need at least one cell".into(),
            });
        }
        if self.params.agents == 0 {
            return Err(Error::InvalidParameter {
                name: "M",
                reason: "need at least one agent per cell".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.params.beta) {
            return Err(Error::InvalidParameter {
                name: "beta",
                reason: format!("must lie in [0, 1], got {}", self.params.beta),
            });
        }
        if !(0.0..1.0).contains(&self.burn_in) {
            return Err(Error::InvalidParameter {
                name: "burn_in",
                reason: format!("must lie in [0, 1), got {}", self.burn_in),
            });
        }
        if let Some(d) = &self.deviant {
            d.grid()
                .check_same(&self.params.state_grid, "deviant policy")?;
        }
        if let InitialQueues::Tabulated(dist) = &self.initial {
            dist.grid()
                .check_same(&self.params.state_grid, "initial law")?;
        }
        Ok(())
    }
}

/// Inverse-cdf sampling from a tabulated law in `O(log n)`.
#[derive(Clone, Debug)]
pub(crate) struct TableSampler {
    step: f64,
    cdf: Vec<f64>,
    last_positive: usize,
}

impl TableSampler {
    pub(crate) fn new(dist: &QueueDist) -> Self {
        let w = dist.weights();
        Self {
            step: dist.grid().step(),
            cdf: cdf_of(w),
            last_positive: w.iter().rposition(|x| *x > 0.0).unwrap_or(0),
        }
    }

    pub(crate) fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let m = self
            .cdf
            .partition_point(|c| *c <= u)
            .min(self.last_positive);
        m as f64 * self.step
    }
}

/// What happened in one cell during one slot.
#[derive(Clone, Debug)]
pub(crate) struct CellOutcome {
    pub members: Vec<usize>,
    pub bids: Vec<f64>,
    /// Position of the winner within `members`.
    pub winner: Option<usize>,
    pub payment: f64,
    pub after: Vec<f64>,
    pub regenerated: Vec<bool>,
}

/// Slot-by-slot dynamics shared by every experiment on the finite system.
pub(crate) struct Engine<'a> {
    pub params: &'a ModelParams,
    pub policy: &'a BidPolicy,
    pub deviant: Option<&'a BidPolicy>,
    pub cells: usize,
    pub no_service: bool,
}

impl<'a> Engine<'a> {
    pub fn from_config(config: &'a SimConfig, policy: &'a BidPolicy) -> Result<Self> {
        config.validate()?;
        policy
            .grid()
            .check_same(&config.params.state_grid, "policy")?;
        Ok(Self {
            params: &config.params,
            policy,
            deviant: config.deviant.as_ref(),
            cells: config.cells,
            no_service: config.no_service,
        })
    }

    #[inline]
    pub fn agents(&self) -> usize {
        self.cells * self.params.agents
    }

    #[inline]
    fn clip(&self, q: f64) -> f64 {
        q.clamp(0.0, self.params.state_grid.max())
    }

    pub fn bid(&self, agent: usize, q: f64) -> f64 {
        match (agent, self.deviant) {
            (0, Some(d)) => d.eval(q),
            _ => self.policy.eval(q),
        }
    }

    pub fn initial_queues(&self, streams: &Streams, initial: &InitialQueues) -> Vec<f64> {
        let table = match initial {
            InitialQueues::Tabulated(dist) => Some(TableSampler::new(dist)),
            _ => None,
        };
        (0..self.agents())
            .map(|i| {
                let mut rng = streams.rng(StreamTag::Initial, i as u64, 0);
                match initial {
                    InitialQueues::Zero => 0.0,
                    InitialQueues::Regeneration => self.clip(self.params.regen.sample(&mut rng)),
                    InitialQueues::Tabulated(_) => {
                        self.clip(table.as_ref().expect("built above").sample(&mut rng))
                    }
                }
            })
            .collect()
    }

    /// Queue after the auction: regenerate with probability `1 - beta`,
    /// otherwise `q - D + A`.
    pub fn next_queue(
        &self,
        streams: &Streams,
        agent: usize,
        slot: u64,
        q: f64,
        served: f64,
    ) -> (f64, bool) {
        let mut regen = streams.rng(StreamTag::Regeneration, agent as u64, slot);
        if regen.random::<f64>() < 1.0 - self.params.beta {
            return (self.clip(self.params.regen.sample(&mut regen)), true);
        }
        let mut arrival = streams.rng(StreamTag::Arrival, agent as u64, slot);
        let a = self.params.arrival.sample(&mut arrival);
        (self.clip(q - served + a), false)
    }

    pub fn permutation(&self, streams: &Streams, slot: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.agents()).collect();
        order.shuffle(&mut streams.rng(StreamTag::Permutation, 0, slot));
        order
    }

    fn run_cell(
        &self,
        streams: &Streams,
        slot: u64,
        cell: usize,
        members: &[usize],
        queues: &[f64],
    ) -> CellOutcome {
        let bids: Vec<f64> = members.iter().map(|&i| self.bid(i, queues[i])).collect();
        let (winner, payment) = if self.no_service {
            (None, 0.0)
        } else {
            let mut tie = streams.rng(StreamTag::TieBreak, cell as u64, slot);
            let out =
                resolve_auction(&bids, &mut tie).expect("policies produce finite nonnegative bids");
            (Some(out.winner), out.payment)
        };
        let mut after = Vec::with_capacity(members.len());
        let mut regenerated = Vec::with_capacity(members.len());
        for (k, &i) in members.iter().enumerate() {
            let q = queues[i];
            let served = if winner == Some(k) {
                q.min(self.params.service)
            } else {
                0.0
            };
            let (next, regen) = self.next_queue(streams, i, slot, q, served);
            after.push(next);
            regenerated.push(regen);
        }
        CellOutcome {
            members: members.to_vec(),
            bids,
            winner,
            payment,
            after,
            regenerated,
        }
    }

    /// Plays one slot. Cells run in parallel; the result is in cell order.
    pub fn slot(&self, streams: &Streams, slot: u64, queues: &[f64]) -> Vec<CellOutcome> {
        let order = self.permutation(streams, slot);
        let m = self.params.agents;
        order
            .par_chunks(m)
            .with_min_len(8)
            .enumerate()
            .map(|(cell, members)| self.run_cell(streams, slot, cell, members, queues))
            .collect()
    }
}

/// Per-agent running totals.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AgentState {
    pub queue: f64,
    /// Sum of holding cost plus payments over all slots.
    pub cumulative_cost: f64,
    /// The same sum with slot `k` weighted by `beta^k`.
    pub discounted_cost: f64,
    pub regenerations: u64,
}

/// One agent in one slot. `payment` is 0 for losers.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotRecord {
    pub slot: u64,
    pub agent: usize,
    pub cell: usize,
    pub bid: f64,
    pub won: bool,
    pub payment: f64,
    pub queue_before: f64,
    pub queue_after: f64,
    pub regenerated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimTrace {
    pub cells: usize,
    pub agents_per_cell: usize,
    pub horizon: usize,
    pub burn_in_slots: usize,
    /// Bids after burn-in, binned to the smallest bid-grid point at or above
    /// them. The deviant, if any, is left out.
    pub bid_counts: Vec<u64>,
    /// Pre-auction queues after burn-in, binned to the nearest state.
    pub queue_counts: Vec<u64>,
    pub auctions: u64,
    pub lqf_violations: u64,
    pub total_payment: f64,
    pub agents: Vec<AgentState>,
    pub records: Option<Vec<SlotRecord>>,
    bid_step: f64,
    state_step: f64,
}

impl SimTrace {
    pub fn empirical_bid_cdf(&self) -> Vec<f64> {
        normalized_cdf(&self.bid_counts)
    }

    pub fn empirical_queue_cdf(&self) -> Vec<f64> {
        normalized_cdf(&self.queue_counts)
    }

    /// `sup_m |F_emp(x_m) - rho(x_m)|` over the bid grid.
    pub fn bid_ks_distance(&self, rho: &BidCdf) -> Result<f64> {
        if rho.values().len() != self.bid_counts.len() {
            return Err(Error::GridMismatch(format!(
                "bid cdf has {} points, histogram {}",
                rho.values().len(),
                self.bid_counts.len()
            )));
        }
        Ok(self
            .empirical_bid_cdf()
            .iter()
            .zip(rho.values())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn write_bid_cdf_csv<W: Write>(&self, writer: W) -> Result<()> {
        let n = self.bid_counts.len();
        let step = self.bid_step;
        write_curve(
            writer,
            ["bid", "cdf"],
            (0..n).map(|m| m as f64 * step),
            &self.empirical_bid_cdf(),
        )
    }

    pub fn write_queue_cdf_csv<W: Write>(&self, writer: W) -> Result<()> {
        let n = self.queue_counts.len();
        let step = self.state_step;
        write_curve(
            writer,
            ["queue", "cdf"],
            (0..n).map(|m| m as f64 * step),
            &self.empirical_queue_cdf(),
        )
    }

    /// Columns `slot,agent,cell,bid,won,payment,queue_before,queue_after`.
    pub fn write_records_csv<W: Write>(&self, writer: W) -> Result<()> {
        let records = self
            .records
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter {
                name: "record_trace",
                reason: "the run kept no per-slot records".into(),
            })?;
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "slot",
            "agent",
            "cell",
            "bid",
            "won",
            "payment",
            "queue_before",
            "queue_after",
        ])?;
        for r in records {
            w.write_record([
                r.slot.to_string(),
                r.agent.to_string(),
                r.cell.to_string(),
                r.bid.to_string(),
                u8::from(r.won).to_string(),
                r.payment.to_string(),
                r.queue_before.to_string(),
                r.queue_after.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn normalized_cdf(counts: &[u64]) -> Vec<f64> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return vec![0.0; counts.len()];
    }
    let mut acc = 0u64;
    counts
        .iter()
        .map(|c| {
            acc += c;
            acc as f64 / total as f64
        })
        .collect()
}

/// Smallest bid-grid index whose point is at or above `bid`.
pub(crate) fn bid_bin(bid: f64, step: f64, count: usize) -> usize {
    let r = bid / step;
    let m = r.round();
    let k = if (r - m).abs() <= 1e-9 * m.max(1.0) {
        m
    } else {
        r.ceil()
    };
    (k.max(0.0) as usize).min(count - 1)
}

pub fn run_simulation(config: &SimConfig, policy: &BidPolicy) -> Result<SimTrace> {
    let engine = Engine::from_config(config, policy)?;
    let params = &config.params;
    let streams = Streams::new(config.seed);
    let mut queues = engine.initial_queues(&streams, &config.initial);
    let mut agents: Vec<AgentState> = queues
        .iter()
        .map(|q| AgentState {
            queue: *q,
            ..AgentState::default()
        })
        .collect();
    let bid_count = params.bid_grid.count();
    let mut trace = SimTrace {
        cells: config.cells,
        agents_per_cell: params.agents,
        horizon: config.horizon,
        burn_in_slots: config.burn_in_slots(),
        bid_counts: vec![0; bid_count],
        queue_counts: vec![0; params.state_grid.count()],
        auctions: 0,
        lqf_violations: 0,
        total_payment: 0.0,
        agents: Vec::new(),
        records: config.record_trace.then(Vec::new),
        bid_step: params.bid_grid.step(),
        state_step: params.state_grid.step(),
    };
    let mut weight = 1.0;
    for slot in 0..config.horizon {
        let outcomes = engine.slot(&streams, slot as u64, &queues);
        let counted = slot >= trace.burn_in_slots;
        for (cell, out) in outcomes.iter().enumerate() {
            if let Some(w) = out.winner {
                trace.auctions += 1;
                trace.total_payment += out.payment;
                let longest = out
                    .members
                    .iter()
                    .map(|&i| queues[i])
                    .fold(f64::NEG_INFINITY, f64::max);
                if queues[out.members[w]] < longest {
                    trace.lqf_violations += 1;
                }
            }
            for (k, &i) in out.members.iter().enumerate() {
                let q = queues[i];
                let won = out.winner == Some(k);
                let payment = if won { out.payment } else { 0.0 };
                let cost = params.cost.eval(q) + payment;
                let a = &mut agents[i];
                a.cumulative_cost += cost;
                a.discounted_cost += weight * cost;
                a.regenerations += u64::from(out.regenerated[k]);
                a.queue = out.after[k];
                if counted {
                    if !(i == 0 && config.deviant.is_some()) {
                        trace.bid_counts[bid_bin(out.bids[k], trace.bid_step, bid_count)] += 1;
                    }
                    trace.queue_counts[params.state_grid.nearest_index(q)] += 1;
                }
                if let Some(records) = trace.records.as_mut() {
                    records.push(SlotRecord {
                        slot: slot as u64,
                        agent: i,
                        cell,
                        bid: out.bids[k],
                        won,
                        payment,
                        queue_before: q,
                        queue_after: out.after[k],
                        regenerated: out.regenerated[k],
                    });
                }
            }
        }
        for out in &outcomes {
            for (k, &i) in out.members.iter().enumerate() {
                queues[i] = out.after[k];
            }
        }
        weight *= params.beta;
    }
    if let Some(records) = trace.records.as_mut() {
        records.sort_by_key(|r| (r.slot, r.agent));
    }
    trace.agents = agents;
    Ok(trace)
}

/// Fraction of auctions won by an agent whose queue was strictly shorter
/// than the longest one in its cell.
pub fn lqf_violation_rate(trace: &SimTrace) -> f64 {
    if trace.auctions == 0 {
        0.0
    } else {
        trace.lqf_violations as f64 / trace.auctions as f64
    }
}
