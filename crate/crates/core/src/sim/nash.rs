//! Profitability of unilateral deviations in the finite system.

use rayon::prelude::*;

use super::finite::{Engine, SimConfig, TableSampler};
use super::rng::{StreamTag, Streams};
use super::value::Estimate;
use super::MeanField;
use crate::error::{Error, Result};
use crate::mdp::BidPolicy;

/// Guard against `beta` near 1 making an episode endless.
const MAX_EPISODE: u64 = 1 << 20;

#[derive(Clone, Debug)]
pub struct ChallengerResult {
    /// Cost of agent 0 under the challenger.
    pub value: Estimate,
    /// Paired estimate of `value(MFE policy) - value(challenger)`.
    pub gain: Estimate,
}

#[derive(Clone, Debug)]
pub struct NashGap {
    /// `max` over challengers of the mean gain; positive means a deviation
    /// that pays.
    pub gap: f64,
    /// Half-width of the gain attaining the maximum.
    pub gap_half_width: f64,
    pub baseline: Estimate,
    pub challengers: Vec<ChallengerResult>,
}

/// The fixed challenger set: `theta / 2`, `2 theta`, constant bids at the
/// quartiles of `rho`, and the largest bid on the grid.
pub fn standard_challengers(mfe: MeanField<'_>) -> Result<Vec<BidPolicy>> {
    let grid = *mfe.policy.grid();
    let rho = mfe.rho;
    let mut out = vec![mfe.policy.scaled(0.5)?, mfe.policy.scaled(2.0)?];
    for u in [0.25, 0.5, 0.75] {
        out.push(BidPolicy::constant(grid, rho.quantile(u))?);
    }
    out.push(BidPolicy::constant(grid, rho.grid().max())?);
    Ok(out)
}

/// Cost of agent 0 from `q0` until it regenerates, everyone else on the MFE
/// policy and started i.i.d. from its stationary law.
fn episode(engine: &Engine<'_>, streams: &Streams, q0: f64, pi: &TableSampler) -> f64 {
    let params = engine.params;
    let max = params.state_grid.max();
    let mut queues: Vec<f64> = (0..engine.agents())
        .map(|i| {
            if i == 0 {
                q0.clamp(0.0, max)
            } else {
                pi.sample(&mut streams.rng(StreamTag::Initial, i as u64, 0))
                    .min(max)
            }
        })
        .collect();
    let mut total = 0.0;
    for slot in 0..MAX_EPISODE {
        let outcomes = engine.slot(streams, slot, &queues);
        let mut done = false;
        for out in &outcomes {
            for (k, &i) in out.members.iter().enumerate() {
                if i == 0 {
                    total += params.cost.eval(queues[0]);
                    if out.winner == Some(k) {
                        total += out.payment;
                    }
                    done = out.regenerated[k];
                }
            }
        }
        if done {
            break;
        }
        for out in &outcomes {
            for (k, &i) in out.members.iter().enumerate() {
                queues[i] = out.after[k];
            }
        }
    }
    total
}

/// Replication `r` uses the same random streams for every candidate policy,
/// so gains are estimated from paired differences.
pub fn eps_nash_gap(
    config: &SimConfig,
    mfe: MeanField<'_>,
    challengers: &[BidPolicy],
    q0: f64,
    replications: usize,
) -> Result<NashGap> {
    config.validate()?;
    if replications < 2 {
        return Err(Error::InvalidParameter {
            name: "replications",
            reason: "need at least two for an interval".into(),
        });
    }
    if challengers.is_empty() {
        return Err(Error::InvalidParameter {
            name: "challengers",
            reason: "need at least one".into(),
        });
    }
    let pi = TableSampler::new(mfe.pi);
    let candidates: Vec<&BidPolicy> = std::iter::once(mfe.policy).chain(challengers).collect();
    let engines = candidates
        .iter()
        .map(|c| {
            let mut e = Engine::from_config(config, mfe.policy)?;
            e.deviant = Some(c);
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    // costs[r][c]
    let costs: Vec<Vec<f64>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let streams = Streams::for_replication(config.seed, r as u64);
            engines
                .iter()
                .map(|e| episode(e, &streams, q0, &pi))
                .collect()
        })
        .collect();
    let column = |c: usize| -> Vec<f64> { costs.iter().map(|row| row[c]).collect() };
    let baseline = Estimate::from_samples(&column(0));
    let results: Vec<ChallengerResult> = (1..candidates.len())
        .map(|c| {
            let gains: Vec<f64> = costs.iter().map(|row| row[0] - row[c]).collect();
            ChallengerResult {
                value: Estimate::from_samples(&column(c)),
                gain: Estimate::from_samples(&gains),
            }
        })
        .collect();
    let best = results
        .iter()
        .max_by(|a, b| a.gain.mean.total_cmp(&b.gain.mean))
        .expect("at least one challenger");
    Ok(NashGap {
        gap: best.gain.mean,
        gap_half_width: best.gain.half_width,
        baseline,
        challengers: results,
    })
}
