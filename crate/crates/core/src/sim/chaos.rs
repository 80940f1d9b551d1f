//! Dependence between agents' queues in the finite system.

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

use super::finite::{Engine, SimConfig, TableSampler};
use super::rng::{StreamTag, Streams};
use super::MeanField;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct ChaosResult {
    /// `max |corr|` over the sampled pairs.
    pub max_abs: f64,
    /// Correlation of queues `(2j, 2j + 1)` at the horizon, across replications.
    pub pair_correlations: Vec<f64>,
    /// Two-sided 95% band for the maximum under independence: Fisher `z`
    /// with a Bonferroni correction over the pairs.
    pub noise_band: f64,
    /// The same statistic after pairing each agent with its partner from the
    /// next replication, which makes the pair independent by construction.
    pub shifted_max_abs: f64,
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Critical `|r|` for `pairs` simultaneous tests on `replications` samples.
pub fn independence_band(pairs: usize, replications: usize) -> f64 {
    let normal = Normal::standard();
    let z = normal.inverse_cdf(1.0 - 0.025 / pairs as f64);
    (z / (replications as f64 - 3.0).sqrt()).tanh()
}

/// Runs `replications` independent copies of the system for `horizon` slots
/// from i.i.d. stationary queues and correlates the final queue lengths of
/// `pairs` disjoint agent pairs.
pub fn chaos_correlation(
    config: &SimConfig,
    mfe: MeanField<'_>,
    pairs: usize,
    horizon: usize,
    replications: usize,
) -> Result<ChaosResult> {
    config.validate()?;
    if pairs == 0 || 2 * pairs > config.agents() {
        return Err(Error::InvalidParameter {
            name: "pairs",
            reason: format!("need 1..={} pairs, got {pairs}", config.agents() / 2),
        });
    }
    if replications < 4 {
        return Err(Error::InvalidParameter {
            name: "replications",
            reason: "need at least four".into(),
        });
    }
    let engine = Engine::from_config(config, mfe.policy)?;
    let pi = TableSampler::new(mfe.pi);
    let max = config.params.state_grid.max();
    let finals: Vec<Vec<f64>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let streams = Streams::for_replication(config.seed, r as u64);
            let mut queues: Vec<f64> = (0..engine.agents())
                .map(|i| {
                    pi.sample(&mut streams.rng(StreamTag::Initial, i as u64, 0))
                        .min(max)
                })
                .collect();
            for slot in 0..horizon as u64 {
                for out in engine.slot(&streams, slot, &queues) {
                    for (k, &i) in out.members.iter().enumerate() {
                        queues[i] = out.after[k];
                    }
                }
            }
            queues.truncate(2 * pairs);
            queues
        })
        .collect();
    let pair_correlations: Vec<f64> = (0..pairs)
        .map(|j| {
            let a: Vec<f64> = finals.iter().map(|q| q[2 * j]).collect();
            let b: Vec<f64> = finals.iter().map(|q| q[2 * j + 1]).collect();
            pearson(&a, &b)
        })
        .collect();
    let shifted_max_abs = (0..pairs)
        .map(|j| {
            let a: Vec<f64> = finals.iter().map(|q| q[2 * j]).collect();
            let b: Vec<f64> = (0..replications)
                .map(|r| finals[(r + 1) % replications][2 * j + 1])
                .collect();
            pearson(&a, &b).abs()
        })
        .fold(0.0, f64::max);
    Ok(ChaosResult {
        max_abs: pair_correlations
            .iter()
            .map(|c| c.abs())
            .fold(0.0, f64::max),
        pair_correlations,
        noise_band: independence_band(pairs, replications),
        shifted_max_abs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]) - 1.0).abs() < 1e-12);
        assert!((pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(pearson(&[1.0, 1.0], &[0.0, 5.0]), 0.0);
    }

    #[test]
    fn band_shrinks_with_replications() {
        let a = independence_band(10, 1000);
        let b = independence_band(10, 4000);
        assert!(b < a && b > 0.0);
        // one pair, large sample: about 1.96 / sqrt(n)
        let c = independence_band(1, 10_003);
        assert!((c - 0.0196).abs() < 1e-4);
    }
}
