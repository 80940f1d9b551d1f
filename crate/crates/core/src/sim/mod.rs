//! Monte Carlo checks of the mean-field predictions on a finite system.

pub mod chaos;
pub mod finite;
pub mod nash;
pub mod rng;
pub mod value;

use crate::grid::{BidCdf, QueueDist};
use crate::mdp::BidPolicy;
use crate::mfe::MfeSolution;

/// The parts of an equilibrium the finite-system experiments need.
#[derive(Clone, Copy, Debug)]
pub struct MeanField<'a> {
    pub policy: &'a BidPolicy,
    pub rho: &'a BidCdf,
    pub pi: &'a QueueDist,
}

impl<'a> From<&'a MfeSolution> for MeanField<'a> {
    fn from(sol: &'a MfeSolution) -> Self {
        Self {
            policy: &sol.policy,
            rho: &sol.rho,
            pi: &sol.pi,
        }
    }
}

pub use chaos::{chaos_correlation, ChaosResult};
pub use finite::{
    lqf_violation_rate, run_simulation, AgentState, InitialQueues, SimConfig, SimTrace, SlotRecord,
};
pub use nash::{eps_nash_gap, standard_challengers, ChallengerResult, NashGap};
pub use rng::{StreamTag, Streams};
pub use value::{estimate_value, Estimate, ValueEstimate};
