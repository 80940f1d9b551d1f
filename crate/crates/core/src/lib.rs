//! Mean-field equilibrium of repeated second-price auctions among agents with
//! regenerating queues, plus a finite-system simulator to check the
//! mean-field predictions.
//!
//! The pipeline: [`mdp::solve_value`] computes the best-response value
//! function against a conjectured bid cdf, [`mdp::optimal_bid`] turns it into
//! a bid policy, [`stationary`] gives the induced queue-length law, and
//! [`mfe::solve_mfe`] iterates the map from conjectured to induced bid cdf.

// `!(x > 0.0)` is how parameter checks reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod auction;
pub mod error;
pub mod grid;
pub mod mdp;
pub mod mfe;
pub mod sim;
pub mod stationary;

pub use auction::{AuctionOutcome, IntegralConvention};
pub use error::{Error, Result};
pub use grid::{BidCdf, BidGrid, DistSpec, Law, Pmf, QueueDist, StateGrid};
pub use mdp::{BidPolicy, HoldingCost, ModelParams, ValueFunction};
pub use mfe::{solve_mfe, MfeOptions, MfeSolution, Step3Schedule};
