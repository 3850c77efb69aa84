//! Uncertainty-driven supply exploration for real-time bidding.
//!
//! The crate is a self-contained testbed:
//!
//! - [`market`] generates bid requests, holds the ground-truth click model and
//!   runs censored second-price auctions.
//! - [`features`] hashes requests and ads into categorical indices and masks
//!   the ad side out for request-level scoring.
//! - [`model`] is a small factorization-machine + MLP click model with
//!   dropout, trained online with Adagrad.
//! - [`uncertainty`] turns repeated dropout-on predictions into a
//!   request-level uncertainty estimate.
//! - [`controller`] keeps windowed uncertainty statistics per dimension and
//!   converts an uncertainty into a clamped bid modifier.
//! - [`bidder`] scores candidate ads and applies a group's exploration policy.
//! - [`experiment`] runs the three-group A/B comparison and produces a
//!   [`experiment::Report`].
//! - [`metrics`] holds AUC and log loss.

pub mod bidder;
pub mod controller;
pub mod experiment;
pub mod exact_sum;
pub mod features;
pub mod market;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod uncertainty;

pub use bidder::{BidDecision, GroupPolicy, ModifierPool, Strategy};
pub use controller::{Controller, ControllerConfig, ControllerSnapshot, DimensionKind};
pub use experiment::{ExperimentConfig, Report};
pub use features::{Encoder, FeatureConfig, FeatureVector};
pub use market::{AdCandidate, AuctionOutcome, BidRequest, Market, MarketConfig};
pub use model::{CtrModel, ModelConfig, PredictMode};
pub use uncertainty::UncertaintyEstimate;
