//! Constrained auto-bidding laboratory.
//!
//! Campaigns maximize expected value under a budget and an optional CPC
//! corridor. Optimal behaviour is a linear bid `alpha·obj + beta` derived
//! from three dual variables; this crate finds those duals (against exact
//! replays or predicted responses), provides exact LP and 0-1 references,
//! baseline controllers, and an offline replay harness with metrics.

// `!(x > 0.0)` style checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod allocator;
pub mod controllers;
pub mod error;
pub mod harness;
pub mod index;
pub mod model;
pub mod oracle;
pub mod predictor;
pub mod solver;

pub use error::{BidError, Result};
pub use model::{AccumStats, BidParams, Campaign, DualVars, Impression};
