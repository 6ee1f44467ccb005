//! Downlink power control for user-centric cell-free massive MIMO.
//!
//! The crate bundles everything needed to reproduce a learned max-min-fair
//! power-control policy end to end:
//!
//! * [`netgen`] draws network snapshots (geometry, large-scale fading with
//!   correlated shadowing, pilots, AP-UE association) and [`dataset`] stores them.
//! * [`perf`] evaluates channel-estimate quality, SINR, spectral efficiency and the
//!   soft-min utility.
//! * [`alloc`] holds the scalable heuristics (EPA, FPA, Lozano) and the centralized
//!   max-min benchmark built on a first-order cone feasibility solver.
//! * [`policy`] is the AP-centric BiLSTM power allocator, [`train`] its unsupervised
//!   trainer with a reverse-mode tape and finite-difference checker.
//! * [`harness`] wires the pieces into the `cfpc` command line tool.

pub mod alloc;
pub mod config;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod netgen;
pub mod perf;
pub mod policy;
pub mod train;

pub use config::SimConfig;
pub use error::{Error, Result};
pub use netgen::NetworkSnapshot;
pub use perf::PowerAllocation;
