//! Deterministic, seedable simulator and analysis toolkit for a secure and
//! anonymous DHT lookup over a Chord-style identifier ring.
//!
//! Two engines share the overlay model:
//!
//! * an event-driven network simulator ([`world`]) that runs the full
//!   protocol — stabilization in both ring directions, iterative lookups,
//!   onion-routed multi-path queries, adversary behaviors, and the
//!   attacker-discovery machinery with CA adjudication — and emits security
//!   metrics;
//! * a snapshot analyzer ([`anonymity`]) that replays the passive-adversary
//!   observation model over a static converged network and computes
//!   initiator/target entropy via Monte-Carlo trials with pre-simulated
//!   priors.
//!
//! Everything is a pure function of (config, seed): re-running any scenario
//! reproduces its outputs bit for bit.

pub mod adversary;
pub mod anonpath;
pub mod config;
pub mod lookup;
pub mod overlay;
pub mod ring;
pub mod rng;
pub mod sentinel;
pub mod sig;
pub mod sim;
pub mod snapshot;
pub mod world;
