//! Desk-scale simulator of node-level vertical federated learning (VFL) over
//! graph neural networks, together with a gradient-matching label-inference
//! attack and the server-side defenses commonly tested against it.
//!
//! The crate is organized around the data flow of a vertical federated GNN:
//!
//! - [`diffcore`] — dense/sparse tensor arithmetic with a recorded
//!   reverse-mode differentiation tape whose backward pass can itself be
//!   differentiated (the attack optimizes a loss defined on gradients).
//! - [`graphdata`] — citation-graph loading, adjacency normalization,
//!   vertical feature/edge partitioning, and synthetic graph generation.
//! - [`gnn`] — local GNN encoders (GCN, GraphSAGE-mean, GAT) and the
//!   server-side classifier head.
//! - [`vfl`] — the federated training loop: clients send embeddings, the
//!   server returns per-client embedding gradients, clients update locally;
//!   the gradient stream visible to one client can be persisted to a trace.
//! - [`defense`] — gradient clipping, Laplace noise, and top-magnitude
//!   compression applied to the released embedding gradients.
//! - [`attack`] — the label-inference engine: synthetic labels and a server
//!   clone are optimized so the adversarial local gradients match the real
//!   ones, across attacker knowledge levels and clone-selection strategies.
//! - [`harness`] — JSON-configured experiment runner, deterministic seeding,
//!   CSV/JSON-lines emission for sweeps.
//!
//! See the `examples/` directory for runnable entry points covering each
//! capability, and the `vfgnn` binary for the batch CLI.

pub mod attack;
pub mod defense;
pub mod diffcore;
pub mod gnn;
pub mod graphdata;
pub mod harness;
pub mod vfl;

mod error;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
