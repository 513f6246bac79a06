//! Error-correcting codes over the reals for neural network weight matrices.
//!
//! A linear layer `y = Hx` can be made self-checking by training (or
//! projecting) its weight matrix `H` onto the null space of a set of linear
//! constraints: general constraints `<B_j, H> = 0` and row constraints
//! `a_i' H = 0`. Row constraints carry over to the layer output — `a_i' y`
//! is zero for a fault-free layer and generically nonzero otherwise — so a
//! handful of inner products per forward pass detects both corrupted weights
//! and corrupted arithmetic. Because sparse corruption of a constrained
//! matrix leaves a recoverable trace in *all* constraint residuals, the
//! corruption itself can then be reconstructed by l1 minimization and
//! subtracted out.
//!
//! The crate is organized bottom-up:
//!
//! * [`numkernel`] — dense matrices/vectors, products, Householder QR.
//! * [`codec`] — constraint generation, encoding (projection), verification.
//! * [`faultsim`] — deterministic sparse fault injection for experiments.
//! * [`lpsolve`] — the l1-minimization solver (LP via interior point).
//! * [`decoder`] — syndrome detection and fault correction.
//! * [`network`] — a small MLP: training, encoding, protected inference.
//! * [`dataio`] — IDX image data, model checkpoints, results tables.
//! * [`experiments`] — the sweep drivers behind the CLI experiment commands.

pub mod codec;
pub mod dataio;
pub mod decoder;
pub mod experiments;
pub mod faultsim;
pub mod lpsolve;
pub mod network;
pub mod numkernel;
pub mod rng;
