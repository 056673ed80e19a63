//! Exact probabilistic inference and EM training for deep generative networks
//! built from continuous piecewise-affine (CPA) layers.
//!
//! A network `g` made of affine layers with ReLU-family activations is affine
//! on each region of a polyhedral partition of its latent space. With a
//! Gaussian prior on the latent variable and Gaussian observation noise, every
//! quantity of interest — the marginal density `p(x)`, the posterior
//! `p(z | x)`, its moments, and the EM parameter updates — decomposes into a
//! finite sum of Gaussian integrals over convex polytopes, each of which this
//! crate evaluates in closed form (up to scalar normal CDFs):
//!
//! * [`network`] — the CPA network, its per-region affine maps and
//!   activation codes;
//! * [`geometry`] — the latent-space partition: H-representations, region
//!   enumeration, vertex enumeration, triangulation, and the signed
//!   cone decomposition used to reduce polytope integrals to orthant-style
//!   integrals;
//! * [`gaussian`] — rectangle CDFs and the first/second truncated-moment
//!   matrices that make those integrals closed-form;
//! * [`inference`] — exact marginals, posteriors, posterior moments and MAP
//!   latents;
//! * [`em`] — exact expectation–maximization updates for all parameters;
//! * [`oracle`] — independent Monte-Carlo / importance-sampling / quadrature
//!   estimators used to cross-check every analytical quantity;
//! * [`cli`] — the `cpaem` command-line interface;
//! * [`io`] — model/data file formats and run-config sidecars.
//!
//! Everything is deterministic given a seed: random streams are counter-based
//! (ChaCha) with explicit 64-bit seeds, and all parallel reductions happen in
//! a fixed order.

pub mod cli;
pub mod em;
pub mod error;
pub mod gaussian;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod lp;
pub mod network;
pub mod oracle;
pub mod rng;

pub use error::{Error, Result};
