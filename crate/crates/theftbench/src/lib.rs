//! theftbench: a desk-scale testbed for energy-theft detection and its
//! adversarial weaknesses.
//!
//! The library covers the full pipeline:
//!
//! * [`dataio`] — half-hourly meter-reading ingestion, daily regulation,
//!   a synthetic normal-consumption generator, and dataset CSV files;
//! * [`theftgen`] — six parametric theft scenarios used to pollute normal
//!   datasets into balanced training sets;
//! * [`nnengine`] — a from-scratch 64-bit neural-network engine (Dense,
//!   LSTM, Conv) with training, exact input gradients, and a
//!   finite-difference oracle;
//! * [`attack`] — the iterative gradient-ascent measurement attack plus
//!   two vanilla baselines;
//! * [`experiment`] — white-box/black-box sweeps, metrics, and reports.
//!
//! All randomness flows through [`rng::stream_rng`], so every artifact is
//! reproducible from the seeds recorded in its inputs.

pub mod attack;
pub mod dataio;
pub mod error;
pub mod experiment;
pub mod nnengine;
pub mod rng;
pub mod theftgen;

pub use error::{Error, Result};
