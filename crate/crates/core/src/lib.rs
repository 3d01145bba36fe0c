//! Desk-scale simulation of the jamming-based "blocking card" defence for
//! ISO/IEC 14443 Type A smart cards, and of the signal-processing attack
//! that recovers card replies through the jamming.
//!
//! The crate is organised bottom-up:
//!
//! - [`dsp`]: trace types, filtering, windowed statistics, trace files
//! - [`protocol`]: ISO 14443A framing and the MIFARE read sessions
//! - [`modem`]: modified-Miller / Manchester line coding to and from envelopes
//! - [`jammer`]: blocking-card noise models and their superposition
//! - [`pipeline`]: session simulation, trace discard, segmentation, averaging,
//!   demodulation and the attack metrics
//! - [`spectrum`]: PSD/PDF estimation and blocking-card classification

pub mod dsp;
pub mod error;
pub mod jammer;
pub mod modem;
pub mod pipeline;
pub mod protocol;
pub mod spectrum;

pub use error::{Error, Result};
