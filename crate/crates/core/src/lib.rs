//! Simulator of a time-multiplexed photonic spiking network built around a
//! single optically injected VCSEL, with a least-squares readout and an
//! Iris classification harness.

pub mod bench;
pub mod config;
pub mod detector;
pub mod input;
pub mod laser;
pub mod readout;
