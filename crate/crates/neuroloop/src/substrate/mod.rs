//! Stimulate/record substrates the closed loop runs against.
//!
//! A substrate accepts stimulation matrices, advances its internal dynamics
//! in 1 ms steps, and returns recorded activity. Four kinds are provided:
//! a plastic spiking network (`spiking`), a rate-matched Poisson control
//! (`random`), playback of a stored recording (`replay`), and a planted
//! quality oracle used to validate parameter screening (`oracle`).

mod oracle;
mod random;
mod replay;
mod spiking;

pub use oracle::{OracleConfig, OracleSubstrate};
pub use random::RandomSubstrate;
pub use replay::{read_segments, write_segments, RecordedSegment, ReplaySubstrate};
pub use spiking::{SpikingConfig, SpikingSubstrate};

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

use crate::codec::{detect_spikes, EncodingParams, RegionLayout, ResponseMatrix, SpikeMatrix, StimulationMatrix};
use crate::{Error, Result};

/// What a stimulate/record call returns: spikes directly, or a voltage trace
/// that still needs threshold detection.
#[derive(Debug, Clone, PartialEq)]
pub enum Recording {
    Spikes(SpikeMatrix),
    Voltage(ResponseMatrix),
}

impl Recording {
    pub fn into_spikes(self, threshold_uv: f64, refractory_ms: f64) -> Result<SpikeMatrix> {
        match self {
            Recording::Spikes(s) => Ok(s),
            Recording::Voltage(v) => detect_spikes(&v, threshold_uv, refractory_ms),
        }
    }

    pub fn bins(&self) -> usize {
        match self {
            Recording::Spikes(s) => s.bins,
            Recording::Voltage(v) => v.samples,
        }
    }
}

pub trait Substrate: Send {
    fn channels(&self) -> usize;

    /// Virtual milliseconds elapsed since construction.
    fn clock_ms(&self) -> u64;

    /// True when recordings are spike matrices; false when they are voltage
    /// traces requiring detection.
    fn emits_spikes_directly(&self) -> bool;

    /// True when stimulation history does not alter future responses.
    fn stationary(&self) -> bool;

    /// Delivers `stim` while recording for `record_ms` (which must cover the
    /// stimulation) and advances the clock by `record_ms`.
    fn stimulate(&mut self, stim: &StimulationMatrix, record_ms: usize) -> Result<Recording>;

    /// Records without stimulation.
    fn spontaneous(&mut self, record_ms: usize) -> Result<Recording> {
        let zero = StimulationMatrix::zeros(self.channels(), record_ms, 1.0, 1.0);
        self.stimulate(&zero, record_ms)
    }

    /// Advances dynamics without recording.
    fn rest(&mut self, duration_ms: usize) -> Result<()>;
}

/// Shared stimulate() precondition checks.
pub(crate) fn check_stimulate(channels: usize, stim: &StimulationMatrix, record_ms: usize) -> Result<()> {
    if stim.channels != channels {
        return Err(Error::Contract(format!(
            "stimulation has {} channels, substrate has {channels}",
            stim.channels
        )));
    }
    if record_ms < stim.bins {
        return Err(Error::Contract(format!(
            "recording window {record_ms} ms shorter than stimulation {} ms",
            stim.bins
        )));
    }
    Ok(())
}

/// Substrate selection plus construction parameters, as stored in configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubstrateKind {
    Spiking(SpikingConfig),
    Random { rate_hz: f64 },
    Replay { path: PathBuf },
    Oracle(OracleConfig),
}

impl SubstrateKind {
    pub fn name(&self) -> &'static str {
        match self {
            SubstrateKind::Spiking(_) => "spiking",
            SubstrateKind::Random { .. } => "random",
            SubstrateKind::Replay { .. } => "replay",
            SubstrateKind::Oracle(_) => "oracle",
        }
    }
}

/// Builds a substrate. `trial_params` are the encoding parameters the trial
/// will use; the oracle kind derives its planted quality from them.
pub fn make_substrate(
    kind: &SubstrateKind,
    layout: &RegionLayout,
    seed: u64,
    trial_params: Option<&EncodingParams>,
) -> Result<Box<dyn Substrate>> {
    layout.validate()?;
    match kind {
        SubstrateKind::Spiking(cfg) => Ok(Box::new(SpikingSubstrate::new(cfg.clone(), layout, seed)?)),
        SubstrateKind::Random { rate_hz } => Ok(Box::new(RandomSubstrate::new(layout.channels, *rate_hz, seed)?)),
        SubstrateKind::Replay { path } => Ok(Box::new(ReplaySubstrate::from_path(path, layout.channels)?)),
        SubstrateKind::Oracle(cfg) => {
            let trial = trial_params.cloned().unwrap_or(cfg.target);
            Ok(Box::new(OracleSubstrate::new(cfg.clone(), layout.clone(), trial, seed)?))
        }
    }
}
