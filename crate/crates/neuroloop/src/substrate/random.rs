//! Poisson control substrate: rate-matched activity with no structure.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::codec::{SpikeMatrix, StimulationMatrix};
use crate::{Error, Result};

use super::{check_stimulate, Recording, Substrate};

/// Emits independent Poisson spikes on every channel and ignores
/// stimulation entirely.
pub struct RandomSubstrate {
    channels: usize,
    rate_hz: f64,
    clock_ms: u64,
    rng: ChaCha8Rng,
}

impl RandomSubstrate {
    pub fn new(channels: usize, rate_hz: f64, seed: u64) -> Result<Self> {
        if !(rate_hz >= 0.0) || rate_hz > 1000.0 {
            return Err(Error::Config(format!(
                "poisson rate must be in [0, 1000] Hz, got {rate_hz}"
            )));
        }
        Ok(RandomSubstrate {
            channels,
            rate_hz,
            clock_ms: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    fn draw(&mut self, record_ms: usize) -> SpikeMatrix {
        let p = self.rate_hz / 1000.0;
        let mut m = SpikeMatrix::zeros(self.channels, record_ms);
        if p > 0.0 {
            for c in 0..self.channels {
                for t in 0..record_ms {
                    if self.rng.gen_bool(p) {
                        m.set(c, t);
                    }
                }
            }
        }
        m
    }
}

impl Substrate for RandomSubstrate {
    fn channels(&self) -> usize {
        self.channels
    }

    fn clock_ms(&self) -> u64 {
        self.clock_ms
    }

    fn emits_spikes_directly(&self) -> bool {
        true
    }

    fn stationary(&self) -> bool {
        true
    }

    fn stimulate(&mut self, stim: &StimulationMatrix, record_ms: usize) -> Result<Recording> {
        check_stimulate(self.channels, stim, record_ms)?;
        let m = self.draw(record_ms);
        self.clock_ms += record_ms as u64;
        Ok(Recording::Spikes(m))
    }

    fn rest(&mut self, duration_ms: usize) -> Result<()> {
        // Advance the stream so rest periods consume entropy like recording
        // does; activity during rest is simply not observed.
        let _ = self.draw(duration_ms);
        self.clock_ms += duration_ms as u64;
        Ok(())
    }
}
