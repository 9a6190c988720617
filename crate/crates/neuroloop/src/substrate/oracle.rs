//! Planted-quality oracle substrate.
//!
//! Behaves like a substrate that has already learned the task, but whose
//! reliability depends on how close the trial's encoding parameters sit to a
//! planted optimum. Screening pipelines run against it have a known answer.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{rate_frequency, EncodingParams, RegionLayout, SpikeMatrix, StimulationMatrix};
use crate::{Error, Result};

use super::{check_stimulate, Recording, Substrate};

/// Per-dimension normalization bounds for the planted-quality distance,
/// spanning the stage-1 screening ranges.
pub const DEFAULT_QUALITY_BOUNDS: [(f64, f64); 6] = [
    (2.0, 5.0),    // f_min
    (40.0, 100.0), // f_max
    (1.0, 2.5),    // amplitude
    (40.0, 160.0), // pulse_width
    (1.0, 4.0),    // tick_rate
    (2.0, 8.0),    // ticks_per_step
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    /// Planted optimal encoding parameters.
    pub target: EncodingParams,
    /// Per-dimension (lo, hi) used to normalize the quality distance.
    pub bounds: [(f64, f64); 6],
    /// Spontaneous rate per channel (Hz).
    pub background_hz: f64,
    /// Spikes deposited in the chosen decode region per encoding tick.
    pub response_spikes: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            target: EncodingParams::default(),
            bounds: DEFAULT_QUALITY_BOUNDS,
            background_hz: 1.0,
            response_spikes: 30,
        }
    }
}

fn screened_dims(p: &EncodingParams) -> [f64; 6] {
    [
        p.f_min,
        p.f_max,
        p.amplitude,
        p.pulse_width,
        p.tick_rate,
        p.ticks_per_step as f64,
    ]
}

/// exp(-||normalized(trial) - normalized(target)||^2) over the six screened
/// dimensions; 1.0 exactly at the planted optimum.
pub fn planted_quality(trial: &EncodingParams, cfg: &OracleConfig) -> f64 {
    let t = screened_dims(trial);
    let o = screened_dims(&cfg.target);
    let mut d2 = 0.0;
    for i in 0..6 {
        let (lo, hi) = cfg.bounds[i];
        let span = (hi - lo).max(f64::MIN_POSITIVE);
        let a = (t[i] - lo) / span;
        let b = (o[i] - lo) / span;
        d2 += (a - b) * (a - b);
    }
    (-d2).exp()
}

pub struct OracleSubstrate {
    cfg: OracleConfig,
    layout: RegionLayout,
    trial: EncodingParams,
    quality: f64,
    clock_ms: u64,
    rng: ChaCha8Rng,
}

impl OracleSubstrate {
    pub fn new(cfg: OracleConfig, layout: RegionLayout, trial: EncodingParams, seed: u64) -> Result<Self> {
        if !(cfg.background_hz >= 0.0) || cfg.background_hz > 1000.0 {
            return Err(Error::Config(format!(
                "background rate must be in [0, 1000] Hz, got {}",
                cfg.background_hz
            )));
        }
        let quality = planted_quality(&trial, &cfg);
        Ok(OracleSubstrate {
            cfg,
            layout,
            trial,
            quality,
            clock_ms: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn quality(&self) -> f64 {
        self.quality
    }

    fn background(&mut self, m: &mut SpikeMatrix) {
        let p = self.cfg.background_hz / 1000.0;
        if p <= 0.0 {
            return;
        }
        for c in 0..m.channels {
            for t in 0..m.bins {
                if self.rng.gen_bool(p) {
                    m.set(c, t);
                }
            }
        }
    }

    /// Recovers the encoded sensor level from the onset rate on the encoding
    /// channels, assuming the trial's own rate law.
    fn decode_intent(&self, stim: &StimulationMatrix) -> usize {
        let c = self.layout.encoding[0];
        let count = stim.onset_count(c) as f64;
        let duration_s = stim.bins as f64 / 1000.0;
        let f = count / duration_s;
        let levels = [-1.0f64, 0.0, 1.0];
        let mut best = 0usize;
        let mut best_err = f64::INFINITY;
        for (i, &x) in levels.iter().enumerate() {
            let err = (rate_frequency(x, &self.trial) - f).abs();
            if err < best_err {
                best_err = err;
                best = i;
            }
        }
        // Sensor -1 -> left region (1), 0 -> forward (0), +1 -> right (2).
        match best {
            0 => 1,
            1 => 0,
            _ => 2,
        }
    }
}

impl Substrate for OracleSubstrate {
    fn channels(&self) -> usize {
        self.layout.channels
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
        check_stimulate(self.layout.channels, stim, record_ms)?;
        let mut m = SpikeMatrix::zeros(self.layout.channels, record_ms);
        self.background(&mut m);

        let touches_decode = self
            .layout
            .decode
            .iter()
            .flatten()
            .any(|&c| stim.onset_count(c) > 0);
        let touches_encoding = self.layout.encoding.iter().any(|&c| stim.onset_count(c) > 0);

        // Feedback patterns stimulate decode channels; only pure encoding
        // stimulation elicits the planted response.
        if touches_encoding && !touches_decode {
            let intended = self.decode_intent(stim);
            let region = if self.rng.gen_bool(self.quality) {
                intended
            } else {
                self.rng.gen_range(0..3)
            };
            let chans = &self.layout.decode[region];
            for i in 0..self.cfg.response_spikes {
                let c = chans[i % chans.len()];
                // Redraw on occupied cells so the deposited count is exact.
                for _ in 0..64 {
                    let t = self.rng.gen_range(0..record_ms);
                    if !m.get(c, t) {
                        m.set(c, t);
                        break;
                    }
                }
            }
        }
        self.clock_ms += record_ms as u64;
        Ok(Recording::Spikes(m))
    }

    fn rest(&mut self, duration_ms: usize) -> Result<()> {
        self.clock_ms += duration_ms as u64;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::encode_tick;

    fn layout() -> RegionLayout {
        RegionLayout::centered_default()
    }

    fn at_target() -> (OracleConfig, EncodingParams) {
        let cfg = OracleConfig::default();
        let trial = cfg.target;
        (cfg, trial)
    }

    #[test]
    fn quality_is_one_at_target_and_falls_off() {
        let (cfg, trial) = at_target();
        assert_eq!(planted_quality(&trial, &cfg), 1.0);
        let mut off = trial;
        off.f_max = 100.0;
        let q1 = planted_quality(&off, &cfg);
        assert!(q1 < 1.0);
        off.amplitude = 1.0;
        let q2 = planted_quality(&off, &cfg);
        assert!(q2 < q1, "quality monotone in distance");
    }

    #[test]
    fn at_target_every_encoding_tick_lands_in_the_intended_region() {
        let (cfg, trial) = at_target();
        let lay = layout();
        let mut cfg = cfg;
        cfg.background_hz = 0.0;
        for (x, region) in [(-1.0, 1usize), (0.0, 0), (1.0, 2)] {
            let mut s = OracleSubstrate::new(cfg.clone(), lay.clone(), trial, 7).unwrap();
            let (stim, _) = encode_tick(x, &trial, &lay).unwrap();
            for _ in 0..20 {
                let rec = s.stimulate(&stim, stim.bins).unwrap();
                let spikes = rec.into_spikes(-50.0, 2.0).unwrap();
                let mut counts = [0u64; 3];
                for (i, r) in lay.decode.iter().enumerate() {
                    counts[i] = spikes.count_over(r);
                }
                assert_eq!(counts[region], cfg.response_spikes as u64);
                for (i, &c) in counts.iter().enumerate() {
                    if i != region {
                        assert_eq!(c, 0);
                    }
                }
            }
        }
    }

    #[test]
    fn accuracy_tracks_quality_monotonically() {
        let lay = layout();
        let (cfg, target) = at_target();
        let mut accuracies = Vec::new();
        for f_max in [40.0, 60.0, 100.0] {
            let mut trial = target;
            trial.f_max = f_max;
            let mut cfg = cfg.clone();
            cfg.background_hz = 0.0;
            let mut s = OracleSubstrate::new(cfg, lay.clone(), trial, 3).unwrap();
            let (stim, _) = encode_tick(0.0, &trial, &lay).unwrap();
            let mut hits = 0;
            let n = 400;
            for _ in 0..n {
                let spikes = s.stimulate(&stim, stim.bins).unwrap().into_spikes(-50.0, 2.0).unwrap();
                if spikes.count_over(&lay.decode[0]) > 0 {
                    hits += 1;
                }
            }
            accuracies.push(hits as f64 / n as f64);
        }
        assert!(accuracies[0] > accuracies[1]);
        assert!(accuracies[1] > accuracies[2]);
    }

    #[test]
    fn feedback_stimulation_elicits_no_planted_response() {
        let (cfg, trial) = at_target();
        let lay = layout();
        let mut cfg = cfg;
        cfg.background_hz = 0.0;
        let mut s = OracleSubstrate::new(cfg, lay.clone(), trial, 1).unwrap();
        let fb = crate::feedback::reinforcing_feedback(2000, &lay, &crate::feedback::FeedbackParams::default()).unwrap();
        let spikes = s.stimulate(&fb, fb.bins).unwrap().into_spikes(-50.0, 2.0).unwrap();
        assert_eq!(spikes.total_spikes(), 0);
    }

    #[test]
    fn spontaneous_windows_carry_only_background() {
        let (cfg, trial) = at_target();
        let lay = layout();
        let mut s = OracleSubstrate::new(cfg, lay.clone(), trial, 5).unwrap();
        let spikes = s.spontaneous(1000).unwrap().into_spikes(-50.0, 2.0).unwrap();
        // 64 channels at 1 Hz for 1 s: about 64 spikes, loosely bounded.
        let total = spikes.total_spikes();
        assert!(total > 20 && total < 150, "background {total}");
    }

    #[test]
    fn deterministic_under_seed() {
        let (cfg, trial) = at_target();
        let lay = layout();
        let (stim, _) = encode_tick(1.0, &trial, &lay).unwrap();
        let run = |seed| {
            let mut s = OracleSubstrate::new(cfg.clone(), lay.clone(), trial, seed).unwrap();
            let a = s.stimulate(&stim, stim.bins).unwrap();
            let b = s.spontaneous(500).unwrap();
            (a, b)
        };
        assert_eq!(run(11), run(11));
    }
}
