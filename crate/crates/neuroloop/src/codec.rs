//! Encoding and decoding between task variables and stimulation/activity.
//!
//! Encoding maps a scalar in [x_min, x_max] to a pulse frequency by a linear
//! rate law and lays the pulse onsets out on a 1 ms grid across the encoding
//! channels. Decoding counts spikes per decode region, normalizes by a
//! running baseline, and picks the densest region's action.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::env::Action;
use crate::{Error, Result};

/// Highest encodable pulse frequency; above this the 1 ms onset grid aliases.
pub const MAX_PULSE_FREQUENCY_HZ: f64 = 500.0;

/// Additive constant in the count-density denominator.
pub const DEFAULT_DENSITY_EPSILON: f64 = 1.0;

/// Most recent windows contributing to a baseline estimate.
pub const BASELINE_WINDOW_CAP: usize = 60;

/// Stimulation pulse shape; all pulses share it.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PulsePhase {
    #[default]
    #[serde(rename = "biphasic-negative-leading")]
    BiphasicNegativeLeading,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingParams {
    /// Pulse frequency at x_min (Hz).
    pub f_min: f64,
    /// Pulse frequency at x_max (Hz).
    pub f_max: f64,
    /// Pulse amplitude (uA).
    pub amplitude: f64,
    /// Pulse width (us).
    pub pulse_width: f64,
    /// Encoding ticks per second (Hz).
    pub tick_rate: f64,
    /// Ticks delivered per task step.
    pub ticks_per_step: u32,
    /// Lower edge of the encoded variable.
    pub x_min: f64,
    /// Upper edge of the encoded variable.
    pub x_max: f64,
}

impl Default for EncodingParams {
    fn default() -> Self {
        EncodingParams {
            f_min: 4.0,
            f_max: 40.0,
            amplitude: 2.0,
            pulse_width: 80.0,
            tick_rate: 2.0,
            ticks_per_step: 4,
            x_min: -1.0,
            x_max: 1.0,
        }
    }
}

impl EncodingParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_min > 0.0) || !(self.f_max > self.f_min) {
            return Err(Error::Parameter(format!(
                "need 0 < f_min < f_max, got f_min={} f_max={}",
                self.f_min, self.f_max
            )));
        }
        if self.f_max > MAX_PULSE_FREQUENCY_HZ {
            return Err(Error::Parameter(format!(
                "f_max {} Hz aliases the 1 ms onset grid (limit {})",
                self.f_max, MAX_PULSE_FREQUENCY_HZ
            )));
        }
        if !(self.amplitude > 0.0) || !(self.pulse_width > 0.0) {
            return Err(Error::Parameter("amplitude and pulse_width must be positive".into()));
        }
        if !(self.tick_rate > 0.0) || self.ticks_per_step == 0 {
            return Err(Error::Parameter("tick_rate and ticks_per_step must be positive".into()));
        }
        if !(self.x_max > self.x_min) {
            return Err(Error::Parameter("x_max must exceed x_min".into()));
        }
        Ok(())
    }

    /// Duration of one encoding tick in whole milliseconds.
    pub fn tick_ms(&self) -> usize {
        (1000.0 / self.tick_rate).round() as usize
    }

    /// Duration of one interaction (decode) window in milliseconds.
    pub fn interaction_ms(&self) -> usize {
        self.tick_ms() * self.ticks_per_step as usize
    }
}

/// Linear rate law: x maps affinely from [x_min, x_max] onto [f_min, f_max].
/// Out-of-range x clamps; `clamped` reports that it did.
pub fn rate_frequency_flagged(x: f64, p: &EncodingParams) -> (f64, bool) {
    let clamped = x < p.x_min || x > p.x_max;
    let x = x.clamp(p.x_min, p.x_max);
    let f = p.f_min + (p.f_max - p.f_min) * (x - p.x_min) / (p.x_max - p.x_min);
    (f, clamped)
}

pub fn rate_frequency(x: f64, p: &EncodingParams) -> f64 {
    rate_frequency_flagged(x, p).0
}

/// Binary stimulation onset grid: `channels` rows by `bins` 1 ms columns.
/// Every onset shares the same amplitude, width, and phase.
#[derive(Debug, Clone, PartialEq)]
pub struct StimulationMatrix {
    pub channels: usize,
    pub bins: usize,
    pub amplitude: f64,
    pub pulse_width: f64,
    pub phase: PulsePhase,
    onsets: Vec<bool>,
}

impl StimulationMatrix {
    pub fn zeros(channels: usize, bins: usize, amplitude: f64, pulse_width: f64) -> Self {
        StimulationMatrix {
            channels,
            bins,
            amplitude,
            pulse_width,
            phase: PulsePhase::default(),
            onsets: vec![false; channels * bins],
        }
    }

    pub fn set(&mut self, channel: usize, bin: usize) {
        self.onsets[channel * self.bins + bin] = true;
    }

    pub fn get(&self, channel: usize, bin: usize) -> bool {
        self.onsets[channel * self.bins + bin]
    }

    pub fn onset_count(&self, channel: usize) -> usize {
        self.onsets[channel * self.bins..(channel + 1) * self.bins]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    pub fn total_onsets(&self) -> usize {
        self.onsets.iter().filter(|&&b| b).count()
    }

    pub fn channel_onset_bins(&self, channel: usize) -> Vec<usize> {
        (0..self.bins).filter(|&t| self.get(channel, t)).collect()
    }

    pub fn is_empty(&self) -> bool {
        !self.onsets.iter().any(|&b| b)
    }

    /// CSV raster, one `channel,time_ms` row per onset.
    pub fn write_raster_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "channel,time_ms")?;
        for c in 0..self.channels {
            for t in self.channel_onset_bins(c) {
                writeln!(w, "{c},{t}")?;
            }
        }
        Ok(())
    }
}

/// Compact JSON form: the onset grid is run-length encoded row-major as
/// alternating zero/one run lengths, starting with a zero run.
#[derive(Debug, Serialize, Deserialize)]
struct StimulationMatrixWire {
    channels: usize,
    bins: usize,
    amplitude: f64,
    pulse_width: f64,
    phase: PulsePhase,
    onsets: Vec<usize>,
}

fn rle_encode(bits: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0usize;
    for &b in bits {
        if b == current {
            len += 1;
        } else {
            runs.push(len);
            current = b;
            len = 1;
        }
    }
    if len > 0 {
        runs.push(len);
    }
    runs
}

fn rle_decode(runs: &[usize], expected: usize) -> Result<Vec<bool>> {
    let mut bits = Vec::with_capacity(expected);
    let mut value = false;
    for &run in runs {
        bits.extend(std::iter::repeat(value).take(run));
        value = !value;
    }
    if bits.len() != expected {
        return Err(Error::Data(format!(
            "run-length data decodes to {} cells, expected {}",
            bits.len(),
            expected
        )));
    }
    Ok(bits)
}

impl Serialize for StimulationMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        StimulationMatrixWire {
            channels: self.channels,
            bins: self.bins,
            amplitude: self.amplitude,
            pulse_width: self.pulse_width,
            phase: self.phase,
            onsets: rle_encode(&self.onsets),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for StimulationMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let wire = StimulationMatrixWire::deserialize(d)?;
        let onsets = rle_decode(&wire.onsets, wire.channels * wire.bins).map_err(serde::de::Error::custom)?;
        Ok(StimulationMatrix {
            channels: wire.channels,
            bins: wire.bins,
            amplitude: wire.amplitude,
            pulse_width: wire.pulse_width,
            phase: wire.phase,
            onsets,
        })
    }
}

/// Binary spike grid: `channels` rows by `bins` 1 ms columns.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeMatrix {
    pub channels: usize,
    pub bins: usize,
    spikes: Vec<bool>,
}

impl SpikeMatrix {
    pub fn zeros(channels: usize, bins: usize) -> Self {
        SpikeMatrix {
            channels,
            bins,
            spikes: vec![false; channels * bins],
        }
    }

    pub fn set(&mut self, channel: usize, bin: usize) {
        self.spikes[channel * self.bins + bin] = true;
    }

    pub fn get(&self, channel: usize, bin: usize) -> bool {
        self.spikes[channel * self.bins + bin]
    }

    pub fn channel_count(&self, channel: usize) -> usize {
        self.spikes[channel * self.bins..(channel + 1) * self.bins]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    pub fn total_spikes(&self) -> usize {
        self.spikes.iter().filter(|&&b| b).count()
    }

    pub fn channel_spike_bins(&self, channel: usize) -> Vec<usize> {
        (0..self.bins).filter(|&t| self.get(channel, t)).collect()
    }

    /// Spike count summed over a set of channels.
    pub fn count_over(&self, channels: &[usize]) -> u64 {
        channels.iter().map(|&c| self.channel_count(c) as u64).sum()
    }

    pub fn write_raster_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "channel,time_ms")?;
        for c in 0..self.channels {
            for t in self.channel_spike_bins(c) {
                writeln!(w, "{c},{t}")?;
            }
        }
        Ok(())
    }
}

/// Multichannel voltage trace in microvolts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseMatrix {
    pub channels: usize,
    pub samples: usize,
    pub sample_rate_hz: f64,
    values: Vec<f64>,
}

impl ResponseMatrix {
    pub fn zeros(channels: usize, samples: usize, sample_rate_hz: f64) -> Self {
        ResponseMatrix {
            channels,
            samples,
            sample_rate_hz,
            values: vec![0.0; channels * samples],
        }
    }

    pub fn set(&mut self, channel: usize, sample: usize, uv: f64) {
        self.values[channel * self.samples + sample] = uv;
    }

    pub fn get(&self, channel: usize, sample: usize) -> f64 {
        self.values[channel * self.samples + sample]
    }
}

/// Threshold-crossing spike detection. A spike is the first sample of each
/// downward crossing below `threshold_uv` (a negative value); further
/// crossings within `refractory_ms` of the last accepted spike on that
/// channel are suppressed.
pub fn detect_spikes(v: &ResponseMatrix, threshold_uv: f64, refractory_ms: f64) -> Result<SpikeMatrix> {
    if !(threshold_uv < 0.0) {
        return Err(Error::Parameter(format!(
            "detection threshold must be negative, got {threshold_uv}"
        )));
    }
    if !(refractory_ms >= 0.0) {
        return Err(Error::Parameter("refractory must be non-negative".into()));
    }
    let refractory_samples = (refractory_ms * v.sample_rate_hz / 1000.0).ceil() as usize;
    let mut out = SpikeMatrix::zeros(v.channels, v.samples);
    for c in 0..v.channels {
        let mut last: Option<usize> = None;
        for t in 0..v.samples {
            let x = v.get(c, t);
            if !x.is_finite() {
                return Err(Error::Data(format!("non-finite sample at channel {c}, sample {t}")));
            }
            let crossing = x < threshold_uv && (t == 0 || v.get(c, t - 1) >= threshold_uv);
            if crossing {
                let suppressed = matches!(last, Some(l) if t - l < refractory_samples);
                if !suppressed {
                    out.set(c, t);
                    last = Some(t);
                }
            }
        }
    }
    Ok(out)
}

/// Channel-role assignment on a rectangular electrode grid. Channel `c` sits
/// at grid position (c % grid_width, c / grid_width).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionLayout {
    pub channels: usize,
    pub grid_width: usize,
    pub encoding: Vec<usize>,
    /// One decode region per action, indexed by `Action::index`.
    pub decode: [Vec<usize>; 3],
}

impl RegionLayout {
    /// 64-channel layout: the central 4x4 block encodes; three 12-channel
    /// decode regions sit against the north, west, and east edges.
    pub fn centered_default() -> Self {
        let ch = |x: usize, y: usize| y * 8 + x;
        let mut encoding = Vec::new();
        for y in 2..6 {
            for x in 2..6 {
                encoding.push(ch(x, y));
            }
        }
        let mut forward = Vec::new();
        for y in 0..2 {
            for x in 1..7 {
                forward.push(ch(x, y));
            }
        }
        let mut left = Vec::new();
        let mut right = Vec::new();
        for y in 2..8 {
            for x in 0..2 {
                left.push(ch(x, y));
            }
            for x in 6..8 {
                right.push(ch(x, y));
            }
        }
        RegionLayout {
            channels: 64,
            grid_width: 8,
            encoding,
            decode: [forward, left, right],
        }
    }

    /// 64-channel layout with encoding and decoding on opposite sides:
    /// encoding occupies the two west columns, the three decode regions tile
    /// the east half in column pairs.
    pub fn split_sides() -> Self {
        let ch = |x: usize, y: usize| y * 8 + x;
        let mut encoding = Vec::new();
        for y in 0..8 {
            for x in 0..2 {
                encoding.push(ch(x, y));
            }
        }
        let region = |x0: usize| -> Vec<usize> {
            let mut v = Vec::new();
            for y in 1..7 {
                for x in x0..x0 + 2 {
                    v.push(ch(x, y));
                }
            }
            v
        };
        RegionLayout {
            channels: 64,
            grid_width: 8,
            encoding,
            decode: [region(2), region(4), region(6)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.grid_width == 0 || self.channels % self.grid_width != 0 {
            return Err(Error::Config("channel count must tile the grid width".into()));
        }
        if self.encoding.is_empty() {
            return Err(Error::Config("encoding mask is empty".into()));
        }
        let mut seen = vec![false; self.channels];
        let mut mark = |chs: &[usize]| -> Result<()> {
            for &c in chs {
                if c >= self.channels {
                    return Err(Error::Config(format!("channel {c} out of range")));
                }
                if seen[c] {
                    return Err(Error::Config(format!("channel {c} assigned to two regions")));
                }
                seen[c] = true;
            }
            Ok(())
        };
        mark(&self.encoding)?;
        for region in &self.decode {
            if region.is_empty() {
                return Err(Error::Config("decode region is empty".into()));
            }
            mark(region)?;
        }
        let n0 = self.decode[0].len();
        if self.decode.iter().any(|r| r.len() != n0) {
            return Err(Error::Config("decode regions must have equal cardinality".into()));
        }
        Ok(())
    }

    pub fn grid_pos(&self, channel: usize) -> (usize, usize) {
        (channel % self.grid_width, channel / self.grid_width)
    }

    /// All channels carrying stimulation during feedback.
    pub fn feedback_channels(&self) -> Vec<usize> {
        let mut v = self.encoding.clone();
        for region in &self.decode {
            v.extend_from_slice(region);
        }
        v.sort_unstable();
        v
    }
}

/// Lays one encoding tick out on the onset grid: pulses at times k/F for
/// k = 0, 1, ... while k/F is inside the tick, identically on every encoding
/// channel. Returns the matrix and whether x was clamped into range.
pub fn encode_tick(x: f64, p: &EncodingParams, layout: &RegionLayout) -> Result<(StimulationMatrix, bool)> {
    p.validate()?;
    let (f, clamped) = rate_frequency_flagged(x, p);
    if f > MAX_PULSE_FREQUENCY_HZ {
        return Err(Error::Parameter(format!(
            "encoded frequency {f} Hz exceeds the {MAX_PULSE_FREQUENCY_HZ} Hz onset-grid limit"
        )));
    }
    let bins = p.tick_ms();
    let mut m = StimulationMatrix::zeros(layout.channels, bins, p.amplitude, p.pulse_width);
    let mut onset_bins = Vec::new();
    let mut k = 0u64;
    loop {
        let t_ms = k as f64 * 1000.0 / f;
        if t_ms >= bins as f64 {
            break;
        }
        onset_bins.push(t_ms.floor() as usize);
        k += 1;
    }
    for &c in &layout.encoding {
        for &t in &onset_bins {
            m.set(c, t);
        }
    }
    Ok((m, clamped))
}

/// Per-region spike-rate baseline, a mean over up to the last
/// `BASELINE_WINDOW_CAP` calibration windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRates {
    pub per_region: [f64; 3],
    pub windows_used: usize,
}

/// Averages per-region spike counts over the most recent windows.
pub fn update_baseline(windows: &[[u32; 3]]) -> Result<BaselineRates> {
    if windows.is_empty() {
        return Err(Error::Data("baseline update requires at least one window".into()));
    }
    let used = windows.len().min(BASELINE_WINDOW_CAP);
    let recent = &windows[windows.len() - used..];
    let mut per_region = [0.0f64; 3];
    for w in recent {
        for (acc, &c) in per_region.iter_mut().zip(w.iter()) {
            *acc += c as f64;
        }
    }
    for acc in &mut per_region {
        *acc /= used as f64;
    }
    Ok(BaselineRates { per_region, windows_used: used })
}

/// Decodes an action from a window's spikes: per-region count divided by
/// (baseline + epsilon), argmax, exact ties broken uniformly with `rng`.
pub fn count_decode(
    spikes: &SpikeMatrix,
    layout: &RegionLayout,
    baseline: &BaselineRates,
    epsilon: f64,
    rng: &mut ChaCha8Rng,
) -> (Action, [u64; 3], [f64; 3]) {
    let mut counts = [0u64; 3];
    let mut densities = [0.0f64; 3];
    for (i, region) in layout.decode.iter().enumerate() {
        counts[i] = spikes.count_over(region);
        densities[i] = counts[i] as f64 / (baseline.per_region[i] + epsilon);
    }
    let max = densities.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tied: Vec<usize> = (0..3).filter(|&i| densities[i] == max).collect();
    let pick = tied[rng.gen_range(0..tied.len())];
    (Action::from_index(pick).expect("region index in range"), counts, densities)
}
