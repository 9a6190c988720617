//! Reward-conditioned feedback stimulation.
//!
//! Positive reward selects a reinforcing pattern: synchronized pulse bursts
//! on every encoding and decode channel. Non-positive reward selects an
//! unstructured plasticity pattern: a random subset of those channels firing
//! at independently re-drawn random rates.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{EncodingParams, RegionLayout, StimulationMatrix};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    Reinforcing,
    Plasticity,
}

/// Reward > 0 reinforces; anything else perturbs.
pub fn select_feedback(reward: f64) -> FeedbackKind {
    if reward > 0.0 {
        FeedbackKind::Reinforcing
    } else {
        FeedbackKind::Plasticity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackParams {
    /// Bursts per reinforcing delivery.
    pub burst_count: u32,
    /// Intra-burst pulse rate (Hz).
    pub burst_rate: f64,
    /// Single burst length (ms).
    pub burst_duration_ms: f64,
    /// Per-interval rate draw range for plasticity stimulation (Hz).
    pub random_rate_range: (f64, f64),
    /// Per-channel activation probability for plasticity stimulation.
    pub activation_prob: f64,
    /// Feedback window length as a multiple of the interaction period.
    pub duration_multiplier: f64,
    /// Pulse amplitude (uA), inherited from the encoding parameters.
    pub amplitude: f64,
    /// Pulse width (us), inherited from the encoding parameters.
    pub pulse_width: f64,
}

impl FeedbackParams {
    /// Defaults with amplitude and pulse width taken from `enc`.
    pub fn inheriting(enc: &EncodingParams) -> Self {
        FeedbackParams {
            burst_count: 5,
            burst_rate: 100.0,
            burst_duration_ms: 80.0,
            random_rate_range: (3.0, 25.0),
            activation_prob: 1.0 / 3.0,
            duration_multiplier: 2.0,
            amplitude: enc.amplitude,
            pulse_width: enc.pulse_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.burst_count == 0 || !(self.burst_rate > 0.0) || !(self.burst_duration_ms > 0.0) {
            return Err(Error::Parameter("burst structure must be positive".into()));
        }
        let (lo, hi) = self.random_rate_range;
        if !(lo > 0.0) || !(hi > lo) {
            return Err(Error::Parameter(format!(
                "random rate range must satisfy 0 < lo < hi, got ({lo}, {hi})"
            )));
        }
        if !(0.0..=1.0).contains(&self.activation_prob) {
            return Err(Error::Parameter("activation_prob must be in [0, 1]".into()));
        }
        if !(self.duration_multiplier > 0.0) {
            return Err(Error::Parameter("duration_multiplier must be positive".into()));
        }
        if !(self.amplitude > 0.0) || !(self.pulse_width > 0.0) {
            return Err(Error::Parameter("amplitude and pulse_width must be positive".into()));
        }
        Ok(())
    }

    /// Feedback window length for a given interaction period.
    pub fn window_ms(&self, interaction_ms: usize) -> usize {
        (self.duration_multiplier * interaction_ms as f64).round() as usize
    }
}

impl Default for FeedbackParams {
    fn default() -> Self {
        FeedbackParams::inheriting(&EncodingParams::default())
    }
}

/// Reinforcing pattern: `burst_count` bursts of `burst_rate` pulses, burst k
/// centered at (k + 0.5)/burst_count of the window, identical on every
/// encoding and decode channel.
pub fn reinforcing_feedback(
    interaction_ms: usize,
    layout: &RegionLayout,
    p: &FeedbackParams,
) -> Result<StimulationMatrix> {
    p.validate()?;
    let window = p.window_ms(interaction_ms);
    let needed = p.burst_count as f64 * p.burst_duration_ms;
    if (window as f64) < needed {
        return Err(Error::Parameter(format!(
            "feedback window {window} ms cannot fit {} bursts of {} ms",
            p.burst_count, p.burst_duration_ms
        )));
    }
    let mut m = StimulationMatrix::zeros(layout.channels, window, p.amplitude, p.pulse_width);
    let pulse_spacing_ms = 1000.0 / p.burst_rate;
    let pulses_per_burst = (p.burst_duration_ms * p.burst_rate / 1000.0).round() as usize;
    let channels = layout.feedback_channels();
    for k in 0..p.burst_count as usize {
        let center = (k as f64 + 0.5) * window as f64 / p.burst_count as f64;
        let start = center - p.burst_duration_ms / 2.0;
        for j in 0..pulses_per_burst {
            let t = (start + j as f64 * pulse_spacing_ms).floor() as usize;
            for &c in &channels {
                m.set(c, t.min(window - 1));
            }
        }
    }
    Ok(m)
}

/// Plasticity pattern: each encoding/decode channel independently activates
/// with `activation_prob`; an active channel fires at inter-onset intervals
/// 1/f with f redrawn uniformly from `random_rate_range` for every interval,
/// accumulated until the window ends.
pub fn plasticity_feedback(
    interaction_ms: usize,
    layout: &RegionLayout,
    p: &FeedbackParams,
    rng: &mut ChaCha8Rng,
) -> Result<StimulationMatrix> {
    p.validate()?;
    let window = p.window_ms(interaction_ms);
    let mut m = StimulationMatrix::zeros(layout.channels, window, p.amplitude, p.pulse_width);
    let (lo, hi) = p.random_rate_range;
    for c in layout.feedback_channels() {
        if !rng.gen_bool(p.activation_prob) {
            continue;
        }
        let mut t_ms = 0.0f64;
        loop {
            let f = rng.gen_range(lo..hi);
            t_ms += 1000.0 / f;
            if t_ms >= window as f64 {
                break;
            }
            m.set(c, t_ms.floor() as usize);
        }
    }
    Ok(m)
}

/// Generates the feedback pattern selected by the reward sign.
pub fn feedback_for_reward(
    reward: f64,
    interaction_ms: usize,
    layout: &RegionLayout,
    p: &FeedbackParams,
    rng: &mut ChaCha8Rng,
) -> Result<(FeedbackKind, StimulationMatrix)> {
    let kind = select_feedback(reward);
    let m = match kind {
        FeedbackKind::Reinforcing => reinforcing_feedback(interaction_ms, layout, p)?,
        FeedbackKind::Plasticity => plasticity_feedback(interaction_ms, layout, p, rng)?,
    };
    Ok((kind, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn layout() -> RegionLayout {
        RegionLayout::centered_default()
    }

    fn params() -> FeedbackParams {
        FeedbackParams::default()
    }

    #[test]
    fn reward_sign_selects_kind() {
        assert_eq!(select_feedback(2.0), FeedbackKind::Reinforcing);
        assert_eq!(select_feedback(1e-9), FeedbackKind::Reinforcing);
        assert_eq!(select_feedback(0.0), FeedbackKind::Plasticity);
        assert_eq!(select_feedback(-0.2), FeedbackKind::Plasticity);
    }

    #[test]
    fn reinforcing_two_second_interaction_gives_forty_onsets() {
        let lay = layout();
        let m = reinforcing_feedback(2000, &lay, &params()).unwrap();
        assert_eq!(m.bins, 4000);
        for &c in &lay.feedback_channels() {
            assert_eq!(m.onset_count(c), 40, "5 bursts x 8 pulses");
        }
        // Channels outside the masks stay silent.
        let active = lay.feedback_channels();
        for c in 0..lay.channels {
            if !active.contains(&c) {
                assert_eq!(m.onset_count(c), 0);
            }
        }
    }

    #[test]
    fn reinforcing_burst_structure() {
        let lay = layout();
        let m = reinforcing_feedback(2000, &lay, &params()).unwrap();
        let bins = m.channel_onset_bins(lay.encoding[0]);
        // Burst k is centered at (k + 0.5) * 800, 8 pulses 10 ms apart
        // starting 40 ms before center.
        let mut expected = Vec::new();
        for k in 0..5 {
            let start = (k as f64 + 0.5) * 800.0 - 40.0;
            for j in 0..8 {
                expected.push((start + 10.0 * j as f64) as usize);
            }
        }
        assert_eq!(bins, expected);
        // Intra-burst spacing exactly 10 ms.
        for burst in bins.chunks(8) {
            for pair in burst.windows(2) {
                assert_eq!(pair[1] - pair[0], 10);
            }
        }
    }

    #[test]
    fn reinforcing_rejects_windows_too_short_for_bursts() {
        // 150 ms interaction -> 300 ms window < 5 * 80 ms.
        let err = reinforcing_feedback(150, &layout(), &params());
        assert!(matches!(err, Err(Error::Parameter(_))));
    }

    #[test]
    fn plasticity_activation_rate_near_one_third() {
        let lay = layout();
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 1000;
        let mut active = 0usize;
        let total_channels = lay.feedback_channels().len();
        for _ in 0..n {
            let m = plasticity_feedback(2000, &lay, &p, &mut rng).unwrap();
            active += lay
                .feedback_channels()
                .iter()
                .filter(|&&c| m.onset_count(c) > 0)
                .count();
        }
        let draws = (n * total_channels) as f64;
        let rate = active as f64 / draws;
        let sigma = (1.0 / 3.0f64 * 2.0 / 3.0 / draws).sqrt();
        assert!(
            (rate - 1.0 / 3.0).abs() < 3.0 * sigma + 1e-3,
            "activation rate {rate} too far from 1/3"
        );
    }

    #[test]
    fn plasticity_intervals_stay_inside_rate_range() {
        let lay = layout();
        let p = params();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // 1/25 Hz = 40 ms, 1/3 Hz = 333.4 ms.
        for _ in 0..50 {
            let m = plasticity_feedback(2000, &lay, &p, &mut rng).unwrap();
            for &c in &lay.feedback_channels() {
                let bins = m.channel_onset_bins(c);
                for pair in bins.windows(2) {
                    let isi = (pair[1] - pair[0]) as f64;
                    // True intervals lie in (40, 333.4]; floor binning can
                    // stretch the upper edge by under 1 ms.
                    assert!(isi >= 40.0, "isi {isi} below 40 ms floor");
                    assert!(isi <= 334.0, "isi {isi} above 333.4 ms ceiling");
                }
            }
        }
    }

    #[test]
    fn plasticity_is_deterministic_under_seed() {
        let lay = layout();
        let p = params();
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = plasticity_feedback(1000, &lay, &p, &mut r1).unwrap();
        let b = plasticity_feedback(1000, &lay, &p, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn window_scales_with_duration_multiplier() {
        let lay = layout();
        let mut p = params();
        p.duration_multiplier = 2.0;
        let m = reinforcing_feedback(500, &lay, &p).unwrap();
        assert_eq!(m.bins, 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = plasticity_feedback(500, &lay, &p, &mut rng).unwrap();
        assert_eq!(m.bins, 1000);
    }

    #[test]
    fn feedback_inherits_pulse_shape_from_encoding() {
        let enc = EncodingParams { amplitude: 2.5, pulse_width: 160.0, ..EncodingParams::default() };
        let p = FeedbackParams::inheriting(&enc);
        let m = reinforcing_feedback(2000, &layout(), &p).unwrap();
        assert_eq!(m.amplitude, 2.5);
        assert_eq!(m.pulse_width, 160.0);
    }

    #[test]
    fn zero_activation_probability_gives_silence() {
        let mut p = params();
        p.activation_prob = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = plasticity_feedback(1000, &layout(), &p, &mut rng).unwrap();
        assert!(m.is_empty());
    }
}
