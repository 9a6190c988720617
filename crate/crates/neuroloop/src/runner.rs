//! Closed-loop trial orchestration: calibrate, then per step encode,
//! stimulate/record, decode, act, and feed back, on a virtual clock.

use std::io::{BufRead, Write};
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{
    count_decode, encode_tick, rate_frequency_flagged, update_baseline, BaselineRates, EncodingParams,
    RegionLayout, SpikeMatrix, DEFAULT_DENSITY_EPSILON,
};
use crate::env::{self, Action, EnvConfig};
use crate::feedback::{feedback_for_reward, FeedbackKind, FeedbackParams};
use crate::substrate::{make_substrate, Substrate, SubstrateKind};
use crate::{Error, Result};

/// Task mode: steps per episode x episodes, with inter-episode rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrialMode {
    /// 30 steps, 1 episode.
    A,
    /// 150 steps, 1 episode.
    B,
    /// 30 steps, 5 episodes, 120 s rest between episodes.
    C,
}

impl TrialMode {
    pub fn steps_per_episode(self) -> usize {
        match self {
            TrialMode::A | TrialMode::C => 30,
            TrialMode::B => 150,
        }
    }

    pub fn episodes(self) -> usize {
        match self {
            TrialMode::A | TrialMode::B => 1,
            TrialMode::C => 5,
        }
    }

    pub fn rest_ms(self) -> usize {
        match self {
            TrialMode::A | TrialMode::B => 0,
            TrialMode::C => 120_000,
        }
    }
}

/// Independent seed lanes for everything stochastic in a trial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct TrialSeeds {
    pub env: u64,
    pub substrate: u64,
    pub decode_tiebreak: u64,
    pub feedback: u64,
}

impl TrialSeeds {
    /// Derives the four lanes from one master seed.
    pub fn from_master(master: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master);
        TrialSeeds {
            env: rng.next_u64(),
            substrate: rng.next_u64(),
            decode_tiebreak: rng.next_u64(),
            feedback: rng.next_u64(),
        }
    }
}

pub const CALIBRATION_WINDOWS: usize = 60;

fn default_epsilon() -> f64 {
    DEFAULT_DENSITY_EPSILON
}

fn default_threshold() -> f64 {
    -50.0
}

fn default_detection_refractory() -> f64 {
    2.0
}

fn default_overlap() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialConfig {
    pub mode: TrialMode,
    pub encoding: EncodingParams,
    pub feedback: FeedbackParams,
    pub layout: RegionLayout,
    pub env: EnvConfig,
    pub substrate: SubstrateKind,
    pub seeds: TrialSeeds,
    /// Mode C: let the inter-episode rest double as the next episode's
    /// calibration when 60 windows fit inside it; otherwise (or when false)
    /// calibration extends the gap.
    #[serde(default = "default_overlap")]
    pub calibration_overlaps_rest: bool,
    #[serde(default = "default_epsilon")]
    pub density_epsilon: f64,
    /// Spike detection threshold for voltage recordings (uV).
    #[serde(default = "default_threshold")]
    pub detection_threshold_uv: f64,
    #[serde(default = "default_detection_refractory")]
    pub detection_refractory_ms: f64,
    /// Sleep so virtual time tracks wall time.
    #[serde(default)]
    pub realtime: bool,
}

impl TrialConfig {
    /// A runnable starting point: default encoding on the centered layout,
    /// 6x6 arena, everything seeded from `master`.
    pub fn new(mode: TrialMode, substrate: SubstrateKind, master_seed: u64) -> Self {
        let encoding = EncodingParams::default();
        TrialConfig {
            mode,
            feedback: FeedbackParams::inheriting(&encoding),
            encoding,
            layout: RegionLayout::centered_default(),
            env: EnvConfig::default(),
            substrate,
            seeds: TrialSeeds::from_master(master_seed),
            calibration_overlaps_rest: true,
            density_epsilon: DEFAULT_DENSITY_EPSILON,
            detection_threshold_uv: -50.0,
            detection_refractory_ms: 2.0,
            realtime: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoding.validate()?;
        self.feedback.validate()?;
        self.layout.validate()?;
        self.env.validate()?;
        if !(self.density_epsilon > 0.0) {
            return Err(Error::Parameter("density_epsilon must be positive".into()));
        }
        if !(self.detection_threshold_uv < 0.0) {
            return Err(Error::Parameter("detection threshold must be negative".into()));
        }
        if !(self.detection_refractory_ms >= 0.0) {
            return Err(Error::Parameter("detection refractory must be nonnegative".into()));
        }
        Ok(())
    }

    /// Hash of the serialized config, identifying what produced a result.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }
}

/// One closed-loop interaction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub episode: usize,
    pub step: usize,
    pub sensor: i8,
    pub frequency_hz: f64,
    pub action: Action,
    pub reward: f64,
    pub region_counts: [u64; 3],
    pub feedback: FeedbackKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub env_seed: u64,
    pub steps: Vec<StepRecord>,
    /// Raw cumulative reward.
    pub reward: f64,
    /// Maximum achievable reward for this episode's food sequence.
    pub oracle: f64,
    pub normalized: f64,
    /// Per-region baseline the episode decoded against.
    pub baseline: BaselineRates,
    /// Per-channel spontaneous rates over the calibration windows (Hz).
    pub baseline_channel_rates_hz: Vec<f64>,
    /// Per-channel spike counts over the episode's interaction windows.
    pub channel_counts: Vec<u64>,
    /// Spikes recorded during feedback windows; kept out of decoding and
    /// baselines.
    pub feedback_spikes: u64,
    /// Mode C: calibration did not fit inside the rest and extended the gap.
    pub calibration_extended_rest: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub config_hash: String,
    pub mode: TrialMode,
    pub seeds: TrialSeeds,
    pub episodes: Vec<EpisodeResult>,
    /// Mean over episodes of reward / oracle.
    pub score: f64,
    pub virtual_ms: u64,
    /// Wall-clock duration; excluded from serialization so identical trials
    /// produce identical files.
    #[serde(skip)]
    pub wall_ms: u64,
}

/// Mean over episodes of episode reward divided by its oracle.
pub fn score_episodes(rewards: &[f64], oracles: &[f64]) -> Result<f64> {
    if rewards.is_empty() || rewards.len() != oracles.len() {
        return Err(Error::Parameter(format!(
            "need matching nonempty reward/oracle lists, got {} and {}",
            rewards.len(),
            oracles.len()
        )));
    }
    let mut sum = 0.0;
    for (r, o) in rewards.iter().zip(oracles) {
        if !(*o > 0.0) {
            return Err(Error::Parameter(format!("oracle must be positive, got {o}")));
        }
        sum += r / o;
    }
    Ok(sum / rewards.len() as f64)
}

/// Sleeps as needed so the substrate's virtual clock never runs ahead of
/// wall time.
struct Pacer {
    start: Instant,
    enabled: bool,
}

impl Pacer {
    fn new(enabled: bool) -> Self {
        Pacer {
            start: Instant::now(),
            enabled,
        }
    }

    fn pace(&self, virtual_elapsed_ms: u64) {
        if !self.enabled {
            return;
        }
        let wall = self.start.elapsed().as_millis() as u64;
        if virtual_elapsed_ms > wall {
            std::thread::sleep(std::time::Duration::from_millis(virtual_elapsed_ms - wall));
        }
    }
}

/// Spike-derived quantities of one recorded window.
struct WindowCounts {
    region: [u32; 3],
    channel: Vec<u64>,
}

fn window_counts(spikes: &SpikeMatrix, layout: &RegionLayout) -> WindowCounts {
    let mut region = [0u32; 3];
    for (i, r) in layout.decode.iter().enumerate() {
        region[i] = spikes.count_over(r) as u32;
    }
    let channel: Vec<u64> = (0..spikes.channels).map(|c| spikes.channel_count(c) as u64).collect();
    WindowCounts { region, channel }
}

/// Runs a trial on a substrate built from the config.
pub fn run_trial(cfg: &TrialConfig) -> Result<TrialResult> {
    let mut substrate = make_substrate(&cfg.substrate, &cfg.layout, cfg.seeds.substrate, Some(&cfg.encoding))?;
    run_trial_on(cfg, substrate.as_mut())
}

/// Runs a trial on an already-constructed substrate.
pub fn run_trial_on(cfg: &TrialConfig, substrate: &mut dyn Substrate) -> Result<TrialResult> {
    cfg.validate()?;
    if substrate.channels() != cfg.layout.channels {
        return Err(Error::Contract(format!(
            "substrate has {} channels, layout expects {}",
            substrate.channels(),
            cfg.layout.channels
        )));
    }

    let wall_start = Instant::now();
    let pacer = Pacer::new(cfg.realtime);
    let clock_start = substrate.clock_ms();
    let ip_ms = cfg.encoding.interaction_ms();
    let tick_ms = cfg.encoding.tick_ms();
    let steps = cfg.mode.steps_per_episode();
    let n_episodes = cfg.mode.episodes();

    let mut env_seeds = ChaCha8Rng::seed_from_u64(cfg.seeds.env);
    let mut tiebreak = ChaCha8Rng::seed_from_u64(cfg.seeds.decode_tiebreak);
    let mut fb_rng = ChaCha8Rng::seed_from_u64(cfg.seeds.feedback);

    let detect = |rec: crate::substrate::Recording| -> Result<SpikeMatrix> {
        rec.into_spikes(cfg.detection_threshold_uv, cfg.detection_refractory_ms)
    };

    let calibrate = |substrate: &mut dyn Substrate,
                     windows: usize|
     -> Result<(Vec<[u32; 3]>, Vec<u64>)> {
        let mut region_windows = Vec::with_capacity(windows);
        let mut channel_totals = vec![0u64; cfg.layout.channels];
        for _ in 0..windows {
            let spikes = detect(substrate.spontaneous(ip_ms)?)?;
            let counts = window_counts(&spikes, &cfg.layout);
            region_windows.push(counts.region);
            for (acc, c) in channel_totals.iter_mut().zip(&counts.channel) {
                *acc += c;
            }
        }
        Ok((region_windows, channel_totals))
    };

    let calibration_secs = (CALIBRATION_WINDOWS * ip_ms) as f64 / 1000.0;
    let mut episodes: Vec<EpisodeResult> = Vec::with_capacity(n_episodes);
    let mut rewards = Vec::with_capacity(n_episodes);
    let mut oracles = Vec::with_capacity(n_episodes);

    for episode in 0..n_episodes {
        // Calibration. The first episode always gets a dedicated block; later
        // episodes inherit the tail of the rest when configured and possible.
        let mut extended = false;
        let (region_windows, channel_totals) = if episode == 0 {
            calibrate(substrate, CALIBRATION_WINDOWS)?
        } else {
            let rest_ms = cfg.mode.rest_ms();
            let cal_ms = CALIBRATION_WINDOWS * ip_ms;
            if cfg.calibration_overlaps_rest && cal_ms <= rest_ms {
                substrate.rest(rest_ms - cal_ms)?;
                calibrate(substrate, CALIBRATION_WINDOWS)?
            } else {
                extended = cal_ms > rest_ms || !cfg.calibration_overlaps_rest;
                if extended {
                    log::info!(
                        "episode {episode}: {CALIBRATION_WINDOWS} calibration windows extend the \
                         {rest_ms} ms rest by {cal_ms} ms"
                    );
                }
                substrate.rest(rest_ms)?;
                calibrate(substrate, CALIBRATION_WINDOWS)?
            }
        };
        let baseline = update_baseline(&region_windows)?;
        let baseline_channel_rates_hz: Vec<f64> =
            channel_totals.iter().map(|&c| c as f64 / calibration_secs).collect();

        let env_seed = env_seeds.next_u64();
        let mut env_cfg = cfg.env.clone();
        env_cfg.seed = env_seed;
        let mut state = env::reset(&env_cfg)?;
        let oracle = env::oracle_max_reward(&cfg.env, env_seed, steps)?;
        if !(oracle > 0.0) {
            return Err(Error::Parameter(format!(
                "episode {episode} has oracle reward {oracle}; the mode's step budget cannot reach food"
            )));
        }

        let mut sensor = env::sense(&state);
        let mut records = Vec::with_capacity(steps);
        let mut channel_counts = vec![0u64; cfg.layout.channels];
        let mut feedback_spikes = 0u64;

        for step in 0..steps {
            let x = sensor as f64;
            let (frequency_hz, _) = rate_frequency_flagged(x, &cfg.encoding);

            // One interaction period: ticks_per_step identical encode
            // matrices delivered back to back, spikes pooled.
            let mut window = SpikeMatrix::zeros(cfg.layout.channels, ip_ms);
            for tick in 0..cfg.encoding.ticks_per_step {
                let (stim, _) = encode_tick(x, &cfg.encoding, &cfg.layout)?;
                let spikes = detect(substrate.stimulate(&stim, tick_ms)?)?;
                let offset = tick as usize * tick_ms;
                for c in 0..spikes.channels {
                    for t in spikes.channel_spike_bins(c) {
                        window.set(c, offset + t);
                    }
                }
                pacer.pace(substrate.clock_ms() - clock_start);
            }
            let counts = window_counts(&window, &cfg.layout);
            for (acc, c) in channel_counts.iter_mut().zip(&counts.channel) {
                *acc += c;
            }

            let (action, region_counts, _densities) =
                count_decode(&window, &cfg.layout, &baseline, cfg.density_epsilon, &mut tiebreak);
            let outcome = env::step(&mut state, action);

            let (kind, fb) = feedback_for_reward(outcome.reward, ip_ms, &cfg.layout, &cfg.feedback, &mut fb_rng)?;
            let fb_spikes = detect(substrate.stimulate(&fb, fb.bins)?)?;
            feedback_spikes += fb_spikes.total_spikes() as u64;
            pacer.pace(substrate.clock_ms() - clock_start);

            records.push(StepRecord {
                episode,
                step,
                sensor,
                frequency_hz,
                action,
                reward: outcome.reward,
                region_counts,
                feedback: kind,
            });
            sensor = outcome.sensor;
        }

        let reward = state.cumulative_reward;
        rewards.push(reward);
        oracles.push(oracle);
        episodes.push(EpisodeResult {
            env_seed,
            steps: records,
            reward,
            oracle,
            normalized: reward / oracle,
            baseline,
            baseline_channel_rates_hz,
            channel_counts,
            feedback_spikes,
            calibration_extended_rest: extended,
        });
    }

    let score = score_episodes(&rewards, &oracles)?;
    Ok(TrialResult {
        config_hash: cfg.hash()?,
        mode: cfg.mode,
        seeds: cfg.seeds,
        episodes,
        score,
        virtual_ms: substrate.clock_ms() - clock_start,
        wall_ms: wall_start.elapsed().as_millis() as u64,
    })
}

/// Virtual duration a trial must take: calibration, steps with feedback, and
/// rests, given that calibration overlaps rests whenever it fits.
pub fn expected_virtual_ms(cfg: &TrialConfig) -> u64 {
    let ip = cfg.encoding.interaction_ms();
    let fb = cfg.feedback.window_ms(ip);
    let cal = CALIBRATION_WINDOWS * ip;
    let steps = cfg.mode.steps_per_episode();
    let n = cfg.mode.episodes();
    let per_episode = steps * (ip + fb);
    let gap = if cfg.calibration_overlaps_rest && cal <= cfg.mode.rest_ms() {
        cfg.mode.rest_ms()
    } else {
        cfg.mode.rest_ms() + cal
    };
    (cal + n * per_episode + (n - 1) * gap) as u64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResultHeader {
    config: TrialConfig,
    config_hash: String,
    score: f64,
    virtual_ms: u64,
}

/// Writes a result as JSONL: a header line with the config and totals, then
/// one line per step record.
pub fn write_result_jsonl<W: Write>(mut w: W, cfg: &TrialConfig, result: &TrialResult) -> Result<()> {
    let header = ResultHeader {
        config: cfg.clone(),
        config_hash: result.config_hash.clone(),
        score: result.score,
        virtual_ms: result.virtual_ms,
    };
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for ep in &result.episodes {
        for rec in &ep.steps {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Reads back a JSONL result stream written by `write_result_jsonl`.
pub fn read_result_jsonl<R: BufRead>(r: R) -> Result<(TrialConfig, Vec<StepRecord>)> {
    let mut lines = r.lines();
    let header: ResultHeader = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => return Err(Error::Data("empty result stream".into())),
    };
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok((header.config, records))
}

/// Writes the full result (per-episode data included) as a summary document.
pub fn write_summary_json<W: Write>(mut w: W, result: &TrialResult) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, result)?;
    w.write_all(b"\n")?;
    Ok(())
}
