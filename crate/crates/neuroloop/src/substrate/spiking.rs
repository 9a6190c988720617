//! Plastic spiking network substrate.
//!
//! Leaky integrate-and-fire neurons grouped into per-channel clusters on the
//! electrode grid, distance-dependent random connectivity, Euler integration
//! at 1 ms, and always-on pair-based STDP. Stimulation injects charge
//! proportional to pulse amplitude times width into the target cluster;
//! recording reports cluster-level spikes (or, optionally, a synthetic
//! extracellular voltage trace with -100 uV spike transients).

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{RegionLayout, ResponseMatrix, SpikeMatrix, StimulationMatrix};
use crate::{Error, Result};

use super::{check_stimulate, Recording, Substrate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpikingConfig {
    pub neurons_per_channel: usize,
    pub excitatory_fraction: f64,
    pub v_rest_mv: f64,
    pub v_reset_mv: f64,
    pub v_thresh_mv: f64,
    pub tau_m_ms: f64,
    pub refractory_ms: u32,
    /// Connection probability at distance zero.
    pub conn_p0: f64,
    /// Distance scale (electrode grid units) of the connection probability.
    pub conn_sigma: f64,
    /// Initial synaptic weight range (mV).
    pub w_init: (f64, f64),
    /// Weight ceiling (mV).
    pub w_max: f64,
    pub stdp_a_plus: f64,
    pub stdp_a_minus: f64,
    pub stdp_tau_plus_ms: f64,
    pub stdp_tau_minus_ms: f64,
    /// Per-neuron background drive rate (Hz).
    pub noise_rate_hz: f64,
    /// Depolarization per background event (mV).
    pub noise_amp_mv: f64,
    /// Depolarization per onset per (uA * us) of pulse charge (mV).
    pub stim_gain: f64,
    /// Emit synthetic voltage traces instead of spike matrices.
    pub synthetic_voltage: bool,
}

impl Default for SpikingConfig {
    fn default() -> Self {
        SpikingConfig {
            neurons_per_channel: 8,
            excitatory_fraction: 0.8,
            v_rest_mv: -65.0,
            v_reset_mv: -65.0,
            v_thresh_mv: -50.0,
            tau_m_ms: 20.0,
            refractory_ms: 2,
            conn_p0: 0.15,
            conn_sigma: 2.0,
            w_init: (1.0, 3.0),
            w_max: 6.0,
            stdp_a_plus: 0.01,
            stdp_a_minus: 0.012,
            stdp_tau_plus_ms: 20.0,
            stdp_tau_minus_ms: 20.0,
            noise_rate_hz: 15.0,
            noise_amp_mv: 8.0,
            stim_gain: 0.08,
            synthetic_voltage: false,
        }
    }
}

impl SpikingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neurons_per_channel == 0 {
            return Err(Error::Config("need at least one neuron per channel".into()));
        }
        if !(0.0..=1.0).contains(&self.excitatory_fraction) {
            return Err(Error::Config("excitatory_fraction must be in [0, 1]".into()));
        }
        if !(self.v_thresh_mv > self.v_rest_mv) || !(self.v_thresh_mv > self.v_reset_mv) {
            return Err(Error::Config("threshold must exceed rest and reset".into()));
        }
        if !(self.tau_m_ms > 0.0) || !(self.stdp_tau_plus_ms > 0.0) || !(self.stdp_tau_minus_ms > 0.0) {
            return Err(Error::Config("time constants must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.conn_p0) || !(self.conn_sigma > 0.0) {
            return Err(Error::Config("connectivity parameters out of range".into()));
        }
        if !(self.w_init.0 >= 0.0) || !(self.w_init.1 >= self.w_init.0) || !(self.w_max >= self.w_init.1) {
            return Err(Error::Config("need 0 <= w_init.0 <= w_init.1 <= w_max".into()));
        }
        if !(self.noise_rate_hz >= 0.0) || self.noise_rate_hz > 1000.0 {
            return Err(Error::Config("noise rate must be in [0, 1000] Hz".into()));
        }
        Ok(())
    }
}

struct Synapse {
    pre: u32,
    post: u32,
    weight: f64,
}

pub struct SpikingSubstrate {
    cfg: SpikingConfig,
    channels: usize,
    neurons: usize,
    excitatory: Vec<bool>,
    v: Vec<f64>,
    refractory_until: Vec<u64>,
    pre_trace: Vec<f64>,
    post_trace: Vec<f64>,
    synapses: Vec<Synapse>,
    outgoing: Vec<Vec<u32>>,
    incoming: Vec<Vec<u32>>,
    /// Synaptic drive scheduled for the next step.
    pending: Vec<f64>,
    clock_ms: u64,
    rng: ChaCha8Rng,
    decay_plus: f64,
    decay_minus: f64,
}

impl SpikingSubstrate {
    pub fn new(cfg: SpikingConfig, layout: &RegionLayout, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let channels = layout.channels;
        let n = channels * cfg.neurons_per_channel;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // Exactly round(n * fraction) excitatory neurons, placement shuffled.
        let n_exc = (n as f64 * cfg.excitatory_fraction).round() as usize;
        let mut excitatory = vec![false; n];
        for e in excitatory.iter_mut().take(n_exc) {
            *e = true;
        }
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            excitatory.swap(i, j);
        }

        // Distance-dependent connectivity between channel clusters.
        let positions: Vec<(f64, f64)> = (0..channels)
            .map(|c| {
                let (x, y) = layout.grid_pos(c);
                (x as f64, y as f64)
            })
            .collect();
        let mut synapses = Vec::new();
        let mut outgoing = vec![Vec::new(); n];
        let mut incoming = vec![Vec::new(); n];
        for pre in 0..n {
            let cp = positions[pre / cfg.neurons_per_channel];
            for post in 0..n {
                if pre == post {
                    continue;
                }
                let cq = positions[post / cfg.neurons_per_channel];
                let d = ((cp.0 - cq.0).powi(2) + (cp.1 - cq.1).powi(2)).sqrt();
                let p = cfg.conn_p0 * (-d / cfg.conn_sigma).exp();
                if p > 0.0 && rng.gen_bool(p.min(1.0)) {
                    let weight = rng.gen_range(cfg.w_init.0..=cfg.w_init.1);
                    let id = synapses.len() as u32;
                    synapses.push(Synapse {
                        pre: pre as u32,
                        post: post as u32,
                        weight,
                    });
                    outgoing[pre].push(id);
                    incoming[post].push(id);
                }
            }
        }

        Ok(SpikingSubstrate {
            channels,
            neurons: n,
            excitatory,
            v: vec![cfg.v_rest_mv; n],
            refractory_until: vec![0; n],
            pre_trace: vec![0.0; n],
            post_trace: vec![0.0; n],
            synapses,
            outgoing,
            incoming,
            pending: vec![0.0; n],
            clock_ms: 0,
            rng,
            decay_plus: (-1.0 / cfg.stdp_tau_plus_ms).exp(),
            decay_minus: (-1.0 / cfg.stdp_tau_minus_ms).exp(),
            cfg,
        })
    }

    pub fn synapse_count(&self) -> usize {
        self.synapses.len()
    }

    pub fn total_weight(&self) -> f64 {
        self.synapses.iter().map(|s| s.weight).sum()
    }

    pub fn weights_within_bounds(&self) -> bool {
        self.synapses.iter().all(|s| (0.0..=self.cfg.w_max).contains(&s.weight))
    }

    /// Advances one millisecond, consuming whatever drive has accumulated in
    /// `pending`. Returns the indices of neurons that fired.
    fn step_ms(&mut self, fired: &mut Vec<u32>) {
        fired.clear();
        let t = self.clock_ms;
        let noise_p = self.cfg.noise_rate_hz / 1000.0;

        for i in 0..self.neurons {
            let mut input = std::mem::take(&mut self.pending[i]);
            if noise_p > 0.0 && self.rng.gen_bool(noise_p) {
                input += self.cfg.noise_amp_mv;
            }
            if t < self.refractory_until[i] {
                self.v[i] = self.cfg.v_reset_mv;
                continue;
            }
            let v = self.v[i];
            let dv = (self.cfg.v_rest_mv - v) / self.cfg.tau_m_ms + input;
            let v = v + dv;
            if v >= self.cfg.v_thresh_mv {
                self.v[i] = self.cfg.v_reset_mv;
                self.refractory_until[i] = t + 1 + self.cfg.refractory_ms as u64;
                fired.push(i as u32);
            } else {
                self.v[i] = v;
            }
        }

        // STDP against pre-update traces, then trace bumps, then delivery.
        for &i in fired.iter() {
            let i = i as usize;
            // i as post: potentiate incoming from recently spiking pres.
            for &sid in &self.incoming[i] {
                let s = &mut self.synapses[sid as usize];
                if self.excitatory[s.pre as usize] {
                    s.weight = (s.weight + self.cfg.stdp_a_plus * self.cfg.w_max * self.pre_trace[s.pre as usize])
                        .min(self.cfg.w_max);
                }
            }
            // i as pre: depress outgoing toward recently spiking posts.
            for &sid in &self.outgoing[i] {
                let s = &mut self.synapses[sid as usize];
                if self.excitatory[s.pre as usize] {
                    s.weight = (s.weight
                        - self.cfg.stdp_a_minus * self.cfg.w_max * self.post_trace[s.post as usize])
                        .max(0.0);
                }
            }
        }
        for &i in fired.iter() {
            let i = i as usize;
            self.pre_trace[i] += 1.0;
            self.post_trace[i] += 1.0;
        }
        for i in 0..self.neurons {
            self.pre_trace[i] *= self.decay_plus;
            self.post_trace[i] *= self.decay_minus;
        }
        for &i in fired.iter() {
            let i = i as usize;
            let sign = if self.excitatory[i] { 1.0 } else { -1.0 };
            for &sid in &self.outgoing[i] {
                let s = &self.synapses[sid as usize];
                self.pending[s.post as usize] += sign * s.weight;
            }
        }

        self.clock_ms += 1;
    }

    fn run(&mut self, stim: Option<&StimulationMatrix>, record_ms: usize, record: bool) -> (SpikeMatrix, Vec<(usize, u64)>) {
        let npc = self.cfg.neurons_per_channel;
        let mut spikes = SpikeMatrix::zeros(self.channels, if record { record_ms } else { 0 });
        let mut events = Vec::new();
        let mut fired = Vec::new();
        for t in 0..record_ms {
            if let Some(stim) = stim {
                if t < stim.bins {
                    let charge = self.cfg.stim_gain * stim.amplitude * stim.pulse_width;
                    for c in 0..self.channels {
                        if stim.get(c, t) {
                            let base = c * npc;
                            for i in base..base + npc {
                                self.pending[i] += charge;
                            }
                        }
                    }
                }
            }
            self.step_ms(&mut fired);
            if record {
                for &i in &fired {
                    let c = i as usize / npc;
                    if !spikes.get(c, t) {
                        spikes.set(c, t);
                    }
                    events.push((c, t as u64));
                }
            }
        }
        (spikes, events)
    }
}

impl Substrate for SpikingSubstrate {
    fn channels(&self) -> usize {
        self.channels
    }

    fn clock_ms(&self) -> u64 {
        self.clock_ms
    }

    fn emits_spikes_directly(&self) -> bool {
        !self.cfg.synthetic_voltage
    }

    fn stationary(&self) -> bool {
        false
    }

    fn stimulate(&mut self, stim: &StimulationMatrix, record_ms: usize) -> Result<Recording> {
        check_stimulate(self.channels, stim, record_ms)?;
        let (spikes, _) = self.run(Some(stim), record_ms, true);
        if self.cfg.synthetic_voltage {
            let mut v = ResponseMatrix::zeros(self.channels, record_ms, 1000.0);
            for c in 0..self.channels {
                for t in spikes.channel_spike_bins(c) {
                    v.set(c, t, -100.0);
                }
            }
            Ok(Recording::Voltage(v))
        } else {
            Ok(Recording::Spikes(spikes))
        }
    }

    fn rest(&mut self, duration_ms: usize) -> Result<()> {
        self.run(None, duration_ms, false);
        Ok(())
    }
}
