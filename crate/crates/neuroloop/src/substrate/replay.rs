//! Playback substrate: emits segments of a stored recording in order.

use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::codec::{SpikeMatrix, StimulationMatrix};
use crate::{Error, Result};

use super::{check_stimulate, Recording, Substrate};

/// One stored recording window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordedSegment {
    pub duration_ms: usize,
    pub channels: usize,
    /// (channel, time_ms) pairs.
    pub spikes: Vec<(usize, usize)>,
}

impl RecordedSegment {
    pub fn from_spikes(m: &SpikeMatrix) -> Self {
        let mut spikes = Vec::new();
        for c in 0..m.channels {
            for t in m.channel_spike_bins(c) {
                spikes.push((c, t));
            }
        }
        RecordedSegment {
            duration_ms: m.bins,
            channels: m.channels,
            spikes,
        }
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.channels != channels {
            return Err(Error::Data(format!(
                "segment has {} channels, expected {channels}",
                self.channels
            )));
        }
        for &(c, t) in &self.spikes {
            if c >= self.channels || t >= self.duration_ms {
                return Err(Error::Data(format!(
                    "spike ({c}, {t}) outside segment {}x{}",
                    self.channels, self.duration_ms
                )));
            }
        }
        Ok(())
    }
}

/// Writes segments as JSONL, one segment per line.
pub fn write_segments<W: Write>(mut w: W, segments: &[RecordedSegment]) -> Result<()> {
    for s in segments {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_segments<R: BufRead>(r: R) -> Result<Vec<RecordedSegment>> {
    let mut segments = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seg: RecordedSegment =
            serde_json::from_str(&line).map_err(|e| Error::Data(format!("bad segment: {e}")))?;
        segments.push(seg);
    }
    if segments.is_empty() {
        return Err(Error::Data("recording contains no segments".into()));
    }
    Ok(segments)
}

/// Ignores stimulation and returns the next stored segment on every
/// stimulate/spontaneous call, cycling when the recording is exhausted.
pub struct ReplaySubstrate {
    channels: usize,
    segments: Vec<RecordedSegment>,
    cursor: usize,
    clock_ms: u64,
}

impl ReplaySubstrate {
    pub fn new(segments: Vec<RecordedSegment>, channels: usize) -> Result<Self> {
        if segments.is_empty() {
            return Err(Error::Data("recording contains no segments".into()));
        }
        for s in &segments {
            s.validate(channels)?;
        }
        Ok(ReplaySubstrate {
            channels,
            segments,
            cursor: 0,
            clock_ms: 0,
        })
    }

    pub fn from_path(path: &Path, channels: usize) -> Result<Self> {
        let file = File::open(path)
            .map_err(|e| Error::Data(format!("cannot open recording {}: {e}", path.display())))?;
        let segments = read_segments(BufReader::new(file))?;
        ReplaySubstrate::new(segments, channels)
    }

    fn next_segment(&mut self, record_ms: usize) -> SpikeMatrix {
        let seg = &self.segments[self.cursor];
        self.cursor = (self.cursor + 1) % self.segments.len();
        let mut m = SpikeMatrix::zeros(self.channels, record_ms);
        for &(c, t) in &seg.spikes {
            if t < record_ms {
                m.set(c, t);
            }
        }
        m
    }
}

impl Substrate for ReplaySubstrate {
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
        let m = self.next_segment(record_ms);
        self.clock_ms += record_ms as u64;
        Ok(Recording::Spikes(m))
    }

    fn rest(&mut self, duration_ms: usize) -> Result<()> {
        self.clock_ms += duration_ms as u64;
        Ok(())
    }
}
