//! Factorial screening grids over the six stimulation parameters.

use serde::{Deserialize, Serialize};

use crate::codec::EncodingParams;
use crate::{Error, Result};

/// Screening stage: the broad factorial screen or the replicated narrow one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
}

impl Stage {
    /// Short tag used in trial identifiers.
    pub fn tag(self) -> &'static str {
        match self {
            Stage::Stage1 => "s1",
            Stage::Stage2 => "s2",
        }
    }
}

/// One point in the screened space: the six encoding dimensions. The
/// remaining encoding fields (sensor range) come from the base config.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodingCombo {
    pub f_min: f64,
    pub f_max: f64,
    pub amplitude: f64,
    pub pulse_width: f64,
    pub tick_rate: f64,
    pub ticks_per_step: u32,
}

/// Screened dimension names, in the order `EncodingCombo::values` uses.
pub const DIM_NAMES: [&str; 6] = [
    "f_min",
    "f_max",
    "amplitude",
    "pulse_width",
    "tick_rate",
    "ticks_per_step",
];

impl EncodingCombo {
    /// The base encoding with the screened dimensions replaced.
    pub fn apply(&self, base: &EncodingParams) -> EncodingParams {
        EncodingParams {
            f_min: self.f_min,
            f_max: self.f_max,
            amplitude: self.amplitude,
            pulse_width: self.pulse_width,
            tick_rate: self.tick_rate,
            ticks_per_step: self.ticks_per_step,
            ..*base
        }
    }

    /// The screened dimensions of an encoding.
    pub fn from_encoding(p: &EncodingParams) -> Self {
        EncodingCombo {
            f_min: p.f_min,
            f_max: p.f_max,
            amplitude: p.amplitude,
            pulse_width: p.pulse_width,
            tick_rate: p.tick_rate,
            ticks_per_step: p.ticks_per_step,
        }
    }

    /// Dimension values in `DIM_NAMES` order, for rank statistics.
    pub fn values(&self) -> [f64; 6] {
        [
            self.f_min,
            self.f_max,
            self.amplitude,
            self.pulse_width,
            self.tick_rate,
            self.ticks_per_step as f64,
        ]
    }
}

/// Per-parameter value lists whose cartesian product is the screen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterGrid {
    pub stage: Stage,
    pub f_min: Vec<f64>,
    pub f_max: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub pulse_width: Vec<f64>,
    pub tick_rate: Vec<f64>,
    pub ticks_per_step: Vec<u32>,
}

impl ParameterGrid {
    /// Cartesian size.
    pub fn len(&self) -> usize {
        self.f_min.len()
            * self.f_max.len()
            * self.amplitude.len()
            * self.pulse_width.len()
            * self.tick_rate.len()
            * self.ticks_per_step.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Parameter("grid has an empty value list".into()));
        }
        for combo in self.combos() {
            combo.apply(&EncodingParams::default()).validate()?;
        }
        Ok(())
    }

    /// All combinations in a fixed nesting order (`ticks_per_step` fastest).
    pub fn combos(&self) -> Vec<EncodingCombo> {
        let mut out = Vec::with_capacity(self.len());
        for &f_min in &self.f_min {
            for &f_max in &self.f_max {
                for &amplitude in &self.amplitude {
                    for &pulse_width in &self.pulse_width {
                        for &tick_rate in &self.tick_rate {
                            for &ticks_per_step in &self.ticks_per_step {
                                out.push(EncodingCombo {
                                    f_min,
                                    f_max,
                                    amplitude,
                                    pulse_width,
                                    tick_rate,
                                    ticks_per_step,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// The screened value lists for each stage.
pub fn build_grid(stage: Stage) -> ParameterGrid {
    match stage {
        Stage::Stage1 => ParameterGrid {
            stage,
            f_min: vec![2.0, 3.0, 4.0, 5.0],
            f_max: vec![40.0, 60.0, 80.0, 100.0],
            amplitude: vec![1.0, 2.0, 2.5],
            pulse_width: vec![40.0, 80.0, 160.0],
            tick_rate: vec![1.0, 2.0, 4.0],
            ticks_per_step: vec![2, 4, 8],
        },
        Stage::Stage2 => ParameterGrid {
            stage,
            f_min: vec![4.0],
            f_max: vec![40.0, 60.0, 80.0, 100.0],
            amplitude: vec![2.0, 2.5],
            pulse_width: vec![40.0, 80.0],
            tick_rate: vec![1.0, 2.0],
            ticks_per_step: vec![2, 4],
        },
    }
}

/// The twelve combinations that survive stage 2.
pub fn top_combos() -> Vec<EncodingCombo> {
    let mut out = Vec::with_capacity(12);
    for f_max in [40.0, 60.0, 80.0] {
        for pulse_width in [40.0, 80.0] {
            for tick_rate in [1.0, 2.0] {
                out.push(EncodingCombo {
                    f_min: 4.0,
                    f_max,
                    amplitude: 2.5,
                    pulse_width,
                    tick_rate,
                    ticks_per_step: 4,
                });
            }
        }
    }
    out
}
