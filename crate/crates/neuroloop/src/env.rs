//! Bounded gridworld foraging task.
//!
//! A ring of barrier cells encloses an interior arena. The agent occupies an
//! interior cell with one of four headings and seeks a food item that emits
//! an exponentially decaying odor field. The observation is a tri-state
//! direction sensor; the reward combines food acquisition, collision
//! penalties, and odor-gradient shaping.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

use crate::{Error, Result};

pub const FOOD_REWARD: f64 = 2.0;
pub const COLLISION_PENALTY: f64 = -0.2;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EnvConfig {
    /// Total grid width in cells, including the barrier ring.
    pub width: usize,
    /// Total grid height in cells, including the barrier ring.
    pub height: usize,
    /// Odor decay constant per cell of Euclidean distance.
    pub lambda: f64,
    /// Seed for agent/food placement and food relocation.
    pub seed: u64,
    /// Multiplier on the odor-change shaping term.
    pub shaping_scale: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            width: 6,
            height: 6,
            lambda: 0.5,
            seed: 0,
            shaping_scale: 1.0,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 3 || self.height < 3 {
            return Err(Error::Config(format!(
                "grid {}x{} leaves no interior; need at least 3x3",
                self.width, self.height
            )));
        }
        if self.interior_cells().len() < 2 {
            return Err(Error::Config(
                "grid too small to place agent and food on distinct cells".into(),
            ));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.shaping_scale >= 0.0) {
            return Err(Error::Config(format!(
                "shaping_scale must be >= 0, got {}",
                self.shaping_scale
            )));
        }
        Ok(())
    }

    /// Interior (non-barrier) cells in row-major order.
    pub fn interior_cells(&self) -> Vec<(usize, usize)> {
        let mut cells = Vec::new();
        for y in 1..self.height.saturating_sub(1) {
            for x in 1..self.width.saturating_sub(1) {
                cells.push((x, y));
            }
        }
        cells
    }

    pub fn is_barrier(&self, x: isize, y: isize) -> bool {
        x <= 0 || y <= 0 || x >= self.width as isize - 1 || y >= self.height as isize - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Heading {
    N,
    E,
    S,
    W,
}

impl Heading {
    pub const ALL: [Heading; 4] = [Heading::N, Heading::E, Heading::S, Heading::W];

    /// Unit step in grid coordinates; x grows east, y grows north.
    pub fn delta(self) -> (isize, isize) {
        match self {
            Heading::N => (0, 1),
            Heading::E => (1, 0),
            Heading::S => (0, -1),
            Heading::W => (-1, 0),
        }
    }

    pub fn left(self) -> Heading {
        match self {
            Heading::N => Heading::W,
            Heading::W => Heading::S,
            Heading::S => Heading::E,
            Heading::E => Heading::N,
        }
    }

    pub fn right(self) -> Heading {
        match self {
            Heading::N => Heading::E,
            Heading::E => Heading::S,
            Heading::S => Heading::W,
            Heading::W => Heading::N,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Forward,
    Left,
    Right,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Forward, Action::Left, Action::Right];

    pub fn index(self) -> usize {
        match self {
            Action::Forward => 0,
            Action::Left => 1,
            Action::Right => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Action> {
        match i {
            0 => Ok(Action::Forward),
            1 => Ok(Action::Left),
            2 => Ok(Action::Right),
            _ => Err(Error::Parameter(format!("action index {i} out of range"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepEvent {
    None,
    FoodAcquired,
    Collision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentPose {
    pub x: usize,
    pub y: usize,
    pub heading: Heading,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub reward: f64,
    /// Tri-state food direction after the step: -1 left, 0 front, +1 right-or-behind.
    pub sensor: i8,
    pub event: StepEvent,
}

/// Full simulation state. Equality covers the RNG stream, so two states that
/// compare equal evolve identically forever.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub config: EnvConfig,
    pub pose: AgentPose,
    pub food: (usize, usize),
    pub step_count: u64,
    pub cumulative_reward: f64,
    rng: ChaCha8Rng,
}

pub fn reset(config: &EnvConfig) -> Result<EnvState> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let interior = config.interior_cells();
    let agent_cell = interior[rng.gen_range(0..interior.len())];
    let heading = Heading::ALL[rng.gen_range(0..4)];
    let food = sample_food(&mut rng, &interior, agent_cell);
    Ok(EnvState {
        config: config.clone(),
        pose: AgentPose {
            x: agent_cell.0,
            y: agent_cell.1,
            heading,
        },
        food,
        step_count: 0,
        cumulative_reward: 0.0,
        rng,
    })
}

/// Uniform draw over interior cells excluding `exclude`.
fn sample_food(rng: &mut ChaCha8Rng, interior: &[(usize, usize)], exclude: (usize, usize)) -> (usize, usize) {
    let candidates: Vec<(usize, usize)> = interior.iter().copied().filter(|&c| c != exclude).collect();
    candidates[rng.gen_range(0..candidates.len())]
}

/// Odor intensity exp(-lambda * d) with d the Euclidean distance between
/// cell centers.
pub fn odor_intensity(pos: (usize, usize), food: (usize, usize), lambda: f64) -> f64 {
    let dx = pos.0 as f64 - food.0 as f64;
    let dy = pos.1 as f64 - food.1 as f64;
    (-lambda * (dx * dx + dy * dy).sqrt()).exp()
}

/// Signed bearing of the food relative to the heading, in degrees, positive
/// to the right, in (-180, 180].
fn bearing_deg(pose: &AgentPose, food: (usize, usize)) -> f64 {
    let (hx, hy) = pose.heading.delta();
    let vx = food.0 as f64 - pose.x as f64;
    let vy = food.1 as f64 - pose.y as f64;
    let cross = hx as f64 * vy - hy as f64 * vx;
    let dot = hx as f64 * vx + hy as f64 * vy;
    let mut theta = -cross.atan2(dot).to_degrees();
    if theta <= -180.0 {
        theta += 360.0;
    }
    theta
}

/// Tri-state food direction sensor: 0 when |bearing| <= 45 degrees, -1 when
/// the bearing is in (-135, -45), +1 otherwise (right or behind). Bucket-edge
/// ties resolve toward front, then right.
pub fn sense(state: &EnvState) -> i8 {
    let theta = bearing_deg(&state.pose, state.food);
    if theta.abs() <= 45.0 {
        0
    } else if theta > -135.0 && theta < -45.0 {
        -1
    } else {
        1
    }
}

pub fn step(state: &mut EnvState, action: Action) -> StepOutcome {
    let mut event = StepEvent::None;
    let reward;
    match action {
        Action::Left => {
            state.pose.heading = state.pose.heading.left();
            // Shaping term is zero: the agent cell is unchanged.
            reward = 0.0;
        }
        Action::Right => {
            state.pose.heading = state.pose.heading.right();
            reward = 0.0;
        }
        Action::Forward => {
            let (dx, dy) = state.pose.heading.delta();
            let tx = state.pose.x as isize + dx;
            let ty = state.pose.y as isize + dy;
            if state.config.is_barrier(tx, ty) {
                event = StepEvent::Collision;
                reward = COLLISION_PENALTY;
            } else {
                let from = (state.pose.x, state.pose.y);
                let to = (tx as usize, ty as usize);
                state.pose.x = to.0;
                state.pose.y = to.1;
                if to == state.food {
                    event = StepEvent::FoodAcquired;
                    reward = FOOD_REWARD;
                    let interior = state.config.interior_cells();
                    state.food = sample_food(&mut state.rng, &interior, to);
                } else {
                    let before = odor_intensity(from, state.food, state.config.lambda);
                    let after = odor_intensity(to, state.food, state.config.lambda);
                    reward = state.config.shaping_scale * (after - before);
                }
            }
        }
    }
    state.step_count += 1;
    state.cumulative_reward += reward;
    StepOutcome {
        reward,
        sensor: sense(state),
        event,
    }
}

/// Food positions the episode will present, in order, starting with the
/// current one. The relocation draw excludes the cell the food is acquired
/// on, so the sequence is policy-independent.
pub fn food_sequence(state: &EnvState, n: usize) -> Vec<(usize, usize)> {
    let interior = state.config.interior_cells();
    let mut rng = state.rng.clone();
    let mut seq = Vec::with_capacity(n);
    let mut current = state.food;
    for _ in 0..n {
        seq.push(current);
        current = sample_food(&mut rng, &interior, current);
    }
    seq
}

/// Maximum reward attainable in `steps` actions, counting food only:
/// 2.0 times the number of acquisitions of an optimal planner that knows the
/// full food sequence. Computed by dynamic programming over
/// (step, position, heading, foods acquired).
pub fn oracle_max_reward(config: &EnvConfig, seed: u64, steps: usize) -> Result<f64> {
    let mut cfg = config.clone();
    cfg.seed = seed;
    let state = reset(&cfg)?;
    if steps == 0 {
        return Ok(0.0);
    }
    // Each acquisition costs at least one action, so `steps` foods suffice.
    let foods = food_sequence(&state, steps + 1);
    let interior = cfg.interior_cells();
    let iw = cfg.width - 2;
    let cell_index = |c: (usize, usize)| (c.1 - 1) * iw + (c.0 - 1);
    let n_cells = interior.len();
    let n_states = n_cells * 4 * (steps + 1);
    let idx = |cell: usize, h: usize, k: usize| (k * 4 + h) * n_cells + cell;

    // best[state] = true if reachable at the current step count.
    let mut reachable = vec![false; n_states];
    let start_cell = cell_index((state.pose.x, state.pose.y));
    let start_h = heading_index(state.pose.heading);
    reachable[idx(start_cell, start_h, 0)] = true;
    let mut best = 0usize;

    for _step in 0..steps {
        let mut next = vec![false; n_states];
        for k in 0..=best {
            for h in 0..4 {
                for cell in 0..n_cells {
                    if !reachable[idx(cell, h, k)] {
                        continue;
                    }
                    let heading = Heading::ALL[h];
                    // Turns.
                    next[idx(cell, heading_index(heading.left()), k)] = true;
                    next[idx(cell, heading_index(heading.right()), k)] = true;
                    // Forward.
                    let (x, y) = interior[cell];
                    let (dx, dy) = heading.delta();
                    let (tx, ty) = (x as isize + dx, y as isize + dy);
                    if !cfg.is_barrier(tx, ty) {
                        let to = (tx as usize, ty as usize);
                        let target = cell_index(to);
                        if to == foods[k] {
                            next[idx(target, h, k + 1)] = true;
                            best = best.max(k + 1);
                        } else {
                            next[idx(target, h, k)] = true;
                        }
                    } else {
                        // Collision keeps the pose; never optimal but legal.
                        next[idx(cell, h, k)] = true;
                    }
                }
            }
        }
        reachable = next;
    }
    Ok(FOOD_REWARD * best as f64)
}

fn heading_index(h: Heading) -> usize {
    match h {
        Heading::N => 0,
        Heading::E => 1,
        Heading::S => 2,
        Heading::W => 3,
    }
}

/// One line of an episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    pub x: usize,
    pub y: usize,
    pub heading: Heading,
    pub action: Action,
    pub reward: f64,
    pub sensor: i8,
    pub event: StepEvent,
    pub food: (usize, usize),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TraceHeader {
    config: EnvConfig,
}

/// Writes a JSONL episode trace: a header line carrying the effective
/// config, then one record per step.
pub fn write_trace<W: Write>(mut w: W, config: &EnvConfig, records: &[TraceRecord]) -> Result<()> {
    serde_json::to_writer(&mut w, &TraceHeader { config: config.clone() })?;
    w.write_all(b"\n")?;
    for rec in records {
        serde_json::to_writer(&mut w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_trace<R: BufRead>(r: R) -> Result<(EnvConfig, Vec<TraceRecord>)> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("empty trace file".into()))??;
    let header: TraceHeader =
        serde_json::from_str(&header).map_err(|e| Error::Data(format!("bad trace header: {e}")))?;
    let mut records = Vec::new();
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| Error::Data(format!("bad trace record: {e}")))?);
    }
    Ok((header.config, records))
}

/// Runs an action sequence from a fresh reset, returning the trace records.
pub fn run_actions(config: &EnvConfig, actions: &[Action]) -> Result<Vec<TraceRecord>> {
    let mut state = reset(config)?;
    let mut records = Vec::with_capacity(actions.len());
    for (i, &action) in actions.iter().enumerate() {
        let food_before = state.food;
        let outcome = step(&mut state, action);
        records.push(TraceRecord {
            step: i as u64,
            x: state.pose.x,
            y: state.pose.y,
            heading: state.pose.heading,
            action,
            reward: outcome.reward,
            sensor: outcome.sensor,
            event: outcome.event,
            food: if outcome.event == StepEvent::FoodAcquired {
                food_before
            } else {
                state.food
            },
        });
    }
    Ok(records)
}

/// Replays a recorded trace against a fresh environment. Returns the
/// regenerated records; errors if the recording's rewards/poses diverge.
pub fn replay_trace(config: &EnvConfig, records: &[TraceRecord]) -> Result<Vec<TraceRecord>> {
    let actions: Vec<Action> = records.iter().map(|r| r.action).collect();
    let regenerated = run_actions(config, &actions)?;
    for (got, want) in regenerated.iter().zip(records) {
        if got != want {
            return Err(Error::Data(format!(
                "trace diverges at step {}: recorded {:?}, replayed {:?}",
                want.step, want, got
            )));
        }
    }
    Ok(regenerated)
}
