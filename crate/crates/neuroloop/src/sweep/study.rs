//! Study state: quorum aggregation and the append-only resumable log.

use std::collections::{HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::runner::TrialMode;
use crate::sweep::grid::Stage;
use crate::sweep::schedule::TrialAssignment;
use crate::{Error, Result};

/// First line of every study log; a resumed study must match it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyHeader {
    /// What is being screened, e.g. "encoding_sweep" or "dqn_hpo".
    pub kind: String,
    pub stage: Option<Stage>,
    pub mode: TrialMode,
    pub quorum: usize,
    pub replicates: u32,
    pub seed: u64,
    pub trials: usize,
}

/// One client's score for one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial_id: String,
    pub combo_index: usize,
    pub replicate: u32,
    pub client_id: String,
    pub score: f64,
    /// Digest of the client's full trial result, for audits.
    pub digest: String,
    pub status: String,
}

/// Quorum mean for one trial. `scores` and `clients` are ordered by client
/// id, so the mean is independent of report arrival order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateScore {
    pub trial_id: String,
    pub combo_index: usize,
    pub replicate: u32,
    pub params: Value,
    pub scores: Vec<f64>,
    pub clients: Vec<String>,
    pub mean: f64,
    /// Distinct-client count met the quorum.
    pub valid: bool,
}

/// One line of the study log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum StudyRecord {
    Header(StudyHeader),
    Report(TrialReport),
    Aggregate(AggregateScore),
}

/// Everything a finished (or resumed) study hands back.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyOutcome {
    pub header: StudyHeader,
    /// Aggregates in schedule order.
    pub aggregates: Vec<AggregateScore>,
    pub complete: bool,
    pub reports: usize,
}

/// Mean of the distinct-client scores for one trial. Reports are deduped
/// keep-first per client and sorted by client id before averaging. Valid when
/// the distinct-client count meets the quorum.
pub fn aggregate(reports: &[TrialReport], params: &Value, quorum: usize) -> Result<AggregateScore> {
    let first = reports
        .first()
        .ok_or_else(|| Error::Contract("cannot aggregate zero reports".into()))?;
    if reports.iter().any(|r| r.trial_id != first.trial_id) {
        return Err(Error::Contract(
            "aggregation mixes reports for different parameter sets".into(),
        ));
    }
    let mut by_client: Vec<&TrialReport> = Vec::new();
    let mut seen = HashSet::new();
    for r in reports {
        if seen.insert(r.client_id.as_str()) {
            by_client.push(r);
        }
    }
    by_client.sort_by(|a, b| a.client_id.cmp(&b.client_id));
    let scores: Vec<f64> = by_client.iter().map(|r| r.score).collect();
    let clients: Vec<String> = by_client.iter().map(|r| r.client_id.clone()).collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(AggregateScore {
        trial_id: first.trial_id.clone(),
        combo_index: first.combo_index,
        replicate: first.replicate,
        params: params.clone(),
        valid: clients.len() >= quorum,
        scores,
        clients,
        mean,
    })
}

/// Append-only JSONL log, flushed per record.
pub struct StudyLog {
    file: File,
}

impl StudyLog {
    pub fn open(path: &Path) -> Result<StudyLog> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(StudyLog { file })
    }

    pub fn append(&mut self, rec: &StudyRecord) -> Result<()> {
        let mut line = serde_json::to_string(rec)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }

    /// Reads a log, tolerating a torn tail: an unterminated trailing line, or
    /// a final line that no longer parses, is dropped with a warning.
    /// Corruption anywhere else is an error.
    pub fn read_records(path: &Path) -> Result<Vec<StudyRecord>> {
        if !path.exists() {
            return Ok(Vec::new());
        }
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        let mut lines: Vec<&[u8]> = Vec::new();
        let mut rest: &[u8] = &bytes;
        while let Some(pos) = rest.iter().position(|&b| b == b'\n') {
            lines.push(&rest[..pos]);
            rest = &rest[pos + 1..];
        }
        if !rest.is_empty() {
            log::warn!("study log ends mid-line; dropping {} bytes", rest.len());
        }
        let mut out = Vec::with_capacity(lines.len());
        for (i, line) in lines.iter().enumerate() {
            match serde_json::from_slice::<StudyRecord>(line) {
                Ok(rec) => out.push(rec),
                Err(e) if i + 1 == lines.len() => {
                    log::warn!("study log has a torn final line; dropping it: {e}");
                }
                Err(e) => {
                    return Err(Error::Data(format!(
                        "study log corrupt at line {}: {e}",
                        i + 1
                    )));
                }
            }
        }
        Ok(out)
    }
}

struct Outstanding {
    idx: usize,
    deadline: Instant,
}

/// What a NEXT gets back.
#[derive(Debug, Clone, PartialEq)]
pub enum NextAction {
    Assign(TrialAssignment),
    Wait,
    Done,
}

/// What applying a report changed: the record to log if the report was new,
/// and the aggregate if this report completed its quorum.
pub struct Applied {
    pub report: Option<TrialReport>,
    pub aggregate: Option<AggregateScore>,
}

/// Dispatch and aggregation state for one study.
///
/// Every scheduled trial is run by `quorum` distinct clients; its aggregate
/// is emitted exactly once, when the quorum-th distinct report arrives.
/// Assignments expire after `timeout` and become dispatchable again.
pub struct StudyState {
    schedule: Vec<TrialAssignment>,
    by_id: HashMap<String, usize>,
    quorum: usize,
    timeout: Duration,
    reports: Vec<Vec<TrialReport>>,
    aggregates: Vec<Option<AggregateScore>>,
    outstanding: HashMap<String, Outstanding>,
}

impl StudyState {
    pub fn new(
        schedule: Vec<TrialAssignment>,
        quorum: usize,
        timeout: Duration,
    ) -> Result<StudyState> {
        if schedule.is_empty() {
            return Err(Error::Parameter("schedule is empty".into()));
        }
        if quorum == 0 {
            return Err(Error::Parameter("quorum must be positive".into()));
        }
        let mut by_id = HashMap::new();
        for (i, a) in schedule.iter().enumerate() {
            if by_id.insert(a.trial_id.clone(), i).is_some() {
                return Err(Error::Parameter(format!(
                    "duplicate trial id {} in schedule",
                    a.trial_id
                )));
            }
        }
        let n = schedule.len();
        Ok(StudyState {
            schedule,
            by_id,
            quorum,
            timeout,
            reports: vec![Vec::new(); n],
            aggregates: vec![None; n],
            outstanding: HashMap::new(),
        })
    }

    pub fn quorum(&self) -> usize {
        self.quorum
    }

    pub fn schedule(&self) -> &[TrialAssignment] {
        &self.schedule
    }

    pub fn complete(&self) -> bool {
        self.aggregates.iter().all(Option::is_some)
    }

    pub fn report_count(&self) -> usize {
        self.reports.iter().map(Vec::len).sum()
    }

    pub fn has_report(&self, trial_id: &str, client_id: &str) -> bool {
        self.by_id
            .get(trial_id)
            .map(|&i| self.reports[i].iter().any(|r| r.client_id == client_id))
            .unwrap_or(false)
    }

    /// Aggregates in schedule order.
    pub fn aggregates(&self) -> Vec<AggregateScore> {
        self.aggregates.iter().flatten().cloned().collect()
    }

    /// Accepts one client report. Duplicate (trial, client) pairs keep the
    /// first score; reports after aggregation are kept for the record but do
    /// not change the aggregate.
    pub fn apply_report(
        &mut self,
        client_id: &str,
        trial_id: &str,
        score: f64,
        digest: &str,
    ) -> Result<Applied> {
        let idx = *self
            .by_id
            .get(trial_id)
            .ok_or_else(|| Error::Protocol(format!("report for unknown trial {trial_id}")))?;
        if self.reports[idx].iter().any(|r| r.client_id == client_id) {
            return Ok(Applied {
                report: None,
                aggregate: None,
            });
        }
        let a = &self.schedule[idx];
        let report = TrialReport {
            trial_id: a.trial_id.clone(),
            combo_index: a.combo_index,
            replicate: a.replicate,
            client_id: client_id.to_string(),
            score,
            digest: digest.to_string(),
            status: "ok".into(),
        };
        self.reports[idx].push(report.clone());
        if let Some(o) = self.outstanding.get(client_id) {
            if o.idx == idx {
                self.outstanding.remove(client_id);
            }
        }
        let mut emitted = None;
        if self.aggregates[idx].is_none() && self.reports[idx].len() >= self.quorum {
            let agg = aggregate(&self.reports[idx], &a.params, self.quorum)?;
            self.aggregates[idx] = Some(agg.clone());
            emitted = Some(agg);
        }
        Ok(Applied {
            report: Some(report),
            aggregate: emitted,
        })
    }

    /// Answers a client's NEXT: re-issues its outstanding assignment, hands
    /// out the first trial still short of quorum coverage that this client
    /// has not already reported, or decides WAIT / DONE.
    pub fn next_for(&mut self, client_id: &str, now: Instant) -> NextAction {
        let aggregates = &self.aggregates;
        self.outstanding
            .retain(|_, o| o.deadline > now && aggregates[o.idx].is_none());

        if let Some(o) = self.outstanding.get_mut(client_id) {
            o.deadline = now + self.timeout;
            return NextAction::Assign(self.schedule[o.idx].clone());
        }
        if self.complete() {
            return NextAction::Done;
        }

        let mut covered: HashMap<usize, usize> = HashMap::new();
        for o in self.outstanding.values() {
            *covered.entry(o.idx).or_insert(0) += 1;
        }
        for idx in 0..self.schedule.len() {
            if self.aggregates[idx].is_some() {
                continue;
            }
            let mine = self.reports[idx]
                .iter()
                .any(|r| r.client_id == client_id);
            if mine {
                continue;
            }
            let coverage = self.reports[idx].len() + covered.get(&idx).copied().unwrap_or(0);
            if coverage < self.quorum {
                self.outstanding.insert(
                    client_id.to_string(),
                    Outstanding {
                        idx,
                        deadline: now + self.timeout,
                    },
                );
                return NextAction::Assign(self.schedule[idx].clone());
            }
        }

        // Nothing to hand out. If this client has already reported every
        // unaggregated trial it can never contribute again; otherwise it may
        // be needed when an outstanding assignment expires.
        let useless = (0..self.schedule.len()).all(|idx| {
            self.aggregates[idx].is_some()
                || self.reports[idx].iter().any(|r| r.client_id == client_id)
        });
        if useless {
            NextAction::Done
        } else {
            NextAction::Wait
        }
    }

    /// Rebuilds state from logged records, in order. Returns the records the
    /// log is missing: aggregates whose quorum was reached but whose line was
    /// lost (e.g. a crash between a report append and its aggregate append).
    pub fn replay(&mut self, records: &[StudyRecord]) -> Result<Vec<StudyRecord>> {
        let logged_aggregates: HashSet<&str> = records
            .iter()
            .filter_map(|r| match r {
                StudyRecord::Aggregate(a) => Some(a.trial_id.as_str()),
                _ => None,
            })
            .collect();
        let mut missing = Vec::new();
        for rec in records {
            if let StudyRecord::Report(r) = rec {
                let applied = self.apply_report(&r.client_id, &r.trial_id, r.score, &r.digest)?;
                if let Some(agg) = applied.aggregate {
                    if !logged_aggregates.contains(agg.trial_id.as_str()) {
                        missing.push(StudyRecord::Aggregate(agg));
                    }
                }
            }
        }
        Ok(missing)
    }
}

/// Opens (or creates) the study log at `path` and rebuilds state from it. A
/// fresh log gains the header; an existing one must carry an identical
/// header. Any aggregates recomputed during replay that the log lost are
/// appended before returning.
pub fn open_study(
    path: &Path,
    header: &StudyHeader,
    schedule: Vec<TrialAssignment>,
    quorum: usize,
    timeout: Duration,
) -> Result<(StudyState, StudyLog)> {
    let records = StudyLog::read_records(path)?;
    let mut state = StudyState::new(schedule, quorum, timeout)?;
    let mut log = StudyLog::open(path)?;
    match records.first() {
        None => log.append(&StudyRecord::Header(header.clone()))?,
        Some(StudyRecord::Header(h)) if h == header => {
            let missing = state.replay(&records[1..])?;
            for rec in missing {
                log.append(&rec)?;
            }
        }
        Some(StudyRecord::Header(_)) => {
            return Err(Error::Contract(
                "study log belongs to a different study".into(),
            ));
        }
        Some(_) => {
            return Err(Error::Data("study log does not start with a header".into()));
        }
    }
    Ok((state, log))
}
