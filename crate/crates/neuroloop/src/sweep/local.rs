//! In-process sweep: quorum-many virtual clients on a worker pool, sharing
//! the study log and exactly-once machinery with the TCP path.

use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use crate::runner::{run_trial, TrialConfig};
use crate::sweep::client::{result_digest, trial_config_for};
use crate::sweep::schedule::TrialAssignment;
use crate::sweep::study::{open_study, StudyHeader, StudyOutcome, StudyRecord};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct LocalOptions {
    pub quorum: usize,
    pub workers: usize,
    pub log_path: PathBuf,
}

/// Virtual client identities standing in for the quorum.
pub fn virtual_client_ids(quorum: usize) -> Vec<String> {
    (0..quorum).map(|i| format!("local-{i}")).collect()
}

/// Runs the whole schedule locally with the standard closed-loop trial
/// runner: every trial is executed once per virtual client (with that
/// client's substrate seed salt) and aggregated exactly as the server would.
/// Work already present in the log is not rerun.
pub fn run_local_study(
    header: &StudyHeader,
    plan: Vec<TrialAssignment>,
    base: &TrialConfig,
    opts: &LocalOptions,
) -> Result<StudyOutcome> {
    base.validate()?;
    let runner = |a: &TrialAssignment, client: &str| {
        let cfg = trial_config_for(base, &a.params, a.mode, a.seeds, client)?;
        let result = run_trial(&cfg)?;
        Ok((result.score, result_digest(&result)?))
    };
    run_local_study_with(header, plan, opts, &runner)
}

/// [`run_local_study`] with a custom per-assignment runner, for searches
/// whose work unit is not a closed-loop trial. `runner(assignment,
/// client_id)` returns the score and a result digest.
pub fn run_local_study_with(
    header: &StudyHeader,
    plan: Vec<TrialAssignment>,
    opts: &LocalOptions,
    runner: &(dyn Fn(&TrialAssignment, &str) -> Result<(f64, String)> + Sync),
) -> Result<StudyOutcome> {
    if opts.workers == 0 {
        return Err(Error::Parameter("worker count must be positive".into()));
    }
    // Virtual clients never disappear, so assignments never expire.
    let timeout = Duration::from_secs(u32::MAX as u64);
    let (state, log) = open_study(&opts.log_path, header, plan.clone(), opts.quorum, timeout)?;
    let clients = virtual_client_ids(opts.quorum);

    let pending: Vec<(usize, usize)> = (0..plan.len())
        .flat_map(|t| (0..clients.len()).map(move |c| (t, c)))
        .filter(|&(t, c)| !state.has_report(&plan[t].trial_id, &clients[c]))
        .collect();

    let shared = Mutex::new((state, log));
    let cursor = AtomicUsize::new(0);
    let failure: Mutex<Option<Error>> = Mutex::new(None);

    let worker_count = opts.workers.min(pending.len().max(1));
    thread::scope(|scope| {
        for _ in 0..worker_count {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::SeqCst);
                if i >= pending.len() || failure.lock().unwrap().is_some() {
                    break;
                }
                let (t, c) = pending[i];
                let a = &plan[t];
                let outcome = trial_config_for(base, &a.params, a.mode, a.seeds, &clients[c])
                    .and_then(|cfg| run_trial(&cfg))
                    .and_then(|result| Ok((result.score, result_digest(&result)?)));
                match outcome {
                    Ok((score, digest)) => {
                        let mut guard = shared.lock().unwrap();
                        let (state, log) = &mut *guard;
                        let res = state
                            .apply_report(&clients[c], &a.trial_id, score, &digest)
                            .and_then(|applied| {
                                if let Some(r) = applied.report {
                                    log.append(&StudyRecord::Report(r))?;
                                }
                                if let Some(agg) = applied.aggregate {
                                    log.append(&StudyRecord::Aggregate(agg))?;
                                }
                                Ok(())
                            });
                        if let Err(e) = res {
                            failure.lock().unwrap().get_or_insert(e);
                            break;
                        }
                    }
                    Err(e) => {
                        failure.lock().unwrap().get_or_insert(e);
                        break;
                    }
                }
            });
        }
    });

    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let (state, _) = shared.into_inner().unwrap();
    Ok(StudyOutcome {
        header: header.clone(),
        complete: state.complete(),
        reports: state.report_count(),
        aggregates: state.aggregates(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::EncodingParams;
    use crate::runner::TrialMode;
    use crate::substrate::{OracleConfig, SubstrateKind};
    use crate::sweep::grid::{EncodingCombo, ParameterGrid, Stage};
    use crate::sweep::schedule::schedule;
    use crate::sweep::study::StudyLog;

    fn grid(f_min: Vec<f64>, f_max: Vec<f64>) -> ParameterGrid {
        ParameterGrid {
            stage: Stage::Stage2,
            f_min,
            f_max,
            amplitude: vec![2.0],
            pulse_width: vec![80.0],
            tick_rate: vec![2.0],
            ticks_per_step: vec![4],
        }
    }

    fn mk_header(trials: usize, quorum: usize, seed: u64) -> StudyHeader {
        StudyHeader {
            kind: "encoding_sweep".into(),
            stage: Some(Stage::Stage2),
            mode: TrialMode::A,
            quorum,
            replicates: 1,
            seed,
            trials,
        }
    }

    fn random_base() -> TrialConfig {
        TrialConfig::new(TrialMode::A, SubstrateKind::Random { rate_hz: 2.0 }, 0)
    }

    #[test]
    fn covers_every_trial_with_virtual_clients() {
        let dir = tempfile::tempdir().unwrap();
        let plan = schedule(&grid(vec![4.0], vec![40.0, 60.0]), 1, TrialMode::A, 6).unwrap();
        let opts = LocalOptions {
            quorum: 2,
            workers: 2,
            log_path: dir.path().join("study.jsonl"),
        };
        let outcome =
            run_local_study(&mk_header(plan.len(), 2, 6), plan, &random_base(), &opts).unwrap();
        assert!(outcome.complete);
        assert_eq!(outcome.reports, 4);
        assert_eq!(outcome.aggregates.len(), 2);
        for agg in &outcome.aggregates {
            assert!(agg.valid);
            assert_eq!(agg.clients, vec!["local-0", "local-1"]);
        }
    }

    #[test]
    fn reruns_are_bitwise_identical() {
        let plan = schedule(&grid(vec![4.0], vec![40.0, 60.0]), 1, TrialMode::A, 6).unwrap();
        let header = mk_header(plan.len(), 2, 6);
        let run = |workers: usize| {
            let dir = tempfile::tempdir().unwrap();
            let opts = LocalOptions {
                quorum: 2,
                workers,
                log_path: dir.path().join("study.jsonl"),
            };
            run_local_study(&header, plan.clone(), &random_base(), &opts).unwrap()
        };
        let a = run(2);
        let b = run(4);
        assert_eq!(a.aggregates, b.aggregates);
        for (x, y) in a.aggregates.iter().zip(&b.aggregates) {
            assert_eq!(x.mean.to_bits(), y.mean.to_bits());
        }
    }

    #[test]
    fn resume_skips_finished_work() {
        let dir = tempfile::tempdir().unwrap();
        let plan = schedule(&grid(vec![4.0], vec![40.0, 60.0]), 1, TrialMode::A, 9).unwrap();
        let header = mk_header(plan.len(), 2, 9);
        let full_log = dir.path().join("full.jsonl");
        let opts = LocalOptions {
            quorum: 2,
            workers: 2,
            log_path: full_log.clone(),
        };
        let fresh = run_local_study(&header, plan.clone(), &random_base(), &opts).unwrap();

        // Keep the header and three of the four reports, as if the process
        // died mid-study, then resume into the truncated log.
        let records = StudyLog::read_records(&full_log).unwrap();
        let truncated = dir.path().join("truncated.jsonl");
        let mut log = StudyLog::open(&truncated).unwrap();
        let mut kept_reports = 0;
        for rec in &records {
            match rec {
                StudyRecord::Header(_) => log.append(rec).unwrap(),
                StudyRecord::Report(_) if kept_reports < 3 => {
                    kept_reports += 1;
                    log.append(rec).unwrap();
                }
                _ => {}
            }
        }

        let opts = LocalOptions {
            quorum: 2,
            workers: 2,
            log_path: truncated.clone(),
        };
        let resumed = run_local_study(&header, plan, &random_base(), &opts).unwrap();
        assert_eq!(resumed.aggregates, fresh.aggregates);

        let final_records = StudyLog::read_records(&truncated).unwrap();
        let report_lines = final_records
            .iter()
            .filter(|r| matches!(r, StudyRecord::Report(_)))
            .count();
        assert_eq!(report_lines, 4, "exactly one line per (trial, client)");
    }

    #[test]
    fn planted_optimum_scores_highest() {
        let dir = tempfile::tempdir().unwrap();
        let plan = schedule(&grid(vec![3.0, 4.0], vec![40.0, 60.0]), 1, TrialMode::A, 0).unwrap();
        let header = mk_header(plan.len(), 4, 0);
        let base = TrialConfig::new(
            TrialMode::A,
            SubstrateKind::Oracle(OracleConfig::default()),
            0,
        );
        let opts = LocalOptions {
            quorum: 4,
            workers: 4,
            log_path: dir.path().join("study.jsonl"),
        };
        let outcome = run_local_study(&header, plan, &base, &opts).unwrap();
        assert_eq!(outcome.aggregates.len(), 4);

        let star = EncodingCombo::from_encoding(&EncodingParams::default());
        let best = outcome
            .aggregates
            .iter()
            .max_by(|a, b| a.mean.total_cmp(&b.mean))
            .unwrap();
        let best_combo: EncodingCombo = serde_json::from_value(best.params.clone()).unwrap();
        assert_eq!(best_combo, star, "means: {:?}",
            outcome.aggregates.iter().map(|a| (a.combo_index, a.mean)).collect::<Vec<_>>());
    }
}
