//! TCP study server: dispatches assignments to clients, aggregates scores at
//! quorum, and survives restarts through the study log.

use std::collections::HashSet;
use std::io::{BufReader, ErrorKind};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::sweep::protocol::{read_frame, write_frame, ClientFrame, ServerFrame};
use crate::sweep::schedule::TrialAssignment;
use crate::sweep::study::{
    open_study, NextAction, StudyHeader, StudyLog, StudyOutcome, StudyRecord, StudyState,
};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct ServeOptions {
    /// Bind address; port 0 picks an ephemeral port.
    pub bind: String,
    pub quorum: usize,
    /// Assignments not reported within this window are handed out again.
    pub timeout: Duration,
    pub log_path: PathBuf,
    /// Grace period for lingering sessions after the study completes.
    pub drain: Duration,
}

impl ServeOptions {
    pub fn new(bind: String, quorum: usize, timeout: Duration, log_path: PathBuf) -> Self {
        ServeOptions {
            bind,
            quorum,
            timeout,
            log_path,
            drain: Duration::from_secs(2),
        }
    }
}

struct Coordinator {
    state: StudyState,
    log: StudyLog,
    active: HashSet<String>,
    /// First unrecoverable failure (log write errors); aborts the study.
    failed: Option<String>,
}

struct Shared {
    coord: Mutex<Coordinator>,
    shutdown: AtomicBool,
    sessions: AtomicUsize,
}

pub struct StudyServer {
    listener: TcpListener,
    addr: SocketAddr,
    header: StudyHeader,
    shared: Arc<Shared>,
}

impl StudyServer {
    /// Opens or resumes the study log and binds the listener. Nothing is
    /// dispatched until [`StudyServer::run`].
    pub fn bind(
        opts: &ServeOptions,
        header: &StudyHeader,
        schedule: Vec<TrialAssignment>,
    ) -> Result<StudyServer> {
        let (state, log) = open_study(
            &opts.log_path,
            header,
            schedule,
            opts.quorum,
            opts.timeout,
        )?;
        let listener = TcpListener::bind(&opts.bind)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        Ok(StudyServer {
            listener,
            addr,
            header: header.clone(),
            shared: Arc::new(Shared {
                coord: Mutex::new(Coordinator {
                    state,
                    log,
                    active: HashSet::new(),
                    failed: None,
                }),
                shutdown: AtomicBool::new(false),
                sessions: AtomicUsize::new(0),
            }),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// True when every scheduled trial already has its aggregate (a resumed,
    /// finished study).
    pub fn complete(&self) -> bool {
        self.shared.coord.lock().unwrap().state.complete()
    }

    /// Serves clients until every trial is aggregated, then drains sessions
    /// and returns the study outcome.
    pub fn run(self, drain: Duration) -> Result<StudyOutcome> {
        let StudyServer {
            listener,
            addr: _,
            header,
            shared,
        } = self;
        let mut handles: Vec<JoinHandle<()>> = Vec::new();
        let mut drain_deadline: Option<Instant> = None;

        if !shared.coord.lock().unwrap().state.complete() {
            loop {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let sh = Arc::clone(&shared);
                        sh.sessions.fetch_add(1, Ordering::SeqCst);
                        handles.push(thread::spawn(move || session(sh, stream)));
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock => {
                        thread::sleep(Duration::from_millis(5));
                    }
                    Err(e) if e.kind() == ErrorKind::Interrupted => {}
                    Err(e) => {
                        shared.shutdown.store(true, Ordering::SeqCst);
                        for h in handles {
                            h.join().ok();
                        }
                        return Err(e.into());
                    }
                }

                let (complete, failed) = {
                    let coord = shared.coord.lock().unwrap();
                    (coord.state.complete(), coord.failed.clone())
                };
                if let Some(msg) = failed {
                    shared.shutdown.store(true, Ordering::SeqCst);
                    for h in handles {
                        h.join().ok();
                    }
                    return Err(Error::Data(msg));
                }
                if complete {
                    let deadline = *drain_deadline.get_or_insert_with(|| Instant::now() + drain);
                    if shared.sessions.load(Ordering::SeqCst) == 0 || Instant::now() > deadline {
                        break;
                    }
                }
            }
        }

        shared.shutdown.store(true, Ordering::SeqCst);
        drop(listener);
        for h in handles {
            h.join().ok();
        }
        let shared = Arc::try_unwrap(shared)
            .map_err(|_| Error::Contract("server sessions outlived the accept loop".into()))?;
        let coord = shared.coord.into_inner().unwrap();
        Ok(StudyOutcome {
            header,
            complete: coord.state.complete(),
            reports: coord.state.report_count(),
            aggregates: coord.state.aggregates(),
        })
    }
}

/// One-shot server: bind, serve to completion, return the outcome.
pub fn serve(
    opts: &ServeOptions,
    header: &StudyHeader,
    schedule: Vec<TrialAssignment>,
) -> Result<StudyOutcome> {
    let drain = opts.drain;
    StudyServer::bind(opts, header, schedule)?.run(drain)
}

struct SessionGuard(Arc<Shared>);

impl Drop for SessionGuard {
    fn drop(&mut self) {
        self.0.sessions.fetch_sub(1, Ordering::SeqCst);
    }
}

fn refuse(writer: &mut TcpStream, code: &str, msg: &str) {
    let _ = write_frame(
        writer,
        &ServerFrame::Err {
            code: code.into(),
            msg: msg.into(),
        },
    );
}

fn session(shared: Arc<Shared>, stream: TcpStream) {
    let _guard = SessionGuard(Arc::clone(&shared));
    if stream.set_read_timeout(Some(Duration::from_millis(50))).is_err() {
        return;
    }
    stream.set_nodelay(true).ok();
    let mut writer = match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    };
    let mut reader = BufReader::new(stream);
    let mut client: Option<String> = None;

    loop {
        let frame: ClientFrame = match read_frame(&mut reader, || {
            !shared.shutdown.load(Ordering::SeqCst)
        }) {
            Ok(Some(f)) => f,
            // EOF, or shutdown while idle.
            Ok(None) => break,
            Err(Error::Protocol(msg)) => {
                refuse(&mut writer, "malformed", &msg);
                break;
            }
            Err(_) => break,
        };
        match frame {
            ClientFrame::Hello {
                client_id,
                substrate,
            } => {
                if let Some(current) = &client {
                    if *current != client_id {
                        refuse(&mut writer, "rehello", "session already identified");
                        break;
                    }
                    continue;
                }
                let mut coord = shared.coord.lock().unwrap();
                if !coord.active.insert(client_id.clone()) {
                    drop(coord);
                    refuse(&mut writer, "duplicate_client", "client_id already connected");
                    break;
                }
                log::info!("client {client_id} joined ({substrate})");
                client = Some(client_id);
            }
            ClientFrame::Next => {
                let Some(id) = &client else {
                    refuse(&mut writer, "no_hello", "identify with HELLO first");
                    break;
                };
                let action = {
                    let mut coord = shared.coord.lock().unwrap();
                    coord.state.next_for(id, Instant::now())
                };
                let reply = match action {
                    NextAction::Assign(a) => ServerFrame::Assign {
                        trial_id: a.trial_id,
                        params: a.params,
                        mode: a.mode,
                        seeds: a.seeds,
                        replicate: a.replicate,
                    },
                    NextAction::Wait => ServerFrame::Wait,
                    NextAction::Done => ServerFrame::Done,
                };
                if write_frame(&mut writer, &reply).is_err() {
                    break;
                }
            }
            ClientFrame::Report {
                trial_id,
                score,
                digest,
            } => {
                let Some(id) = &client else {
                    refuse(&mut writer, "no_hello", "identify with HELLO first");
                    break;
                };
                let mut coord = shared.coord.lock().unwrap();
                match coord.state.apply_report(id, &trial_id, score, &digest) {
                    Ok(applied) => {
                        let mut records = Vec::new();
                        if let Some(r) = applied.report {
                            records.push(StudyRecord::Report(r));
                        }
                        if let Some(a) = applied.aggregate {
                            log::info!("aggregated {trial_id}");
                            records.push(StudyRecord::Aggregate(a));
                        }
                        for rec in &records {
                            if let Err(e) = coord.log.append(rec) {
                                coord.failed =
                                    Some(format!("study log append failed: {e}"));
                                return;
                            }
                        }
                    }
                    Err(e) => {
                        drop(coord);
                        refuse(&mut writer, "bad_report", &e.to_string());
                        break;
                    }
                }
            }
        }
    }

    if let Some(id) = client {
        shared.coord.lock().unwrap().active.remove(&id);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runner::{run_trial, TrialConfig, TrialMode};
    use crate::substrate::SubstrateKind;
    use crate::sweep::client::{client_run, trial_config_for, ClientOptions};
    use crate::sweep::grid::{ParameterGrid, Stage};
    use crate::sweep::schedule::schedule;
    use crate::sweep::study::StudyLog;

    fn tiny_grid(f_max: Vec<f64>) -> ParameterGrid {
        ParameterGrid {
            stage: Stage::Stage2,
            f_min: vec![4.0],
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

    fn spawn_server(
        opts: ServeOptions,
        header: StudyHeader,
        plan: Vec<TrialAssignment>,
    ) -> (SocketAddr, thread::JoinHandle<Result<StudyOutcome>>) {
        let server = StudyServer::bind(&opts, &header, plan).unwrap();
        let addr = server.addr();
        let drain = opts.drain;
        (addr, thread::spawn(move || server.run(drain)))
    }

    #[test]
    fn four_clients_reach_quorum_on_every_trial() {
        let dir = tempfile::tempdir().unwrap();
        let grid = tiny_grid(vec![40.0, 60.0]);
        let plan = schedule(&grid, 1, TrialMode::A, 21).unwrap();
        let header = mk_header(plan.len(), 4, 21);
        let opts = ServeOptions::new(
            "127.0.0.1:0".into(),
            4,
            Duration::from_secs(60),
            dir.path().join("study.jsonl"),
        );
        let (addr, server) = spawn_server(opts.clone(), header, plan);

        let clients: Vec<_> = (0..4)
            .map(|i| {
                let server = addr.to_string();
                thread::spawn(move || {
                    client_run(&ClientOptions::new(server, format!("c{i}"), random_base()))
                })
            })
            .collect();
        let mut total = 0;
        for c in clients {
            total += c.join().unwrap().unwrap().trials_run;
        }
        assert_eq!(total, 8, "2 trials x quorum 4");

        let outcome = server.join().unwrap().unwrap();
        assert!(outcome.complete);
        assert_eq!(outcome.reports, 8);
        assert_eq!(outcome.aggregates.len(), 2);
        for agg in &outcome.aggregates {
            assert!(agg.valid);
            assert_eq!(agg.clients, vec!["c0", "c1", "c2", "c3"]);
            assert_eq!(agg.scores.len(), 4);
            let mean = agg.scores.iter().sum::<f64>() / 4.0;
            assert_eq!(agg.mean.to_bits(), mean.to_bits());
        }

        let records = StudyLog::read_records(&opts.log_path).unwrap();
        let reports = records
            .iter()
            .filter(|r| matches!(r, StudyRecord::Report(_)))
            .count();
        let aggregates = records
            .iter()
            .filter(|r| matches!(r, StudyRecord::Aggregate(_)))
            .count();
        assert_eq!((reports, aggregates), (8, 2));
        assert!(matches!(records[0], StudyRecord::Header(_)));
    }

    #[test]
    fn duplicate_client_id_is_refused() {
        let dir = tempfile::tempdir().unwrap();
        let grid = tiny_grid(vec![40.0]);
        let plan = schedule(&grid, 1, TrialMode::A, 3).unwrap();
        let header = mk_header(plan.len(), 1, 3);
        let opts = ServeOptions::new(
            "127.0.0.1:0".into(),
            1,
            Duration::from_secs(60),
            dir.path().join("study.jsonl"),
        );
        let (addr, server) = spawn_server(opts, header, plan);

        let first = TcpStream::connect(addr).unwrap();
        let mut w1 = first.try_clone().unwrap();
        write_frame(
            &mut w1,
            &ClientFrame::Hello {
                client_id: "dup".into(),
                substrate: "random".into(),
            },
        )
        .unwrap();
        // Make sure the first HELLO lands before the second.
        let mut r1 = BufReader::new(first);
        write_frame(&mut w1, &ClientFrame::Next).unwrap();
        let assigned: ServerFrame = read_frame(&mut r1, || true).unwrap().unwrap();
        let trial_id = match assigned {
            ServerFrame::Assign { trial_id, .. } => trial_id,
            other => panic!("{other:?}"),
        };

        let second = TcpStream::connect(addr).unwrap();
        let mut w2 = second.try_clone().unwrap();
        let mut r2 = BufReader::new(second);
        write_frame(
            &mut w2,
            &ClientFrame::Hello {
                client_id: "dup".into(),
                substrate: "random".into(),
            },
        )
        .unwrap();
        let refused: ServerFrame = read_frame(&mut r2, || true).unwrap().unwrap();
        assert!(
            matches!(refused, ServerFrame::Err { ref code, .. } if code == "duplicate_client"),
            "{refused:?}"
        );

        write_frame(
            &mut w1,
            &ClientFrame::Report {
                trial_id,
                score: 0.5,
                digest: "x".into(),
            },
        )
        .unwrap();
        write_frame(&mut w1, &ClientFrame::Next).unwrap();
        let done: ServerFrame = read_frame(&mut r1, || true).unwrap().unwrap();
        assert_eq!(done, ServerFrame::Done);
        drop(w1);
        drop(r1);

        let outcome = server.join().unwrap().unwrap();
        assert_eq!(outcome.aggregates[0].scores, vec![0.5]);
    }

    #[test]
    fn malformed_frames_close_the_session_with_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let grid = tiny_grid(vec![40.0]);
        let plan = schedule(&grid, 1, TrialMode::A, 5).unwrap();
        let header = mk_header(plan.len(), 1, 5);
        let opts = ServeOptions::new(
            "127.0.0.1:0".into(),
            1,
            Duration::from_secs(60),
            dir.path().join("study.jsonl"),
        );
        let (addr, server) = spawn_server(opts, header, plan);

        {
            use std::io::Write as _;
            let mut garbage = TcpStream::connect(addr).unwrap();
            garbage.write_all(b"this is not json\n").unwrap();
            let mut r = BufReader::new(garbage.try_clone().unwrap());
            let reply: ServerFrame = read_frame(&mut r, || true).unwrap().unwrap();
            assert!(matches!(reply, ServerFrame::Err { ref code, .. } if code == "malformed"));
            let eof: Option<ServerFrame> = read_frame(&mut r, || true).unwrap();
            assert_eq!(eof, None, "session closed after the error frame");
        }

        // The server is still healthy.
        let summary = client_run(&ClientOptions::new(
            addr.to_string(),
            "ok".into(),
            random_base(),
        ))
        .unwrap();
        assert_eq!(summary.trials_run, 1);
        assert!(server.join().unwrap().unwrap().complete);
    }

    #[test]
    fn abandoned_assignments_are_reissued_after_the_timeout() {
        let dir = tempfile::tempdir().unwrap();
        let grid = tiny_grid(vec![40.0]);
        let plan = schedule(&grid, 1, TrialMode::A, 8).unwrap();
        let header = mk_header(plan.len(), 1, 8);
        let opts = ServeOptions::new(
            "127.0.0.1:0".into(),
            1,
            Duration::from_millis(300),
            dir.path().join("study.jsonl"),
        );
        let (addr, server) = spawn_server(opts, header, plan);

        {
            let doomed = TcpStream::connect(addr).unwrap();
            let mut w = doomed.try_clone().unwrap();
            let mut r = BufReader::new(doomed);
            write_frame(
                &mut w,
                &ClientFrame::Hello {
                    client_id: "doomed".into(),
                    substrate: "random".into(),
                },
            )
            .unwrap();
            write_frame(&mut w, &ClientFrame::Next).unwrap();
            let got: ServerFrame = read_frame(&mut r, || true).unwrap().unwrap();
            assert!(matches!(got, ServerFrame::Assign { .. }));
            // Drop the connection without reporting.
        }
        thread::sleep(Duration::from_millis(400));

        let summary = client_run(&ClientOptions::new(
            addr.to_string(),
            "steady".into(),
            random_base(),
        ))
        .unwrap();
        assert_eq!(summary.trials_run, 1);

        let outcome = server.join().unwrap().unwrap();
        assert!(outcome.complete);
        assert_eq!(outcome.aggregates[0].clients, vec!["steady"]);
    }

    #[test]
    fn oracle_scores_pass_through_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let grid = tiny_grid(vec![40.0]);
        let plan = schedule(&grid, 1, TrialMode::A, 13).unwrap();
        let assignment = plan[0].clone();
        let header = mk_header(plan.len(), 1, 13);
        let opts = ServeOptions::new(
            "127.0.0.1:0".into(),
            1,
            Duration::from_secs(60),
            dir.path().join("study.jsonl"),
        );
        let (addr, server) = spawn_server(opts, header, plan);

        let base = TrialConfig::new(
            TrialMode::A,
            SubstrateKind::Oracle(crate::substrate::OracleConfig::default()),
            0,
        );
        let summary = client_run(&ClientOptions::new(
            addr.to_string(),
            "oracle-client".into(),
            base.clone(),
        ))
        .unwrap();
        assert_eq!(summary.trials_run, 1);
        let outcome = server.join().unwrap().unwrap();

        let cfg = trial_config_for(
            &base,
            &assignment.params,
            assignment.mode,
            assignment.seeds,
            "oracle-client",
        )
        .unwrap();
        let local = run_trial(&cfg).unwrap();
        assert_eq!(
            outcome.aggregates[0].scores[0].to_bits(),
            local.score.to_bits(),
            "reported score must match the local run bit for bit"
        );
    }

    #[test]
    fn restarting_a_finished_study_changes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let log_path = dir.path().join("study.jsonl");
        let grid = tiny_grid(vec![40.0, 60.0]);
        let plan = schedule(&grid, 1, TrialMode::A, 2).unwrap();
        let header = mk_header(plan.len(), 1, 2);
        let opts = ServeOptions::new(
            "127.0.0.1:0".into(),
            1,
            Duration::from_secs(60),
            log_path.clone(),
        );

        let (addr, server) = spawn_server(opts.clone(), header.clone(), plan.clone());
        client_run(&ClientOptions::new(
            addr.to_string(),
            "solo".into(),
            random_base(),
        ))
        .unwrap();
        let first = server.join().unwrap().unwrap();
        assert!(first.complete);
        let log_before = std::fs::read(&log_path).unwrap();

        let resumed = serve(&opts, &header, plan).unwrap();
        assert!(resumed.complete);
        assert_eq!(resumed.aggregates, first.aggregates);
        assert_eq!(std::fs::read(&log_path).unwrap(), log_before);
    }
}
