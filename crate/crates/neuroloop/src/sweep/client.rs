//! Study client: dials the server, runs assigned trials, reports scores.

use std::io::BufReader;
use std::net::TcpStream;
use std::thread;
use std::time::Duration;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::runner::{run_trial, TrialConfig, TrialMode, TrialResult, TrialSeeds};
use crate::sweep::grid::EncodingCombo;
use crate::sweep::protocol::{read_frame, write_frame, ClientFrame, ServerFrame};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct ClientOptions {
    pub server: String,
    pub client_id: String,
    /// Trial template; assignments override mode, encoding, and seeds.
    pub base: TrialConfig,
    /// Connection attempts (initial or after a drop) before giving up.
    pub connect_retries: u32,
    pub retry_delay: Duration,
    /// Backoff after a WAIT.
    pub poll: Duration,
}

impl ClientOptions {
    pub fn new(server: String, client_id: String, base: TrialConfig) -> Self {
        ClientOptions {
            server,
            client_id,
            base,
            connect_retries: 10,
            retry_delay: Duration::from_millis(200),
            poll: Duration::from_millis(100),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientSummary {
    pub trials_run: usize,
}

/// Salt mixed into the substrate seed lane so distinct clients stand in for
/// distinct cultures on the same assignment: first eight little-endian bytes
/// of sha256(client_id).
pub fn client_salt(client_id: &str) -> u64 {
    let digest = Sha256::digest(client_id.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Digest of a trial result, reported alongside the score for audits.
pub fn result_digest(result: &TrialResult) -> Result<String> {
    let bytes = serde_json::to_vec(result)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// The trial an assignment asks for, built on this client's base config.
/// Encoding fields come from the assigned combo, feedback amplitude and pulse
/// width follow the encoding, and the substrate seed lane is salted per
/// client.
pub fn trial_config_for(
    base: &TrialConfig,
    params: &Value,
    mode: TrialMode,
    seeds: TrialSeeds,
    client_id: &str,
) -> Result<TrialConfig> {
    let combo: EncodingCombo = serde_json::from_value(params.clone())
        .map_err(|e| Error::Protocol(format!("assignment params are not an encoding combo: {e}")))?;
    let mut cfg = base.clone();
    cfg.mode = mode;
    cfg.encoding = combo.apply(&base.encoding);
    cfg.feedback.amplitude = cfg.encoding.amplitude;
    cfg.feedback.pulse_width = cfg.encoding.pulse_width;
    cfg.seeds = seeds;
    cfg.seeds.substrate ^= client_salt(client_id);
    cfg.validate()?;
    Ok(cfg)
}

struct Session {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

fn connect(opts: &ClientOptions, attempts_left: &mut u32) -> Result<Session> {
    loop {
        match TcpStream::connect(&opts.server) {
            Ok(stream) => {
                stream.set_nodelay(true).ok();
                let reader = BufReader::new(stream.try_clone()?);
                let mut session = Session {
                    reader,
                    writer: stream,
                };
                write_frame(
                    &mut session.writer,
                    &ClientFrame::Hello {
                        client_id: opts.client_id.clone(),
                        substrate: opts.base.substrate.name().into(),
                    },
                )?;
                return Ok(session);
            }
            Err(e) => {
                if *attempts_left == 0 {
                    return Err(Error::Protocol(format!(
                        "cannot reach study server at {}: {e}"
                    , opts.server)));
                }
                *attempts_left -= 1;
                thread::sleep(opts.retry_delay);
            }
        }
    }
}

/// Runs assignments from the server until it answers DONE. Connection drops
/// are retried within the options' budget; a lost REPORT is recovered by the
/// server's reassignment timeout.
pub fn client_run(opts: &ClientOptions) -> Result<ClientSummary> {
    opts.base.validate()?;
    let mut trials_run = 0usize;
    let mut attempts_left = opts.connect_retries;
    'connection: loop {
        let mut session = match connect(opts, &mut attempts_left) {
            Ok(s) => s,
            Err(e) => return Err(e),
        };
        loop {
            if write_frame(&mut session.writer, &ClientFrame::Next).is_err() {
                continue 'connection;
            }
            let frame: ServerFrame = match read_frame(&mut session.reader, || true) {
                Ok(Some(f)) => f,
                // EOF or a broken read both mean the session is gone.
                Ok(None) | Err(Error::Io(_)) | Err(Error::Protocol(_)) => continue 'connection,
                Err(e) => return Err(e),
            };
            match frame {
                ServerFrame::Assign {
                    trial_id,
                    params,
                    mode,
                    seeds,
                    replicate: _,
                } => {
                    let cfg = trial_config_for(&opts.base, &params, mode, seeds, &opts.client_id)?;
                    log::info!("{}: running {trial_id}", opts.client_id);
                    let result = run_trial(&cfg)?;
                    let digest = result_digest(&result)?;
                    trials_run += 1;
                    let report = ClientFrame::Report {
                        trial_id,
                        score: result.score,
                        digest,
                    };
                    if write_frame(&mut session.writer, &report).is_err() {
                        continue 'connection;
                    }
                }
                ServerFrame::Wait => thread::sleep(opts.poll),
                ServerFrame::Done => return Ok(ClientSummary { trials_run }),
                ServerFrame::Err { code, msg } => {
                    return Err(Error::Protocol(format!("server refused: {code}: {msg}")))
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::substrate::SubstrateKind;

    fn base() -> TrialConfig {
        TrialConfig::new(TrialMode::A, SubstrateKind::Random { rate_hz: 2.0 }, 5)
    }

    #[test]
    fn client_salt_is_stable_and_distinguishes_ids() {
        assert_eq!(client_salt("alpha"), client_salt("alpha"));
        assert_ne!(client_salt("alpha"), client_salt("beta"));
        assert_ne!(client_salt("local-0"), client_salt("local-1"));
    }

    #[test]
    fn trial_config_applies_the_assignment() {
        let combo = EncodingCombo {
            f_min: 5.0,
            f_max: 100.0,
            amplitude: 2.5,
            pulse_width: 40.0,
            tick_rate: 1.0,
            ticks_per_step: 2,
        };
        let params = serde_json::to_value(combo).unwrap();
        let seeds = TrialSeeds::from_master(99);
        let cfg = trial_config_for(&base(), &params, TrialMode::B, seeds, "c7").unwrap();
        assert_eq!(cfg.mode, TrialMode::B);
        assert_eq!(EncodingCombo::from_encoding(&cfg.encoding), combo);
        assert_eq!(cfg.feedback.amplitude, 2.5);
        assert_eq!(cfg.feedback.pulse_width, 40.0);
        assert_eq!(cfg.seeds.env, seeds.env);
        assert_eq!(cfg.seeds.substrate, seeds.substrate ^ client_salt("c7"));
        // The base sensor range survives.
        assert_eq!(cfg.encoding.x_min, -1.0);
    }

    #[test]
    fn distinct_clients_get_distinct_substrate_seeds() {
        let combo = EncodingCombo::from_encoding(&crate::codec::EncodingParams::default());
        let params = serde_json::to_value(combo).unwrap();
        let seeds = TrialSeeds::from_master(1);
        let a = trial_config_for(&base(), &params, TrialMode::A, seeds, "a").unwrap();
        let b = trial_config_for(&base(), &params, TrialMode::A, seeds, "b").unwrap();
        assert_ne!(a.seeds.substrate, b.seeds.substrate);
        assert_eq!(a.seeds.env, b.seeds.env, "environment lane is shared");
        assert_eq!(a.seeds.decode_tiebreak, b.seeds.decode_tiebreak);
    }

    #[test]
    fn malformed_params_are_a_protocol_error() {
        let params = serde_json::json!({"nonsense": true});
        let seeds = TrialSeeds::default();
        assert!(matches!(
            trial_config_for(&base(), &params, TrialMode::A, seeds, "x"),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn result_digest_is_deterministic() {
        let cfg = base();
        let a = run_trial(&cfg).unwrap();
        let b = run_trial(&cfg).unwrap();
        assert_eq!(result_digest(&a).unwrap(), result_digest(&b).unwrap());
        let mut other = cfg;
        other.seeds.substrate ^= 1;
        let c = run_trial(&other).unwrap();
        assert_ne!(result_digest(&a).unwrap(), result_digest(&c).unwrap());
    }

    #[test]
    fn unreachable_server_exhausts_retries() {
        let mut opts = ClientOptions::new("127.0.0.1:1".into(), "c".into(), base());
        opts.connect_retries = 1;
        opts.retry_delay = Duration::from_millis(1);
        assert!(client_run(&opts).is_err());
    }
}
