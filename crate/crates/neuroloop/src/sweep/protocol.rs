//! Newline-delimited JSON frames between the study server and its clients.
//!
//! Client to server: HELLO, NEXT, REPORT. Server to client: ASSIGN, WAIT,
//! DONE, ERR. One JSON object per line; a NEXT is answered by exactly one
//! server frame, HELLO and REPORT are not acknowledged.

use std::io::{BufRead, ErrorKind, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::runner::{TrialMode, TrialSeeds};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ClientFrame {
    #[serde(rename = "HELLO")]
    Hello { client_id: String, substrate: String },
    #[serde(rename = "NEXT")]
    Next,
    #[serde(rename = "REPORT")]
    Report {
        trial_id: String,
        score: f64,
        digest: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ServerFrame {
    #[serde(rename = "ASSIGN")]
    Assign {
        trial_id: String,
        params: Value,
        mode: TrialMode,
        seeds: TrialSeeds,
        replicate: u32,
    },
    #[serde(rename = "WAIT")]
    Wait,
    #[serde(rename = "DONE")]
    Done,
    #[serde(rename = "ERR")]
    Err { code: String, msg: String },
}

pub fn write_frame<W: Write, F: Serialize>(w: &mut W, frame: &F) -> Result<()> {
    let mut line = serde_json::to_string(frame)?;
    line.push('\n');
    w.write_all(line.as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn parse_frame<F: DeserializeOwned>(line: &str) -> Result<F> {
    serde_json::from_str(line.trim_end_matches(['\r', '\n']))
        .map_err(|e| Error::Protocol(format!("bad frame: {e}")))
}

/// Reads one frame. `Ok(None)` on clean EOF at a frame boundary, or when a
/// read times out and `keep_waiting` says to stop; timeouts with
/// `keep_waiting() == true` poll again, so a socket read timeout acts as the
/// poll interval.
pub fn read_frame<R: BufRead, F: DeserializeOwned>(
    r: &mut R,
    mut keep_waiting: impl FnMut() -> bool,
) -> Result<Option<F>> {
    let mut buf = String::new();
    loop {
        match r.read_line(&mut buf) {
            Ok(0) => {
                return if buf.is_empty() {
                    Ok(None)
                } else {
                    Err(Error::Protocol("connection closed mid-frame".into()))
                };
            }
            Ok(_) if buf.ends_with('\n') => return parse_frame(&buf).map(Some),
            Ok(_) => return Err(Error::Protocol("connection closed mid-frame".into())),
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                if !keep_waiting() {
                    return Ok(None);
                }
            }
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn frames_roundtrip_with_screaming_type_tags() {
        let frames = vec![
            ClientFrame::Hello {
                client_id: "c1".into(),
                substrate: "spiking".into(),
            },
            ClientFrame::Next,
            ClientFrame::Report {
                trial_id: "s1-0001-r0".into(),
                score: 0.5,
                digest: "ab".into(),
            },
        ];
        for (f, tag) in frames.iter().zip(["HELLO", "NEXT", "REPORT"]) {
            let line = serde_json::to_string(f).unwrap();
            assert!(line.contains(&format!("\"type\":\"{tag}\"")), "{line}");
            let back: ClientFrame = parse_frame(&line).unwrap();
            assert_eq!(&back, f);
        }
        assert_eq!(
            serde_json::to_string(&ClientFrame::Next).unwrap(),
            r#"{"type":"NEXT"}"#
        );
        assert_eq!(
            serde_json::to_string(&ServerFrame::Done).unwrap(),
            r#"{"type":"DONE"}"#
        );
    }

    #[test]
    fn server_frames_roundtrip() {
        let frames = vec![
            ServerFrame::Assign {
                trial_id: "s2-0003-r1".into(),
                params: serde_json::json!({"f_min": 4.0}),
                mode: TrialMode::A,
                seeds: TrialSeeds::from_master(7),
                replicate: 1,
            },
            ServerFrame::Wait,
            ServerFrame::Done,
            ServerFrame::Err {
                code: "duplicate_client".into(),
                msg: "client_id already connected".into(),
            },
        ];
        for (f, tag) in frames.iter().zip(["ASSIGN", "WAIT", "DONE", "ERR"]) {
            let line = serde_json::to_string(f).unwrap();
            assert!(line.contains(&format!("\"type\":\"{tag}\"")), "{line}");
            let back: ServerFrame = parse_frame(&line).unwrap();
            assert_eq!(&back, f);
        }
    }

    #[test]
    fn unknown_type_is_a_protocol_error() {
        let err = parse_frame::<ClientFrame>(r#"{"type":"BOGUS"}"#).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
        let err = parse_frame::<ServerFrame>("not json").unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn read_frame_walks_an_ndjson_stream() {
        let data = "{\"type\":\"NEXT\"}\n{\"type\":\"HELLO\",\"client_id\":\"x\",\"substrate\":\"random\"}\n";
        let mut r = Cursor::new(data.as_bytes());
        let a: Option<ClientFrame> = read_frame(&mut r, || true).unwrap();
        assert_eq!(a, Some(ClientFrame::Next));
        let b: Option<ClientFrame> = read_frame(&mut r, || true).unwrap();
        assert!(matches!(b, Some(ClientFrame::Hello { .. })));
        let c: Option<ClientFrame> = read_frame(&mut r, || true).unwrap();
        assert_eq!(c, None);
    }

    #[test]
    fn mid_frame_eof_is_a_protocol_error() {
        let mut r = Cursor::new(b"{\"type\":\"NEXT\"" as &[u8]);
        let got = read_frame::<_, ClientFrame>(&mut r, || true);
        assert!(matches!(got, Err(Error::Protocol(_))));
    }
}
