//! Client for model processes speaking line-delimited JSON over stdio.
//!
//! ```text
//! -> {"type":"info","id":0}
//! <- {"type":"info","id":0,"classes":C,"names":[...],"batch_limit":N}
//! -> {"type":"predict","id":k,"rows":l,"cols":d,"inputs":[[...], ...]}
//! <- {"type":"probs","id":k,"probs":[[p1..pC], ...]}
//! <- {"type":"error","id":k,"message":"..."}
//! ```
//!
//! Requests are strictly sequential; ids increase by one per request.
//! A dedicated writer thread owns the child's stdin and a reader thread
//! drains its stdout, so a stalled child can always be timed out and
//! killed. The child's stderr is inherited.

use std::io::{self, BufRead, BufReader, Write};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use log::warn;
use serde::{Deserialize, Serialize};

use super::{
    preview, Predictor, PredictorError, PredictorInfo, ProbabilityVector, Result,
    DEFAULT_BATCH_LIMIT,
};
use crate::spectra::Spectrogram;

#[derive(Serialize)]
struct InfoRequest {
    #[serde(rename = "type")]
    kind: &'static str,
    id: u64,
}

#[derive(Serialize)]
struct PredictRequest<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    id: u64,
    rows: usize,
    cols: usize,
    inputs: Vec<&'a [f64]>,
}

#[derive(Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Response {
    Info {
        id: i64,
        classes: usize,
        #[serde(default)]
        names: Option<Vec<String>>,
        #[serde(default)]
        batch_limit: Option<usize>,
    },
    Probs {
        id: i64,
        probs: Vec<Vec<f64>>,
    },
    Error {
        id: i64,
        message: String,
    },
}

struct Session {
    child: Child,
    to_child: Option<Sender<Vec<u8>>>,
    from_child: Receiver<io::Result<String>>,
    next_id: u64,
    timeout: Duration,
    broken: Option<String>,
}

impl Session {
    fn send(&mut self, mut line: Vec<u8>) -> Result<()> {
        line.push(b'\n');
        let tx = self
            .to_child
            .as_ref()
            .ok_or_else(|| PredictorError::Closed("stdin already closed".into()))?;
        tx.send(line)
            .map_err(|_| PredictorError::Closed("model process stopped reading input".into()))
    }

    fn receive(&mut self, id: u64) -> Result<String> {
        loop {
            match self.from_child.recv_timeout(self.timeout) {
                Ok(Ok(line)) if line.trim().is_empty() => continue,
                Ok(Ok(line)) => return Ok(line),
                Ok(Err(e)) => return Err(PredictorError::Io(e)),
                Err(RecvTimeoutError::Timeout) => {
                    let _ = self.child.kill();
                    return Err(PredictorError::Timeout {
                        id,
                        seconds: self.timeout.as_secs_f64(),
                    });
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(PredictorError::Closed(
                        "model process closed its output".into(),
                    ))
                }
            }
        }
    }

    fn shutdown(&mut self) {
        // Closing stdin lets a well-behaved child exit on EOF.
        self.to_child.take();
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// A model living in a child process.
pub struct SubprocessPredictor {
    info: PredictorInfo,
    session: Mutex<Session>,
}

/// Spawns `command` and performs the `info` handshake.
pub fn connect_subprocess(command: &[String], timeout: Duration) -> Result<SubprocessPredictor> {
    let (program, args) = command
        .split_first()
        .ok_or_else(|| PredictorError::Config("empty model command".into()))?;
    let mut child = Command::new(program)
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .map_err(|source| PredictorError::Spawn {
            command: command.to_vec(),
            source,
        })?;
    let mut stdin = child.stdin.take().expect("piped stdin");
    let stdout = child.stdout.take().expect("piped stdout");

    let (to_child, writer_rx) = mpsc::channel::<Vec<u8>>();
    thread::spawn(move || {
        for line in writer_rx {
            if stdin.write_all(&line).and_then(|()| stdin.flush()).is_err() {
                break;
            }
        }
    });
    let (reader_tx, from_child) = mpsc::channel();
    thread::spawn(move || {
        let reader = BufReader::new(stdout);
        for line in reader.lines() {
            if reader_tx.send(line).is_err() {
                return;
            }
        }
        let _ = reader_tx.send(Err(io::Error::new(
            io::ErrorKind::UnexpectedEof,
            "model process closed stdout",
        )));
    });

    let mut session = Session {
        child,
        to_child: Some(to_child),
        from_child,
        next_id: 1,
        timeout,
        broken: None,
    };
    match handshake(&mut session) {
        Ok(info) => Ok(SubprocessPredictor {
            info,
            session: Mutex::new(session),
        }),
        Err(e) => {
            session.shutdown();
            Err(e)
        }
    }
}

fn handshake(session: &mut Session) -> Result<PredictorInfo> {
    let request = serde_json::to_vec(&InfoRequest {
        kind: "info",
        id: 0,
    })
    .expect("info request serializes");
    session.send(request)?;
    let line = session.receive(0)?;
    let bad = |detail: &str| PredictorError::Handshake {
        detail: detail.to_string(),
        payload: preview(&line),
    };
    let response: Response = serde_json::from_str(&line).map_err(|e| bad(&e.to_string()))?;
    match response {
        Response::Info {
            id,
            classes,
            names,
            batch_limit,
        } => {
            if id != 0 {
                return Err(bad(&format!("info answered with id {id}, expected 0")));
            }
            if classes < 2 {
                return Err(bad(&format!("classes = {classes}, need at least 2")));
            }
            if let Some(n) = &names {
                if n.len() != classes {
                    return Err(bad(&format!("{} names for {classes} classes", n.len())));
                }
            }
            let batch_limit = batch_limit.unwrap_or(DEFAULT_BATCH_LIMIT);
            if batch_limit == 0 {
                return Err(bad("batch_limit must be at least 1"));
            }
            Ok(PredictorInfo {
                class_count: classes,
                class_names: names,
                batch_limit,
            })
        }
        Response::Error { message, .. } => Err(bad(&format!("model refused handshake: {message}"))),
        Response::Probs { .. } => Err(bad("expected an info response")),
    }
}

impl SubprocessPredictor {
    fn request(
        &self,
        session: &mut Session,
        batch: &[Spectrogram],
    ) -> Result<Vec<ProbabilityVector>> {
        let (rows, cols) = batch[0].shape();
        if let Some(k) = batch.iter().position(|x| x.shape() != (rows, cols)) {
            return Err(PredictorError::Shape(format!(
                "batch input {k} is {:?}, first input is {:?}",
                batch[k].shape(),
                (rows, cols)
            )));
        }
        let id = session.next_id;
        session.next_id += 1;
        let request = PredictRequest {
            kind: "predict",
            id,
            rows,
            cols,
            inputs: batch.iter().map(Spectrogram::values).collect(),
        };
        let bytes = serde_json::to_vec(&request).expect("finite floats serialize");
        session.send(bytes)?;
        let line = session.receive(id)?;
        let protocol = |detail: String| PredictorError::Protocol {
            detail,
            payload: preview(&line),
        };
        let response: Response =
            serde_json::from_str(&line).map_err(|e| protocol(e.to_string()))?;
        let probs = match response {
            Response::Probs { id: got, probs } => {
                if got != id as i64 {
                    return Err(PredictorError::IdMismatch {
                        expected: id,
                        found: got,
                        payload: preview(&line),
                    });
                }
                probs
            }
            Response::Error { id: got, message } => {
                if got != id as i64 {
                    return Err(PredictorError::IdMismatch {
                        expected: id,
                        found: got,
                        payload: preview(&line),
                    });
                }
                return Err(PredictorError::Remote { id: got, message });
            }
            Response::Info { .. } => return Err(protocol("unexpected info response".into())),
        };
        if probs.len() != batch.len() {
            return Err(PredictorError::BatchLength {
                expected: batch.len(),
                found: probs.len(),
            });
        }
        probs
            .into_iter()
            .enumerate()
            .map(|(row, raw)| {
                let payload = format!("{raw:?}");
                if raw.len() != self.info.class_count {
                    return Err(PredictorError::InvalidProbabilities {
                        row,
                        detail: format!(
                            "{} entries for {} classes",
                            raw.len(),
                            self.info.class_count
                        ),
                        payload,
                    });
                }
                let (p, fixed) = ProbabilityVector::repaired(raw).map_err(|detail| {
                    PredictorError::InvalidProbabilities {
                        row,
                        detail,
                        payload: payload.clone(),
                    }
                })?;
                if fixed {
                    warn!("request {id} row {row}: renormalized drifting probabilities {payload}");
                }
                Ok(p)
            })
            .collect()
    }

    /// Terminates the child. Later calls fail with [`PredictorError::Closed`].
    pub fn close(&self) {
        let mut session = self.session.lock().unwrap_or_else(|e| e.into_inner());
        if session.broken.is_none() {
            session.broken = Some("predictor was closed".into());
        }
        session.shutdown();
    }
}

impl Predictor for SubprocessPredictor {
    fn info(&self) -> &PredictorInfo {
        &self.info
    }

    fn predict(&self, batch: &[Spectrogram]) -> Result<Vec<ProbabilityVector>> {
        let mut session = self.session.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(reason) = &session.broken {
            return Err(PredictorError::Closed(reason.clone()));
        }
        let mut out = Vec::with_capacity(batch.len());
        for part in batch.chunks(self.info.batch_limit) {
            match self.request(&mut session, part) {
                Ok(rows) => out.extend(rows),
                Err(e) => {
                    // Remote errors and bad rows leave the stream in sync;
                    // anything else means the connection can't be trusted.
                    let recoverable = matches!(
                        e,
                        PredictorError::Remote { .. }
                            | PredictorError::InvalidProbabilities { .. }
                            | PredictorError::BatchLength { .. }
                            | PredictorError::Shape(_)
                    );
                    if !recoverable {
                        session.broken = Some(e.to_string());
                        session.shutdown();
                    }
                    return Err(e);
                }
            }
        }
        Ok(out)
    }
}

impl Drop for SubprocessPredictor {
    fn drop(&mut self) {
        let session = self.session.get_mut().unwrap_or_else(|e| e.into_inner());
        session.shutdown();
    }
}
