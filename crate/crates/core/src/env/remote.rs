//! Newline-delimited JSON protocol for out-of-process user agents.
//!
//! ```text
//! → {"op":"step","history":[{"action":0,"signal":"[Continue]","p":0.1,"reward":0.9,"terminated":false}],"action":1,"step":12}
//! ← {"p":0.42,"signal":"[Continue]","terminated":false}
//! → {"op":"reset"}
//! ← {"ok":true}
//! ```
//!
//! The returned `p` already includes the server's strictness scaling for the
//! given training step. Failures are answered with `{"error":"..."}`.

use std::borrow::Cow;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{alpha_schedule, check_step, EnvState, Environment, TurnRecord};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, node_rng, NodeRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum EnvRequest {
    Step {
        history: Vec<TurnRecord>,
        action: usize,
        step: u64,
    },
    Reset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EnvResponse {
    Step {
        p: f64,
        signal: String,
        terminated: bool,
    },
    Reset {
        ok: bool,
    },
    Error {
        error: String,
    },
}

struct Connection {
    reader: Box<dyn BufRead + Send>,
    writer: Box<dyn Write + Send>,
    child: Option<Child>,
}

impl Connection {
    fn call(&mut self, request: &EnvRequest) -> Result<EnvResponse> {
        let mut line = serde_json::to_string(request)?;
        line.push('\n');
        self.writer.write_all(line.as_bytes())?;
        self.writer.flush()?;
        let mut reply = String::new();
        if self.reader.read_line(&mut reply)? == 0 {
            return Err(Error::env("remote environment closed the stream"));
        }
        let response: EnvResponse = serde_json::from_str(reply.trim_end())
            .map_err(|e| Error::env(format!("malformed response {reply:?}: {e}")))?;
        if let EnvResponse::Error { error } = response {
            return Err(Error::env(format!("remote error: {error}")));
        }
        Ok(response)
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Environment served by another process over a duplex byte stream.
pub struct RemoteEnv {
    num_actions: usize,
    conn: Mutex<Connection>,
}

impl std::fmt::Debug for RemoteEnv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteEnv")
            .field("num_actions", &self.num_actions)
            .finish_non_exhaustive()
    }
}

impl RemoteEnv {
    pub fn new(
        reader: impl BufRead + Send + 'static,
        writer: impl Write + Send + 'static,
        num_actions: usize,
    ) -> Self {
        Self {
            num_actions,
            conn: Mutex::new(Connection {
                reader: Box::new(reader),
                writer: Box::new(writer),
                child: None,
            }),
        }
    }

    /// Connects to `tcp:host:port` or spawns `stdio:<shell command>`.
    pub fn connect(address: &str, num_actions: usize) -> Result<Self> {
        if let Some(addr) = address.strip_prefix("tcp:") {
            let stream = TcpStream::connect(addr)?;
            stream.set_nodelay(true)?;
            let reader = BufReader::new(stream.try_clone()?);
            return Ok(Self::new(reader, stream, num_actions));
        }
        if let Some(cmd) = address.strip_prefix("stdio:") {
            let mut child = Command::new("sh")
                .arg("-c")
                .arg(cmd)
                .stdin(Stdio::piped())
                .stdout(Stdio::piped())
                .spawn()?;
            let stdin = child.stdin.take().expect("piped stdin");
            let stdout = child.stdout.take().expect("piped stdout");
            let env = Self::new(BufReader::new(stdout), stdin, num_actions);
            env.conn.lock().expect("fresh mutex").child = Some(child);
            return Ok(env);
        }
        Err(Error::config(
            "env",
            format!("expected tcp:host:port or stdio:command, got {address:?}"),
        ))
    }

    fn call(&self, request: &EnvRequest) -> Result<EnvResponse> {
        let mut conn = self
            .conn
            .lock()
            .map_err(|_| Error::env("remote connection poisoned"))?;
        conn.call(request)
    }
}

impl Environment for RemoteEnv {
    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn needs_history(&self) -> bool {
        true
    }

    fn step(
        &self,
        history: &[TurnRecord],
        state: &EnvState,
        action: usize,
        step: u64,
        _rng: &mut NodeRng,
    ) -> Result<(TurnRecord, EnvState)> {
        check_step(state, action, self.num_actions)?;
        let request = EnvRequest::Step {
            history: history.to_vec(),
            action,
            step,
        };
        match self.call(&request)? {
            EnvResponse::Step {
                p,
                signal,
                terminated,
            } => {
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::env(format!("probability {p} outside [0, 1]")));
                }
                let turn = TurnRecord::new(action, Cow::Owned(signal), p, terminated);
                let next = state.advance(action, p, turn.terminated);
                Ok((turn, next))
            }
            other => Err(Error::env(format!("unexpected response {other:?}"))),
        }
    }

    fn reset(&self) -> Result<()> {
        match self.call(&EnvRequest::Reset)? {
            EnvResponse::Reset { ok: true } => Ok(()),
            other => Err(Error::env(format!("reset refused: {other:?}"))),
        }
    }
}

fn answer(env: &dyn Environment, lambda: f64, request: EnvRequest) -> Result<EnvResponse> {
    match request {
        EnvRequest::Reset => env.reset().map(|_| EnvResponse::Reset { ok: true }),
        EnvRequest::Step {
            history,
            action,
            step,
        } => {
            // Local environments are pure in the action history: replay it.
            let mut state = env.initial_state(alpha_schedule(step, lambda));
            for (i, past) in history.iter().enumerate() {
                let mut rng = node_rng(derive_seed(step, i as u64));
                state = env
                    .step(&history[..i], &state, past.action, step, &mut rng)?
                    .1;
            }
            let mut rng = node_rng(derive_seed(step, history.len() as u64));
            let (turn, _) = env.step(&history, &state, action, step, &mut rng)?;
            Ok(EnvResponse::Step {
                p: turn.p_term,
                signal: turn.signal.into_owned(),
                terminated: turn.terminated,
            })
        }
    }
}

/// Serves `env` over a line-oriented stream until the reader is exhausted.
pub fn serve(
    env: &dyn Environment,
    lambda: f64,
    reader: impl BufRead,
    mut writer: impl Write,
) -> Result<()> {
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<EnvRequest>(&line) {
            Ok(request) => answer(env, lambda, request).unwrap_or_else(|e| EnvResponse::Error {
                error: e.to_string(),
            }),
            Err(e) => EnvResponse::Error {
                error: format!("bad request: {e}"),
            },
        };
        serde_json::to_writer(&mut writer, &response)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
    Ok(())
}
