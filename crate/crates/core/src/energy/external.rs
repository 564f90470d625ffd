//! Client for energy oracles running as child processes.
//!
//! The child speaks newline-delimited JSON on stdin/stdout:
//!
//! ```text
//! → {"op":"hello","version":1,"dimension":d}
//! ← {"op":"hello","version":1,"name":"..."}
//! → {"op":"energy","id":n,"angles":[[...],...]}
//! ← {"op":"energy","id":n,"energies":[...]}   or   {"op":"error","id":n,"message":"..."}
//! → {"op":"bye"}
//! ```
//!
//! One request is in flight at a time; the connection sits behind a mutex.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{check_dimensions, EnergyError, EnergyOracle, Result};
use crate::torus::TorusPoint;

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum ClientMessage {
    Hello { version: u32, dimension: usize },
    Energy { id: u64, angles: Vec<Vec<f64>> },
    Bye,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum ServerMessage {
    Hello { version: u32, name: String },
    Energy { id: u64, energies: Vec<f64> },
    Error { id: Option<u64>, message: String },
}

struct Connection {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
    broken: bool,
}

impl Connection {
    fn send(&mut self, msg: &ClientMessage) -> Result<()> {
        let stdin = self.stdin.as_mut().ok_or_else(|| EnergyError::Transport("connection closed".into()))?;
        let mut line = serde_json::to_string(msg).expect("client messages always serialise");
        line.push('\n');
        stdin
            .write_all(line.as_bytes())
            .and_then(|_| stdin.flush())
            .map_err(|e| EnergyError::Transport(format!("write failed: {e}")))
    }

    fn recv(&mut self, timeout: Duration) -> Result<ServerMessage> {
        let line = match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => line,
            Ok(Err(e)) => return Err(EnergyError::Transport(format!("read failed: {e}"))),
            Err(RecvTimeoutError::Timeout) => return Err(EnergyError::Timeout(timeout)),
            Err(RecvTimeoutError::Disconnected) => {
                return Err(EnergyError::Transport("oracle closed its output".into()))
            }
        };
        serde_json::from_str(&line).map_err(|e| EnergyError::Protocol(format!("bad reply {line:?}: {e}")))
    }

    /// Exit code of the child if it terminates within `limit`.
    fn wait_exit(&mut self, limit: Duration) -> Option<i32> {
        let start = Instant::now();
        loop {
            match self.child.try_wait() {
                Ok(Some(status)) => return status.code(),
                Ok(None) if start.elapsed() < limit => thread::sleep(Duration::from_millis(5)),
                _ => return None,
            }
        }
    }

    fn kill(&mut self) {
        self.stdin.take();
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// An [`EnergyOracle`] backed by a child process.
pub struct ExternalOracle {
    name: String,
    dimension: usize,
    timeout: Duration,
    conn: Mutex<Connection>,
}

impl std::fmt::Debug for ExternalOracle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExternalOracle").field("name", &self.name).field("dimension", &self.dimension).finish()
    }
}

impl ExternalOracle {
    /// Spawns `command` through `sh -c exec` and performs the handshake.
    pub fn connect(command: &str, dimension: usize) -> Result<Self> {
        Self::connect_with_timeout(command, dimension, DEFAULT_TIMEOUT)
    }

    pub fn connect_with_timeout(command: &str, dimension: usize, timeout: Duration) -> Result<Self> {
        if command.trim().is_empty() {
            return Err(EnergyError::Spawn {
                command: command.into(),
                source: std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty command"),
            });
        }
        // exec so that killing the child reaches the server itself
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(format!("exec {command}"))
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|source| EnergyError::Spawn { command: command.into(), source })?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("stdout is piped");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        let mut conn = Connection { child, stdin, lines: rx, next_id: 0, broken: false };

        let handshake = (|| {
            conn.send(&ClientMessage::Hello { version: PROTOCOL_VERSION, dimension })?;
            match conn.recv(timeout)? {
                ServerMessage::Hello { version, name } if version == PROTOCOL_VERSION => Ok(name),
                ServerMessage::Hello { version, .. } => {
                    Err(EnergyError::Version { client: PROTOCOL_VERSION, server: version })
                }
                ServerMessage::Error { message, .. } => Err(EnergyError::Remote(message)),
                other => Err(EnergyError::Protocol(format!("expected hello, got {other:?}"))),
            }
        })();
        // a process that never started (e.g. missing executable) exits with 127
        let handshake = handshake.map_err(|e| match conn.wait_exit(Duration::from_millis(500)) {
            Some(127) => EnergyError::Spawn {
                command: command.into(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "command not found"),
            },
            _ => e,
        });
        match handshake {
            Ok(name) => Ok(ExternalOracle { name, dimension, timeout, conn: Mutex::new(conn) }),
            Err(e) => {
                conn.kill();
                Err(e)
            }
        }
    }

    pub fn timeout(&self) -> Duration {
        self.timeout
    }
}

impl EnergyOracle for ExternalOracle {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn evaluate_batch(&self, points: &[TorusPoint]) -> Result<Vec<f64>> {
        check_dimensions(points, self.dimension)?;
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        if conn.broken {
            return Err(EnergyError::Transport("connection is no longer usable".into()));
        }
        let id = conn.next_id;
        conn.next_id += 1;
        let angles = points.iter().map(|p| p.angles().to_vec()).collect();
        let result = conn.send(&ClientMessage::Energy { id, angles }).and_then(|_| conn.recv(self.timeout));
        let reply = match result {
            Ok(r) => r,
            Err(e) => {
                // after a timeout or broken pipe the stream position is unknown
                conn.broken = true;
                conn.kill();
                return Err(e);
            }
        };
        match reply {
            ServerMessage::Energy { id: rid, energies } => {
                if rid != id {
                    conn.broken = true;
                    return Err(EnergyError::Protocol(format!("reply id {rid} for request {id}")));
                }
                if energies.len() != points.len() {
                    return Err(EnergyError::Protocol(format!(
                        "{} energies for {} points",
                        energies.len(),
                        points.len()
                    )));
                }
                if let Some((index, &value)) = energies.iter().enumerate().find(|(_, e)| !e.is_finite()) {
                    return Err(EnergyError::NonFinite { index, value });
                }
                Ok(energies)
            }
            ServerMessage::Error { message, .. } => Err(EnergyError::Remote(message)),
            other => {
                conn.broken = true;
                Err(EnergyError::Protocol(format!("unexpected reply {other:?}")))
            }
        }
    }
}

impl Drop for ExternalOracle {
    fn drop(&mut self) {
        let conn = self.conn.get_mut().unwrap_or_else(|p| p.into_inner());
        if !conn.broken {
            let _ = conn.send(&ClientMessage::Bye);
            conn.stdin.take();
            for _ in 0..20 {
                if let Ok(Some(_)) = conn.child.try_wait() {
                    return;
                }
                thread::sleep(Duration::from_millis(5));
            }
        }
        conn.kill();
    }
}
