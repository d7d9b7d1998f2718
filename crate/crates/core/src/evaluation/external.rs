//! Client side of the external trainer protocol.
//!
//! One JSON message per line over the worker's stdin/stdout. The client
//! sends `hello`, expects `hello` back with the same `protocol_version`, then
//! alternates `evaluate` requests with `result` or `error` replies. Unknown
//! fields are ignored on both sides.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{EvalError, EvalMode, Evaluator, FitnessRecord, Provenance};
use crate::arch::Architecture;
use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainableScope {
    PredictedOnly,
    BnOnly,
    Full,
}

impl TrainableScope {
    /// Predicted blocks if any, else batch-norm layers if the architecture
    /// has any, else everything.
    pub fn choose(arch: &Architecture, predicted: &[usize]) -> Self {
        if !predicted.is_empty() {
            TrainableScope::PredictedOnly
        } else if arch.layers().any(|l| l.other_name() == Some("batchnorm")) {
            TrainableScope::BnOnly
        } else {
            TrainableScope::Full
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub protocol_version: u32,
    #[serde(default)]
    pub agent: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub protocol_version: u32,
    pub id: u64,
    pub arch: Architecture,
    pub dataset_id: String,
    pub epochs: u32,
    pub batch_size: u32,
    /// Learning rate reached by the linear warm-up.
    pub lr_target: f64,
    pub trainable_scope: TrainableScope,
    pub predicted_indices: Vec<usize>,
    pub train_head: bool,
    pub seed: u64,
}

impl TrainRequest {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.protocol_version != PROTOCOL_VERSION {
            return Err(format!("unsupported protocol_version {}", self.protocol_version));
        }
        if self.trainable_scope == TrainableScope::PredictedOnly && self.predicted_indices.is_empty()
        {
            return Err("predicted_only scope requires predicted_indices".into());
        }
        if let Some(i) = self.predicted_indices.iter().find(|i| **i >= self.arch.depth()) {
            return Err(format!("predicted index {i} outside the architecture"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    pub id: u64,
    pub accuracy: f64,
    pub param_count: u64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorMessage {
    #[serde(default)]
    pub id: Option<u64>,
    pub error: ErrorBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Hello(Hello),
    Evaluate(Box<TrainRequest>),
    Result(TrainResponse),
    Error(ErrorMessage),
}

impl Message {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("messages serialize");
        s.push('\n');
        s
    }

    pub fn parse(line: &str) -> std::result::Result<Message, String> {
        serde_json::from_str(line.trim_end()).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExternalConfig {
    /// Worker program followed by its arguments.
    pub command: Vec<String>,
    pub workers: usize,
    pub handshake_timeout_s: u64,
    pub eval_timeout_s: u64,
    pub dataset_id: String,
    pub epochs: u32,
    pub batch_size: u32,
    pub lr_target: f64,
    pub train_head: bool,
    pub seed: u64,
}

impl Default for ExternalConfig {
    fn default() -> Self {
        ExternalConfig {
            command: Vec::new(),
            workers: 1,
            handshake_timeout_s: 10,
            eval_timeout_s: 600,
            dataset_id: "cifar10-subset-2k".into(),
            epochs: 6,
            batch_size: 512,
            lr_target: 0.01,
            train_head: true,
            seed: 0,
        }
    }
}

struct Worker {
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Receiver<std::io::Result<String>>,
}

impl Worker {
    fn spawn(cfg: &ExternalConfig) -> Result<Worker> {
        let (prog, args) = cfg
            .command
            .split_first()
            .ok_or_else(|| Error::config("external evaluator: empty worker command"))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::io(prog, e))?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        let mut w = Worker {
            child,
            stdin,
            lines: rx,
        };
        w.handshake(Duration::from_secs(cfg.handshake_timeout_s))?;
        Ok(w)
    }

    fn send(&mut self, msg: &Message) -> std::io::Result<()> {
        let stdin = self
            .stdin
            .as_mut()
            .ok_or_else(|| std::io::Error::other("worker stdin closed"))?;
        stdin.write_all(msg.to_line().as_bytes())?;
        stdin.flush()
    }

    fn recv(&self, timeout: Duration) -> std::result::Result<String, EvalError> {
        match self.lines.recv_timeout(timeout) {
            Ok(Ok(line)) => Ok(line),
            Ok(Err(e)) => Err(EvalError::Worker(e.to_string())),
            Err(RecvTimeoutError::Timeout) => Err(EvalError::Timeout(timeout.as_secs())),
            Err(RecvTimeoutError::Disconnected) => {
                Err(EvalError::Worker("worker closed its output".into()))
            }
        }
    }

    fn handshake(&mut self, timeout: Duration) -> Result<()> {
        self.send(&Message::Hello(Hello {
            protocol_version: PROTOCOL_VERSION,
            agent: "nasgen".into(),
        }))
        .map_err(|e| Error::Protocol(format!("handshake write failed: {e}")))?;
        let line = self
            .recv(timeout)
            .map_err(|e| Error::Protocol(format!("handshake failed: {e}")))?;
        match Message::parse(&line) {
            Ok(Message::Hello(h)) if h.protocol_version == PROTOCOL_VERSION => Ok(()),
            Ok(Message::Hello(h)) => Err(Error::Protocol(format!(
                "worker speaks protocol_version {}, expected {PROTOCOL_VERSION}",
                h.protocol_version
            ))),
            Ok(Message::Error(e)) => Err(Error::Protocol(format!(
                "worker refused handshake: {}: {}",
                e.error.code, e.error.message
            ))),
            Ok(other) => Err(Error::Protocol(format!("unexpected handshake reply {other:?}"))),
            Err(e) => Err(Error::Protocol(format!("malformed handshake reply: {e}"))),
        }
    }

    fn shutdown(&mut self) {
        self.stdin.take();
        let deadline = Instant::now() + Duration::from_millis(500);
        while Instant::now() < deadline {
            if let Ok(Some(_)) = self.child.try_wait() {
                return;
            }
            thread::sleep(Duration::from_millis(10));
        }
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Worker {
    fn drop(&mut self) {
        self.shutdown();
    }
}

struct Pool {
    idle: Vec<Worker>,
    alive: usize,
    next_id: u64,
}

/// Evaluates architectures by sending them to a pool of worker processes,
/// one request in flight per worker. A crashed or timed-out worker is
/// replaced and the affected evaluation fails on its own.
pub struct ExternalEvaluator {
    cfg: ExternalConfig,
    pool: Mutex<Pool>,
    available: Condvar,
}

impl ExternalEvaluator {
    /// Spawns the workers and completes every handshake. Any handshake
    /// failure (including a version mismatch) is fatal.
    pub fn spawn(cfg: ExternalConfig) -> Result<Self> {
        let n = cfg.workers.max(1);
        let idle = (0..n).map(|_| Worker::spawn(&cfg)).collect::<Result<Vec<_>>>()?;
        Ok(ExternalEvaluator {
            cfg,
            pool: Mutex::new(Pool {
                idle,
                alive: n,
                next_id: 0,
            }),
            available: Condvar::new(),
        })
    }

    pub fn config(&self) -> &ExternalConfig {
        &self.cfg
    }

    pub fn request_for(&self, id: u64, arch: &Architecture, predicted: &[usize]) -> TrainRequest {
        let mut predicted = predicted.to_vec();
        predicted.sort_unstable();
        predicted.dedup();
        TrainRequest {
            protocol_version: PROTOCOL_VERSION,
            id,
            arch: arch.clone(),
            dataset_id: self.cfg.dataset_id.clone(),
            epochs: self.cfg.epochs,
            batch_size: self.cfg.batch_size,
            lr_target: self.cfg.lr_target,
            trainable_scope: TrainableScope::choose(arch, &predicted),
            predicted_indices: predicted,
            train_head: self.cfg.train_head,
            seed: self.cfg.seed,
        }
    }

    fn checkout(&self) -> std::result::Result<(Worker, u64), EvalError> {
        let mut pool = self.pool.lock().expect("pool lock");
        loop {
            if let Some(w) = pool.idle.pop() {
                pool.next_id += 1;
                return Ok((w, pool.next_id));
            }
            if pool.alive == 0 {
                return Err(EvalError::Worker("no live workers".into()));
            }
            pool = self.available.wait(pool).expect("pool lock");
        }
    }

    fn checkin(&self, worker: Option<Worker>) {
        let mut pool = self.pool.lock().expect("pool lock");
        match worker {
            Some(w) => pool.idle.push(w),
            None => pool.alive -= 1,
        }
        self.available.notify_one();
    }

    fn exchange(worker: &mut Worker, req: &TrainRequest, timeout: Duration) -> std::result::Result<TrainResponse, (EvalError, bool)> {
        // bool: whether the worker is still usable
        worker
            .send(&Message::Evaluate(Box::new(req.clone())))
            .map_err(|e| (EvalError::Worker(format!("write failed: {e}")), false))?;
        let line = worker.recv(timeout).map_err(|e| (e, false))?;
        match Message::parse(&line) {
            Ok(Message::Result(r)) if r.id == req.id => {
                if (0.0..=1.0).contains(&r.accuracy) {
                    Ok(r)
                } else {
                    Err((
                        EvalError::Malformed(format!("accuracy {} outside [0, 1]", r.accuracy)),
                        true,
                    ))
                }
            }
            Ok(Message::Result(r)) => Err((
                EvalError::Malformed(format!("reply for request {} while waiting for {}", r.id, req.id)),
                false,
            )),
            Ok(Message::Error(e)) => Err((
                EvalError::Remote {
                    code: e.error.code,
                    message: e.error.message,
                },
                true,
            )),
            Ok(other) => Err((EvalError::Malformed(format!("unexpected message {other:?}")), true)),
            Err(e) => Err((EvalError::Malformed(e), true)),
        }
    }
}

impl Evaluator for ExternalEvaluator {
    fn evaluate(&self, arch: &Architecture, predicted: &[usize]) -> std::result::Result<FitnessRecord, EvalError> {
        let (mut worker, id) = self.checkout()?;
        let req = self.request_for(id, arch, predicted);
        if let Err(m) = req.validate() {
            self.checkin(Some(worker));
            return Err(EvalError::Malformed(m));
        }
        let start = Instant::now();
        let outcome = Self::exchange(&mut worker, &req, Duration::from_secs(self.cfg.eval_timeout_s));
        match outcome {
            Ok(r) => {
                self.checkin(Some(worker));
                Ok(FitnessRecord {
                    fitness: r.accuracy,
                    param_count: r.param_count,
                    provenance: Provenance::External,
                    mode: EvalMode::Training {
                        epochs: req.epochs,
                        scope: req.trainable_scope,
                    },
                    wall_ms: r.wall_ms.max(start.elapsed().as_millis() as u64),
                    error: None,
                    cache_key: arch.canonical_hash(),
                })
            }
            Err((e, usable)) => {
                if usable {
                    self.checkin(Some(worker));
                } else {
                    drop(worker);
                    let replacement = Worker::spawn(&self.cfg)
                        .map_err(|err| log::error!("could not respawn worker: {err}"))
                        .ok();
                    self.checkin(replacement);
                }
                Err(e)
            }
        }
    }

    fn provenance(&self) -> Provenance {
        Provenance::External
    }

    fn mode(&self) -> EvalMode {
        EvalMode::Training {
            epochs: self.cfg.epochs,
            scope: TrainableScope::Full,
        }
    }
}
