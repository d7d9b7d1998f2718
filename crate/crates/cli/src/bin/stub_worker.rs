//! Stand-in external trainer. Speaks the worker side of the evaluation
//! protocol over stdin/stdout and answers every request with a fixed
//! accuracy. Fault injection flags make it misbehave on a chosen request.

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::time::Duration;

use clap::{Parser, ValueEnum};
use nas_core::evaluation::external::{
    ErrorBody, ErrorMessage, Hello, Message, TrainResponse, PROTOCOL_VERSION,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Fault {
    None,
    /// Reply with a line that is not JSON.
    Malformed,
    /// Exit without replying.
    Crash,
    /// Never reply.
    Hang,
    /// Answer the handshake with the wrong protocol version.
    BadVersion,
}

#[derive(Debug, Parser)]
#[command(name = "stub_worker", about = "Protocol stub for the external evaluator")]
struct Args {
    #[arg(long, default_value_t = 0.5)]
    accuracy: f64,
    #[arg(long, value_enum, default_value_t = Fault::None)]
    fault: Fault,
    /// 1-based request number the fault applies to; 0 means every request.
    #[arg(long, default_value_t = 0)]
    fault_on: u64,
    /// Append every received line to this file.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn send(out: &mut impl Write, msg: &Message) -> std::io::Result<()> {
    out.write_all(msg.to_line().as_bytes())?;
    out.flush()
}

fn error(id: Option<u64>, code: &str, message: String) -> Message {
    Message::Error(ErrorMessage {
        id,
        error: ErrorBody {
            code: code.into(),
            message,
        },
    })
}

fn main() -> std::io::Result<()> {
    let args = Args::parse();
    let mut log = match &args.log {
        Some(p) => Some(std::fs::OpenOptions::new().create(true).append(true).open(p)?),
        None => None,
    };
    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    let mut greeted = false;
    let mut served = 0u64;
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(f) = log.as_mut() {
            writeln!(f, "{line}")?;
        }
        let msg = match Message::parse(&line) {
            Ok(m) => m,
            Err(e) => {
                send(&mut out, &error(None, "malformed", e))?;
                continue;
            }
        };
        match msg {
            Message::Hello(h) => {
                if args.fault == Fault::BadVersion {
                    send(&mut out, &Message::Hello(Hello { protocol_version: PROTOCOL_VERSION + 98, agent: "stub".into() }))?;
                    continue;
                }
                if h.protocol_version != PROTOCOL_VERSION {
                    send(&mut out, &error(None, "version", format!("unsupported protocol_version {}", h.protocol_version)))?;
                    std::process::exit(2);
                }
                greeted = true;
                send(&mut out, &Message::Hello(Hello { protocol_version: PROTOCOL_VERSION, agent: "stub".into() }))?;
            }
            Message::Evaluate(req) => {
                if !greeted {
                    send(&mut out, &error(Some(req.id), "handshake", "evaluate before hello".into()))?;
                    continue;
                }
                served += 1;
                if args.fault_on == 0 || args.fault_on == served {
                    match args.fault {
                        Fault::Malformed => {
                            out.write_all(b"{not json\n")?;
                            out.flush()?;
                            continue;
                        }
                        Fault::Crash => std::process::exit(1),
                        Fault::Hang => loop {
                            std::thread::sleep(Duration::from_secs(3600));
                        },
                        Fault::None | Fault::BadVersion => {}
                    }
                }
                if let Err(e) = req.validate() {
                    send(&mut out, &error(Some(req.id), "bad_request", e))?;
                    continue;
                }
                send(
                    &mut out,
                    &Message::Result(TrainResponse {
                        id: req.id,
                        accuracy: args.accuracy,
                        param_count: req.arch.param_count(),
                        wall_ms: 0,
                    }),
                )?;
            }
            other => {
                send(&mut out, &error(None, "unexpected", format!("unexpected message {other:?}")))?;
            }
        }
    }
    Ok(())
}
