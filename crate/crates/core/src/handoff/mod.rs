//! Blocking message handoff between stages over Unix domain sockets.
//!
//! The producer of a message listens on a socket whose path is derived from
//! the runtime directory, the application id and its own stage id. Each
//! consumer connects to that path, retrying until the producer exists, reads
//! one [`Frame`] and answers with a one-byte acknowledgement. The producer
//! blocks until the expected number of consumers have acknowledged, then
//! removes its socket file.

mod frame;

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Read, Write};
use std::os::unix::net::{UnixListener, UnixStream};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

pub use frame::{read_frame, CodecError, Frame, ReadError, MAGIC, VERSION};

pub const RUNTIME_DIR_ENV: &str = "PALLEX_RUNTIME_DIR";
pub const DEFAULT_RUNTIME_DIR: &str = "/run/pallex";

pub const DEFAULT_RETRY_INTERVAL: Duration = Duration::from_millis(50);
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);

/// Sent by a consumer once it holds a frame whose checksum verified.
const ACK: u8 = 0x06;
/// Sent by a consumer that received a frame it could not accept.
const NAK: u8 = 0x15;

/// How long the producer sleeps between polls of a non-blocking accept.
const ACCEPT_POLL: Duration = Duration::from_millis(2);

/// The runtime directory from `PALLEX_RUNTIME_DIR`, or `/run/pallex`.
pub fn runtime_dir_from_env() -> PathBuf {
    std::env::var_os(RUNTIME_DIR_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_RUNTIME_DIR))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Producer,
    Consumer,
}

/// The socket of one stage's outgoing message, seen from one side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HandoffEndpoint {
    app_id: String,
    stage_id: String,
    socket_path: PathBuf,
    role: Role,
}

impl HandoffEndpoint {
    /// `stage_id` is always the producing stage; `role` says which side the
    /// caller is on.
    pub fn new(
        runtime_dir: impl AsRef<Path>,
        app_id: impl Into<String>,
        stage_id: impl Into<String>,
        role: Role,
    ) -> Self {
        let app_id = app_id.into();
        let stage_id = stage_id.into();
        let socket_path = runtime_dir
            .as_ref()
            .join(&app_id)
            .join(format!("{stage_id}.sock"));
        HandoffEndpoint {
            app_id,
            stage_id,
            socket_path,
            role,
        }
    }

    pub fn app_id(&self) -> &str {
        &self.app_id
    }

    pub fn stage_id(&self) -> &str {
        &self.stage_id
    }

    pub fn socket_path(&self) -> &Path {
        &self.socket_path
    }

    pub fn role(&self) -> Role {
        self.role
    }
}

#[derive(Debug, Error)]
pub enum HandoffError {
    #[error("socket path {0} is already in use")]
    AddressInUse(PathBuf),
    #[error("timed out after delivering to {delivered} of {expected} consumers")]
    ServeTimeout { delivered: usize, expected: usize },
    #[error("timed out waiting for predecessors: {}", missing.join(", "))]
    CollectTimeout { missing: Vec<String> },
    #[error("bad frame from {producer}: {source}")]
    Decode {
        producer: String,
        #[source]
        source: CodecError,
    },
    #[error("socket for {expected} delivered a frame from {found}")]
    ProducerMismatch { expected: String, found: String },
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: io::Error,
    },
}

fn io_err(context: impl Into<String>) -> impl FnOnce(io::Error) -> HandoffError {
    let context = context.into();
    move |source| HandoffError::Io { context, source }
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    /// Position in delivery order, starting at 0.
    pub sequence: usize,
    pub bytes: usize,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DeliveryReport {
    pub deliveries: Vec<Delivery>,
    /// Connections that dropped or refused the frame before acknowledging.
    pub failed_connections: usize,
}

/// Removes the socket file when the producer is done with it, on any path.
struct SocketFile<'a>(&'a Path);

impl Drop for SocketFile<'_> {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.0);
    }
}

/// Serves `payload` to `successor_count` consumers, one after the other,
/// blocking until each has acknowledged the full frame.
///
/// With no successors nothing is created and an empty report is returned.
pub fn serve_handoff(
    endpoint: &HandoffEndpoint,
    payload: &[u8],
    successor_count: usize,
    timeout: Duration,
) -> Result<DeliveryReport, HandoffError> {
    let mut report = DeliveryReport::default();
    if successor_count == 0 {
        return Ok(report);
    }

    let started = Instant::now();
    let deadline = started + timeout;
    let bytes = Frame::new(endpoint.stage_id(), payload)
        .map_err(|source| HandoffError::Decode {
            producer: endpoint.stage_id().to_owned(),
            source,
        })?
        .encode();

    let path = endpoint.socket_path();
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(format!("creating {}", dir.display())))?;
    }
    if fs::symlink_metadata(path).is_ok() {
        return Err(HandoffError::AddressInUse(path.to_owned()));
    }
    let listener = UnixListener::bind(path).map_err(|e| {
        if e.kind() == io::ErrorKind::AddrInUse {
            HandoffError::AddressInUse(path.to_owned())
        } else {
            io_err(format!("binding {}", path.display()))(e)
        }
    })?;
    let _cleanup = SocketFile(path);
    listener
        .set_nonblocking(true)
        .map_err(io_err("configuring listener"))?;

    while report.deliveries.len() < successor_count {
        let stream = match listener.accept() {
            Ok((stream, _)) => stream,
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                let now = Instant::now();
                if now >= deadline {
                    return Err(HandoffError::ServeTimeout {
                        delivered: report.deliveries.len(),
                        expected: successor_count,
                    });
                }
                thread::sleep(ACCEPT_POLL.min(deadline - now));
                continue;
            }
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(io_err("accepting consumer")(e)),
        };

        match send_to_consumer(stream, &bytes, deadline) {
            Ok(true) => report.deliveries.push(Delivery {
                sequence: report.deliveries.len(),
                bytes: payload.len(),
                elapsed: started.elapsed(),
            }),
            Ok(false) => report.failed_connections += 1,
            Err(e) if is_timeout(&e) => {
                return Err(HandoffError::ServeTimeout {
                    delivered: report.deliveries.len(),
                    expected: successor_count,
                })
            }
            // A consumer that hangs up mid-transfer is not fatal; another
            // attempt from it counts as a fresh connection.
            Err(_) => report.failed_connections += 1,
        }
    }
    Ok(report)
}

/// Writes the frame and waits for the consumer's verdict.
fn send_to_consumer(mut stream: UnixStream, bytes: &[u8], deadline: Instant) -> io::Result<bool> {
    let remaining = deadline
        .checked_duration_since(Instant::now())
        .filter(|d| !d.is_zero())
        .ok_or_else(|| io::Error::from(io::ErrorKind::TimedOut))?;
    stream.set_nonblocking(false)?;
    stream.set_write_timeout(Some(remaining))?;
    stream.set_read_timeout(Some(remaining))?;
    stream.write_all(bytes)?;
    stream.flush()?;
    let mut verdict = [0u8; 1];
    stream.read_exact(&mut verdict)?;
    Ok(verdict[0] == ACK)
}

/// Messages gathered from predecessors, with the number of connection
/// attempts each one took.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Collected {
    pub payloads: BTreeMap<String, Vec<u8>>,
    pub connect_attempts: BTreeMap<String, u32>,
}

/// Reads one message from each predecessor, in list order.
///
/// A predecessor whose socket does not exist yet (or refuses connections)
/// is retried every `retry_interval` until the overall `timeout` runs out.
pub fn collect_handoff(
    predecessors: &[HandoffEndpoint],
    retry_interval: Duration,
    timeout: Duration,
) -> Result<Collected, HandoffError> {
    let deadline = Instant::now() + timeout;
    let mut out = Collected::default();

    for (i, pred) in predecessors.iter().enumerate() {
        let missing = || HandoffError::CollectTimeout {
            missing: predecessors[i..]
                .iter()
                .map(|p| p.stage_id().to_owned())
                .collect(),
        };

        let mut attempts = 0u32;
        let mut stream = loop {
            attempts += 1;
            match UnixStream::connect(pred.socket_path()) {
                Ok(s) => break s,
                Err(e)
                    if matches!(
                        e.kind(),
                        io::ErrorKind::NotFound | io::ErrorKind::ConnectionRefused
                    ) =>
                {
                    let now = Instant::now();
                    if now >= deadline {
                        return Err(missing());
                    }
                    thread::sleep(retry_interval.min(deadline - now));
                }
                Err(e) => {
                    return Err(io_err(format!("connecting to {}", pred.socket_path().display()))(e))
                }
            }
        };
        out.connect_attempts.insert(pred.stage_id().to_owned(), attempts);

        let remaining = deadline
            .checked_duration_since(Instant::now())
            .filter(|d| !d.is_zero())
            .ok_or_else(missing)?;
        stream
            .set_read_timeout(Some(remaining))
            .and_then(|_| stream.set_write_timeout(Some(remaining)))
            .map_err(io_err("configuring consumer socket"))?;

        let frame = match read_frame(&mut stream) {
            Ok(f) => f,
            Err(ReadError::Io(e)) if is_timeout(&e) => return Err(missing()),
            Err(ReadError::Io(e)) => {
                return Err(io_err(format!("reading from {}", pred.stage_id()))(e))
            }
            Err(ReadError::Codec(source)) => {
                let _ = stream.write_all(&[NAK]);
                return Err(HandoffError::Decode {
                    producer: pred.stage_id().to_owned(),
                    source,
                });
            }
        };
        if frame.producer_id() != pred.stage_id() {
            let _ = stream.write_all(&[NAK]);
            return Err(HandoffError::ProducerMismatch {
                expected: pred.stage_id().to_owned(),
                found: frame.producer_id().to_owned(),
            });
        }
        stream
            .write_all(&[ACK])
            .map_err(io_err(format!("acknowledging {}", pred.stage_id())))?;
        out.payloads
            .insert(pred.stage_id().to_owned(), frame.into_payload());
    }
    Ok(out)
}
