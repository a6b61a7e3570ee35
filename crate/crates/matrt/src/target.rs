//! The simulated switch target: a TCP server owning the table state,
//! applying write batches, answering reads, running test-packet lookups,
//! and fanning out miss notifications.
//!
//! Every connected session is a notification subscriber; sessions that
//! disconnect are silently removed. Fanout goes through per-session
//! outgoing queues drained by dedicated writer threads, so a slow
//! subscriber never delays another session's acknowledgment. Mutations of
//! the table state serialize on a single writer lock; reads share a read
//! lock and observe batch-consistent snapshots.

use std::collections::HashMap;
use std::io::BufReader;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use matrt_core::schema::{compute_digest, serialize_schema, ProgramSchema};
use matrt_core::table::Dataplane;
use matrt_core::wire::{self, encode, Body, Message, NotifyReason, PacketField};

use crate::frame;

/// Target tuning knobs.
#[derive(Clone, Debug, Default)]
pub struct TargetConfig {
    /// Injected latency applied once per request, immediately before the
    /// acknowledgment is sent.
    pub response_delay: Duration,
}

struct SessionOut {
    queue: mpsc::Sender<Vec<u8>>,
    stream: TcpStream,
}

struct Shared {
    program: String,
    schema_digest: u64,
    schema_doc: String,
    plane: RwLock<Dataplane>,
    sessions: Mutex<HashMap<u64, SessionOut>>,
    next_session_id: AtomicU64,
    response_delay: Duration,
    shutting_down: AtomicBool,
}

/// A running target. Dropping the handle shuts the server down.
pub struct TargetHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    accept_thread: Option<JoinHandle<()>>,
}

/// Binds `listen` and serves the given program until shut down.
pub fn serve(
    schema: ProgramSchema,
    listen: &str,
    config: TargetConfig,
) -> std::io::Result<TargetHandle> {
    let listener = TcpListener::bind(listen)?;
    let addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        program: schema.program_name.clone(),
        schema_digest: compute_digest(&schema),
        schema_doc: serialize_schema(&schema),
        plane: RwLock::new(Dataplane::new(schema)),
        sessions: Mutex::new(HashMap::new()),
        next_session_id: AtomicU64::new(1),
        response_delay: config.response_delay,
        shutting_down: AtomicBool::new(false),
    });

    let accept_shared = shared.clone();
    let accept_thread = thread::spawn(move || {
        for stream in listener.incoming() {
            if accept_shared.shutting_down.load(Ordering::SeqCst) {
                break;
            }
            if let Ok(stream) = stream {
                start_session(accept_shared.clone(), stream);
            }
        }
    });

    Ok(TargetHandle { addr, shared, accept_thread: Some(accept_thread) })
}

impl TargetHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// The `host:port` string clients connect to.
    pub fn endpoint(&self) -> String {
        self.addr.to_string()
    }

    /// Current entry count of a table, mainly for tests and diagnostics.
    pub fn occupancy(&self, table_id: u32) -> Option<usize> {
        self.shared.plane.read().unwrap().occupancy(table_id).ok()
    }

    /// Stops accepting, closes every session, and joins the accept loop.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.shared.shutting_down.swap(true, Ordering::SeqCst) {
            return;
        }
        // Unblock the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
        let sessions: Vec<SessionOut> =
            self.shared.sessions.lock().unwrap().drain().map(|(_, s)| s).collect();
        for s in sessions {
            let _ = s.stream.shutdown(Shutdown::Both);
        }
    }
}

impl Drop for TargetHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

fn start_session(shared: Arc<Shared>, stream: TcpStream) {
    let _ = stream.set_nodelay(true);
    let (Ok(writer_stream), Ok(registry_stream)) = (stream.try_clone(), stream.try_clone())
    else {
        return;
    };

    let session_id = shared.next_session_id.fetch_add(1, Ordering::SeqCst);
    let (tx, rx) = mpsc::channel::<Vec<u8>>();
    shared
        .sessions
        .lock()
        .unwrap()
        .insert(session_id, SessionOut { queue: tx.clone(), stream: registry_stream });

    // Writer: drains the outgoing queue (acks and notifications) so that
    // notification fanout from other sessions never blocks on this
    // session's socket.
    thread::spawn(move || {
        let mut writer = writer_stream;
        for buf in rx {
            if frame::write_frame(&mut writer, &buf).is_err() {
                break;
            }
        }
        let _ = writer.shutdown(Shutdown::Both);
    });

    thread::spawn(move || {
        session_loop(&shared, stream, &tx);
        // Session over: deregister, which also closes the writer queue.
        shared.sessions.lock().unwrap().remove(&session_id);
    });
}

/// Handles one session until EOF, transport failure, or a protocol
/// violation; any of these terminates only this session.
fn session_loop(shared: &Shared, stream: TcpStream, out: &mpsc::Sender<Vec<u8>>) {
    let mut reader = BufReader::new(stream);
    let mut scratch = Vec::new();
    loop {
        let Ok(header) = frame::read_raw_frame_into(&mut reader, &mut scratch) else {
            return; // disconnect or unreadable frame
        };

        // Write batches apply while they decode and acknowledge while
        // they apply, so one request's memory footprint stays flat no
        // matter how many updates it carries.
        if header.msg_type == wire::TYPE_WRITE {
            let Ok(ack_frame) = apply_write_frame(shared, &scratch) else {
                // Malformed mid-frame. Only a non-compliant peer can get
                // here; valid updates decoded before the bad byte remain
                // applied, unacknowledged, and the session dies.
                return;
            };
            if !shared.response_delay.is_zero() {
                thread::sleep(shared.response_delay);
            }
            if out.send(ack_frame).is_err() {
                return;
            }
            continue;
        }
        let (request_id, reply) = {
            let Ok(msg) = wire::decode(&scratch) else {
                return; // malformed frame
            };
            let reply = match msg.body {
                Body::Hello { client: _ } => Some(Body::HelloAck {
                    schema_digest: shared.schema_digest,
                    program: shared.program.clone(),
                }),
                Body::GetSchema => Some(Body::SchemaDoc { document: shared.schema_doc.clone() }),
                Body::Read { table_id, key } => {
                    match shared.plane.read().unwrap().read_entries(table_id, key.as_ref()) {
                        Ok(entries) => Some(Body::ReadAck { entries }),
                        // No error channel exists for reads; a
                        // schema-checked client never sends these, so
                        // treat as a violation.
                        Err(_) => return,
                    }
                }
                Body::TestPacket { table_id, fields } => {
                    let hit = match shared.plane.read().unwrap().lookup(table_id, &fields) {
                        Ok(hit) => hit,
                        Err(_) => return,
                    };
                    if hit.is_none() {
                        notify_all(shared, table_id, fields);
                    }
                    None
                }
                // Server-role bodies arriving at the server are violations.
                _ => return,
            };
            (msg.request_id, reply)
        };

        if let Some(body) = reply {
            if !shared.response_delay.is_zero() {
                thread::sleep(shared.response_delay);
            }
            let Ok(frame) = encode(&Message { request_id, body }) else {
                return;
            };
            if out.send(frame).is_err() {
                return;
            }
        }
    }
}

/// Applies a write frame and returns the encoded acknowledgment.
/// Non-atomic batches stream: each update applies as it decodes and its
/// status goes straight into the ack frame. Atomic batches materialize
/// first because all-or-nothing semantics need the full batch before any
/// table mutates.
fn apply_write_frame(shared: &Shared, frame: &[u8]) -> Result<Vec<u8>, ()> {
    use matrt_core::wire::{WriteAckEncoder, WriteBatch, WriteFrameDecoder};

    let mut decoder = WriteFrameDecoder::new(frame).map_err(|_| ())?;
    if decoder.atomic() {
        let mut updates = Vec::with_capacity(decoder.remaining() as usize);
        while let Some(update) = decoder.next() {
            updates.push(update.map_err(|_| ())?);
        }
        let batch = WriteBatch { atomic: true, updates };
        let report = shared.plane.write().unwrap().apply_write(&batch);
        let ack =
            Message { request_id: decoder.request_id(), body: Body::WriteAck(report) };
        return encode(&ack).map_err(|_| ());
    }

    let mut ack =
        WriteAckEncoder::new(decoder.request_id(), false, decoder.remaining()).map_err(|_| ())?;
    let mut plane = shared.plane.write().unwrap();
    while let Some(update) = decoder.next() {
        let status = plane.apply_update(&update.map_err(|_| ())?);
        ack.push(&status).map_err(|_| ())?;
    }
    drop(plane);
    ack.finish().map_err(|_| ())
}

/// Sends a lookup-miss notification to every live session.
fn notify_all(shared: &Shared, table_id: u32, fields: Vec<PacketField>) {
    let msg = Message {
        request_id: 0,
        body: Body::Notify { table_id, fields, reason: NotifyReason::LookupMiss },
    };
    let Ok(frame) = encode(&msg) else {
        return;
    };
    let sessions = shared.sessions.lock().unwrap();
    for session in sessions.values() {
        let _ = session.queue.send(frame.clone());
    }
}
