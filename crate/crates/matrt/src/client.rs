//! The controller-side SDK: sessions, entry builders, batched writes with
//! timing, reads, test packets, and event subscriptions.
//!
//! A [`Session`] keeps exactly one request outstanding at a time; calls
//! from multiple threads serialize on the request/ack alternation. The
//! target may interleave unsolicited notifications with acks on the same
//! transport; the session demultiplexes by message type, routing
//! notifications to the subscription (if any) and everything else to the
//! pending request.

use std::io::{BufReader, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use matrt_core::schema::{parse_schema, MatchKind, ProgramSchema, TableSchema};
use matrt_core::value;
use matrt_core::wire::{
    self, canonicalize_key, encode, ActionData, ActionParam, Body, FieldMatch, KeyError, MatchKey,
    MatchValue, Message, NotifyReason, PacketField, TableUpdate, UpdateOp, WriteBatch, WriteReport,
};

use crate::frame::{self, FrameError};

/// A client-side failure.
#[derive(Clone, Debug, thiserror::Error)]
pub enum ClientError {
    #[error("failed to connect to {endpoint}: {reason}")]
    ConnectFailed { endpoint: String, reason: String },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("target sent a malformed frame: {0}")]
    RemoteMalformed(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("cannot encode request: {0}")]
    Encode(String),
    #[error("invalid key: {0}")]
    InvalidKey(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Build(#[from] BuildError),
}

/// An entry builder rejected its inputs.
#[derive(Clone, Debug, PartialEq, Eq, thiserror::Error)]
pub enum BuildError {
    #[error("unknown key field {0:?}")]
    UnknownField(String),
    #[error("missing value for key field {0:?}")]
    MissingField(String),
    #[error("duplicate value for key field {0:?}")]
    DuplicateField(String),
    #[error("key field {field:?} is {kind}-matched; {hint}")]
    KindMismatch { field: String, kind: MatchKind, hint: &'static str },
    #[error("value for {field:?} exceeds its {bits}-bit width")]
    ValueOverflow { field: String, bits: u16 },
    #[error("prefix length {prefix_len} exceeds the {bits}-bit field {field:?}")]
    PrefixTooLong { field: String, prefix_len: u16, bits: u16 },
    #[error("unknown action {0:?}")]
    UnknownAction(String),
    #[error("insert/modify requires an action")]
    MissingAction,
    #[error("delete carries no action data")]
    ActionOnDelete,
    #[error("unknown parameter {0:?} for action {1:?}")]
    UnknownParam(String, String),
    #[error("missing value for parameter {0:?}")]
    MissingParam(String),
    #[error("parameter set before any action")]
    ParamWithoutAction,
    #[error("cannot parse value {0:?}")]
    BadValue(String),
}

/// A field value accepted by the builders: integers, raw bytes, or text
/// sugar (dotted-quad/IPv6 addresses, decimal, `0x` hex), converted to
/// canonical big-endian bytes at build time.
#[derive(Clone, Debug)]
pub enum FieldValue {
    Int(u128),
    Bytes(Vec<u8>),
    Text(String),
}

macro_rules! int_value {
    ($($t:ty),*) => {
        $(impl From<$t> for FieldValue {
            fn from(v: $t) -> FieldValue {
                FieldValue::Int(v as u128)
            }
        })*
    };
}
int_value!(u8, u16, u32, u64, u128);

impl From<std::net::Ipv4Addr> for FieldValue {
    fn from(v: std::net::Ipv4Addr) -> FieldValue {
        FieldValue::Int(u32::from(v) as u128)
    }
}

impl From<std::net::Ipv6Addr> for FieldValue {
    fn from(v: std::net::Ipv6Addr) -> FieldValue {
        FieldValue::Int(u128::from(v))
    }
}

impl From<&[u8]> for FieldValue {
    fn from(v: &[u8]) -> FieldValue {
        FieldValue::Bytes(v.to_vec())
    }
}

impl From<Vec<u8>> for FieldValue {
    fn from(v: Vec<u8>) -> FieldValue {
        FieldValue::Bytes(v)
    }
}

impl From<&str> for FieldValue {
    fn from(v: &str) -> FieldValue {
        FieldValue::Text(v.to_string())
    }
}

impl From<String> for FieldValue {
    fn from(v: String) -> FieldValue {
        FieldValue::Text(v)
    }
}

impl FieldValue {
    /// Resolves to an integer, parsing text sugar if necessary.
    fn resolve(&self) -> Result<u128, BuildError> {
        match self {
            FieldValue::Int(v) => Ok(*v),
            FieldValue::Bytes(b) => {
                value::be_to_u128(b).ok_or_else(|| BuildError::BadValue(format!("{b:?}")))
            }
            FieldValue::Text(s) => {
                if let Ok(ip) = s.parse::<std::net::Ipv4Addr>() {
                    return Ok(u32::from(ip) as u128);
                }
                if let Ok(ip) = s.parse::<std::net::Ipv6Addr>() {
                    return Ok(u128::from(ip));
                }
                if let Some(hex) = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
                    return u128::from_str_radix(hex, 16)
                        .map_err(|_| BuildError::BadValue(s.clone()));
                }
                s.parse::<u128>().map_err(|_| BuildError::BadValue(s.clone()))
            }
        }
    }

    fn to_canonical(&self, field: &str, bits: u16) -> Result<Vec<u8>, BuildError> {
        let v = self.resolve()?;
        if !value::fits(v, bits) {
            return Err(BuildError::ValueOverflow { field: field.to_string(), bits });
        }
        Ok(value::u128_to_be(v, value::width_bytes(bits)))
    }
}

enum KeyInput {
    Plain(FieldValue),
    Prefix(FieldValue, u16),
    Masked(FieldValue, FieldValue),
}

/// Assembles canonical table updates from values keyed by field and
/// parameter names.
///
/// ```no_run
/// # use matrt::client::EntryBuilder;
/// # fn doc(table: &matrt_core::schema::TableSchema) -> Result<(), matrt::client::BuildError> {
/// let update = EntryBuilder::new(table)
///     .key("src_ip", "10.0.0.1")
///     .key("dst_ip", "10.0.0.2")
///     .action("permit")
///     .insert()?;
/// # Ok(()) }
/// ```
pub struct EntryBuilder<'a> {
    table: &'a TableSchema,
    key_values: Vec<(String, KeyInput)>,
    priority: u32,
    action: Option<(String, Vec<(String, FieldValue)>)>,
    stray_param: Option<String>,
}

impl<'a> EntryBuilder<'a> {
    pub fn new(table: &'a TableSchema) -> EntryBuilder<'a> {
        EntryBuilder {
            table,
            key_values: Vec::new(),
            priority: 0,
            action: None,
            stray_param: None,
        }
    }

    /// Sets the value of an exact-match key field.
    pub fn key(mut self, field: &str, value: impl Into<FieldValue>) -> Self {
        self.key_values.push((field.to_string(), KeyInput::Plain(value.into())));
        self
    }

    /// Sets the prefix of an lpm key field.
    pub fn key_lpm(mut self, field: &str, value: impl Into<FieldValue>, prefix_len: u16) -> Self {
        self.key_values.push((field.to_string(), KeyInput::Prefix(value.into(), prefix_len)));
        self
    }

    /// Sets value and mask of a ternary key field.
    pub fn key_ternary(
        mut self,
        field: &str,
        value: impl Into<FieldValue>,
        mask: impl Into<FieldValue>,
    ) -> Self {
        self.key_values
            .push((field.to_string(), KeyInput::Masked(value.into(), mask.into())));
        self
    }

    /// Sets the entry priority (ternary tables only; ignored otherwise).
    pub fn priority(mut self, priority: u32) -> Self {
        self.priority = priority;
        self
    }

    /// Chooses the entry's action by name.
    pub fn action(mut self, name: &str) -> Self {
        self.action = Some((name.to_string(), Vec::new()));
        self
    }

    /// Sets an action parameter by name. Must follow [`Self::action`].
    pub fn param(mut self, name: &str, value: impl Into<FieldValue>) -> Self {
        match self.action.as_mut() {
            Some((_, params)) => params.push((name.to_string(), value.into())),
            None => self.stray_param = Some(name.to_string()),
        }
        self
    }

    pub fn insert(self) -> Result<TableUpdate, BuildError> {
        self.build(UpdateOp::Insert)
    }

    pub fn modify(self) -> Result<TableUpdate, BuildError> {
        self.build(UpdateOp::Modify)
    }

    pub fn delete(self) -> Result<TableUpdate, BuildError> {
        self.build(UpdateOp::Delete)
    }

    fn build(self, op: UpdateOp) -> Result<TableUpdate, BuildError> {
        if self.stray_param.is_some() {
            return Err(BuildError::ParamWithoutAction);
        }
        let key = self.build_key()?;
        let action = match (op, self.action) {
            (UpdateOp::Delete, Some(_)) => return Err(BuildError::ActionOnDelete),
            (UpdateOp::Delete, None) => None,
            (_, None) => return Err(BuildError::MissingAction),
            (_, Some((name, params))) => Some(build_action(self.table, &name, params)?),
        };
        Ok(TableUpdate { op, table_id: self.table.table_id, key, action })
    }

    fn build_key(&self) -> Result<MatchKey, BuildError> {
        for (name, _) in &self.key_values {
            if self.table.key_field_by_name(name).is_none() {
                return Err(BuildError::UnknownField(name.clone()));
            }
        }
        let mut fields = Vec::with_capacity(self.table.key_fields.len());
        for spec in &self.table.key_fields {
            let mut found = self.key_values.iter().filter(|(n, _)| *n == spec.name);
            let (_, input) =
                found.next().ok_or_else(|| BuildError::MissingField(spec.name.clone()))?;
            if found.next().is_some() {
                return Err(BuildError::DuplicateField(spec.name.clone()));
            }
            let kind = spec.match_kind.expect("key fields always carry a match kind");
            let bits = spec.bit_width;
            let value = match (kind, input) {
                (MatchKind::Exact, KeyInput::Plain(v)) => {
                    MatchValue::Exact { value: v.to_canonical(&spec.name, bits)? }
                }
                (MatchKind::Lpm, KeyInput::Prefix(v, prefix_len)) => {
                    if *prefix_len > bits {
                        return Err(BuildError::PrefixTooLong {
                            field: spec.name.clone(),
                            prefix_len: *prefix_len,
                            bits,
                        });
                    }
                    MatchValue::Lpm {
                        value: v.to_canonical(&spec.name, bits)?,
                        prefix_len: *prefix_len,
                    }
                }
                (MatchKind::Ternary, KeyInput::Masked(v, m)) => MatchValue::Ternary {
                    value: v.to_canonical(&spec.name, bits)?,
                    mask: m.to_canonical(&spec.name, bits)?,
                },
                (kind, _) => {
                    let hint = match kind {
                        MatchKind::Exact => "use key()",
                        MatchKind::Lpm => "use key_lpm()",
                        MatchKind::Ternary => "use key_ternary()",
                    };
                    return Err(BuildError::KindMismatch {
                        field: spec.name.clone(),
                        kind,
                        hint,
                    });
                }
            };
            fields.push(FieldMatch { field_id: spec.field_id, value });
        }
        let raw = MatchKey { fields, priority: self.priority };
        canonicalize_key(&raw, self.table).map_err(|e| key_error_to_build(self.table, e))
    }
}

fn build_action(
    table: &TableSchema,
    name: &str,
    params: Vec<(String, FieldValue)>,
) -> Result<ActionData, BuildError> {
    let spec = table
        .action_by_name(name)
        .ok_or_else(|| BuildError::UnknownAction(name.to_string()))?;
    for (pname, _) in &params {
        if !spec.params.iter().any(|p| p.name == *pname) {
            return Err(BuildError::UnknownParam(pname.clone(), name.to_string()));
        }
    }
    let mut out = Vec::with_capacity(spec.params.len());
    for pspec in &spec.params {
        let mut found = params.iter().filter(|(n, _)| *n == pspec.name);
        let (_, v) = found.next().ok_or_else(|| BuildError::MissingParam(pspec.name.clone()))?;
        if found.next().is_some() {
            return Err(BuildError::DuplicateField(pspec.name.clone()));
        }
        out.push(ActionParam {
            param_id: pspec.field_id,
            value: v.to_canonical(&pspec.name, pspec.bit_width)?,
        });
    }
    Ok(ActionData { action_id: spec.action_id, params: out })
}

fn key_error_to_build(table: &TableSchema, e: KeyError) -> BuildError {
    let name = |id: u32| {
        table.key_field(id).map(|f| f.name.clone()).unwrap_or_else(|| format!("#{id}"))
    };
    match e {
        KeyError::UnknownField { field_id } => BuildError::UnknownField(name(field_id)),
        KeyError::DuplicateField { field_id } => BuildError::DuplicateField(name(field_id)),
        KeyError::MissingField { field_id } => BuildError::MissingField(name(field_id)),
        KeyError::KindMismatch { field_id, expected, .. } => BuildError::KindMismatch {
            field: name(field_id),
            kind: expected,
            hint: "use the matching builder method",
        },
        KeyError::Oversize { field_id } | KeyError::MaskOversize { field_id } => {
            let bits = table.key_field(field_id).map(|f| f.bit_width).unwrap_or(0);
            BuildError::ValueOverflow { field: name(field_id), bits }
        }
        KeyError::PrefixTooLong { field_id, prefix_len, bit_width } => {
            BuildError::PrefixTooLong { field: name(field_id), prefix_len, bits: bit_width }
        }
    }
}

/// A write acknowledged by the target, with the timestamps bracketing it:
/// request creation (before encoding began) to ack receipt.
#[derive(Clone, Debug)]
pub struct TimedReport {
    pub report: WriteReport,
    pub created_at: Instant,
    pub received_at: Instant,
}

impl TimedReport {
    pub fn elapsed(&self) -> Duration {
        self.received_at.duration_since(self.created_at)
    }
}

/// An unsolicited event delivered to a subscription handler.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NotifyEvent {
    pub table_id: u32,
    pub fields: Vec<PacketField>,
    pub reason: NotifyReason,
}

/// Connection parameters beyond the endpoint.
#[derive(Clone, Debug)]
pub struct ConnectOptions {
    /// Client name announced in the handshake.
    pub client_name: String,
    /// Expected program name; the session fails on a mismatch.
    pub expected_program: Option<String>,
    /// Extra per-request latency, applied before each response is
    /// released to the caller. Emulates remote-controller transports.
    pub injected_latency: Duration,
}

impl Default for ConnectOptions {
    fn default() -> ConnectOptions {
        ConnectOptions {
            client_name: concat!("matrt/", env!("CARGO_PKG_VERSION")).to_string(),
            expected_program: None,
            injected_latency: Duration::ZERO,
        }
    }
}

type NotifySlot = Arc<Mutex<Option<mpsc::Sender<NotifyEvent>>>>;

struct Io {
    writer: TcpStream,
    responses: mpsc::Receiver<Result<Message, ClientError>>,
    next_request_id: u32,
    // Reused encode buffer for the write path; large batches would
    // otherwise allocate a frame-sized buffer per request.
    write_buf: Vec<u8>,
}

struct Inner {
    schema: ProgramSchema,
    program: String,
    io: Mutex<Io>,
    notify: NotifySlot,
    last_error: Arc<Mutex<Option<ClientError>>>,
    delay: Duration,
}

impl Drop for Inner {
    fn drop(&mut self) {
        if let Ok(io) = self.io.lock() {
            let _ = io.writer.shutdown(Shutdown::Both);
        }
    }
}

/// A connected, schema-verified session with one target.
///
/// Cloning is shallow; clones share the underlying connection. A session
/// may be used from multiple threads, with calls serialized on the
/// single-outstanding-request rule.
#[derive(Clone)]
pub struct Session {
    inner: Arc<Inner>,
}

impl Session {
    /// Connects, exchanges the handshake, fetches the schema, and verifies
    /// its digest against the one announced in the handshake.
    pub fn connect(endpoint: &str, expected_program: Option<&str>) -> Result<Session, ClientError> {
        Session::connect_with(
            endpoint,
            ConnectOptions {
                expected_program: expected_program.map(str::to_string),
                ..ConnectOptions::default()
            },
        )
    }

    pub fn connect_with(endpoint: &str, options: ConnectOptions) -> Result<Session, ClientError> {
        let connect_failed = |reason: String| ClientError::ConnectFailed {
            endpoint: endpoint.to_string(),
            reason,
        };
        let stream = TcpStream::connect(endpoint).map_err(|e| connect_failed(e.to_string()))?;
        let _ = stream.set_nodelay(true);
        let read_half = stream.try_clone().map_err(|e| connect_failed(e.to_string()))?;

        let (resp_tx, resp_rx) = mpsc::channel();
        let notify: NotifySlot = Arc::new(Mutex::new(None));
        let last_error = Arc::new(Mutex::new(None));
        {
            let notify = notify.clone();
            let last_error = last_error.clone();
            thread::spawn(move || reader_loop(read_half, resp_tx, notify, last_error));
        }

        let mut io = Io {
            writer: stream,
            responses: resp_rx,
            next_request_id: 1,
            write_buf: Vec::new(),
        };

        let hello = transact(
            &mut io,
            options.injected_latency,
            Body::Hello { client: options.client_name.clone() },
        )?;
        let (digest, program) = match hello.0.body {
            Body::HelloAck { schema_digest, program } => (schema_digest, program),
            other => return Err(unexpected("hello ack", &other)),
        };
        if let Some(expected) = &options.expected_program {
            if *expected != program {
                return Err(ClientError::SchemaMismatch(format!(
                    "target serves program {program:?}, expected {expected:?}"
                )));
            }
        }

        let doc = transact(&mut io, options.injected_latency, Body::GetSchema)?;
        let document = match doc.0.body {
            Body::SchemaDoc { document } => document,
            other => return Err(unexpected("schema document", &other)),
        };
        let schema = parse_schema(&document).map_err(|e| {
            ClientError::SchemaMismatch(format!("target sent an unusable schema: {e}"))
        })?;
        if schema.schema_digest != digest {
            return Err(ClientError::SchemaMismatch(format!(
                "announced digest {digest:#018x} does not match the schema document \
                 ({:#018x})",
                schema.schema_digest
            )));
        }
        if schema.program_name != program {
            return Err(ClientError::SchemaMismatch(format!(
                "announced program {program:?} does not match the schema document ({:?})",
                schema.program_name
            )));
        }

        Ok(Session {
            inner: Arc::new(Inner {
                schema,
                program,
                io: Mutex::new(io),
                notify,
                last_error,
                delay: options.injected_latency,
            }),
        })
    }

    /// The schema negotiated with the target.
    pub fn schema(&self) -> &ProgramSchema {
        &self.inner.schema
    }

    /// The program name the target serves.
    pub fn program(&self) -> &str {
        &self.inner.program
    }

    /// Resolves a table by name.
    pub fn table(&self, name: &str) -> Result<&TableSchema, ClientError> {
        self.inner
            .schema
            .table_by_name(name)
            .ok_or_else(|| ClientError::SchemaMismatch(format!("unknown table {name:?}")))
    }

    /// Starts building an entry for the named table.
    pub fn entry(&self, table: &str) -> Result<EntryBuilder<'_>, ClientError> {
        Ok(EntryBuilder::new(self.table(table)?))
    }

    /// Sends one batch and blocks until the target acknowledges it.
    pub fn write(&self, batch: WriteBatch) -> Result<TimedReport, ClientError> {
        self.write_slice(batch.atomic, &batch.updates)
    }

    /// Sends one batch from a borrowed slice of updates. The returned
    /// timestamps bracket request creation (before encoding) to ack
    /// receipt.
    pub fn write_slice(
        &self,
        atomic: bool,
        updates: &[TableUpdate],
    ) -> Result<TimedReport, ClientError> {
        let mut io = self.inner.io.lock().unwrap();
        let created_at = Instant::now();
        let id = next_id(&mut io);
        let mut buf = std::mem::take(&mut io.write_buf);
        let resp = match wire::encode_write_into(&mut buf, id, atomic, updates) {
            Ok(()) => exchange(&mut io, self.inner.delay, id, &buf),
            Err(e) => Err(ClientError::Encode(e.reason)),
        };
        io.write_buf = buf;
        let resp = resp?;
        let received_at = Instant::now();
        match resp.body {
            Body::WriteAck(report) => Ok(TimedReport { report, created_at, received_at }),
            other => Err(unexpected("write ack", &other)),
        }
    }

    /// Sends `updates` as consecutive batches of at most `batch_size`
    /// entries (the last batch may be short), strictly sequentially.
    pub fn insert_all(
        &self,
        updates: &[TableUpdate],
        batch_size: usize,
    ) -> Result<Vec<TimedReport>, ClientError> {
        if batch_size == 0 {
            return Err(ClientError::InvalidArgument("batch size must be at least 1".into()));
        }
        let mut reports = Vec::with_capacity(updates.len().div_ceil(batch_size));
        for chunk in updates.chunks(batch_size) {
            reports.push(self.write_slice(false, chunk)?);
        }
        Ok(reports)
    }

    /// Reads one entry (by key) or all entries of a table.
    pub fn read(
        &self,
        table: &str,
        key: Option<&MatchKey>,
    ) -> Result<Vec<TableUpdate>, ClientError> {
        let schema = self.table(table)?;
        let table_id = schema.table_id;
        let key = key
            .map(|k| canonicalize_key(k, schema))
            .transpose()
            .map_err(|e| ClientError::InvalidKey(e.to_string()))?;
        let mut io = self.inner.io.lock().unwrap();
        let (resp, _, _) = transact(&mut io, self.inner.delay, Body::Read { table_id, key })?;
        match resp.body {
            Body::ReadAck { entries } => Ok(entries),
            other => Err(unexpected("read ack", &other)),
        }
    }

    /// Sends a test packet through the named table. Fire-and-forget: the
    /// target answers only with a miss notification, if anything.
    pub fn test_packet<S, V>(
        &self,
        table: &str,
        values: impl IntoIterator<Item = (S, V)>,
    ) -> Result<(), ClientError>
    where
        S: AsRef<str>,
        V: Into<FieldValue>,
    {
        let schema = self.table(table)?;
        let provided: Vec<(String, FieldValue)> =
            values.into_iter().map(|(n, v)| (n.as_ref().to_string(), v.into())).collect();
        for (name, _) in &provided {
            if schema.key_field_by_name(name).is_none() {
                return Err(BuildError::UnknownField(name.clone()).into());
            }
        }
        let mut fields = Vec::with_capacity(schema.key_fields.len());
        for spec in &schema.key_fields {
            let mut found = provided.iter().filter(|(n, _)| *n == spec.name);
            let (_, v) = found
                .next()
                .ok_or_else(|| BuildError::MissingField(spec.name.clone()))?;
            if found.next().is_some() {
                return Err(BuildError::DuplicateField(spec.name.clone()).into());
            }
            fields.push(PacketField {
                field_id: spec.field_id,
                value: v.to_canonical(&spec.name, spec.bit_width)?,
            });
        }
        let table_id = schema.table_id;
        let mut io = self.inner.io.lock().unwrap();
        send_only(&mut io, Body::TestPacket { table_id, fields })
    }

    /// Installs a notification handler, invoked once per event in arrival
    /// order on a dedicated thread. One subscription per session.
    pub fn subscribe<F>(&self, mut handler: F) -> Result<Subscription, ClientError>
    where
        F: FnMut(NotifyEvent) + Send + 'static,
    {
        if let Some(err) = self.inner.last_error.lock().unwrap().clone() {
            return Err(err);
        }
        let mut slot = self.inner.notify.lock().unwrap();
        if slot.is_some() {
            return Err(ClientError::InvalidArgument(
                "session already has an active subscription".into(),
            ));
        }
        let (tx, rx) = mpsc::channel::<NotifyEvent>();
        *slot = Some(tx);
        drop(slot);

        let finished = Arc::new(Mutex::new(false));
        let thread_finished = finished.clone();
        thread::spawn(move || {
            for event in rx {
                handler(event);
            }
            *thread_finished.lock().unwrap() = true;
        });
        Ok(Subscription {
            slot: self.inner.notify.clone(),
            last_error: self.inner.last_error.clone(),
            finished,
        })
    }
}

/// Handle to an active notification subscription.
///
/// Dropping it detaches the handler; pending events may still be
/// delivered. When the transport fails, the subscription ends and the
/// error is reported through [`Subscription::error`].
pub struct Subscription {
    slot: NotifySlot,
    last_error: Arc<Mutex<Option<ClientError>>>,
    finished: Arc<Mutex<bool>>,
}

impl Subscription {
    /// True once the handler thread has stopped (unsubscribed or
    /// transport failure).
    pub fn finished(&self) -> bool {
        *self.finished.lock().unwrap()
    }

    /// The transport error that ended the session, if one occurred.
    pub fn error(&self) -> Option<ClientError> {
        self.last_error.lock().unwrap().clone()
    }

    /// Stops routing events to the handler.
    pub fn unsubscribe(self) {}
}

impl Drop for Subscription {
    fn drop(&mut self) {
        *self.slot.lock().unwrap() = None;
    }
}

fn unexpected(wanted: &str, got: &Body) -> ClientError {
    ClientError::Protocol(format!("expected {wanted}, got {got:?}"))
}

fn next_id(io: &mut Io) -> u32 {
    let id = io.next_request_id;
    io.next_request_id = io.next_request_id.wrapping_add(1).max(1);
    id
}

/// One request/ack exchange. The creation timestamp is taken before
/// encoding begins; the receipt timestamp after the injected latency, so
/// measured elapsed time reflects the emulated transport.
fn transact(
    io: &mut Io,
    delay: Duration,
    body: Body,
) -> Result<(Message, Instant, Instant), ClientError> {
    let created_at = Instant::now();
    let id = next_id(io);
    let frame = encode(&Message { request_id: id, body })
        .map_err(|e| ClientError::Encode(e.reason))?;
    let resp = exchange(io, delay, id, &frame)?;
    let received_at = Instant::now();
    Ok((resp, created_at, received_at))
}

fn exchange(io: &mut Io, delay: Duration, id: u32, frame: &[u8]) -> Result<Message, ClientError> {
    io.writer
        .write_all(frame)
        .map_err(|e| ClientError::Transport(format!("send failed: {e}")))?;
    let resp = io
        .responses
        .recv()
        .map_err(|_| ClientError::Transport("connection closed".into()))??;
    if resp.request_id != id {
        return Err(ClientError::Protocol(format!(
            "ack for request {} while request {id} was pending",
            resp.request_id
        )));
    }
    if !delay.is_zero() {
        thread::sleep(delay);
    }
    Ok(resp)
}

fn send_only(io: &mut Io, body: Body) -> Result<(), ClientError> {
    let id = next_id(io);
    let frame = encode(&Message { request_id: id, body })
        .map_err(|e| ClientError::Encode(e.reason))?;
    io.writer
        .write_all(&frame)
        .map_err(|e| ClientError::Transport(format!("send failed: {e}")))
}

fn reader_loop(
    stream: TcpStream,
    responses: mpsc::Sender<Result<Message, ClientError>>,
    notify: NotifySlot,
    last_error: Arc<Mutex<Option<ClientError>>>,
) {
    let mut reader = BufReader::new(stream);
    let mut scratch = Vec::new();
    loop {
        match frame::read_frame_into(&mut reader, &mut scratch) {
            Ok(Message { body: Body::Notify { table_id, fields, reason }, .. }) => {
                if let Some(tx) = notify.lock().unwrap().as_ref() {
                    let _ = tx.send(NotifyEvent { table_id, fields, reason });
                }
            }
            Ok(msg) => {
                if responses.send(Ok(msg)).is_err() {
                    return; // session dropped
                }
            }
            Err(e) => {
                let err = match e {
                    FrameError::Malformed(d) => ClientError::RemoteMalformed(d.to_string()),
                    FrameError::Oversized(n) => {
                        ClientError::RemoteMalformed(format!("oversized payload ({n} bytes)"))
                    }
                    FrameError::Io(io) => ClientError::Transport(io.to_string()),
                };
                *last_error.lock().unwrap() = Some(err.clone());
                let _ = responses.send(Err(err));
                // Drop the notify sender so a subscription handler sees
                // end-of-stream and stops.
                *notify.lock().unwrap() = None;
                return;
            }
        }
    }
}
