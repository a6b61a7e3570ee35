//! The runtime wire protocol: message types and their bit-exact binary
//! encoding.
//!
//! Every frame is laid out as (all multi-byte integers big-endian):
//!
//! ```text
//! magic u32 = 0x42465254 | version u8 = 0x01 | msg_type u8
//! | request_id u32 | payload_len u32 | payload
//! ```
//!
//! Message types and payloads:
//!
//! ```text
//! 0x01 Hello       u16 name_len + UTF-8 client name
//! 0x02 HelloAck    u64 schema_digest + u16 name_len + UTF-8 program name
//! 0x03 GetSchema   (empty)
//! 0x04 SchemaDoc   UTF-8 schema JSON
//! 0x05 Write       u8 flags (bit0 = atomic) + u32 count + updates
//! 0x06 WriteAck    u8 overall + u32 count + per op: u8 status + u16 msg_len + UTF-8 msg
//! 0x07 Read        u32 table_id + u8 has_key + optional key
//! 0x08 ReadAck     u32 count + entries (insert-shaped updates)
//! 0x0B Notify      u32 table_id + packet fields + u8 reason (0 = lookup miss)
//! 0x0C TestPacket  u32 table_id + packet fields
//! ```
//!
//! An update is `u8 op | u32 table_id | key | u32 action_id |
//! u16 param_count | per param: u32 param_id + u16 len + bytes`; a delete
//! encodes `action_id = 0, param_count = 0`. A key is `u16 field_count |
//! per field: u32 field_id + u8 match_kind + u16 value_len + value
//! [+ u16 prefix_len (lpm) | + mask (ternary)] | u32 priority`. Packet
//! fields reuse the per-field layout with the match kind fixed to exact,
//! prefixed by a u16 count.
//!
//! Decoding is strict: a frame is accepted only if re-encoding the decoded
//! message reproduces it byte for byte. Request id 0 is reserved for
//! unsolicited notifications.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use crate::schema::{MatchKind, TableSchema};
use crate::value;

/// Leading frame magic.
pub const FRAME_MAGIC: u32 = 0x4246_5254;
/// Protocol version carried by every frame.
pub const PROTOCOL_VERSION: u8 = 0x01;
/// Fixed frame header length in bytes.
pub const HEADER_LEN: usize = 14;

pub const TYPE_HELLO: u8 = 0x01;
pub const TYPE_HELLO_ACK: u8 = 0x02;
pub const TYPE_GET_SCHEMA: u8 = 0x03;
pub const TYPE_SCHEMA_DOC: u8 = 0x04;
pub const TYPE_WRITE: u8 = 0x05;
pub const TYPE_WRITE_ACK: u8 = 0x06;
pub const TYPE_READ: u8 = 0x07;
pub const TYPE_READ_ACK: u8 = 0x08;
pub const TYPE_NOTIFY: u8 = 0x0B;
pub const TYPE_TEST_PACKET: u8 = 0x0C;

/// Per-operation result codes, fixed in the wire contract.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum StatusCode {
    Ok = 0,
    AlreadyExists = 1,
    NotFound = 2,
    TableFull = 3,
    InvalidKey = 4,
    InvalidAction = 5,
    SchemaMismatch = 6,
    Malformed = 7,
}

impl StatusCode {
    pub fn from_u8(v: u8) -> Option<StatusCode> {
        Some(match v {
            0 => StatusCode::Ok,
            1 => StatusCode::AlreadyExists,
            2 => StatusCode::NotFound,
            3 => StatusCode::TableFull,
            4 => StatusCode::InvalidKey,
            5 => StatusCode::InvalidAction,
            6 => StatusCode::SchemaMismatch,
            7 => StatusCode::Malformed,
            _ => return None,
        })
    }

    pub fn is_ok(self) -> bool {
        self == StatusCode::Ok
    }
}

impl fmt::Display for StatusCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StatusCode::Ok => "ok",
            StatusCode::AlreadyExists => "entry already exists",
            StatusCode::NotFound => "entry not found",
            StatusCode::TableFull => "table full",
            StatusCode::InvalidKey => "invalid key",
            StatusCode::InvalidAction => "invalid action",
            StatusCode::SchemaMismatch => "schema mismatch",
            StatusCode::Malformed => "malformed update",
        };
        f.write_str(s)
    }
}

/// One field's match data within a key.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MatchValue {
    /// Byte equality against the full field value.
    Exact { value: Vec<u8> },
    /// The `prefix_len` most significant bits must match.
    Lpm { value: Vec<u8>, prefix_len: u16 },
    /// Bits selected by `mask` must match `value`.
    Ternary { value: Vec<u8>, mask: Vec<u8> },
}

impl MatchValue {
    pub fn kind(&self) -> MatchKind {
        match self {
            MatchValue::Exact { .. } => MatchKind::Exact,
            MatchValue::Lpm { .. } => MatchKind::Lpm,
            MatchValue::Ternary { .. } => MatchKind::Ternary,
        }
    }

    fn kind_byte(&self) -> u8 {
        match self.kind() {
            MatchKind::Exact => 0,
            MatchKind::Lpm => 1,
            MatchKind::Ternary => 2,
        }
    }

    /// Structural invariants that hold independent of any schema.
    fn check(&self) -> Result<(), String> {
        match self {
            MatchValue::Exact { value } => check_len(value)?,
            MatchValue::Lpm { value, prefix_len } => {
                check_len(value)?;
                if usize::from(*prefix_len) > value.len() * 8 {
                    return Err(alloc::format!(
                        "lpm prefix_len {prefix_len} exceeds value width {} bits",
                        value.len() * 8
                    ));
                }
            }
            MatchValue::Ternary { value, mask } => {
                check_len(value)?;
                if mask.len() != value.len() {
                    return Err(alloc::format!(
                        "ternary mask length {} differs from value length {}",
                        mask.len(),
                        value.len()
                    ));
                }
                if value.iter().zip(mask).any(|(v, m)| v & !m != 0) {
                    return Err("ternary value has bits set outside its mask".to_string());
                }
            }
        }
        Ok(())
    }
}

fn check_len(value: &[u8]) -> Result<(), String> {
    if value.len() > usize::from(u16::MAX) {
        Err("value longer than 65535 bytes".to_string())
    } else {
        Ok(())
    }
}

/// A key field id paired with its match data.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct FieldMatch {
    pub field_id: u32,
    pub value: MatchValue,
}

/// A complete table key: one match per key field, plus the entry priority.
///
/// Priority is meaningful only when a ternary field is present and is zero
/// otherwise.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct MatchKey {
    pub fields: Vec<FieldMatch>,
    pub priority: u32,
}

impl MatchKey {
    pub fn has_ternary(&self) -> bool {
        self.fields.iter().any(|f| f.value.kind() == MatchKind::Ternary)
    }

    fn check(&self) -> Result<(), String> {
        if self.fields.len() > usize::from(u16::MAX) {
            return Err("more than 65535 key fields".to_string());
        }
        for f in &self.fields {
            f.value.check()?;
        }
        if self.priority != 0 && !self.has_ternary() {
            return Err("priority must be 0 without a ternary field".to_string());
        }
        Ok(())
    }
}

/// Operation kind of a table update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum UpdateOp {
    Insert,
    Modify,
    Delete,
}

impl UpdateOp {
    fn byte(self) -> u8 {
        match self {
            UpdateOp::Insert => 0,
            UpdateOp::Modify => 1,
            UpdateOp::Delete => 2,
        }
    }
}

/// An argument for one action parameter.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ActionParam {
    pub param_id: u32,
    pub value: Vec<u8>,
}

/// The action side of an entry: which action, with which arguments.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ActionData {
    pub action_id: u32,
    pub params: Vec<ActionParam>,
}

/// One table configuration operation. Deletes carry no action data.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TableUpdate {
    pub op: UpdateOp,
    pub table_id: u32,
    pub key: MatchKey,
    pub action: Option<ActionData>,
}

impl TableUpdate {
    fn check(&self) -> Result<(), String> {
        self.key.check()?;
        match (self.op, &self.action) {
            (UpdateOp::Delete, Some(_)) => return Err("delete carries no action data".to_string()),
            (UpdateOp::Insert | UpdateOp::Modify, None) => {
                return Err("insert/modify requires action data".to_string())
            }
            _ => {}
        }
        if let Some(action) = &self.action {
            if action.params.len() > usize::from(u16::MAX) {
                return Err("more than 65535 action parameters".to_string());
            }
            for p in &action.params {
                check_len(&p.value)?;
            }
        }
        Ok(())
    }
}

/// Maximum number of updates one batch may carry.
pub const MAX_BATCH_LEN: usize = 1 << 31;

/// An ordered, non-empty group of updates applied in one request.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WriteBatch {
    /// All-or-nothing application when set; continue-on-error otherwise.
    pub atomic: bool,
    pub updates: Vec<TableUpdate>,
}

/// Aggregate outcome of a write batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Overall {
    Ok,
    Partial,
    Failed,
}

impl Overall {
    fn byte(self) -> u8 {
        match self {
            Overall::Ok => 0,
            Overall::Partial => 1,
            Overall::Failed => 2,
        }
    }
}

/// Status and optional diagnostic for one update within a batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OpStatus {
    pub status: StatusCode,
    pub message: String,
}

impl OpStatus {
    pub fn ok() -> OpStatus {
        OpStatus { status: StatusCode::Ok, message: String::new() }
    }

    pub fn of(status: StatusCode, message: impl Into<String>) -> OpStatus {
        OpStatus { status, message: message.into() }
    }
}

/// Per-operation results for a batch, aligned with the request's updates.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WriteReport {
    pub overall: Overall,
    pub per_op: Vec<OpStatus>,
}

impl WriteReport {
    /// Builds a report from per-op statuses, deriving the aggregate:
    /// all ok ⇒ `Ok`; otherwise `Failed` for atomic batches, `Partial`
    /// for non-atomic ones.
    pub fn from_statuses(atomic: bool, per_op: Vec<OpStatus>) -> WriteReport {
        let overall = if per_op.iter().all(|s| s.status.is_ok()) {
            Overall::Ok
        } else if atomic {
            Overall::Failed
        } else {
            Overall::Partial
        };
        WriteReport { overall, per_op }
    }

    pub fn all_ok(&self) -> bool {
        self.overall == Overall::Ok
    }

    fn check(&self) -> Result<(), String> {
        if self.per_op.is_empty() {
            return Err("write report without per-op statuses".to_string());
        }
        if self.per_op.len() > MAX_BATCH_LEN {
            return Err("more than 2^31 per-op statuses".to_string());
        }
        let all_ok = self.per_op.iter().all(|s| s.status.is_ok());
        match (all_ok, self.overall) {
            (true, Overall::Ok) => {}
            (false, Overall::Partial | Overall::Failed) => {}
            (true, _) => return Err("overall must be ok when every op succeeded".to_string()),
            (false, Overall::Ok) => return Err("overall ok despite failed ops".to_string()),
        }
        for s in &self.per_op {
            if s.message.len() > usize::from(u16::MAX) {
                return Err("per-op message longer than 65535 bytes".to_string());
            }
        }
        Ok(())
    }
}

/// One packet field value, as carried by test packets and notifications.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PacketField {
    pub field_id: u32,
    pub value: Vec<u8>,
}

/// Why a notification was emitted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NotifyReason {
    /// A test packet matched no entry.
    LookupMiss,
}

impl NotifyReason {
    fn byte(self) -> u8 {
        match self {
            NotifyReason::LookupMiss => 0,
        }
    }
}

/// Message payload variants.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Body {
    /// Session opener; carries the client's name.
    Hello { client: String },
    /// Handshake reply: schema digest plus the served program name.
    HelloAck { schema_digest: u64, program: String },
    /// Requests the full schema document.
    GetSchema,
    /// The schema document, as canonical JSON.
    SchemaDoc { document: String },
    /// A batch of table updates.
    Write(WriteBatch),
    /// Per-op results for a write.
    WriteAck(WriteReport),
    /// Reads one entry (with key) or a whole table (without).
    Read { table_id: u32, key: Option<MatchKey> },
    /// Entries returned by a read, shaped as insert updates.
    ReadAck { entries: Vec<TableUpdate> },
    /// Runs a lookup against a table as if a packet arrived.
    TestPacket { table_id: u32, fields: Vec<PacketField> },
    /// Unsolicited target→controller event.
    Notify { table_id: u32, fields: Vec<PacketField>, reason: NotifyReason },
}

impl Body {
    fn type_byte(&self) -> u8 {
        match self {
            Body::Hello { .. } => TYPE_HELLO,
            Body::HelloAck { .. } => TYPE_HELLO_ACK,
            Body::GetSchema => TYPE_GET_SCHEMA,
            Body::SchemaDoc { .. } => TYPE_SCHEMA_DOC,
            Body::Write(_) => TYPE_WRITE,
            Body::WriteAck(_) => TYPE_WRITE_ACK,
            Body::Read { .. } => TYPE_READ,
            Body::ReadAck { .. } => TYPE_READ_ACK,
            Body::TestPacket { .. } => TYPE_TEST_PACKET,
            Body::Notify { .. } => TYPE_NOTIFY,
        }
    }
}

/// One frame on the wire: a request id and a body.
///
/// Acks echo the request id of the request they answer; notifications are
/// unsolicited and carry request id 0, which is reserved for them.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub request_id: u32,
    pub body: Body,
}

/// A message violated a type invariant and cannot be encoded.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodeError {
    pub reason: String,
}

impl fmt::Display for EncodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "encode invariant violated: {}", self.reason)
    }
}

impl core::error::Error for EncodeError {}

/// A byte string is not a valid frame. `offset` is the byte position at
/// which decoding failed; truncation reports the input length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodeError {
    pub offset: usize,
    pub reason: String,
}

impl fmt::Display for DecodeError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "malformed frame at byte {}: {}", self.offset, self.reason)
    }
}

impl core::error::Error for DecodeError {}

fn enc_err(reason: impl Into<String>) -> EncodeError {
    EncodeError { reason: reason.into() }
}

// ---------------------------------------------------------------------------
// Encoding

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn with_capacity(cap: usize) -> Writer {
        Writer { buf: Vec::with_capacity(cap) }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_be_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }

    /// u16 length prefix followed by the bytes.
    fn short_bytes(&mut self, v: &[u8]) {
        debug_assert!(v.len() <= usize::from(u16::MAX));
        self.u16(v.len() as u16);
        self.bytes(v);
    }
}

fn key_encoded_len(key: &MatchKey) -> usize {
    let fields: usize = key
        .fields
        .iter()
        .map(|f| {
            7 + match &f.value {
                MatchValue::Exact { value } => value.len(),
                MatchValue::Lpm { value, .. } => value.len() + 2,
                MatchValue::Ternary { value, mask } => value.len() + mask.len(),
            }
        })
        .sum();
    2 + fields + 4
}

fn update_encoded_len(u: &TableUpdate) -> usize {
    let params: usize = match &u.action {
        Some(a) => a.params.iter().map(|p| 6 + p.value.len()).sum(),
        None => 0,
    };
    1 + 4 + key_encoded_len(&u.key) + 4 + 2 + params
}

fn encode_key(w: &mut Writer, key: &MatchKey) {
    w.u16(key.fields.len() as u16);
    for f in &key.fields {
        w.u32(f.field_id);
        w.u8(f.value.kind_byte());
        match &f.value {
            MatchValue::Exact { value } => w.short_bytes(value),
            MatchValue::Lpm { value, prefix_len } => {
                w.short_bytes(value);
                w.u16(*prefix_len);
            }
            MatchValue::Ternary { value, mask } => {
                w.short_bytes(value);
                w.bytes(mask);
            }
        }
    }
    w.u32(key.priority);
}

fn encode_update(w: &mut Writer, u: &TableUpdate) {
    w.u8(u.op.byte());
    w.u32(u.table_id);
    encode_key(w, &u.key);
    match &u.action {
        Some(a) => {
            w.u32(a.action_id);
            w.u16(a.params.len() as u16);
            for p in &a.params {
                w.u32(p.param_id);
                w.short_bytes(&p.value);
            }
        }
        None => {
            w.u32(0);
            w.u16(0);
        }
    }
}

fn encode_packet_fields(w: &mut Writer, fields: &[PacketField]) {
    w.u16(fields.len() as u16);
    for f in fields {
        w.u32(f.field_id);
        w.u8(0); // exact
        w.short_bytes(&f.value);
    }
}

fn check_packet_fields(fields: &[PacketField]) -> Result<(), EncodeError> {
    if fields.len() > usize::from(u16::MAX) {
        return Err(enc_err("more than 65535 packet fields"));
    }
    for f in fields {
        check_len(&f.value).map_err(enc_err)?;
    }
    Ok(())
}

/// Encodes a write frame directly from borrowed updates.
///
/// Equivalent to encoding `Body::Write` but without moving the updates
/// into a batch first; callers slicing large workloads into batches use
/// this to avoid cloning every entry per request.
pub fn encode_write(
    request_id: u32,
    atomic: bool,
    updates: &[TableUpdate],
) -> Result<Vec<u8>, EncodeError> {
    let mut frame = Vec::new();
    encode_write_into(&mut frame, request_id, atomic, updates)?;
    Ok(frame)
}

/// [`encode_write`] into a reusable buffer; the frame replaces `out`'s
/// contents.
pub fn encode_write_into(
    out: &mut Vec<u8>,
    request_id: u32,
    atomic: bool,
    updates: &[TableUpdate],
) -> Result<(), EncodeError> {
    if request_id == 0 {
        return Err(enc_err("request id 0 is reserved for notify"));
    }
    if updates.is_empty() {
        return Err(enc_err("write batch must contain at least one update"));
    }
    if updates.len() > MAX_BATCH_LEN {
        return Err(enc_err("write batch exceeds 2^31 updates"));
    }
    for u in updates {
        u.check().map_err(enc_err)?;
    }
    let payload_len = 5 + updates.iter().map(update_encoded_len).sum::<usize>();
    let mut w = Writer { buf: core::mem::take(out) };
    w.buf.clear();
    w.buf.reserve(HEADER_LEN + payload_len);
    w.buf.resize(HEADER_LEN, 0);
    w.u8(atomic as u8);
    w.u32(updates.len() as u32);
    for u in updates {
        encode_update(&mut w, u);
    }
    *out = finish_frame(w, TYPE_WRITE, request_id)?;
    Ok(())
}

/// Builds a write-ack frame status by status, deriving the aggregate
/// outcome exactly as [`WriteReport::from_statuses`] would. Lets a target
/// acknowledge huge batches without materializing the status list.
pub struct WriteAckEncoder {
    w: Writer,
    request_id: u32,
    declared: u32,
    pushed: u32,
    atomic: bool,
    any_failed: bool,
}

impl WriteAckEncoder {
    pub fn new(request_id: u32, atomic: bool, count: u32) -> Result<WriteAckEncoder, EncodeError> {
        if request_id == 0 {
            return Err(enc_err("request id 0 is reserved for notify"));
        }
        if count == 0 {
            return Err(enc_err("write report without per-op statuses"));
        }
        let mut w = Writer::with_capacity(HEADER_LEN + 5 + 3 * count as usize);
        w.buf.resize(HEADER_LEN, 0);
        w.u8(0); // overall, patched in finish()
        w.u32(count);
        Ok(WriteAckEncoder {
            w,
            request_id,
            declared: count,
            pushed: 0,
            atomic,
            any_failed: false,
        })
    }

    pub fn push(&mut self, status: &OpStatus) -> Result<(), EncodeError> {
        if self.pushed == self.declared {
            return Err(enc_err("more statuses than declared"));
        }
        if status.message.len() > usize::from(u16::MAX) {
            return Err(enc_err("per-op message longer than 65535 bytes"));
        }
        self.pushed += 1;
        self.any_failed |= !status.status.is_ok();
        self.w.u8(status.status as u8);
        self.w.short_bytes(status.message.as_bytes());
        Ok(())
    }

    pub fn finish(mut self) -> Result<Vec<u8>, EncodeError> {
        if self.pushed != self.declared {
            return Err(enc_err("fewer statuses than declared"));
        }
        let overall = match (self.any_failed, self.atomic) {
            (false, _) => Overall::Ok,
            (true, true) => Overall::Failed,
            (true, false) => Overall::Partial,
        };
        self.w.buf[HEADER_LEN] = overall.byte();
        finish_frame(self.w, TYPE_WRITE_ACK, self.request_id)
    }
}

/// Encodes a message into its unique frame.
///
/// Fails with an invariant description when the message violates a
/// structural rule of the protocol; a successful encoding always decodes
/// back to an equal message.
pub fn encode(msg: &Message) -> Result<Vec<u8>, EncodeError> {
    match &msg.body {
        Body::Notify { .. } => {
            if msg.request_id != 0 {
                return Err(enc_err("notify must carry request id 0"));
            }
        }
        Body::Write(batch) => {
            return encode_write(msg.request_id, batch.atomic, &batch.updates);
        }
        _ => {
            if msg.request_id == 0 {
                return Err(enc_err("request id 0 is reserved for notify"));
            }
        }
    }

    let payload_cap = match &msg.body {
        Body::ReadAck { entries } => 4 + entries.iter().map(update_encoded_len).sum::<usize>(),
        Body::WriteAck(r) => 5 + r.per_op.iter().map(|s| 3 + s.message.len()).sum::<usize>(),
        Body::SchemaDoc { document } => document.len(),
        _ => 64,
    };
    let mut w = Writer::with_capacity(HEADER_LEN + payload_cap);
    // Header is written once the payload length is known.
    w.buf.resize(HEADER_LEN, 0);

    match &msg.body {
        Body::Hello { client } => {
            check_name(client)?;
            w.short_bytes(client.as_bytes());
        }
        Body::HelloAck { schema_digest, program } => {
            check_name(program)?;
            w.u64(*schema_digest);
            w.short_bytes(program.as_bytes());
        }
        Body::GetSchema => {}
        Body::SchemaDoc { document } => {
            if document.len() > u32::MAX as usize {
                return Err(enc_err("schema document exceeds frame capacity"));
            }
            w.bytes(document.as_bytes());
        }
        Body::Write(_) => unreachable!("write frames are encoded by encode_write"),
        Body::WriteAck(report) => {
            report.check().map_err(enc_err)?;
            w.u8(report.overall.byte());
            w.u32(report.per_op.len() as u32);
            for s in &report.per_op {
                w.u8(s.status as u8);
                w.short_bytes(s.message.as_bytes());
            }
        }
        Body::Read { table_id, key } => {
            w.u32(*table_id);
            match key {
                Some(k) => {
                    k.check().map_err(enc_err)?;
                    w.u8(1);
                    encode_key(&mut w, k);
                }
                None => w.u8(0),
            }
        }
        Body::ReadAck { entries } => {
            if entries.len() > u32::MAX as usize {
                return Err(enc_err("too many entries for one read ack"));
            }
            for e in entries {
                if e.op != UpdateOp::Insert {
                    return Err(enc_err("read ack entries must be insert-shaped"));
                }
                e.check().map_err(enc_err)?;
            }
            w.u32(entries.len() as u32);
            for e in entries {
                encode_update(&mut w, e);
            }
        }
        Body::TestPacket { table_id, fields } => {
            check_packet_fields(fields)?;
            w.u32(*table_id);
            encode_packet_fields(&mut w, fields);
        }
        Body::Notify { table_id, fields, reason } => {
            check_packet_fields(fields)?;
            w.u32(*table_id);
            encode_packet_fields(&mut w, fields);
            w.u8(reason.byte());
        }
    }

    finish_frame(w, msg.body.type_byte(), msg.request_id)
}

fn finish_frame(mut w: Writer, msg_type: u8, request_id: u32) -> Result<Vec<u8>, EncodeError> {
    let payload_len = w.buf.len() - HEADER_LEN;
    if payload_len > u32::MAX as usize {
        return Err(enc_err("payload exceeds frame capacity"));
    }
    w.buf[0..4].copy_from_slice(&FRAME_MAGIC.to_be_bytes());
    w.buf[4] = PROTOCOL_VERSION;
    w.buf[5] = msg_type;
    w.buf[6..10].copy_from_slice(&request_id.to_be_bytes());
    w.buf[10..14].copy_from_slice(&(payload_len as u32).to_be_bytes());
    Ok(w.buf)
}

fn check_name(name: &str) -> Result<(), EncodeError> {
    if name.len() > usize::from(u16::MAX) {
        Err(enc_err("name longer than 65535 bytes"))
    } else {
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Decoding

/// The fixed header of a frame, parsed ahead of the payload.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameHeader {
    pub msg_type: u8,
    pub request_id: u32,
    pub payload_len: u32,
}

/// Parses and validates the 14-byte frame header.
///
/// Stream transports use this to learn the payload length before reading
/// the rest of the frame.
pub fn parse_header(bytes: &[u8]) -> Result<FrameHeader, DecodeError> {
    let mut r = Reader::new(bytes);
    let magic = r.u32()?;
    if magic != FRAME_MAGIC {
        return Err(DecodeError {
            offset: 0,
            reason: alloc::format!("bad magic 0x{magic:08X}, expected 0x{FRAME_MAGIC:08X}"),
        });
    }
    let version = r.u8()?;
    if version != PROTOCOL_VERSION {
        return Err(DecodeError {
            offset: 4,
            reason: alloc::format!("unsupported version 0x{version:02X}"),
        });
    }
    let msg_type = r.u8()?;
    let request_id = r.u32()?;
    let payload_len = r.u32()?;
    Ok(FrameHeader { msg_type, request_id, payload_len })
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Reader<'a> {
        Reader { buf, pos: 0 }
    }

    fn err(&self, offset: usize, reason: impl Into<String>) -> DecodeError {
        DecodeError { offset, reason: reason.into() }
    }

    fn truncated(&self) -> DecodeError {
        self.err(self.buf.len(), "unexpected end of frame")
    }

    /// Caps an announced element count by what the remaining bytes could
    /// hold, so one allocation of the right size serves honest frames and
    /// hostile counts never force a huge reservation.
    fn bounded_count(&self, count: u32, min_element_len: usize) -> usize {
        (count as usize).min((self.buf.len() - self.pos) / min_element_len.max(1))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.buf.len() - self.pos < n {
            return Err(self.truncated());
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn short_bytes(&mut self) -> Result<Vec<u8>, DecodeError> {
        let len = self.u16()?;
        Ok(self.take(usize::from(len))?.to_vec())
    }

    fn utf8(&mut self, bytes: Vec<u8>, at: usize) -> Result<String, DecodeError> {
        String::from_utf8(bytes).map_err(|_| self.err(at, "invalid UTF-8"))
    }

    fn decode_key(&mut self) -> Result<MatchKey, DecodeError> {
        let count = self.u16()?;
        let mut fields = Vec::with_capacity(usize::from(count).min(64));
        for _ in 0..count {
            let field_id = self.u32()?;
            let kind_at = self.pos;
            let kind = self.u8()?;
            let value = self.short_bytes()?;
            let mv = match kind {
                0 => MatchValue::Exact { value },
                1 => {
                    let plen_at = self.pos;
                    let prefix_len = self.u16()?;
                    if usize::from(prefix_len) > value.len() * 8 {
                        return Err(self.err(
                            plen_at,
                            alloc::format!("lpm prefix_len {prefix_len} exceeds value width"),
                        ));
                    }
                    MatchValue::Lpm { value, prefix_len }
                }
                2 => {
                    let mask_at = self.pos;
                    let mask = self.take(value.len())?.to_vec();
                    if value.iter().zip(&mask).any(|(v, m)| v & !m != 0) {
                        return Err(
                            self.err(mask_at, "ternary value has bits set outside its mask")
                        );
                    }
                    MatchValue::Ternary { value, mask }
                }
                other => {
                    return Err(
                        self.err(kind_at, alloc::format!("unknown match kind 0x{other:02X}"))
                    )
                }
            };
            fields.push(FieldMatch { field_id, value: mv });
        }
        let prio_at = self.pos;
        let priority = self.u32()?;
        let key = MatchKey { fields, priority };
        if priority != 0 && !key.has_ternary() {
            return Err(self.err(prio_at, "priority must be 0 without a ternary field"));
        }
        Ok(key)
    }

    fn decode_update(&mut self) -> Result<TableUpdate, DecodeError> {
        let op_at = self.pos;
        let op = match self.u8()? {
            0 => UpdateOp::Insert,
            1 => UpdateOp::Modify,
            2 => UpdateOp::Delete,
            other => {
                return Err(self.err(op_at, alloc::format!("unknown update op 0x{other:02X}")))
            }
        };
        let table_id = self.u32()?;
        let key = self.decode_key()?;
        let action_at = self.pos;
        let action_id = self.u32()?;
        let param_count = self.u16()?;
        let action = if op == UpdateOp::Delete {
            if action_id != 0 || param_count != 0 {
                return Err(self.err(action_at, "delete must encode action id 0 and no params"));
            }
            None
        } else {
            let mut params = Vec::with_capacity(usize::from(param_count).min(64));
            for _ in 0..param_count {
                let param_id = self.u32()?;
                let value = self.short_bytes()?;
                params.push(ActionParam { param_id, value });
            }
            Some(ActionData { action_id, params })
        };
        Ok(TableUpdate { op, table_id, key, action })
    }

    fn decode_packet_fields(&mut self) -> Result<Vec<PacketField>, DecodeError> {
        let count = self.u16()?;
        let mut fields = Vec::with_capacity(usize::from(count).min(64));
        for _ in 0..count {
            let field_id = self.u32()?;
            let kind_at = self.pos;
            let kind = self.u8()?;
            if kind != 0 {
                return Err(self.err(kind_at, "packet field values must be exact"));
            }
            let value = self.short_bytes()?;
            fields.push(PacketField { field_id, value });
        }
        Ok(fields)
    }
}

/// Streaming decoder for write frames: yields updates one at a time so a
/// target can apply a large batch without materializing all of it.
///
/// The frame is validated exactly as strictly as [`decode`]; consuming
/// every update (including the final `None`) completes the validation.
pub struct WriteFrameDecoder<'a> {
    reader: Reader<'a>,
    remaining: u32,
    atomic: bool,
    request_id: u32,
}

impl<'a> WriteFrameDecoder<'a> {
    /// Parses the header and batch preamble of a write frame.
    pub fn new(bytes: &'a [u8]) -> Result<WriteFrameDecoder<'a>, DecodeError> {
        let header = parse_header(bytes)?;
        if header.msg_type != TYPE_WRITE {
            return Err(DecodeError {
                offset: 5,
                reason: alloc::format!(
                    "expected a write frame, got type 0x{:02X}",
                    header.msg_type
                ),
            });
        }
        check_frame_len(bytes, header.payload_len)?;
        if header.request_id == 0 {
            return Err(DecodeError {
                offset: 6,
                reason: "request id 0 is reserved for notify".to_string(),
            });
        }
        let mut r = Reader::new(bytes);
        r.pos = HEADER_LEN;
        let flags_at = r.pos;
        let flags = r.u8()?;
        if flags & !0x01 != 0 {
            return Err(r.err(flags_at, alloc::format!("unknown write flags 0x{flags:02X}")));
        }
        let count_at = r.pos;
        let count = r.u32()?;
        if count == 0 {
            return Err(r.err(count_at, "write batch must contain at least one update"));
        }
        if count as usize > MAX_BATCH_LEN {
            return Err(r.err(count_at, "write batch exceeds 2^31 updates"));
        }
        Ok(WriteFrameDecoder {
            reader: r,
            remaining: count,
            atomic: flags & 0x01 != 0,
            request_id: header.request_id,
        })
    }

    pub fn atomic(&self) -> bool {
        self.atomic
    }

    pub fn request_id(&self) -> u32 {
        self.request_id
    }

    /// Updates left to decode.
    pub fn remaining(&self) -> u32 {
        self.remaining
    }

    /// Decodes the next update; `None` once the batch is exhausted and the
    /// frame verified free of trailing bytes.
    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> Option<Result<TableUpdate, DecodeError>> {
        if self.remaining == 0 {
            if self.reader.pos != self.reader.buf.len() {
                return Some(Err(
                    self.reader.err(self.reader.pos, "trailing bytes inside payload")
                ));
            }
            return None;
        }
        self.remaining -= 1;
        Some(self.reader.decode_update())
    }
}

fn check_frame_len(bytes: &[u8], payload_len: u32) -> Result<(), DecodeError> {
    let total = HEADER_LEN + payload_len as usize;
    if bytes.len() < total {
        return Err(DecodeError { offset: bytes.len(), reason: "frame truncated".to_string() });
    }
    if bytes.len() > total {
        return Err(DecodeError { offset: total, reason: "trailing bytes after frame".to_string() });
    }
    Ok(())
}

/// Decodes one complete frame.
///
/// Returns the unique message whose encoding is the input, or an error
/// with the byte offset of the first violation. Trailing bytes, truncation,
/// and any non-canonical encoding are rejected.
pub fn decode(bytes: &[u8]) -> Result<Message, DecodeError> {
    let header = parse_header(bytes)?;
    check_frame_len(bytes, header.payload_len)?;

    let mut r = Reader::new(bytes);
    r.pos = HEADER_LEN;
    let request_id = header.request_id;

    if header.msg_type == TYPE_NOTIFY {
        if request_id != 0 {
            return Err(r.err(6, "notify must carry request id 0"));
        }
    } else if request_id == 0 {
        return Err(r.err(6, "request id 0 is reserved for notify"));
    }

    let body = match header.msg_type {
        TYPE_HELLO => {
            let at = r.pos + 2;
            let name = r.short_bytes()?;
            Body::Hello { client: r.utf8(name, at)? }
        }
        TYPE_HELLO_ACK => {
            let schema_digest = r.u64()?;
            let at = r.pos + 2;
            let name = r.short_bytes()?;
            Body::HelloAck { schema_digest, program: r.utf8(name, at)? }
        }
        TYPE_GET_SCHEMA => Body::GetSchema,
        TYPE_SCHEMA_DOC => {
            let at = r.pos;
            let doc = r.take(bytes.len() - r.pos)?.to_vec();
            Body::SchemaDoc { document: r.utf8(doc, at)? }
        }
        TYPE_WRITE => {
            let flags_at = r.pos;
            let flags = r.u8()?;
            if flags & !0x01 != 0 {
                return Err(r.err(flags_at, alloc::format!("unknown write flags 0x{flags:02X}")));
            }
            let count_at = r.pos;
            let count = r.u32()?;
            if count == 0 {
                return Err(r.err(count_at, "write batch must contain at least one update"));
            }
            if count as usize > MAX_BATCH_LEN {
                return Err(r.err(count_at, "write batch exceeds 2^31 updates"));
            }
            let mut updates = Vec::with_capacity(r.bounded_count(count, 17));
            for _ in 0..count {
                updates.push(r.decode_update()?);
            }
            Body::Write(WriteBatch { atomic: flags & 0x01 != 0, updates })
        }
        TYPE_WRITE_ACK => {
            let overall_at = r.pos;
            let overall = match r.u8()? {
                0 => Overall::Ok,
                1 => Overall::Partial,
                2 => Overall::Failed,
                other => {
                    return Err(
                        r.err(overall_at, alloc::format!("unknown overall status 0x{other:02X}"))
                    )
                }
            };
            let count_at = r.pos;
            let count = r.u32()?;
            if count == 0 {
                return Err(r.err(count_at, "write ack without per-op statuses"));
            }
            let mut per_op = Vec::with_capacity(r.bounded_count(count, 3));
            for _ in 0..count {
                let status_at = r.pos;
                let status = StatusCode::from_u8(r.u8()?).ok_or_else(|| {
                    r.err(status_at, "unknown status code")
                })?;
                let at = r.pos + 2;
                let message = r.short_bytes()?;
                per_op.push(OpStatus { status, message: r.utf8(message, at)? });
            }
            let report = WriteReport { overall, per_op };
            report.check().map_err(|e| r.err(overall_at, e))?;
            Body::WriteAck(report)
        }
        TYPE_READ => {
            let table_id = r.u32()?;
            let has_key_at = r.pos;
            let key = match r.u8()? {
                0 => None,
                1 => Some(r.decode_key()?),
                other => {
                    return Err(
                        r.err(has_key_at, alloc::format!("invalid has_key byte 0x{other:02X}"))
                    )
                }
            };
            Body::Read { table_id, key }
        }
        TYPE_READ_ACK => {
            let count = r.u32()?;
            let mut entries = Vec::with_capacity(r.bounded_count(count, 17));
            for _ in 0..count {
                let at = r.pos;
                let entry = r.decode_update()?;
                if entry.op != UpdateOp::Insert {
                    return Err(r.err(at, "read ack entries must be insert-shaped"));
                }
                entries.push(entry);
            }
            Body::ReadAck { entries }
        }
        TYPE_TEST_PACKET => {
            let table_id = r.u32()?;
            let fields = r.decode_packet_fields()?;
            Body::TestPacket { table_id, fields }
        }
        TYPE_NOTIFY => {
            let table_id = r.u32()?;
            let fields = r.decode_packet_fields()?;
            let reason_at = r.pos;
            let reason = match r.u8()? {
                0 => NotifyReason::LookupMiss,
                other => {
                    return Err(
                        r.err(reason_at, alloc::format!("unknown notify reason 0x{other:02X}"))
                    )
                }
            };
            Body::Notify { table_id, fields, reason }
        }
        other => {
            return Err(DecodeError {
                offset: 5,
                reason: alloc::format!("unknown message type 0x{other:02X}"),
            })
        }
    };

    if r.pos != bytes.len() {
        return Err(r.err(r.pos, "trailing bytes inside payload"));
    }
    Ok(Message { request_id, body })
}

// ---------------------------------------------------------------------------
// Key canonicalization

/// A key cannot be canonicalized against its table schema.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum KeyError {
    UnknownField { field_id: u32 },
    DuplicateField { field_id: u32 },
    MissingField { field_id: u32 },
    KindMismatch { field_id: u32, expected: MatchKind, got: MatchKind },
    Oversize { field_id: u32 },
    MaskOversize { field_id: u32 },
    PrefixTooLong { field_id: u32, prefix_len: u16, bit_width: u16 },
}

impl fmt::Display for KeyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KeyError::UnknownField { field_id } => write!(f, "unknown key field {field_id}"),
            KeyError::DuplicateField { field_id } => write!(f, "duplicate key field {field_id}"),
            KeyError::MissingField { field_id } => write!(f, "missing key field {field_id}"),
            KeyError::KindMismatch { field_id, expected, got } => {
                write!(f, "field {field_id} expects {expected} match, got {got}")
            }
            KeyError::Oversize { field_id } => {
                write!(f, "value exceeds the bit width of field {field_id}")
            }
            KeyError::MaskOversize { field_id } => {
                write!(f, "mask exceeds the bit width of field {field_id}")
            }
            KeyError::PrefixTooLong { field_id, prefix_len, bit_width } => {
                write!(f, "prefix_len {prefix_len} exceeds the {bit_width}-bit field {field_id}")
            }
        }
    }
}

impl core::error::Error for KeyError {}

/// Normalizes a key to its canonical, byte-exact form.
///
/// Fields are reordered to the schema's key layout; values are zero-padded
/// to their field's canonical width; lpm host bits and ternary masked-out
/// bits are cleared; the priority is zeroed unless the table has a ternary
/// field. Idempotent: canonical keys pass through unchanged.
pub fn canonicalize_key(key: &MatchKey, table: &TableSchema) -> Result<MatchKey, KeyError> {
    for f in &key.fields {
        if table.key_field(f.field_id).is_none() {
            return Err(KeyError::UnknownField { field_id: f.field_id });
        }
    }

    let mut fields = Vec::with_capacity(table.key_fields.len());
    for spec in &table.key_fields {
        let id = spec.field_id;
        let mut found = key.fields.iter().filter(|f| f.field_id == id);
        let field = found.next().ok_or(KeyError::MissingField { field_id: id })?;
        if found.next().is_some() {
            return Err(KeyError::DuplicateField { field_id: id });
        }
        let expected = spec.match_kind.expect("validated schema key field has a match kind");
        let got = field.value.kind();
        if expected != got {
            return Err(KeyError::KindMismatch { field_id: id, expected, got });
        }

        let bits = spec.bit_width;
        let len = value::width_bytes(bits);
        let canonical = match &field.value {
            MatchValue::Exact { value } => {
                let v = fit_value(value, bits, id)?;
                MatchValue::Exact { value: value::u128_to_be(v, len) }
            }
            MatchValue::Lpm { value, prefix_len } => {
                if *prefix_len > bits {
                    return Err(KeyError::PrefixTooLong {
                        field_id: id,
                        prefix_len: *prefix_len,
                        bit_width: bits,
                    });
                }
                let v = fit_value(value, bits, id)? & value::prefix_mask(bits, *prefix_len);
                MatchValue::Lpm { value: value::u128_to_be(v, len), prefix_len: *prefix_len }
            }
            MatchValue::Ternary { value, mask } => {
                let m = value::be_to_u128(mask).ok_or(KeyError::MaskOversize { field_id: id })?;
                if !value::fits(m, bits) {
                    return Err(KeyError::MaskOversize { field_id: id });
                }
                let v = value::be_to_u128(value).ok_or(KeyError::Oversize { field_id: id })? & m;
                MatchValue::Ternary {
                    value: value::u128_to_be(v, len),
                    mask: value::u128_to_be(m, len),
                }
            }
        };
        fields.push(FieldMatch { field_id: id, value: canonical });
    }

    let priority = if table.has_ternary() { key.priority } else { 0 };
    Ok(MatchKey { fields, priority })
}

fn fit_value(bytes: &[u8], bits: u16, field_id: u32) -> Result<u128, KeyError> {
    let v = value::be_to_u128(bytes).ok_or(KeyError::Oversize { field_id })?;
    if !value::fits(v, bits) {
        return Err(KeyError::Oversize { field_id });
    }
    Ok(v)
}
