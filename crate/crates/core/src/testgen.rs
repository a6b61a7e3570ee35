//! Deterministic generators and reference oracles for randomized tests.
//!
//! Everything here is test support: seeded generation of protocol
//! messages, table schemas, entries, and probe packets, plus a
//! byte-level reference implementation of table lookup that the real
//! lookup is checked against. Kept in the library (behind the `testgen`
//! feature) so dependent crates' suites can reuse it.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::schema::{
    ActionSpec, FieldSpec, MatchKind, ProgramSchema, TableKind, TableSchema,
};
use crate::table::{Dataplane, TableStore};
use crate::value;
use crate::wire::{
    ActionData, ActionParam, Body, FieldMatch, MatchKey, MatchValue, Message, NotifyReason,
    OpStatus, Overall, PacketField, StatusCode, TableUpdate, UpdateOp, WriteBatch, WriteReport,
};

/// Splitmix64: tiny, seedable, and identical on every platform.
#[derive(Clone)]
pub struct Rng64 {
    state: u64,
}

impl Rng64 {
    pub fn new(seed: u64) -> Rng64 {
        Rng64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform value in `0..n` (n > 0).
    pub fn below(&mut self, n: u64) -> u64 {
        self.next_u64() % n
    }

    /// True with probability `num/den`.
    pub fn chance(&mut self, num: u64, den: u64) -> bool {
        self.below(den) < num
    }

    pub fn bytes(&mut self, len: usize) -> Vec<u8> {
        (0..len).map(|_| self.next_u64() as u8).collect()
    }

    pub fn ascii(&mut self, len: usize) -> String {
        (0..len).map(|_| (b'a' + (self.below(26) as u8)) as char).collect()
    }
}

// ---------------------------------------------------------------------------
// Wire-level generation (codec-valid, schema-agnostic)

fn random_match_value(rng: &mut Rng64) -> MatchValue {
    let len = rng.below(7) as usize; // 0..=6 bytes
    match rng.below(3) {
        0 => MatchValue::Exact { value: rng.bytes(len) },
        1 => {
            let value = rng.bytes(len);
            let prefix_len = rng.below(len as u64 * 8 + 1) as u16;
            MatchValue::Lpm { value, prefix_len }
        }
        _ => {
            let mask = rng.bytes(len);
            let value: Vec<u8> =
                rng.bytes(len).iter().zip(&mask).map(|(v, m)| v & m).collect();
            MatchValue::Ternary { value, mask }
        }
    }
}

fn random_wire_key(rng: &mut Rng64) -> MatchKey {
    let fields: Vec<FieldMatch> = (0..rng.below(4))
        .map(|_| FieldMatch { field_id: rng.next_u64() as u32, value: random_match_value(rng) })
        .collect();
    let has_ternary = fields.iter().any(|f| f.value.kind() == MatchKind::Ternary);
    let priority = if has_ternary { rng.next_u64() as u32 } else { 0 };
    MatchKey { fields, priority }
}

/// A random update satisfying every codec invariant (not tied to a schema).
pub fn random_update(rng: &mut Rng64) -> TableUpdate {
    let op = match rng.below(3) {
        0 => UpdateOp::Insert,
        1 => UpdateOp::Modify,
        _ => UpdateOp::Delete,
    };
    random_update_with_op(rng, op)
}

fn random_update_with_op(rng: &mut Rng64, op: UpdateOp) -> TableUpdate {
    let action = if op == UpdateOp::Delete {
        None
    } else {
        let params = (0..rng.below(3))
            .map(|_| {
                let len = rng.below(5) as usize;
                ActionParam { param_id: rng.next_u64() as u32, value: rng.bytes(len) }
            })
            .collect();
        Some(ActionData { action_id: rng.next_u64() as u32, params })
    };
    TableUpdate { op, table_id: rng.next_u64() as u32, key: random_wire_key(rng), action }
}

fn random_packet_fields(rng: &mut Rng64) -> Vec<PacketField> {
    (0..rng.below(4))
        .map(|_| {
            let len = rng.below(6) as usize;
            PacketField { field_id: rng.next_u64() as u32, value: rng.bytes(len) }
        })
        .collect()
}

fn nonzero_request_id(rng: &mut Rng64) -> u32 {
    (rng.next_u64() as u32).max(1)
}

/// A random message covering every body variant, valid for encoding.
pub fn random_message(rng: &mut Rng64) -> Message {
    let body = match rng.below(10) {
        0 => {
            let len = rng.below(24) as usize;
            Body::Hello { client: rng.ascii(len) }
        }
        1 => {
            let len = rng.below(24) as usize;
            Body::HelloAck { schema_digest: rng.next_u64(), program: rng.ascii(len) }
        }
        2 => Body::GetSchema,
        3 => Body::SchemaDoc { document: format!("{{\"program\":\"{}\"}}", rng.ascii(8)) },
        4 => {
            let updates = (0..1 + rng.below(5)).map(|_| random_update(rng)).collect();
            Body::Write(WriteBatch { atomic: rng.chance(1, 2), updates })
        }
        5 => {
            let per_op: Vec<OpStatus> = (0..1 + rng.below(5))
                .map(|_| {
                    let status = StatusCode::from_u8(rng.below(8) as u8).unwrap();
                    let message = if status.is_ok() || rng.chance(1, 2) {
                        String::new()
                    } else {
                        let len = rng.below(16) as usize;
                        rng.ascii(len)
                    };
                    OpStatus { status, message }
                })
                .collect();
            let overall = if per_op.iter().all(|s| s.status.is_ok()) {
                Overall::Ok
            } else if rng.chance(1, 2) {
                Overall::Partial
            } else {
                Overall::Failed
            };
            Body::WriteAck(WriteReport { overall, per_op })
        }
        6 => Body::Read {
            table_id: rng.next_u64() as u32,
            key: if rng.chance(1, 2) { Some(random_wire_key(rng)) } else { None },
        },
        7 => {
            let entries = (0..rng.below(4))
                .map(|_| random_update_with_op(rng, UpdateOp::Insert))
                .collect();
            Body::ReadAck { entries }
        }
        8 => Body::TestPacket {
            table_id: rng.next_u64() as u32,
            fields: random_packet_fields(rng),
        },
        _ => Body::Notify {
            table_id: rng.next_u64() as u32,
            fields: random_packet_fields(rng),
            reason: NotifyReason::LookupMiss,
        },
    };
    let request_id = if matches!(body, Body::Notify { .. }) { 0 } else { nonzero_request_id(rng) };
    Message { request_id, body }
}

/// Applies a random corruption to a frame: byte flips, truncation,
/// extension, or a splice.
pub fn mutate_frame(rng: &mut Rng64, frame: &[u8]) -> Vec<u8> {
    let mut out = frame.to_vec();
    match rng.below(4) {
        0 => {
            // Flip one or more bytes.
            for _ in 0..1 + rng.below(3) {
                if out.is_empty() {
                    break;
                }
                let at = rng.below(out.len() as u64) as usize;
                out[at] ^= 1 << rng.below(8);
            }
        }
        1 => {
            let keep = rng.below(out.len() as u64 + 1) as usize;
            out.truncate(keep);
        }
        2 => {
            let extra_len = 1 + rng.below(8) as usize;
            let extra = rng.bytes(extra_len);
            out.extend_from_slice(&extra);
        }
        _ => {
            if !out.is_empty() {
                let at = rng.below(out.len() as u64) as usize;
                let len = (rng.below(4) + 1) as usize;
                let splice = rng.bytes(len);
                for (i, b) in splice.into_iter().enumerate() {
                    if at + i < out.len() {
                        out[at + i] = b;
                    }
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Schema-level generation

/// A random single-table schema with mixed match kinds and small widths,
/// sized so that random probes collide with stored entries often.
pub fn random_table_schema(rng: &mut Rng64, table_id: u32) -> (TableSchema, ProgramSchema) {
    let field_count = 1 + rng.below(3);
    let key_fields: Vec<FieldSpec> = (0..field_count)
        .map(|i| {
            let match_kind = match rng.below(3) {
                0 => MatchKind::Exact,
                1 => MatchKind::Lpm,
                _ => MatchKind::Ternary,
            };
            FieldSpec {
                field_id: i as u32 + 1,
                name: format!("f{}", i + 1),
                bit_width: [3u16, 4, 7, 8, 12, 16, 24, 32][rng.below(8) as usize],
                match_kind: Some(match_kind),
            }
        })
        .collect();
    let actions: Vec<ActionSpec> = (0..1 + rng.below(3))
        .map(|a| ActionSpec {
            action_id: a as u32 + 1,
            name: format!("a{}", a + 1),
            params: (0..rng.below(3))
                .map(|p| FieldSpec {
                    field_id: p as u32 + 1,
                    name: format!("p{}", p + 1),
                    bit_width: [4u16, 8, 16, 32][rng.below(4) as usize],
                    match_kind: None,
                })
                .collect(),
        })
        .collect();
    let table = TableSchema {
        table_id,
        name: format!("t{table_id}"),
        kind: TableKind::MatchAction,
        capacity: 1 + rng.below(1000),
        key_fields,
        actions,
    };
    let program = ProgramSchema {
        program_name: format!("gen{table_id}"),
        tables: vec![table.clone()],
        schema_digest: 0,
    };
    let program = crate::schema::parse_schema(&crate::schema::serialize_schema(&program))
        .expect("generated schema is valid");
    (program.tables[0].clone(), program)
}

/// A small value that fits `bits`, drawn from a deliberately narrow
/// domain so entries and probes overlap.
fn narrow_value(rng: &mut Rng64, bits: u16) -> u128 {
    let max = if bits >= 128 { u128::MAX } else { (1u128 << bits) - 1 };
    let v = match rng.below(4) {
        0 => rng.below(4) as u128,
        1 => max,
        2 => (rng.next_u64() as u128) & 0x55,
        _ => rng.next_u64() as u128,
    };
    v & max
}

/// A schema-valid insert for `table`, with a canonicalizable key.
pub fn random_entry(rng: &mut Rng64, table: &TableSchema) -> TableUpdate {
    let fields = table
        .key_fields
        .iter()
        .map(|spec| {
            let bits = spec.bit_width;
            let len = value::width_bytes(bits);
            let value = match spec.match_kind.unwrap() {
                MatchKind::Exact => MatchValue::Exact {
                    value: value::u128_to_be(narrow_value(rng, bits), len),
                },
                MatchKind::Lpm => {
                    let prefix_len = rng.below(u64::from(bits) + 1) as u16;
                    let v = narrow_value(rng, bits) & value::prefix_mask(bits, prefix_len);
                    MatchValue::Lpm { value: value::u128_to_be(v, len), prefix_len }
                }
                MatchKind::Ternary => {
                    let m = narrow_value(rng, bits);
                    let v = narrow_value(rng, bits) & m;
                    MatchValue::Ternary {
                        value: value::u128_to_be(v, len),
                        mask: value::u128_to_be(m, len),
                    }
                }
            };
            FieldMatch { field_id: spec.field_id, value }
        })
        .collect();
    let priority = if table.has_ternary() { rng.below(4) as u32 } else { 0 };
    let action_ix = rng.below(table.actions.len() as u64) as usize;
    let spec = &table.actions[action_ix];
    let params = spec
        .params
        .iter()
        .map(|p| ActionParam {
            param_id: p.field_id,
            value: value::u128_to_be(narrow_value(rng, p.bit_width), value::width_bytes(p.bit_width)),
        })
        .collect();
    TableUpdate {
        op: UpdateOp::Insert,
        table_id: table.table_id,
        key: MatchKey { fields, priority },
        action: Some(ActionData { action_id: spec.action_id, params }),
    }
}

/// A possibly-invalid key against `table`: values may be oversized,
/// prefixes too long, fields shuffled. For canonicalization properties.
pub fn random_raw_key(rng: &mut Rng64, table: &TableSchema) -> MatchKey {
    let mut fields: Vec<FieldMatch> = table
        .key_fields
        .iter()
        .map(|spec| {
            let len = rng.below(value::width_bytes(spec.bit_width) as u64 + 2) as usize;
            let value = match spec.match_kind.unwrap() {
                MatchKind::Exact => MatchValue::Exact { value: rng.bytes(len) },
                MatchKind::Lpm => MatchValue::Lpm {
                    value: rng.bytes(len),
                    prefix_len: rng.below(u64::from(spec.bit_width) + 4) as u16,
                },
                MatchKind::Ternary => {
                    let mask = rng.bytes(len);
                    let value = rng.bytes(len).iter().zip(&mask).map(|(v, m)| v & m).collect();
                    MatchValue::Ternary { value, mask }
                }
            };
            FieldMatch { field_id: spec.field_id, value }
        })
        .collect();
    if fields.len() > 1 && rng.chance(1, 2) {
        fields.reverse();
    }
    MatchKey { fields, priority: rng.below(4) as u32 }
}

/// Builds a one-table dataplane and fills it with up to `max_entries`
/// random entries (duplicates skipped).
pub fn random_populated_plane(rng: &mut Rng64, max_entries: usize) -> (Dataplane, u32) {
    let (table, program) = random_table_schema(rng, 1);
    let mut plane = Dataplane::new(program);
    let n = rng.below(max_entries as u64 + 1) as usize;
    if n > 0 {
        let updates: Vec<TableUpdate> = (0..n).map(|_| random_entry(rng, &table)).collect();
        // Duplicate keys and full tables are fine here; failures skip.
        plane.apply_write(&WriteBatch { atomic: false, updates });
    }
    (plane, table.table_id)
}

/// A burst of inserts, modifies, and deletes against an existing plane,
/// including deliberately failing operations.
pub fn random_update_burst(rng: &mut Rng64, plane: &Dataplane, n: usize) -> Vec<TableUpdate> {
    let table_id = plane.schema().tables[0].table_id;
    let table = plane.schema().tables[0].clone();
    let existing = plane.read_entries(table_id, None).unwrap();
    (0..n)
        .map(|_| {
            let mut u = random_entry(rng, &table);
            // Half the time target an existing key, so modifies and
            // deletes actually hit something and inserts collide.
            if !existing.is_empty() && rng.chance(1, 2) {
                u.key = existing[rng.below(existing.len() as u64) as usize].key.clone();
            }
            match rng.below(3) {
                0 => {}
                1 => u.op = UpdateOp::Modify,
                _ => {
                    u.op = UpdateOp::Delete;
                    u.action = None;
                }
            }
            // Occasionally corrupt the action or table id.
            if u.op != UpdateOp::Delete && rng.chance(1, 8) {
                u.action.as_mut().unwrap().action_id = 99;
            }
            if rng.chance(1, 16) {
                u.table_id = 777;
            }
            u
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Reference lookup oracle

/// A flat dump of a store: canonical key, action, insertion sequence.
pub fn dump_entries(store: &TableStore) -> Vec<(MatchKey, ActionData, u64)> {
    store
        .entries_in_seq_order()
        .into_iter()
        .map(|(k, e)| (k.clone(), e.action.clone(), e.seq))
        .collect()
}

/// A probe packet for `schema`, biased toward stored entries so hits are
/// common: half the probes are derived from a random entry with wildcard
/// bits filled randomly, half are fresh random values.
pub fn random_packet(
    rng: &mut Rng64,
    schema: &TableSchema,
    entries: &[(MatchKey, ActionData, u64)],
) -> Vec<PacketField> {
    let derive = !entries.is_empty() && rng.chance(1, 2);
    let base = if derive {
        Some(&entries[rng.below(entries.len() as u64) as usize].0)
    } else {
        None
    };
    let mut fields: Vec<PacketField> = schema
        .key_fields
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let bits = spec.bit_width;
            let len = value::width_bytes(bits);
            let random = narrow_value(rng, bits);
            let v = match base.map(|k| &k.fields[i].value) {
                Some(MatchValue::Exact { value }) => value::be_to_u128(value).unwrap(),
                Some(MatchValue::Lpm { value, prefix_len }) => {
                    let mask = value::prefix_mask(bits, *prefix_len);
                    (value::be_to_u128(value).unwrap() & mask) | (random & !mask)
                }
                Some(MatchValue::Ternary { value, mask }) => {
                    let m = value::be_to_u128(mask).unwrap();
                    (value::be_to_u128(value).unwrap() & m) | (random & !m)
                }
                None => random,
            };
            let max = if bits >= 128 { u128::MAX } else { (1u128 << bits) - 1 };
            PacketField { field_id: spec.field_id, value: value::u128_to_be(v & max, len) }
        })
        .collect();
    if fields.len() > 1 && rng.chance(1, 4) {
        fields.reverse();
    }
    fields
}

/// Byte-level brute-force lookup: scans every entry and applies the
/// match-kind rules directly on the byte strings. Returns the winning
/// entry's insertion sequence.
pub fn reference_lookup(
    schema: &TableSchema,
    entries: &[(MatchKey, ActionData, u64)],
    packet: &[PacketField],
) -> Option<u64> {
    // Resolve packet values into schema order.
    let values: Vec<&[u8]> = schema
        .key_fields
        .iter()
        .map(|spec| {
            packet
                .iter()
                .find(|f| f.field_id == spec.field_id)
                .expect("probe covers every key field")
                .value
                .as_slice()
        })
        .collect();

    let use_priority = schema.has_ternary();
    let use_prefix = schema.has_lpm();

    let mut best: Option<(u64, u64)> = None; // (rank, seq)
    'entries: for (key, _, seq) in entries {
        let mut prefix_total = 0u64;
        for ((spec, field), pv) in schema.key_fields.iter().zip(&key.fields).zip(&values) {
            match &field.value {
                MatchValue::Exact { value } => {
                    if value.as_slice() != *pv {
                        continue 'entries;
                    }
                }
                MatchValue::Lpm { value, prefix_len } => {
                    for j in 0..*prefix_len {
                        let p = spec.bit_width - 1 - j; // integer bit position
                        if bit_at(value, p) != bit_at(pv, p) {
                            continue 'entries;
                        }
                    }
                    prefix_total += u64::from(*prefix_len);
                }
                MatchValue::Ternary { value, mask } => {
                    for ((v, m), p) in value.iter().zip(mask).zip(*pv) {
                        if p & m != v & m {
                            continue 'entries;
                        }
                    }
                }
            }
        }
        let rank = if use_priority {
            u64::from(key.priority)
        } else if use_prefix {
            prefix_total
        } else {
            0
        };
        best = match best {
            None => Some((rank, *seq)),
            Some((r, s)) if rank > r || (rank == r && *seq < s) => Some((rank, *seq)),
            keep => keep,
        };
    }
    best.map(|(_, seq)| seq)
}

fn bit_at(bytes: &[u8], position: u16) -> u8 {
    let byte = bytes[bytes.len() - 1 - usize::from(position / 8)];
    (byte >> (position % 8)) & 1
}
