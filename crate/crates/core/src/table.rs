//! Match-action table state and semantics: entry stores, batch
//! application, and packet lookup.
//!
//! Lookup follows the table's key layout: exact-only tables match by key
//! equality; tables with an lpm field pick the matching entry with the
//! longest prefix; tables with ternary fields pick the matching entry with
//! the highest priority. Ties go to the earliest-inserted entry, which
//! keeps results deterministic. Modifying an entry replaces its action
//! data only, so lpm/ternary ordering is stable under modification.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use hashbrown::HashMap;

use crate::schema::{ActionSpec, ProgramSchema, TableSchema};
use crate::value;
use crate::wire::{
    canonicalize_key, ActionData, FieldMatch, MatchKey, MatchValue, OpStatus, PacketField,
    StatusCode, TableUpdate, UpdateOp, WriteBatch, WriteReport,
};

/// Action data plus the entry's insertion sequence number.
///
/// The sequence number is assigned once at insertion and survives
/// modification; it orders read results and breaks lookup ties.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoredEntry {
    pub action: ActionData,
    pub seq: u64,
}

/// The entry store of one table.
///
/// Entries are keyed by canonical match key; iteration order is never
/// exposed directly — reads sort by insertion sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableStore {
    schema: TableSchema,
    entries: HashMap<MatchKey, StoredEntry>,
    next_seq: u64,
}

/// A read or lookup against a table that cannot be served.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum AccessError {
    UnknownTable { table_id: u32 },
    InvalidKey { reason: String },
}

impl fmt::Display for AccessError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AccessError::UnknownTable { table_id } => write!(f, "unknown table id {table_id}"),
            AccessError::InvalidKey { reason } => write!(f, "invalid key: {reason}"),
        }
    }
}

impl core::error::Error for AccessError {}

impl TableStore {
    pub fn new(schema: TableSchema) -> TableStore {
        TableStore { schema, entries: HashMap::new(), next_seq: 0 }
    }

    pub fn schema(&self) -> &TableSchema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &MatchKey) -> Option<&StoredEntry> {
        self.entries.get(key)
    }

    /// All entries, ordered by insertion sequence.
    pub fn entries_in_seq_order(&self) -> Vec<(&MatchKey, &StoredEntry)> {
        let mut out: Vec<_> = self.entries.iter().collect();
        out.sort_by_key(|(_, e)| e.seq);
        out
    }

    /// Applies one update. The key is canonicalized here; failures are
    /// reported as statuses, never as panics or connection errors.
    ///
    /// Check order: key, then action data, then existence, then capacity.
    pub fn apply(&mut self, update: &TableUpdate) -> OpStatus {
        let key = match canonicalize_key(&update.key, &self.schema) {
            Ok(key) => key,
            Err(e) => return OpStatus::of(StatusCode::InvalidKey, e.to_string()),
        };
        match update.op {
            UpdateOp::Insert => {
                let action = match self.canonical_action(update.action.as_ref()) {
                    Ok(a) => a,
                    Err(status) => return status,
                };
                let occupancy = self.entries.len() as u64;
                match self.entries.entry(key) {
                    hashbrown::hash_map::Entry::Occupied(_) => {
                        OpStatus::of(StatusCode::AlreadyExists, "entry already exists")
                    }
                    hashbrown::hash_map::Entry::Vacant(slot) => {
                        if occupancy >= self.schema.capacity {
                            return OpStatus::of(StatusCode::TableFull, "table full");
                        }
                        let seq = self.next_seq;
                        self.next_seq += 1;
                        slot.insert(StoredEntry { action, seq });
                        OpStatus::ok()
                    }
                }
            }
            UpdateOp::Modify => {
                let action = match self.canonical_action(update.action.as_ref()) {
                    Ok(a) => a,
                    Err(status) => return status,
                };
                match self.entries.get_mut(&key) {
                    Some(entry) => {
                        entry.action = action;
                        OpStatus::ok()
                    }
                    None => OpStatus::of(StatusCode::NotFound, "entry not found"),
                }
            }
            UpdateOp::Delete => {
                if update.action.is_some() {
                    return OpStatus::of(StatusCode::Malformed, "delete carries no action data");
                }
                match self.entries.remove(&key) {
                    Some(_) => OpStatus::ok(),
                    None => OpStatus::of(StatusCode::NotFound, "entry not found"),
                }
            }
        }
    }

    /// Validates action data against the schema and canonicalizes the
    /// parameter values to their declared widths.
    fn canonical_action(&self, action: Option<&ActionData>) -> Result<ActionData, OpStatus> {
        let action = action.ok_or_else(|| {
            OpStatus::of(StatusCode::InvalidAction, "insert/modify requires action data")
        })?;
        let spec = self.schema.action(action.action_id).ok_or_else(|| {
            OpStatus::of(
                StatusCode::InvalidAction,
                alloc::format!("unknown action id {}", action.action_id),
            )
        })?;
        let params = canonical_params(spec, action).map_err(|reason| {
            OpStatus::of(StatusCode::InvalidAction, reason)
        })?;
        Ok(ActionData { action_id: action.action_id, params })
    }

    /// Looks up the entry a packet with the given key-field values would
    /// hit. Values must arrive one per key field at canonical width.
    pub fn lookup(&self, fields: &[PacketField]) -> Result<Option<&StoredEntry>, AccessError> {
        let packet = self.packet_values(fields)?;

        if !self.schema.has_ternary() && !self.schema.has_lpm() {
            // Exact-only: hash-equality against the canonical key.
            let key = MatchKey {
                fields: self
                    .schema
                    .key_fields
                    .iter()
                    .zip(&packet)
                    .map(|(spec, v)| FieldMatch {
                        field_id: spec.field_id,
                        value: MatchValue::Exact { value: value::u128_to_be(*v, value::width_bytes(spec.bit_width)) },
                    })
                    .collect(),
                priority: 0,
            };
            return Ok(self.entries.get(&key));
        }

        let use_priority = self.schema.has_ternary();
        let mut best: Option<(&StoredEntry, u64)> = None;
        for (key, entry) in &self.entries {
            let Some(weight) = self.match_weight(key, &packet) else { continue };
            let rank = if use_priority { u64::from(key.priority) } else { weight };
            let better = match best {
                None => true,
                // Higher rank wins; earliest insertion breaks ties.
                Some((cur, cur_rank)) => {
                    rank > cur_rank || (rank == cur_rank && entry.seq < cur.seq)
                }
            };
            if better {
                best = Some((entry, rank));
            }
        }
        Ok(best.map(|(entry, _)| entry))
    }

    /// Resolves packet fields to one canonical-width value per key field,
    /// in schema order.
    fn packet_values(&self, fields: &[PacketField]) -> Result<Vec<u128>, AccessError> {
        let invalid = |reason: String| AccessError::InvalidKey { reason };
        for f in fields {
            if self.schema.key_field(f.field_id).is_none() {
                return Err(invalid(alloc::format!("unknown key field {}", f.field_id)));
            }
        }
        let mut out = Vec::with_capacity(self.schema.key_fields.len());
        for spec in &self.schema.key_fields {
            let mut found = fields.iter().filter(|f| f.field_id == spec.field_id);
            let field = found
                .next()
                .ok_or_else(|| invalid(alloc::format!("missing key field {}", spec.field_id)))?;
            if found.next().is_some() {
                return Err(invalid(alloc::format!("duplicate key field {}", spec.field_id)));
            }
            if field.value.len() != value::width_bytes(spec.bit_width) {
                return Err(invalid(alloc::format!(
                    "field {} expects {} bytes, got {}",
                    spec.field_id,
                    value::width_bytes(spec.bit_width),
                    field.value.len()
                )));
            }
            let v = value::be_to_u128(&field.value).expect("canonical width fits u128");
            if !value::fits(v, spec.bit_width) {
                return Err(invalid(alloc::format!(
                    "field {} value exceeds its {}-bit width",
                    spec.field_id,
                    spec.bit_width
                )));
            }
            out.push(v);
        }
        Ok(out)
    }

    /// Whether `key` covers the packet; on a match, returns the total lpm
    /// prefix length (the longest-prefix rank for tables without ternary
    /// fields).
    fn match_weight(&self, key: &MatchKey, packet: &[u128]) -> Option<u64> {
        let mut prefix_total = 0u64;
        for (field, (spec, pv)) in key.fields.iter().zip(self.schema.key_fields.iter().zip(packet))
        {
            debug_assert_eq!(field.field_id, spec.field_id);
            match &field.value {
                MatchValue::Exact { value } => {
                    if value::be_to_u128(value).unwrap() != *pv {
                        return None;
                    }
                }
                MatchValue::Lpm { value, prefix_len } => {
                    let mask = value::prefix_mask(spec.bit_width, *prefix_len);
                    if pv & mask != value::be_to_u128(value).unwrap() {
                        return None;
                    }
                    prefix_total += u64::from(*prefix_len);
                }
                MatchValue::Ternary { value, mask } => {
                    let m = value::be_to_u128(mask).unwrap();
                    if pv & m != value::be_to_u128(value).unwrap() {
                        return None;
                    }
                }
            }
        }
        Some(prefix_total)
    }
}

/// The collected table state of one program: one store per schema table.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataplane {
    schema: ProgramSchema,
    stores: HashMap<u32, TableStore>,
}

impl Dataplane {
    pub fn new(schema: ProgramSchema) -> Dataplane {
        let stores = schema
            .tables
            .iter()
            .map(|t| (t.table_id, TableStore::new(t.clone())))
            .collect();
        Dataplane { schema, stores }
    }

    pub fn schema(&self) -> &ProgramSchema {
        &self.schema
    }

    pub fn store(&self, table_id: u32) -> Option<&TableStore> {
        self.stores.get(&table_id)
    }

    pub fn occupancy(&self, table_id: u32) -> Result<usize, AccessError> {
        self.stores
            .get(&table_id)
            .map(TableStore::len)
            .ok_or(AccessError::UnknownTable { table_id })
    }

    /// Applies one update, as the non-atomic fold would.
    pub fn apply_update(&mut self, update: &TableUpdate) -> OpStatus {
        apply_one(&mut self.stores, update)
    }

    /// Applies a batch of updates.
    ///
    /// Non-atomic batches apply strictly in order, skipping failed
    /// operations. Atomic batches leave the state untouched unless every
    /// operation succeeds; the per-op statuses still report the outcome
    /// each operation would have had under sequential application.
    pub fn apply_write(&mut self, batch: &WriteBatch) -> WriteReport {
        if batch.atomic {
            let affected: BTreeSet<u32> = batch.updates.iter().map(|u| u.table_id).collect();
            let mut scratch: HashMap<u32, TableStore> = affected
                .iter()
                .filter_map(|id| self.stores.get(id).map(|s| (*id, s.clone())))
                .collect();
            let statuses =
                batch.updates.iter().map(|u| apply_one(&mut scratch, u)).collect();
            let report = WriteReport::from_statuses(true, statuses);
            if report.all_ok() {
                self.stores.extend(scratch);
            }
            report
        } else {
            let statuses =
                batch.updates.iter().map(|u| apply_one(&mut self.stores, u)).collect();
            WriteReport::from_statuses(false, statuses)
        }
    }

    /// Reads one entry (by canonical key) or all entries of a table in
    /// insertion order, shaped as insert updates.
    pub fn read_entries(
        &self,
        table_id: u32,
        key: Option<&MatchKey>,
    ) -> Result<Vec<TableUpdate>, AccessError> {
        let store =
            self.stores.get(&table_id).ok_or(AccessError::UnknownTable { table_id })?;
        let materialize = |key: &MatchKey, entry: &StoredEntry| TableUpdate {
            op: UpdateOp::Insert,
            table_id,
            key: key.clone(),
            action: Some(entry.action.clone()),
        };
        match key {
            Some(key) => {
                let canonical = canonicalize_key(key, &store.schema)
                    .map_err(|e| AccessError::InvalidKey { reason: e.to_string() })?;
                Ok(store.get(&canonical).map(|e| materialize(&canonical, e)).into_iter().collect())
            }
            None => Ok(store
                .entries_in_seq_order()
                .into_iter()
                .map(|(k, e)| materialize(k, e))
                .collect()),
        }
    }

    /// Runs a packet lookup against one table.
    pub fn lookup(
        &self,
        table_id: u32,
        fields: &[PacketField],
    ) -> Result<Option<ActionData>, AccessError> {
        let store =
            self.stores.get(&table_id).ok_or(AccessError::UnknownTable { table_id })?;
        Ok(store.lookup(fields)?.map(|e| e.action.clone()))
    }
}

fn apply_one(stores: &mut HashMap<u32, TableStore>, update: &TableUpdate) -> OpStatus {
    match stores.get_mut(&update.table_id) {
        Some(store) => store.apply(update),
        None => OpStatus::of(
            StatusCode::SchemaMismatch,
            alloc::format!("unknown table id {}", update.table_id),
        ),
    }
}

fn canonical_params(spec: &ActionSpec, action: &ActionData) -> Result<Vec<crate::wire::ActionParam>, String> {
    if action.params.len() != spec.params.len() {
        return Err(alloc::format!(
            "action {:?} expects {} params, got {}",
            spec.name,
            spec.params.len(),
            action.params.len()
        ));
    }
    let mut out = Vec::with_capacity(spec.params.len());
    for (pspec, param) in spec.params.iter().zip(&action.params) {
        if pspec.field_id != param.param_id {
            return Err(alloc::format!(
                "expected param id {}, got {}",
                pspec.field_id,
                param.param_id
            ));
        }
        let v = value::be_to_u128(&param.value)
            .filter(|v| value::fits(*v, pspec.bit_width))
            .ok_or_else(|| {
                alloc::format!(
                    "param {} value exceeds its {}-bit width",
                    pspec.field_id,
                    pspec.bit_width
                )
            })?;
        out.push(crate::wire::ActionParam {
            param_id: param.param_id,
            value: value::u128_to_be(v, value::width_bytes(pspec.bit_width)),
        });
    }
    Ok(out)
}
