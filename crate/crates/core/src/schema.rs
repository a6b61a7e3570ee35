//! Program schema: the declarative description of every table a target
//! exposes, loaded from a JSON document and validated before use.
//!
//! Registers and ports are modeled as special table kinds rather than
//! separate entity APIs, so one table-shaped wire surface configures all
//! of them. A validated schema is immutable and carries a 64-bit digest
//! of its canonical serialization; controller and target compare digests
//! during the session handshake.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::value::MAX_BIT_WIDTH;

/// How a key field matches against packet data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    /// Byte-for-byte equality.
    Exact,
    /// Longest matching prefix wins.
    Lpm,
    /// Value under mask, disambiguated by entry priority.
    Ternary,
}

impl fmt::Display for MatchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatchKind::Exact => f.write_str("exact"),
            MatchKind::Lpm => f.write_str("lpm"),
            MatchKind::Ternary => f.write_str("ternary"),
        }
    }
}

/// What a table models on the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableKind {
    /// An ordinary match-action table.
    MatchAction,
    /// A register array: one exact index field, one single-param action.
    Register,
    /// The port table: one exact port-number field.
    Port,
}

/// A key field or an action parameter.
///
/// Key fields carry a match kind; action parameters do not.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    #[serde(rename = "id")]
    pub field_id: u32,
    pub name: String,
    #[serde(rename = "bits")]
    pub bit_width: u16,
    #[serde(rename = "match", default, skip_serializing_if = "Option::is_none")]
    pub match_kind: Option<MatchKind>,
}

/// One action a table accepts, with its parameter layout.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSpec {
    #[serde(rename = "id")]
    pub action_id: u32,
    pub name: String,
    pub params: Vec<FieldSpec>,
}

/// A single table: identity, capacity, key layout, and actions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSchema {
    #[serde(rename = "id")]
    pub table_id: u32,
    pub name: String,
    pub kind: TableKind,
    pub capacity: u64,
    #[serde(rename = "key")]
    pub key_fields: Vec<FieldSpec>,
    pub actions: Vec<ActionSpec>,
}

impl TableSchema {
    /// Looks up a key field by id.
    pub fn key_field(&self, field_id: u32) -> Option<&FieldSpec> {
        self.key_fields.iter().find(|f| f.field_id == field_id)
    }

    /// Looks up a key field by name.
    pub fn key_field_by_name(&self, name: &str) -> Option<&FieldSpec> {
        self.key_fields.iter().find(|f| f.name == name)
    }

    /// Looks up an action by id.
    pub fn action(&self, action_id: u32) -> Option<&ActionSpec> {
        self.actions.iter().find(|a| a.action_id == action_id)
    }

    /// Looks up an action by name.
    pub fn action_by_name(&self, name: &str) -> Option<&ActionSpec> {
        self.actions.iter().find(|a| a.name == name)
    }

    /// True when any key field is ternary (entries then carry a priority).
    pub fn has_ternary(&self) -> bool {
        self.key_fields.iter().any(|f| f.match_kind == Some(MatchKind::Ternary))
    }

    /// True when any key field is longest-prefix matched.
    pub fn has_lpm(&self) -> bool {
        self.key_fields.iter().any(|f| f.match_kind == Some(MatchKind::Lpm))
    }
}

/// A validated program schema: every table the target exposes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgramSchema {
    #[serde(rename = "program")]
    pub program_name: String,
    pub tables: Vec<TableSchema>,
    /// Digest of the canonical serialization; derived, never part of the
    /// document itself.
    #[serde(skip)]
    pub schema_digest: u64,
}

impl ProgramSchema {
    /// Returns the unique table with the given name, if any.
    pub fn table_by_name(&self, name: &str) -> Option<&TableSchema> {
        self.tables.iter().find(|t| t.name == name)
    }

    /// Returns the table with the given id, if any.
    pub fn table_by_id(&self, table_id: u32) -> Option<&TableSchema> {
        self.tables.iter().find(|t| t.table_id == table_id)
    }
}

/// Schema loading failure.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SchemaError {
    /// The document is not well-formed (syntax, unknown keys, wrong types).
    Malformed(String),
    /// The document parsed but violates a schema invariant. `path` points
    /// at the offending element, e.g. `tables[1].key[0].bits`.
    Invalid { path: String, reason: String },
}

impl fmt::Display for SchemaError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchemaError::Malformed(msg) => write!(f, "malformed schema document: {msg}"),
            SchemaError::Invalid { path, reason } => write!(f, "invalid schema at {path}: {reason}"),
        }
    }
}

impl core::error::Error for SchemaError {}

/// Parses and validates a schema document, computing its digest.
pub fn parse_schema(document: &str) -> Result<ProgramSchema, SchemaError> {
    let mut schema: ProgramSchema =
        serde_json::from_str(document).map_err(|e| SchemaError::Malformed(e.to_string()))?;
    validate(&schema)?;
    schema.schema_digest = compute_digest(&schema);
    Ok(schema)
}

/// Serializes a schema to its canonical document form.
///
/// Canonical means: compact JSON, fields in declaration order, no digest.
/// Parsing the result reproduces the schema, digest included.
pub fn serialize_schema(schema: &ProgramSchema) -> String {
    serde_json::to_string(schema).expect("schema serialization cannot fail")
}

/// 64-bit FNV-1a over the canonical serialization.
///
/// Deterministic by construction: insignificant whitespace and key order
/// in the source document do not survive canonicalization.
pub fn compute_digest(schema: &ProgramSchema) -> u64 {
    fnv1a64(serialize_schema(schema).as_bytes())
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn invalid(path: String, reason: impl fmt::Display) -> SchemaError {
    SchemaError::Invalid { path, reason: reason.to_string() }
}

fn validate(schema: &ProgramSchema) -> Result<(), SchemaError> {
    for (i, table) in schema.tables.iter().enumerate() {
        let tpath = format!("tables[{i}]");
        if table.table_id == 0 {
            return Err(invalid(format!("{tpath}.id"), "table id must be positive"));
        }
        if table.capacity == 0 {
            return Err(invalid(format!("{tpath}.capacity"), "capacity must be positive"));
        }
        if let Some(j) = schema.tables[..i].iter().position(|t| t.table_id == table.table_id) {
            return Err(invalid(
                format!("{tpath}.id"),
                format!("duplicate table id {} (also tables[{j}])", table.table_id),
            ));
        }
        if let Some(j) = schema.tables[..i].iter().position(|t| t.name == table.name) {
            return Err(invalid(
                format!("{tpath}.name"),
                format!("duplicate table name {:?} (also tables[{j}])", table.name),
            ));
        }

        for (k, field) in table.key_fields.iter().enumerate() {
            let fpath = format!("{tpath}.key[{k}]");
            validate_field(field, &fpath)?;
            if field.match_kind.is_none() {
                return Err(invalid(fpath, "key field must declare a match kind"));
            }
            if table.key_fields[..k].iter().any(|f| f.field_id == field.field_id) {
                return Err(invalid(
                    format!("{fpath}.id"),
                    format!("duplicate key field id {}", field.field_id),
                ));
            }
        }

        for (a, action) in table.actions.iter().enumerate() {
            let apath = format!("{tpath}.actions[{a}]");
            if action.action_id == 0 {
                return Err(invalid(format!("{apath}.id"), "action id must be positive"));
            }
            if table.actions[..a].iter().any(|x| x.action_id == action.action_id) {
                return Err(invalid(
                    format!("{apath}.id"),
                    format!("duplicate action id {}", action.action_id),
                ));
            }
            for (p, param) in action.params.iter().enumerate() {
                let ppath = format!("{apath}.params[{p}]");
                validate_field(param, &ppath)?;
                if param.match_kind.is_some() {
                    return Err(invalid(ppath, "action parameter must not declare a match kind"));
                }
                if action.params[..p].iter().any(|x| x.field_id == param.field_id) {
                    return Err(invalid(
                        format!("{ppath}.id"),
                        format!("duplicate parameter id {}", param.field_id),
                    ));
                }
            }
        }

        match table.kind {
            TableKind::MatchAction => {}
            TableKind::Register => {
                let index_ok = table.key_fields.len() == 1
                    && table.key_fields[0].match_kind == Some(MatchKind::Exact);
                if !index_ok {
                    return Err(invalid(
                        format!("{tpath}.key"),
                        "register table requires exactly one exact-match index field",
                    ));
                }
                let write_ok = table.actions.len() == 1 && table.actions[0].params.len() == 1;
                if !write_ok {
                    return Err(invalid(
                        format!("{tpath}.actions"),
                        "register table requires exactly one action with a single value parameter",
                    ));
                }
            }
            TableKind::Port => {
                let port_ok = table.key_fields.len() == 1
                    && table.key_fields[0].match_kind == Some(MatchKind::Exact);
                if !port_ok {
                    return Err(invalid(
                        format!("{tpath}.key"),
                        "port table requires exactly one exact-match port-number field",
                    ));
                }
            }
        }
    }
    Ok(())
}

fn validate_field(field: &FieldSpec, path: &str) -> Result<(), SchemaError> {
    if field.field_id == 0 {
        return Err(invalid(format!("{path}.id"), "field id must be positive"));
    }
    if field.bit_width == 0 || field.bit_width > MAX_BIT_WIDTH {
        return Err(invalid(
            format!("{path}.bits"),
            format!("bit width must be in 1..={MAX_BIT_WIDTH}, got {}", field.bit_width),
        ));
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const FIREWALL_DOC: &str = r#"{
        "program": "firewall",
        "tables": [
            {
                "id": 1,
                "name": "firewall_entries",
                "kind": "match_action",
                "capacity": 100000,
                "key": [
                    { "id": 1, "name": "src_ip", "bits": 32, "match": "exact" },
                    { "id": 2, "name": "dst_ip", "bits": 32, "match": "exact" }
                ],
                "actions": [
                    { "id": 1, "name": "permit", "params": [] },
                    { "id": 2, "name": "deny", "params": [] }
                ]
            }
        ]
    }"#;

    #[test]
    fn parses_firewall_schema() {
        let schema = parse_schema(FIREWALL_DOC).unwrap();
        assert_eq!(schema.program_name, "firewall");
        assert_eq!(schema.tables.len(), 1);
        let table = schema.table_by_name("firewall_entries").unwrap();
        assert_eq!(table.key_fields.len(), 2);
        assert_eq!(table.kind, TableKind::MatchAction);
        assert_eq!(table.capacity, 100_000);
        assert_eq!(table.key_fields[0].name, "src_ip");
        assert_eq!(table.key_fields[0].bit_width, 32);
        assert_eq!(table.key_fields[0].match_kind, Some(MatchKind::Exact));
        assert!(table.action_by_name("permit").is_some());
        assert!(table.action_by_name("deny").is_some());
    }

    #[test]
    fn empty_tables_list_is_valid_and_digest_deterministic() {
        let doc = r#"{ "program": "empty", "tables": [] }"#;
        let a = parse_schema(doc).unwrap();
        let b = parse_schema(doc).unwrap();
        assert_eq!(a.tables.len(), 0);
        assert_ne!(a.schema_digest, 0);
        assert_eq!(a.schema_digest, b.schema_digest);
    }

    #[test]
    fn duplicate_table_id_rejected() {
        let doc = r#"{
            "program": "p",
            "tables": [
                { "id": 7, "name": "a", "kind": "match_action", "capacity": 10, "key": [], "actions": [] },
                { "id": 7, "name": "b", "kind": "match_action", "capacity": 10, "key": [], "actions": [] }
            ]
        }"#;
        let err = parse_schema(doc).unwrap_err();
        match err {
            SchemaError::Invalid { path, reason } => {
                assert_eq!(path, "tables[1].id");
                assert!(reason.contains("duplicate table id 7"), "{reason}");
            }
            other => panic!("expected Invalid, got {other:?}"),
        }
    }

    #[test]
    fn table_by_name_lookup() {
        let schema = parse_schema(FIREWALL_DOC).unwrap();
        assert!(schema.table_by_name("firewall_entries").is_some());
        assert!(schema.table_by_name("nonexistent").is_none());
        let empty = parse_schema(r#"{ "program": "e", "tables": [] }"#).unwrap();
        assert!(empty.table_by_name("anything").is_none());
    }

    #[test]
    fn digest_ignores_insignificant_whitespace() {
        let compact = r#"{"program":"firewall","tables":[{"id":1,"name":"t","kind":"port","capacity":64,"key":[{"id":1,"name":"port","bits":9,"match":"exact"}],"actions":[]}]}"#;
        let spaced = r#"{
            "program": "firewall",
            "tables": [ {
                "id": 1, "name": "t", "kind": "port", "capacity": 64,
                "key": [ { "id": 1, "name": "port", "bits": 9, "match": "exact" } ],
                "actions": [ ]
            } ]
        }"#;
        let a = parse_schema(compact).unwrap();
        let b = parse_schema(spaced).unwrap();
        // Oracle: canonicalize, then hash the canonical bytes directly.
        assert_eq!(a.schema_digest, fnv1a64(serialize_schema(&a).as_bytes()));
        assert_eq!(a.schema_digest, b.schema_digest);
    }

    #[test]
    fn digest_ignores_source_key_order() {
        let a = r#"{ "program": "p", "tables": [
            { "id": 1, "name": "t", "kind": "port", "capacity": 64,
              "key": [ { "id": 1, "name": "port", "bits": 9, "match": "exact" } ],
              "actions": [] } ] }"#;
        let b = r#"{ "tables": [
            { "capacity": 64, "actions": [], "kind": "port", "name": "t", "id": 1,
              "key": [ { "match": "exact", "bits": 9, "name": "port", "id": 1 } ] } ],
            "program": "p" }"#;
        assert_eq!(parse_schema(a).unwrap().schema_digest, parse_schema(b).unwrap().schema_digest);
    }

    #[test]
    fn digest_changes_with_capacity() {
        let a = parse_schema(FIREWALL_DOC).unwrap();
        let b = parse_schema(&FIREWALL_DOC.replace("100000", "100001")).unwrap();
        assert_ne!(a.schema_digest, b.schema_digest);
        // Oracle: the canonical byte strings differ, so FNV-1a must too.
        assert_ne!(
            fnv1a64(serialize_schema(&a).as_bytes()),
            fnv1a64(serialize_schema(&b).as_bytes())
        );
    }

    #[test]
    fn serialize_then_parse_is_identity() {
        let schema = parse_schema(FIREWALL_DOC).unwrap();
        let reparsed = parse_schema(&serialize_schema(&schema)).unwrap();
        assert_eq!(schema, reparsed);
    }

    #[test]
    fn unknown_keys_rejected() {
        let doc = r#"{ "program": "p", "tables": [], "extra": 1 }"#;
        assert!(matches!(parse_schema(doc), Err(SchemaError::Malformed(_))));
    }

    #[test]
    fn syntax_error_is_malformed() {
        assert!(matches!(parse_schema("{ not json"), Err(SchemaError::Malformed(_))));
    }

    #[test]
    fn key_field_without_match_kind_rejected() {
        let doc = r#"{
            "program": "p",
            "tables": [ {
                "id": 1, "name": "t", "kind": "match_action", "capacity": 10,
                "key": [ { "id": 1, "name": "f", "bits": 8 } ],
                "actions": []
            } ]
        }"#;
        let err = parse_schema(doc).unwrap_err();
        match err {
            SchemaError::Invalid { path, reason } => {
                assert_eq!(path, "tables[0].key[0]");
                assert!(reason.contains("match kind"));
            }
            other => panic!("expected Invalid, got {other:?}"),
        }
    }

    #[test]
    fn oversized_bit_width_rejected() {
        let doc = r#"{
            "program": "p",
            "tables": [ {
                "id": 1, "name": "t", "kind": "match_action", "capacity": 10,
                "key": [ { "id": 1, "name": "f", "bits": 129, "match": "exact" } ],
                "actions": []
            } ]
        }"#;
        let err = parse_schema(doc).unwrap_err();
        assert!(matches!(err, SchemaError::Invalid { ref path, .. } if path == "tables[0].key[0].bits"));
    }

    #[test]
    fn register_shape_enforced() {
        let bad = r#"{
            "program": "p",
            "tables": [ {
                "id": 1, "name": "r", "kind": "register", "capacity": 16,
                "key": [ { "id": 1, "name": "index", "bits": 8, "match": "exact" } ],
                "actions": [ { "id": 1, "name": "write", "params": [] } ]
            } ]
        }"#;
        let err = parse_schema(bad).unwrap_err();
        assert!(matches!(err, SchemaError::Invalid { ref path, .. } if path == "tables[0].actions"));

        let good = r#"{
            "program": "p",
            "tables": [ {
                "id": 1, "name": "r", "kind": "register", "capacity": 16,
                "key": [ { "id": 1, "name": "index", "bits": 8, "match": "exact" } ],
                "actions": [ { "id": 1, "name": "write", "params": [ { "id": 1, "name": "value", "bits": 32 } ] } ]
            } ]
        }"#;
        assert!(parse_schema(good).is_ok());
    }

    #[test]
    fn param_with_match_kind_rejected() {
        let doc = r#"{
            "program": "p",
            "tables": [ {
                "id": 1, "name": "t", "kind": "match_action", "capacity": 10,
                "key": [],
                "actions": [ { "id": 1, "name": "a", "params": [ { "id": 1, "name": "x", "bits": 8, "match": "exact" } ] } ]
            } ]
        }"#;
        let err = parse_schema(doc).unwrap_err();
        assert!(matches!(err, SchemaError::Invalid { ref path, .. } if path == "tables[0].actions[0].params[0]"));
    }
}
