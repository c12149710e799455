//! Case files and report serialization.
//!
//! The native case format is JSON (schema version 1):
//!
//! ```json
//! {
//!   "version": 1,
//!   "name": "optional",
//!   "buses": [
//!     {"id": 1, "kind": "generator", "generation": 1.0, "d_lower": -1.0, "d_upper": 0.5,
//!      "damping": 1.0, "cost": 1.0, "area": 1},
//!     {"id": 2, "kind": "load", "demand": 1.0}
//!   ],
//!   "lines": [
//!     {"id": 1, "from": 1, "to": 2, "susceptance": 10.0, "limit": 2.0}
//!   ],
//!   "switch_off": [3]
//! }
//! ```
//!
//! Bus fields `demand`, `generation`, `d_lower`, `d_upper`, `damping`,
//! `inertia` default to 0 and `cost` to 1; `area` is optional. Lines default
//! to in service; a missing `limit` means unlimited. Base flows are either
//! given for every line (`base_flow`) or computed from the injections.
//! All quantities are per-unit.
//!
//! The MATPOWER importer understands `mpc.baseMVA`, `mpc.bus`, `mpc.gen` and
//! `mpc.branch` and skips every other assignment with a warning.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::cascade::CascadeTrace;
use crate::dcflow::{build_with_dc_flows, FlowError};
use crate::netmodel::{BusKind, BusRecord, LineId, LineRecord, Network, NetworkError};
use crate::studies::{CellReport, StudyReport};

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IoError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    SyntaxError { line: usize, column: usize, message: String },
    #[error("schema violation at {path}: {reason}")]
    SchemaViolation { path: String, reason: String },
    #[error("unsupported case version {0} (expected {SCHEMA_VERSION})")]
    VersionUnsupported(u64),
    #[error("unsupported field {field} at line {line}: {reason}")]
    UnsupportedField { line: usize, field: String, reason: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Flow(#[from] FlowError),
}

impl IoError {
    /// Whether the error concerns the file itself rather than the network it
    /// describes.
    pub fn is_parse_error(&self) -> bool {
        !matches!(self, IoError::Network(_) | IoError::Flow(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseBus {
    pub id: u32,
    pub kind: BusKind,
    pub demand: f64,
    pub generation: f64,
    pub d_lower: f64,
    pub d_upper: f64,
    pub damping: f64,
    pub inertia: f64,
    pub cost: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub area: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseLine {
    pub id: u32,
    pub from: u32,
    pub to: u32,
    pub susceptance: f64,
    /// `None` for unlimited.
    pub limit: Option<f64>,
    pub in_service: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_flow: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseDocument {
    pub version: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub buses: Vec<CaseBus>,
    pub lines: Vec<CaseLine>,
    pub switch_off: Vec<u32>,
}

impl CaseDocument {
    pub fn to_network(&self) -> Result<Network, IoError> {
        let buses: Vec<BusRecord> = self
            .buses
            .iter()
            .map(|b| {
                let mut r = BusRecord::new(b.id, b.kind)
                    .with_injection(b.generation - b.demand)
                    .with_bounds(b.d_lower, b.d_upper)
                    .with_damping(b.damping)
                    .with_cost(b.cost);
                r.inertia = b.inertia;
                r.area = b.area;
                r
            })
            .collect();
        let lines: Vec<LineRecord> = self
            .lines
            .iter()
            .map(|l| {
                let mut r = LineRecord::new(l.id, l.from, l.to, l.susceptance, l.limit.unwrap_or(f64::INFINITY))
                    .with_base_flow(l.base_flow.unwrap_or(0.0));
                r.in_service = l.in_service;
                r
            })
            .collect();
        if self.lines.iter().all(|l| l.base_flow.is_some()) && !self.lines.is_empty() {
            Ok(Network::build(buses, lines)?)
        } else {
            Ok(build_with_dc_flows(buses, lines)?)
        }
    }

    /// Document describing `net`, base flows included.
    pub fn from_network(net: &Network, name: Option<String>, switch_off: &[LineId]) -> Self {
        let buses = net
            .buses()
            .iter()
            .map(|b| CaseBus {
                id: b.id.0,
                kind: b.kind,
                demand: (-b.injection).max(0.0),
                generation: b.injection.max(0.0),
                d_lower: b.d_lower,
                d_upper: b.d_upper,
                damping: b.damping,
                inertia: b.inertia,
                cost: b.cost,
                area: b.area,
            })
            .collect();
        let lines = net
            .lines()
            .iter()
            .map(|l| CaseLine {
                id: l.id.0,
                from: l.from.0,
                to: l.to.0,
                susceptance: l.susceptance,
                limit: l.limit.is_finite().then_some(l.limit),
                in_service: l.in_service,
                base_flow: Some(l.base_flow),
            })
            .collect();
        Self {
            version: SCHEMA_VERSION,
            name,
            buses,
            lines,
            switch_off: switch_off.iter().map(|l| l.0).collect(),
        }
    }

    pub fn switch_off_ids(&self) -> Vec<LineId> {
        self.switch_off.iter().map(|&i| LineId(i)).collect()
    }
}

/// A parsed document and the warnings raised in lenient mode.
#[derive(Clone, Debug, PartialEq)]
pub struct Parsed {
    pub doc: CaseDocument,
    pub warnings: Vec<String>,
}

/// Strict parse: unknown fields are errors.
pub fn parse_case_json(bytes: &[u8]) -> Result<CaseDocument, IoError> {
    parse_case_json_with(bytes, true).map(|p| p.doc)
}

/// Parses a native case. With `strict = false` unknown fields only produce
/// warnings.
pub fn parse_case_json_with(bytes: &[u8], strict: bool) -> Result<Parsed, IoError> {
    let value: Value = serde_json::from_slice(bytes).map_err(|e| IoError::SyntaxError {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let mut w = Walker { strict, warnings: Vec::new() };
    let doc = w.document(&value)?;
    Ok(Parsed { doc, warnings: w.warnings })
}

fn violation(path: &str, reason: impl Into<String>) -> IoError {
    IoError::SchemaViolation { path: path.to_string(), reason: reason.into() }
}

struct Walker {
    strict: bool,
    warnings: Vec<String>,
}

impl Walker {
    fn object<'a>(
        &mut self,
        v: &'a Value,
        path: &str,
        known: &[&str],
    ) -> Result<&'a serde_json::Map<String, Value>, IoError> {
        let obj = v.as_object().ok_or_else(|| violation(path, "expected an object"))?;
        for key in obj.keys() {
            if !known.contains(&key.as_str()) {
                let at = if path.is_empty() { key.clone() } else { format!("{path}.{key}") };
                if self.strict {
                    return Err(violation(&at, "unknown field"));
                }
                self.warnings.push(format!("unknown field {at}"));
            }
        }
        Ok(obj)
    }

    fn document(&mut self, v: &Value) -> Result<CaseDocument, IoError> {
        let obj = self.object(v, "", &["version", "name", "buses", "lines", "switch_off"])?;
        let version = match obj.get("version") {
            None => return Err(violation("version", "missing")),
            Some(x) => x.as_u64().ok_or_else(|| violation("version", "expected a non-negative integer"))?,
        };
        if version != SCHEMA_VERSION {
            return Err(IoError::VersionUnsupported(version));
        }
        let name = match obj.get("name") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(violation("name", "expected a string")),
        };
        let buses = array(obj, "buses", "buses")?
            .iter()
            .enumerate()
            .map(|(i, b)| self.bus(b, &format!("buses[{i}]")))
            .collect::<Result<Vec<_>, _>>()?;
        let lines = array(obj, "lines", "lines")?
            .iter()
            .enumerate()
            .map(|(i, l)| self.line(l, &format!("lines[{i}]")))
            .collect::<Result<Vec<_>, _>>()?;
        let switch_off = match obj.get("switch_off") {
            None => Vec::new(),
            Some(_) => array(obj, "switch_off", "switch_off")?
                .iter()
                .enumerate()
                .map(|(i, x)| id_value(x, &format!("switch_off[{i}]")))
                .collect::<Result<Vec<_>, _>>()?,
        };
        let doc = CaseDocument { version, name, buses, lines, switch_off };
        cross_check(&doc)?;
        Ok(doc)
    }

    fn bus(&mut self, v: &Value, path: &str) -> Result<CaseBus, IoError> {
        let obj = self.object(
            v,
            path,
            &["id", "kind", "demand", "generation", "d_lower", "d_upper", "damping", "inertia", "cost", "area"],
        )?;
        let kind = match obj.get("kind") {
            None => return Err(violation(&format!("{path}.kind"), "missing")),
            Some(k) => serde_json::from_value::<BusKind>(k.clone())
                .map_err(|_| violation(&format!("{path}.kind"), "expected generator, load or passive"))?,
        };
        let bus = CaseBus {
            id: required_id(obj, path, "id")?,
            kind,
            demand: number(obj, path, "demand", 0.0)?,
            generation: number(obj, path, "generation", 0.0)?,
            d_lower: number(obj, path, "d_lower", 0.0)?,
            d_upper: number(obj, path, "d_upper", 0.0)?,
            damping: number(obj, path, "damping", 0.0)?,
            inertia: number(obj, path, "inertia", 0.0)?,
            cost: number(obj, path, "cost", 1.0)?,
            area: match obj.get("area") {
                None | Some(Value::Null) => None,
                Some(x) => Some(id_value(x, &format!("{path}.area"))?),
            },
        };
        let at = |f: &str| format!("{path}.{f}");
        if bus.demand < 0.0 {
            return Err(violation(&at("demand"), "must be non-negative"));
        }
        if bus.generation < 0.0 {
            return Err(violation(&at("generation"), "must be non-negative"));
        }
        if bus.d_lower > 0.0 {
            return Err(violation(&at("d_lower"), "must be at most zero"));
        }
        if bus.d_upper < 0.0 {
            return Err(violation(&at("d_upper"), "must be at least zero"));
        }
        if bus.damping < 0.0 {
            return Err(violation(&at("damping"), "must be non-negative"));
        }
        if bus.inertia < 0.0 {
            return Err(violation(&at("inertia"), "must be non-negative"));
        }
        if bus.cost <= 0.0 {
            return Err(violation(&at("cost"), "must be positive"));
        }
        Ok(bus)
    }

    fn line(&mut self, v: &Value, path: &str) -> Result<CaseLine, IoError> {
        let obj = self.object(v, path, &["id", "from", "to", "susceptance", "limit", "in_service", "base_flow"])?;
        let susceptance = match obj.get("susceptance") {
            None => return Err(violation(&format!("{path}.susceptance"), "missing")),
            Some(_) => number(obj, path, "susceptance", 0.0)?,
        };
        if susceptance <= 0.0 {
            return Err(violation(&format!("{path}.susceptance"), "must be positive"));
        }
        let limit = match obj.get("limit") {
            None | Some(Value::Null) => None,
            Some(_) => Some(number(obj, path, "limit", 0.0)?),
        };
        if limit.is_some_and(|l| l < 0.0) {
            return Err(violation(&format!("{path}.limit"), "must be non-negative"));
        }
        let in_service = match obj.get("in_service") {
            None => true,
            Some(Value::Bool(b)) => *b,
            Some(_) => return Err(violation(&format!("{path}.in_service"), "expected a boolean")),
        };
        let base_flow = match obj.get("base_flow") {
            None | Some(Value::Null) => None,
            Some(_) => Some(number(obj, path, "base_flow", 0.0)?),
        };
        Ok(CaseLine {
            id: required_id(obj, path, "id")?,
            from: required_id(obj, path, "from")?,
            to: required_id(obj, path, "to")?,
            susceptance,
            limit,
            in_service,
            base_flow,
        })
    }
}

fn array<'a>(obj: &'a serde_json::Map<String, Value>, key: &str, path: &str) -> Result<&'a Vec<Value>, IoError> {
    obj.get(key)
        .ok_or_else(|| violation(path, "missing"))?
        .as_array()
        .ok_or_else(|| violation(path, "expected an array"))
}

fn number(obj: &serde_json::Map<String, Value>, path: &str, key: &str, default: f64) -> Result<f64, IoError> {
    match obj.get(key) {
        None => Ok(default),
        Some(v) => v
            .as_f64()
            .filter(|x| x.is_finite())
            .ok_or_else(|| violation(&format!("{path}.{key}"), "expected a finite number")),
    }
}

fn id_value(v: &Value, path: &str) -> Result<u32, IoError> {
    v.as_u64()
        .and_then(|x| u32::try_from(x).ok())
        .ok_or_else(|| violation(path, "expected a non-negative 32-bit integer"))
}

fn required_id(obj: &serde_json::Map<String, Value>, path: &str, key: &str) -> Result<u32, IoError> {
    let at = format!("{path}.{key}");
    id_value(obj.get(key).ok_or_else(|| violation(&at, "missing"))?, &at)
}

fn cross_check(doc: &CaseDocument) -> Result<(), IoError> {
    let mut bus_ids = BTreeSet::new();
    for (i, b) in doc.buses.iter().enumerate() {
        if !bus_ids.insert(b.id) {
            return Err(violation(&format!("buses[{i}].id"), format!("duplicate bus id {}", b.id)));
        }
    }
    let mut line_ids = BTreeSet::new();
    for (i, l) in doc.lines.iter().enumerate() {
        if !line_ids.insert(l.id) {
            return Err(violation(&format!("lines[{i}].id"), format!("duplicate line id {}", l.id)));
        }
        for (end, id) in [("from", l.from), ("to", l.to)] {
            if !bus_ids.contains(&id) {
                return Err(violation(&format!("lines[{i}].{end}"), format!("unknown bus {id}")));
            }
        }
        if l.from == l.to {
            return Err(violation(&format!("lines[{i}].to"), "line connects a bus to itself"));
        }
    }
    let with_flow = doc.lines.iter().filter(|l| l.base_flow.is_some()).count();
    if with_flow != 0 && with_flow != doc.lines.len() {
        let i = doc.lines.iter().position(|l| l.base_flow.is_none()).unwrap_or(0);
        return Err(violation(&format!("lines[{i}].base_flow"), "base flows must be given for all lines or none"));
    }
    for (i, id) in doc.switch_off.iter().enumerate() {
        if !line_ids.contains(id) {
            return Err(violation(&format!("switch_off[{i}]"), format!("unknown line {id}")));
        }
    }
    Ok(())
}

/// Pretty JSON for a case document.
pub fn emit_case_json(doc: &CaseDocument) -> String {
    to_json(doc, true)
}

/// Imports the bus, gen and branch tables of a MATPOWER case.
///
/// Branch susceptance is `1 / (x · tap)` (tap 0 read as 1), limits are
/// `rateA / baseMVA` (0 means unlimited), and powers are divided by
/// `baseMVA`. Buses with in-service generators become generator buses whose
/// range is `[Pmin, Pmax]` around the total dispatch; dispatch is rescaled
/// per island so that generation matches demand. A nonzero phase shift is
/// rejected.
pub fn parse_case_matpower_subset(bytes: &[u8]) -> Result<Parsed, IoError> {
    let text = std::str::from_utf8(bytes).map_err(|e| IoError::SyntaxError {
        line: 1,
        column: e.valid_up_to() + 1,
        message: "not valid UTF-8".into(),
    })?;
    let mut warnings = Vec::new();
    let mut base_mva = 100.0;
    let mut tables: BTreeMap<&str, (usize, Vec<Vec<f64>>)> = BTreeMap::new();

    let lines: Vec<&str> = text.lines().collect();
    let mut i = 0;
    while i < lines.len() {
        let line_no = i + 1;
        let raw = strip_comment(lines[i]);
        i += 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with("function") {
            continue;
        }
        let Some((lhs, rhs)) = t.split_once('=') else {
            continue;
        };
        let lhs = lhs.trim();
        let Some(field) = lhs.strip_prefix("mpc.") else {
            warnings.push(format!("line {line_no}: skipping `{lhs}`"));
            continue;
        };
        let rhs = rhs.trim();
        if !rhs.starts_with('[') {
            if field == "baseMVA" {
                base_mva = parse_number(rhs.trim_end_matches(';').trim(), line_no, 1)?;
                if !(base_mva > 0.0) {
                    return Err(IoError::SyntaxError { line: line_no, column: 1, message: "baseMVA must be positive".into() });
                }
            } else if field != "version" {
                warnings.push(format!("line {line_no}: skipping mpc.{field}"));
            }
            continue;
        }
        // collect the bracketed block
        let mut body = String::from(&rhs[1..]);
        let mut rows_at = vec![line_no];
        while !body.contains(']') {
            if i >= lines.len() {
                return Err(IoError::SyntaxError { line: line_no, column: 1, message: format!("unterminated matrix mpc.{field}") });
            }
            body.push('\n');
            body.push_str(strip_comment(lines[i]));
            rows_at.push(i + 1);
            i += 1;
        }
        let body = &body[..body.find(']').unwrap_or(body.len())];
        if !matches!(field, "bus" | "gen" | "branch") {
            warnings.push(format!("line {line_no}: skipping mpc.{field}"));
            continue;
        }
        let mut rows = Vec::new();
        for (offset, physical) in body.split('\n').enumerate() {
            let at = rows_at.get(offset).copied().unwrap_or(line_no);
            for row in physical.split(';') {
                let cells: Vec<&str> = row.split(|c: char| c.is_whitespace() || c == ',').filter(|s| !s.is_empty()).collect();
                if cells.is_empty() {
                    continue;
                }
                let vals = cells
                    .iter()
                    .enumerate()
                    .map(|(c, s)| parse_number(s, at, c + 1))
                    .collect::<Result<Vec<_>, _>>()?;
                rows.push(vals);
            }
        }
        tables.insert(field, (line_no, rows));
    }

    let need = |name: &str| {
        tables.get(name).cloned().ok_or_else(|| IoError::SchemaViolation {
            path: format!("mpc.{name}"),
            reason: "missing table".into(),
        })
    };
    let (bus_line, bus_rows) = need("bus")?;
    let (gen_line, gen_rows) = tables.get("gen").cloned().unwrap_or((0, Vec::new()));
    let (branch_line, branch_rows) = need("branch")?;
    let width = |rows: &[Vec<f64>], min: usize, line: usize, name: &str| {
        match rows.iter().position(|r| r.len() < min) {
            Some(r) => Err(IoError::SchemaViolation {
                path: format!("mpc.{name}[{r}]"),
                reason: format!("expected at least {min} columns (table starts at line {line})"),
            }),
            None => Ok(()),
        }
    };
    width(&bus_rows, 3, bus_line, "bus")?;
    width(&gen_rows, 10, gen_line, "gen")?;
    width(&branch_rows, 11, branch_line, "branch")?;

    let as_id = |v: f64, path: String| -> Result<u32, IoError> {
        if v >= 0.0 && v.fract() == 0.0 && v <= u32::MAX as f64 {
            Ok(v as u32)
        } else {
            Err(IoError::SchemaViolation { path, reason: "expected a bus number".into() })
        }
    };

    let mut buses: Vec<CaseBus> = Vec::with_capacity(bus_rows.len());
    let mut pos = BTreeMap::new();
    for (r, row) in bus_rows.iter().enumerate() {
        let id = as_id(row[0], format!("mpc.bus[{r}]"))?;
        pos.insert(id, buses.len());
        let pd = row[2] / base_mva;
        let area = row.get(6).map(|&a| a as u32);
        buses.push(CaseBus {
            id,
            kind: if pd > 0.0 { BusKind::Load } else { BusKind::Passive },
            demand: pd.max(0.0),
            generation: (-pd).max(0.0),
            d_lower: 0.0,
            d_upper: 0.0,
            damping: 0.0,
            inertia: 0.0,
            cost: 1.0,
            area,
        });
        if row.get(4).is_some_and(|g| *g != 0.0) {
            warnings.push(format!("bus {id}: shunt conductance ignored"));
        }
    }
    // generation per bus: (dispatch, pmin, pmax)
    let mut gen: BTreeMap<usize, (f64, f64, f64)> = BTreeMap::new();
    for (r, row) in gen_rows.iter().enumerate() {
        let id = as_id(row[0], format!("mpc.gen[{r}]"))?;
        let &j = pos.get(&id).ok_or_else(|| IoError::SchemaViolation {
            path: format!("mpc.gen[{r}]"),
            reason: format!("unknown bus {id}"),
        })?;
        if row[7] <= 0.0 {
            continue;
        }
        let e = gen.entry(j).or_insert((0.0, 0.0, 0.0));
        e.0 += row[1] / base_mva;
        e.2 += row[8] / base_mva;
        e.1 += row[9].max(0.0) / base_mva;
    }

    let mut lines = Vec::with_capacity(branch_rows.len());
    for (r, row) in branch_rows.iter().enumerate() {
        let at = branch_line + 1 + r;
        let from = as_id(row[0], format!("mpc.branch[{r}]"))?;
        let to = as_id(row[1], format!("mpc.branch[{r}]"))?;
        for b in [from, to] {
            if !pos.contains_key(&b) {
                return Err(IoError::SchemaViolation { path: format!("mpc.branch[{r}]"), reason: format!("unknown bus {b}") });
            }
        }
        let x = row[3];
        let tap = if row[8] == 0.0 { 1.0 } else { row[8] };
        if row[9] != 0.0 {
            return Err(IoError::UnsupportedField { line: at, field: "angle".into(), reason: "phase shifters are not supported".into() });
        }
        if !(x * tap > 0.0) {
            return Err(IoError::UnsupportedField { line: at, field: "x".into(), reason: "reactance must be positive".into() });
        }
        lines.push(CaseLine {
            id: r as u32 + 1,
            from,
            to,
            susceptance: 1.0 / (x * tap),
            limit: (row[5] > 0.0).then_some(row[5] / base_mva),
            in_service: row[10] > 0.0,
            base_flow: None,
        });
    }

    // balance generation per island
    let mut doc = CaseDocument { version: SCHEMA_VERSION, name: None, buses, lines, switch_off: Vec::new() };
    let comps = island_labels(&doc, &pos);
    let k = comps.iter().copied().max().map_or(0, |c| c + 1);
    let mut demand = vec![0.0; k];
    let mut supply = vec![0.0; k];
    for (j, b) in doc.buses.iter().enumerate() {
        demand[comps[j]] += b.demand - b.generation;
    }
    for (&j, g) in &gen {
        supply[comps[j]] += g.0;
    }
    for c in 0..k {
        if demand[c].abs() > 1e-12 && supply[c] <= 0.0 {
            return Err(IoError::SchemaViolation {
                path: "mpc.gen".into(),
                reason: format!("island {c} has demand {:.6} but no dispatched generation", demand[c]),
            });
        }
    }
    for c in 0..k {
        if supply[c] > 0.0 && (demand[c] / supply[c] - 1.0).abs() > 1e-9 {
            let bus = doc.buses[comps.iter().position(|&x| x == c).unwrap_or(0)].id;
            warnings.push(format!("island of bus {bus}: dispatch rescaled by {:.6}", demand[c] / supply[c]));
        }
    }
    for (&j, &(pg, pmin, pmax)) in &gen {
        let c = comps[j];
        let scale = if supply[c] > 0.0 { demand[c] / supply[c] } else { 0.0 };
        let p = pg * scale;
        let b = &mut doc.buses[j];
        let net = p + b.generation - b.demand;
        b.kind = BusKind::Generator;
        b.generation = net.max(0.0);
        b.demand = (-net).max(0.0);
        b.d_lower = (pmin - p).min(0.0);
        b.d_upper = (pmax - p).max(0.0);
        b.damping = 1.0;
    }
    Ok(Parsed { doc, warnings })
}

fn strip_comment(line: &str) -> &str {
    line.split('%').next().unwrap_or("")
}

fn parse_number(s: &str, line: usize, column: usize) -> Result<f64, IoError> {
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| IoError::SyntaxError { line, column, message: format!("expected a number, found `{s}`") })
}

fn island_labels(doc: &CaseDocument, pos: &BTreeMap<u32, usize>) -> Vec<usize> {
    let n = doc.buses.len();
    let mut adj = vec![Vec::new(); n];
    for l in doc.lines.iter().filter(|l| l.in_service) {
        let (a, b) = (pos[&l.from], pos[&l.to]);
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    for s in 0..n {
        if label[s] != usize::MAX {
            continue;
        }
        label[s] = next;
        let mut stack = vec![s];
        while let Some(a) = stack.pop() {
            for &b in &adj[a] {
                if label[b] == usize::MAX {
                    label[b] = next;
                    stack.push(b);
                }
            }
        }
        next += 1;
    }
    label
}

/// Rounds to 9 significant digits.
pub fn round_sig(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.8e}").parse().unwrap_or(x)
}

/// JSON number formatting with 9 significant digits.
struct SigFormatter {
    pretty: serde_json::ser::PrettyFormatter<'static>,
    indent: bool,
}

impl serde_json::ser::Formatter for SigFormatter {
    fn write_f64<W: ?Sized + io::Write>(&mut self, w: &mut W, value: f64) -> io::Result<()> {
        write!(w, "{:?}", round_sig(value))
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        if self.indent { self.pretty.begin_array(w) } else { w.write_all(b"[") }
    }
    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        if self.indent { self.pretty.end_array(w) } else { w.write_all(b"]") }
    }
    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        if self.indent {
            self.pretty.begin_array_value(w, first)
        } else if first {
            Ok(())
        } else {
            w.write_all(b",")
        }
    }
    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        if self.indent { self.pretty.end_array_value(w) } else { Ok(()) }
    }
    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        if self.indent { self.pretty.begin_object(w) } else { w.write_all(b"{") }
    }
    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        if self.indent { self.pretty.end_object(w) } else { w.write_all(b"}") }
    }
    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        if self.indent {
            self.pretty.begin_object_key(w, first)
        } else if first {
            Ok(())
        } else {
            w.write_all(b",")
        }
    }
    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        if self.indent { self.pretty.begin_object_value(w) } else { w.write_all(b":") }
    }
    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        if self.indent { self.pretty.end_object_value(w) } else { Ok(()) }
    }
}

fn to_json<T: Serialize>(value: &T, pretty: bool) -> String {
    let mut buf = Vec::new();
    let fmt = SigFormatter { pretty: serde_json::ser::PrettyFormatter::with_indent(b"  "), indent: pretty };
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, fmt);
    value.serialize(&mut ser).expect("serializing plain data cannot fail");
    String::from_utf8(buf).expect("serde_json writes UTF-8")
}

fn num(x: f64) -> String {
    let v = round_sig(x);
    if v.is_finite() { format!("{v:?}") } else { String::new() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    /// The per-cell summary table.
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(format!("unknown report format `{s}` (expected json or csv)")),
        }
    }
}

pub fn emit_report(report: &StudyReport, format: ReportFormat) -> Vec<u8> {
    match format {
        ReportFormat::Json => {
            let mut s = to_json(report, true);
            s.push('\n');
            s.into_bytes()
        }
        ReportFormat::Csv => cells_csv(&report.cells).into_bytes(),
    }
}

pub fn cells_csv(cells: &[CellReport]) -> String {
    let mut out = String::from(
        "controller,k,alpha,scenarios,errors,vulnerable,multi_stage,with_loss,vulnerable_avg,vulnerable_min,vulnerable_max,llr_avg,llr_max,areas,one_area,multiple_areas,all_areas\n",
    );
    for c in cells {
        let a = &c.area_involvement;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            c.controller,
            c.k,
            num(c.alpha),
            c.scenarios,
            c.errors,
            c.vulnerable,
            c.multi_stage,
            c.with_loss,
            num(c.vulnerable_fraction.avg),
            num(c.vulnerable_fraction.min),
            num(c.vulnerable_fraction.max),
            num(c.llr_avg),
            num(c.llr_max),
            a.areas,
            a.one,
            a.multiple,
            a.all
        );
    }
    out
}

/// Two-column CCDF table.
pub fn ccdf_csv(header: &str, points: &[(f64, f64)]) -> String {
    let mut out = format!("{header},ccdf\n");
    for (x, p) in points {
        let _ = writeln!(out, "{},{}", num(*x), num(*p));
    }
    out
}

pub fn records_csv(report: &StudyReport) -> String {
    let mut out = String::from(
        "profile,k,alpha,controller,failure,stages,lifts,shed,llr,adjusted,associated_areas,involved_areas,vulnerable,error\n",
    );
    for r in &report.records {
        let failure: Vec<String> = r.failure.iter().map(|l| l.to_string()).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.profile,
            r.k,
            num(r.alpha),
            r.controller,
            failure.join(" "),
            r.stages,
            r.lifts,
            num(r.shed),
            num(r.llr),
            r.adjusted,
            r.associated_areas,
            r.involved_areas,
            r.vulnerable,
            r.error.as_deref().unwrap_or("").replace(',', ";")
        );
    }
    out
}

#[derive(Serialize)]
struct TraceSummary<'a> {
    record: &'static str,
    controller: crate::equilibria::Controller,
    initial: &'a [LineId],
    policy: &'a Option<String>,
    termination: crate::cascade::Termination,
    stages: usize,
    lifts: usize,
    total_shed: f64,
    total_demand: f64,
    llr: f64,
    adjusted: &'a [crate::netmodel::BusId],
    associated_areas: &'a [usize],
    involved_areas: &'a [usize],
}

#[derive(Serialize)]
struct StageLine<'a> {
    record: &'static str,
    #[serde(flatten)]
    stage: &'a crate::cascade::StageRecord,
}

/// One JSON object per line: every stage, then a summary record.
pub fn emit_trace_jsonl(trace: &CascadeTrace) -> String {
    let mut out = String::new();
    for s in &trace.stages {
        out.push_str(&to_json(&StageLine { record: "stage", stage: s }, false));
        out.push('\n');
    }
    let summary = TraceSummary {
        record: "summary",
        controller: trace.controller,
        initial: &trace.initial,
        policy: &trace.policy,
        termination: trace.termination,
        stages: trace.stages.len(),
        lifts: trace.lift_count(),
        total_shed: trace.total_shed,
        total_demand: trace.total_demand,
        llr: trace.llr,
        adjusted: &trace.adjusted,
        associated_areas: &trace.associated_areas,
        involved_areas: &trace.involved_areas,
    };
    out.push_str(&to_json(&summary, false));
    out.push('\n');
    out
}

/// Compact JSON with 9 significant digits.
pub fn to_json_compact<T: Serialize>(value: &T) -> String {
    to_json(value, false)
}

/// Pretty JSON with 9 significant digits.
pub fn to_json_pretty<T: Serialize>(value: &T) -> String {
    to_json(value, true)
}
