//! JSON network documents.
//!
//! ```json
//! {"version": 1, "recurrent": false, "unroll_steps": 1,
//!  "units": [{"id": 0, "role": "input", "activation": {"kind": "bilu", "a": 1, "b": 1}}, ...],
//!  "edges": [{"from": 0, "to": 2, "weight": 5.0000000000000000e-1}, ...]}
//! ```
//!
//! Floating-point values are written with 17 significant digits, which is
//! enough for every binary64 value to survive a round trip bit for bit.

use std::io;

use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};
use serde_json::Value;

use super::{Edge, Network, Role, Unit, UnitId};
use crate::activations::ActivationSpec;
use crate::error::{Error, Result};

pub const DOCUMENT_VERSION: u32 = 1;

#[derive(Serialize)]
struct DocumentOut<'a> {
    version: u32,
    recurrent: bool,
    unroll_steps: usize,
    units: &'a [Unit],
    edges: &'a [Edge],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct UnitIn {
    id: UnitId,
    role: Role,
    activation: ActivationSpec,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeIn {
    from: UnitId,
    to: UnitId,
    weight: f64,
}

/// Pretty printer that writes every `f64` as `d.dddddddddddddddde±x`.
struct FullPrecision<'a>(PrettyFormatter<'a>);

impl Formatter for FullPrecision<'_> {
    fn write_f64<W: ?Sized + io::Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        write!(writer, "{value:.16e}")
    }

    fn begin_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_array(w)
    }

    fn end_array<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array(w)
    }

    fn begin_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object(w)
    }

    fn end_object<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object(w)
    }

    fn begin_object_key<W: ?Sized + io::Write>(&mut self, w: &mut W, first: bool) -> io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.begin_object_value(w)
    }

    fn end_object_value<W: ?Sized + io::Write>(&mut self, w: &mut W) -> io::Result<()> {
        self.0.end_object_value(w)
    }
}

pub fn serialize(net: &Network) -> Result<String> {
    let doc = DocumentOut {
        version: DOCUMENT_VERSION,
        recurrent: net.recurrent(),
        unroll_steps: net.unroll_steps(),
        units: net.units(),
        edges: net.edges(),
    };
    let mut buf = Vec::new();
    let mut ser =
        serde_json::Serializer::with_formatter(&mut buf, FullPrecision(PrettyFormatter::new()));
    doc.serialize(&mut ser)
        .map_err(|e| Error::Document(e.to_string()))?;
    buf.push(b'\n');
    String::from_utf8(buf).map_err(|e| Error::Document(e.to_string()))
}

fn field<'a>(obj: &'a serde_json::Map<String, Value>, name: &str) -> Result<&'a Value> {
    obj.get(name)
        .ok_or_else(|| Error::Document(format!("missing top-level field '{name}'")))
}

pub fn deserialize(text: &str) -> Result<Network> {
    let root: Value = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    let obj = root
        .as_object()
        .ok_or_else(|| Error::Document("document must be a JSON object".into()))?;

    let version = field(obj, "version")?
        .as_u64()
        .ok_or_else(|| Error::Document("'version' must be an unsigned integer".into()))?;
    if version != u64::from(DOCUMENT_VERSION) {
        return Err(Error::Document(format!("unsupported document version {version}")));
    }
    let recurrent = field(obj, "recurrent")?
        .as_bool()
        .ok_or_else(|| Error::Document("'recurrent' must be a boolean".into()))?;
    let unroll_steps = match obj.get("unroll_steps") {
        None => 3,
        Some(v) => v
            .as_u64()
            .ok_or_else(|| Error::Document("'unroll_steps' must be an unsigned integer".into()))?
            as usize,
    };

    let raw_units = field(obj, "units")?
        .as_array()
        .ok_or_else(|| Error::Document("'units' must be an array".into()))?;
    let mut units = Vec::with_capacity(raw_units.len());
    for (pos, v) in raw_units.iter().enumerate() {
        let name = v
            .get("id")
            .and_then(Value::as_u64)
            .map(|id| format!("unit {id}"))
            .unwrap_or_else(|| format!("unit at position {pos}"));
        let u: UnitIn = serde_json::from_value(v.clone())
            .map_err(|e| Error::Document(format!("{name}: {e}")))?;
        u.activation
            .check()
            .map_err(|e| Error::Document(format!("{name}: {e}")))?;
        units.push(Unit::new(u.id, u.role, u.activation));
    }

    let raw_edges = field(obj, "edges")?
        .as_array()
        .ok_or_else(|| Error::Document("'edges' must be an array".into()))?;
    let mut edges = Vec::with_capacity(raw_edges.len());
    for (pos, v) in raw_edges.iter().enumerate() {
        let e: EdgeIn = serde_json::from_value(v.clone())
            .map_err(|e| Error::Document(format!("edge at position {pos}: {e}")))?;
        edges.push(Edge::new(e.from, e.to, e.weight));
    }

    Network::new(units, edges, recurrent, unroll_steps)
}
