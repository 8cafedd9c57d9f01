//! Result tables and their CSV / JSON encodings.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::config::Format;
use crate::error::{LabError, LabResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Empty,
    Bool(bool),
    Int(i64),
    Float(f64),
    Text(String),
}

impl Cell {
    /// Non-finite values become empty cells.
    pub fn float(v: f64) -> Cell {
        if v.is_finite() {
            Cell::Float(v)
        } else {
            Cell::Empty
        }
    }

    fn csv_field(&self) -> String {
        match self {
            Cell::Empty => String::new(),
            Cell::Bool(b) => b.to_string(),
            Cell::Int(i) => i.to_string(),
            Cell::Float(v) => format_float(*v),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

impl<T: Into<Cell>> From<Option<T>> for Cell {
    fn from(v: Option<T>) -> Self {
        v.map_or(Cell::Empty, Into::into)
    }
}

/// Shortest representation that parses back to the same double, always
/// with a decimal point or exponent.
pub fn format_float(v: f64) -> String {
    let s = format!("{v:?}");
    if s.contains(['.', 'e', 'E']) || !v.is_finite() {
        s
    } else {
        format!("{s}.0")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    /// File stem.
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: impl Into<String>, columns: &[&str]) -> Self {
        Self {
            name: name.into(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width for table {}", self.name);
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<&Cell>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| &r[i]).collect())
    }
}

/// Rows serialize as objects with keys in column order.
struct RowRef<'a> {
    columns: &'a [String],
    row: &'a [Cell],
}

impl Serialize for RowRef<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.columns.len()))?;
        for (k, v) in self.columns.iter().zip(self.row) {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

struct RowsRef<'a>(&'a Table);

impl Serialize for RowsRef<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(self.0.rows.iter().map(|row| RowRef { columns: &self.0.columns, row }))
    }
}

#[derive(Serialize)]
struct JsonDocOut<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    generated: Option<&'a str>,
    experiment: &'a str,
    seed: u64,
    table: &'a str,
    columns: &'a [String],
    rows: RowsRef<'a>,
}

/// Ordered key/value pairs of one JSON row.
struct OrderedRow(Vec<(String, Cell)>);

impl<'de> Deserialize<'de> for OrderedRow {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct V;
        impl<'de> Visitor<'de> for V {
            type Value = OrderedRow;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a row object")
            }
            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<OrderedRow, A::Error> {
                let mut out = Vec::new();
                while let Some((k, v)) = map.next_entry::<String, Cell>()? {
                    out.push((k, v));
                }
                Ok(OrderedRow(out))
            }
        }
        d.deserialize_map(V)
    }
}

#[derive(Deserialize)]
struct JsonDocIn {
    generated: Option<String>,
    experiment: String,
    seed: u64,
    table: String,
    columns: Vec<String>,
    rows: Vec<OrderedRow>,
}

/// Header written above tables unless timestamps are disabled.
#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub experiment: String,
    pub seed: u64,
    pub generated: Option<String>,
}

impl Provenance {
    pub fn new(experiment: &str, seed: u64, timestamp: bool) -> Self {
        let generated = timestamp.then(|| {
            format!(
                "{} by feedback-lab {}",
                chrono::Utc::now().format("%Y-%m-%dT%H:%M:%SZ"),
                env!("CARGO_PKG_VERSION")
            )
        });
        Self { experiment: experiment.to_string(), seed, generated }
    }
}

pub fn to_csv(table: &Table, prov: &Provenance) -> LabResult<Vec<u8>> {
    let mut buf = Vec::new();
    if let Some(g) = &prov.generated {
        write!(buf, "# generated {g}; experiment {} seed {}\r\n", prov.experiment, prov.seed)
            .map_err(|e| LabError::Emit(e.to_string()))?;
    }
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(buf);
    w.write_record(&table.columns).map_err(|e| LabError::Emit(e.to_string()))?;
    for row in &table.rows {
        w.write_record(row.iter().map(Cell::csv_field))
            .map_err(|e| LabError::Emit(e.to_string()))?;
    }
    w.into_inner().map_err(|e| LabError::Emit(e.to_string()))
}

pub fn to_json(table: &Table, prov: &Provenance) -> LabResult<Vec<u8>> {
    let doc = JsonDocOut {
        generated: prov.generated.as_deref(),
        experiment: &prov.experiment,
        seed: prov.seed,
        table: &table.name,
        columns: &table.columns,
        rows: RowsRef(table),
    };
    let mut out = serde_json::to_vec_pretty(&doc).map_err(|e| LabError::Emit(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

/// Reads a table written by [`to_json`], checking that every row carries
/// the declared columns in order.
pub fn from_json(bytes: &[u8]) -> LabResult<(Table, Provenance)> {
    let doc: JsonDocIn = serde_json::from_slice(bytes).map_err(|e| LabError::Emit(e.to_string()))?;
    let mut rows = Vec::with_capacity(doc.rows.len());
    for (i, OrderedRow(entries)) in doc.rows.into_iter().enumerate() {
        let keys: Vec<&String> = entries.iter().map(|e| &e.0).collect();
        if keys.len() != doc.columns.len() || keys.iter().zip(&doc.columns).any(|(a, b)| *a != b) {
            return Err(LabError::Emit(format!("row {i} does not match the column list")));
        }
        rows.push(entries.into_iter().map(|e| e.1).collect());
    }
    let table = Table { name: doc.table, columns: doc.columns, rows };
    let prov = Provenance { experiment: doc.experiment, seed: doc.seed, generated: doc.generated };
    Ok((table, prov))
}

pub fn encode(table: &Table, prov: &Provenance, format: Format) -> LabResult<Vec<u8>> {
    match format {
        Format::Csv => to_csv(table, prov),
        Format::Json => to_json(table, prov),
    }
}

pub fn target_path(dir: &Path, table: &Table, format: Format) -> PathBuf {
    dir.join(format!("{}.{}", table.name, format.extension()))
}

/// Writes every table into `dir`. Nothing is written if any target exists
/// and `force` is off.
pub fn write_tables(
    dir: &Path,
    tables: &[Table],
    prov: &Provenance,
    format: Format,
    force: bool,
) -> LabResult<Vec<PathBuf>> {
    let targets: Vec<PathBuf> = tables.iter().map(|t| target_path(dir, t, format)).collect();
    if !force {
        if let Some(p) = targets.iter().find(|p| p.exists()) {
            return Err(LabError::Collision(p.clone()));
        }
    }
    fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    for (table, path) in tables.iter().zip(&targets) {
        let bytes = encode(table, prov, format)?;
        fs::write(path, bytes).map_err(|e| LabError::io(path, e))?;
    }
    Ok(targets)
}
