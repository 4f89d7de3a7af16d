//! CSV ingestion, per-field vocabularies and chronological splits.
//!
//! Rows are sorted by `(timestamp, original row)` before anything else
//! happens, so "earlier" is a total order over records. Vocabularies are
//! built from the training slice only; empty cells and values never seen in
//! training share the reserved id 0.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::binio;
use crate::{Error, Result};

/// Id shared by empty cells and values unseen in the training slice.
pub const MISSING_ID: u32 = 0;

const DATASET_MAGIC: &[u8; 4] = b"RATD";
const DATASET_VERSION: u16 = 1;

/// Bijection between the distinct values of one field and dense ids `1..=len`.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    values: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    /// Returns the id of `value`, inserting it if new. Empty values are never inserted.
    pub fn intern(&mut self, value: &str) -> u32 {
        if value.is_empty() {
            return MISSING_ID;
        }
        if let Some(&id) = self.ids.get(value) {
            return id;
        }
        self.values.push(value.to_owned());
        let id = self.values.len() as u32;
        self.ids.insert(value.to_owned(), id);
        id
    }

    /// Id of `value`, or [`MISSING_ID`] when it is empty or unknown.
    pub fn id_of(&self, value: &str) -> u32 {
        self.ids.get(value).copied().unwrap_or(MISSING_ID)
    }

    pub fn value_of(&self, id: u32) -> Option<&str> {
        if id == MISSING_ID {
            return None;
        }
        self.values.get(id as usize - 1).map(String::as_str)
    }

    /// Number of real values (the reserved id is not counted).
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn from_values(values: Vec<String>) -> Result<Self> {
        let mut ids = HashMap::with_capacity(values.len());
        for (i, v) in values.iter().enumerate() {
            if v.is_empty() || ids.insert(v.clone(), i as u32 + 1).is_some() {
                return Err(Error::format(format!("invalid vocabulary entry {v:?}")));
            }
        }
        Ok(Vocab { values, ids })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldSchema {
    pub name: String,
    pub index: usize,
    pub vocab: Vocab,
}

/// One categorical sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub field_ids: Vec<u32>,
    pub label: u8,
    pub timestamp: i64,
    /// Position after the chronological sort.
    pub index: usize,
}

impl Record {
    /// `(timestamp, index)`, the key every "strictly earlier" comparison uses.
    pub fn order_key(&self) -> (i64, usize) {
        (self.timestamp, self.index)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.7, valid: 0.2, test: 0.1 }
    }
}

impl SplitRatios {
    pub fn new(train: f64, valid: f64, test: f64) -> Self {
        SplitRatios { train, valid, test }
    }

    /// Places split marks on `n` chronologically sorted records.
    pub fn marks(&self, n: usize) -> Result<SplitMarks> {
        let SplitRatios { train, valid, test } = *self;
        if !(train > 0.0 && valid > 0.0 && test > 0.0) {
            return Err(Error::invalid(format!("split ratios must be positive, got {train}/{valid}/{test}")));
        }
        if (train + valid + test - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split ratios must sum to 1, got {}",
                train + valid + test
            )));
        }
        let train_end = (n as f64 * train).round() as usize;
        let valid_end = ((n as f64 * (train + valid)).round() as usize).min(n);
        let marks = SplitMarks { train_end, valid_end };
        marks.validate(n)?;
        Ok(marks)
    }
}

/// `records[..train_end]` is train, `[train_end..valid_end]` validation, the rest test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitMarks {
    pub train_end: usize,
    pub valid_end: usize,
}

impl SplitMarks {
    fn validate(&self, n: usize) -> Result<()> {
        if self.train_end == 0 {
            return Err(Error::data("train split is empty"));
        }
        if self.valid_end <= self.train_end {
            return Err(Error::data("validation split is empty"));
        }
        if self.valid_end >= n {
            return Err(Error::data("test split is empty"));
        }
        Ok(())
    }
}

/// Which columns of a CSV file hold what.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchemaSpec {
    pub label: String,
    #[serde(default)]
    pub timestamp: Option<String>,
    pub features: Vec<String>,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    #[serde(default)]
    pub split: SplitRatios,
}

fn default_delimiter() -> char {
    ','
}

impl SchemaSpec {
    pub fn new(label: &str, timestamp: Option<&str>, features: &[&str]) -> Self {
        SchemaSpec {
            label: label.to_owned(),
            timestamp: timestamp.map(str::to_owned),
            features: features.iter().map(|s| s.to_string()).collect(),
            delimiter: ',',
            split: SplitRatios::default(),
        }
    }
}

/// One parsed but not yet encoded row.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawRow {
    pub values: Vec<String>,
    pub label: u8,
    pub timestamp: Option<i64>,
}

/// Rows in file order, before sorting and vocabulary construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawTable {
    pub label_name: String,
    pub timestamp_name: Option<String>,
    pub field_names: Vec<String>,
    pub rows: Vec<RawRow>,
}

impl RawTable {
    /// Sorts rows chronologically, splits them and encodes every value
    /// against vocabularies built from the training slice.
    pub fn into_dataset(self, ratios: SplitRatios) -> Result<Dataset> {
        if self.rows.is_empty() {
            return Err(Error::data("dataset has no rows"));
        }
        let num_fields = self.field_names.len();
        let mut order: Vec<(i64, usize)> = self
            .rows
            .iter()
            .enumerate()
            .map(|(row, r)| (r.timestamp.unwrap_or(row as i64), row))
            .collect();
        order.sort_unstable();

        let split = ratios.marks(order.len())?;
        let mut vocabs = vec![Vocab::default(); num_fields];
        for &(_, row) in &order[..split.train_end] {
            for (vocab, value) in vocabs.iter_mut().zip(&self.rows[row].values) {
                vocab.intern(value);
            }
        }

        let mut missing_cells = 0;
        let records = order
            .iter()
            .enumerate()
            .map(|(index, &(timestamp, row))| {
                let raw = &self.rows[row];
                let field_ids = vocabs
                    .iter()
                    .zip(&raw.values)
                    .map(|(vocab, value)| {
                        if value.is_empty() {
                            missing_cells += 1;
                        }
                        vocab.id_of(value)
                    })
                    .collect();
                Record { field_ids, label: raw.label, timestamp, index }
            })
            .collect();

        let schema = self
            .field_names
            .into_iter()
            .zip(vocabs)
            .enumerate()
            .map(|(index, (name, vocab))| FieldSchema { name, index, vocab })
            .collect();

        Ok(Dataset {
            label_name: self.label_name,
            timestamp_name: self.timestamp_name,
            schema,
            records,
            split,
            missing_cells,
        })
    }
}

/// Reads a headed CSV stream into a [`RawTable`].
pub fn parse_csv<R: Read>(reader: R, spec: &SchemaSpec) -> Result<RawTable> {
    if !spec.delimiter.is_ascii() {
        return Err(Error::invalid(format!("delimiter {:?} is not a single byte", spec.delimiter)));
    }
    if spec.features.is_empty() {
        return Err(Error::invalid("schema names no feature columns"));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .delimiter(spec.delimiter as u8)
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);

    let headers = rdr.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].trim().is_empty()) {
        return Err(Error::data("empty file: no header row"));
    }
    let column = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::data(format!("column {name:?} not found in header")))
    };
    let label_col = column(&spec.label)?;
    let ts_col = spec.timestamp.as_deref().map(column).transpose()?;
    let feature_cols = spec.features.iter().map(|f| column(f)).collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for result in rdr.records() {
        let rec = result?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != headers.len() {
            return Err(Error::Row {
                line,
                message: format!("expected {} columns, found {}", headers.len(), rec.len()),
            });
        }
        let label = match rec[label_col].trim() {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(Error::Row { line, message: format!("label must be 0 or 1, got {other:?}") })
            }
        };
        let timestamp = match ts_col {
            Some(c) => Some(rec[c].trim().parse::<i64>().map_err(|_| Error::Row {
                line,
                message: format!("timestamp {:?} is not an integer", &rec[c]),
            })?),
            None => None,
        };
        let values = feature_cols.iter().map(|&c| rec[c].trim().to_owned()).collect();
        rows.push(RawRow { values, label, timestamp });
    }
    if rows.is_empty() {
        return Err(Error::data("empty file: no data rows"));
    }

    Ok(RawTable {
        label_name: spec.label.clone(),
        timestamp_name: spec.timestamp.clone(),
        field_names: spec.features.clone(),
        rows,
    })
}

/// Loads a CSV file, splits it by `spec.split` and encodes it.
pub fn load_csv(path: impl AsRef<Path>, spec: &SchemaSpec) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    parse_csv(BufReader::new(file), spec)?.into_dataset(spec.split)
}

/// Moves the split marks of an encoded dataset.
///
/// Vocabularies are left as they are; re-encoding needs the raw table.
pub fn chronological_split(ds: &Dataset, ratios: SplitRatios) -> Result<Dataset> {
    let split = ratios.marks(ds.records.len())?;
    Ok(Dataset { split, ..ds.clone() })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub label_name: String,
    pub timestamp_name: Option<String>,
    pub schema: Vec<FieldSchema>,
    records: Vec<Record>,
    split: SplitMarks,
    missing_cells: usize,
}

impl Dataset {
    /// Assembles a dataset from already encoded records.
    ///
    /// Records must be sorted by `(timestamp, index)` with `index` equal to position.
    pub fn from_parts(
        label_name: String,
        timestamp_name: Option<String>,
        schema: Vec<FieldSchema>,
        records: Vec<Record>,
        split: SplitMarks,
    ) -> Result<Self> {
        let f = schema.len();
        for (i, r) in records.iter().enumerate() {
            if r.index != i {
                return Err(Error::data(format!("record at position {i} has index {}", r.index)));
            }
            if r.field_ids.len() != f {
                return Err(Error::data(format!("record {i} has {} fields, schema has {f}", r.field_ids.len())));
            }
            if r.label > 1 {
                return Err(Error::data(format!("record {i} has label {}", r.label)));
            }
            if i > 0 && records[i - 1].timestamp > r.timestamp {
                return Err(Error::data(format!("record {i} is out of chronological order")));
            }
        }
        split.validate(records.len())?;
        let missing_cells = records
            .iter()
            .flat_map(|r| &r.field_ids)
            .filter(|&&id| id == MISSING_ID)
            .count();
        Ok(Dataset { label_name, timestamp_name, schema, records, split, missing_cells })
    }

    pub fn num_fields(&self) -> usize {
        self.schema.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn split(&self) -> SplitMarks {
        self.split
    }

    pub fn train(&self) -> &[Record] {
        &self.records[..self.split.train_end]
    }

    pub fn valid(&self) -> &[Record] {
        &self.records[self.split.train_end..self.split.valid_end]
    }

    pub fn test(&self) -> &[Record] {
        &self.records[self.split.valid_end..]
    }

    /// Vocabulary size per field, excluding the reserved id.
    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.schema.iter().map(|f| f.vocab.len()).collect()
    }

    pub fn field_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|f| f.name == name)
    }

    /// Number of empty cells in the source file.
    pub fn missing_cells(&self) -> usize {
        self.missing_cells
    }

    pub fn missing_ratio(&self) -> f64 {
        self.missing_cells as f64 / (self.records.len() * self.num_fields()) as f64
    }

    pub fn positive_ratio(&self) -> f64 {
        self.records.iter().filter(|r| r.label == 1).count() as f64 / self.records.len() as f64
    }

    /// Encodes raw field values with this dataset's vocabularies.
    pub fn encode<S: AsRef<str>>(&self, values: &[S]) -> Result<Vec<u32>> {
        if values.len() != self.num_fields() {
            return Err(Error::invalid(format!(
                "expected {} field values, got {}",
                self.num_fields(),
                values.len()
            )));
        }
        Ok(self.schema.iter().zip(values).map(|(f, v)| f.vocab.id_of(v.as_ref().trim())).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        binio::write_header(w, DATASET_MAGIC, DATASET_VERSION)?;
        binio::write_str(w, &self.label_name)?;
        match &self.timestamp_name {
            Some(name) => {
                w.write_u8(1)?;
                binio::write_str(w, name)?;
            }
            None => w.write_u8(0)?,
        }
        w.write_u32::<LittleEndian>(self.schema.len() as u32)?;
        for field in &self.schema {
            binio::write_str(w, &field.name)?;
            w.write_u32::<LittleEndian>(field.vocab.len() as u32)?;
            for v in &field.vocab.values {
                binio::write_str(w, v)?;
            }
        }
        w.write_u64::<LittleEndian>(self.records.len() as u64)?;
        w.write_u64::<LittleEndian>(self.split.train_end as u64)?;
        w.write_u64::<LittleEndian>(self.split.valid_end as u64)?;
        w.write_u64::<LittleEndian>(self.missing_cells as u64)?;
        for r in &self.records {
            w.write_u64::<LittleEndian>(r.index as u64)?;
            w.write_i64::<LittleEndian>(r.timestamp)?;
            w.write_u8(r.label)?;
            for &id in &r.field_ids {
                w.write_u32::<LittleEndian>(id)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        binio::read_header(r, DATASET_MAGIC, DATASET_VERSION)?;
        let label_name = binio::read_str(r)?;
        let timestamp_name = match binio::read_u8(r)? {
            0 => None,
            1 => Some(binio::read_str(r)?),
            b => return Err(Error::format(format!("bad timestamp flag {b}"))),
        };
        let num_fields = binio::read_u32(r)? as usize;
        let mut schema = Vec::with_capacity(num_fields);
        for index in 0..num_fields {
            let name = binio::read_str(r)?;
            let len = binio::read_u32(r)? as usize;
            let values = (0..len).map(|_| binio::read_str(r)).collect::<Result<Vec<_>>>()?;
            schema.push(FieldSchema { name, index, vocab: Vocab::from_values(values)? });
        }
        let n = binio::read_u64(r)? as usize;
        let train_end = binio::read_u64(r)? as usize;
        let valid_end = binio::read_u64(r)? as usize;
        let missing_cells = binio::read_u64(r)? as usize;
        let mut records = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            let index = binio::read_u64(r)? as usize;
            let timestamp = binio::read_i64(r)?;
            let label = binio::read_u8(r)?;
            let field_ids = (0..num_fields).map(|_| binio::read_u32(r)).collect::<Result<Vec<_>>>()?;
            records.push(Record { field_ids, label, timestamp, index });
        }
        binio::expect_eof(r)?;
        let mut ds = Dataset::from_parts(
            label_name,
            timestamp_name,
            schema,
            records,
            SplitMarks { train_end, valid_end },
        )?;
        // OOV cells are also id 0; the file keeps the count of genuinely empty cells.
        ds.missing_cells = missing_cells;
        Ok(ds)
    }
}
