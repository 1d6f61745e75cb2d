//! Multi-database categorical records and their attribute dictionaries.
//!
//! Positions (database, record, field) are 0-based in the Rust API.
//! Attribute codes are 1-based wherever they leave the crate (files,
//! [`Corpus::code`]); internally each cell stores the 0-based index of its
//! value in the field dictionary.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter};
use std::path::{Path, PathBuf};

use indexmap::IndexSet;

use crate::error::{Error, Result};

/// One categorical field: its name and the ordered set of raw values.
/// The position of a value in `values` is its 0-based index; its code is
/// that index plus one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub name: String,
    values: IndexSet<String>,
}

impl Field {
    pub fn values(&self) -> impl Iterator<Item = &str> {
        self.values.iter().map(String::as_str)
    }

    pub fn cardinality(&self) -> usize {
        self.values.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Schema {
    fields: Vec<Field>,
}

impl Schema {
    /// Builds a schema from `(field name, values in code order)` pairs.
    pub fn new<S: Into<String>>(fields: impl IntoIterator<Item = (S, Vec<String>)>) -> Result<Self> {
        let mut out = Vec::new();
        for (name, values) in fields {
            let name = name.into();
            if out.iter().any(|f: &Field| f.name == name) {
                return Err(Error::Argument(format!("duplicate field name `{name}`")));
            }
            if values.is_empty() {
                return Err(Error::Argument(format!("field `{name}` has no values")));
            }
            let len = values.len();
            let set: IndexSet<String> = values.into_iter().collect();
            if set.len() != len {
                return Err(Error::Argument(format!("field `{name}` lists a value twice")));
            }
            out.push(Field { name, values: set });
        }
        Ok(Schema { fields: out })
    }

    /// Schema with fields `f1..fF` whose values are the decimal codes `1..=V_f`.
    pub fn with_cardinalities(cardinalities: &[usize]) -> Result<Self> {
        Schema::new(
            cardinalities
                .iter()
                .enumerate()
                .map(|(f, &v)| (format!("f{}", f + 1), (1..=v).map(|c| c.to_string()).collect())),
        )
    }

    pub fn field_count(&self) -> usize {
        self.fields.len()
    }

    pub fn fields(&self) -> &[Field] {
        &self.fields
    }

    pub fn field_names(&self) -> Vec<&str> {
        self.fields.iter().map(|f| f.name.as_str()).collect()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.fields.iter().map(Field::cardinality).collect()
    }

    /// 1-based code of `raw` in field `f`.
    pub fn code_of(&self, f: usize, raw: &str) -> Option<u32> {
        self.index_of(f, raw).map(|i| i + 1)
    }

    /// Raw string for a 1-based code.
    pub fn raw_value(&self, f: usize, code: u32) -> Option<&str> {
        code.checked_sub(1).and_then(|i| self.value_at(f, i))
    }

    pub(crate) fn index_of(&self, f: usize, raw: &str) -> Option<u32> {
        self.fields.get(f)?.values.get_index_of(raw).map(|i| i as u32)
    }

    pub(crate) fn value_at(&self, f: usize, index: u32) -> Option<&str> {
        self.fields.get(f)?.values.get_index(index as usize).map(String::as_str)
    }

    /// Reads the tab-separated schema format: one line per field,
    /// `field_name<TAB>value1,value2,...`, values listed in code order.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut fields = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let (name, values) = line
                .split_once('\t')
                .ok_or_else(|| Error::format("schema", path, format!("line {} has no tab separator", i + 1)))?;
            fields.push((name.to_string(), values.split(',').map(str::to_string).collect::<Vec<_>>()));
        }
        Schema::new(fields).map_err(|e| Error::format("schema", path, e.to_string()))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        for field in &self.fields {
            for raw in field.values.iter().chain(std::iter::once(&field.name)) {
                if raw.contains(['\t', '\n', '\r']) || (raw != &field.name && raw.contains(',')) {
                    return Err(Error::Argument(format!(
                        "`{raw}` in field `{}` cannot be represented in a schema file",
                        field.name
                    )));
                }
            }
            out.push_str(&field.name);
            out.push('\t');
            out.push_str(&field.values.iter().map(String::as_str).collect::<Vec<_>>().join(","));
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub enum SchemaPolicy {
    /// Dictionaries built from the values observed, codes assigned in
    /// first-seen order across files scanned in argument order.
    UnionOfObserved,
    Explicit(Schema),
}

/// Encoded records across one or more databases. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    schema: Schema,
    records_per_db: Vec<usize>,
    db_offsets: Vec<usize>,
    /// Row-major `total_records × field_count` 0-based value indices.
    cells: Vec<u32>,
}

impl Corpus {
    /// Builds a corpus from rows of 1-based codes, grouped by database.
    pub fn from_codes(schema: Schema, databases: Vec<Vec<Vec<u32>>>) -> Result<Self> {
        let records_per_db = databases.iter().map(Vec::len).collect();
        let mut cells = Vec::new();
        for row in databases.iter().flatten() {
            for &code in row {
                cells.push(code.checked_sub(1).ok_or_else(|| Error::Argument("attribute codes start at 1".into()))?);
            }
        }
        Corpus::from_indices(schema, records_per_db, cells)
    }

    /// Builds a corpus from flat 0-based value indices.
    pub(crate) fn from_indices(schema: Schema, records_per_db: Vec<usize>, cells: Vec<u32>) -> Result<Self> {
        let f_count = schema.field_count();
        let n: usize = records_per_db.iter().sum();
        if records_per_db.is_empty() {
            return Err(Error::Argument("a corpus needs at least one database".into()));
        }
        if cells.len() != n * f_count {
            return Err(Error::Argument(format!(
                "{} cells supplied for {n} records of {f_count} fields",
                cells.len()
            )));
        }
        let cards = schema.cardinalities();
        for (i, &c) in cells.iter().enumerate() {
            let f = i % f_count.max(1);
            if c as usize >= cards[f] {
                return Err(Error::Argument(format!(
                    "record {} field {f}: code {} exceeds cardinality {}",
                    i / f_count,
                    c + 1,
                    cards[f]
                )));
            }
        }
        Ok(Corpus::assemble(schema, records_per_db, cells))
    }

    fn assemble(schema: Schema, records_per_db: Vec<usize>, cells: Vec<u32>) -> Self {
        let db_offsets = records_per_db
            .iter()
            .scan(0, |acc, &r| {
                let start = *acc;
                *acc += r;
                Some(start)
            })
            .collect();
        Corpus {
            schema,
            records_per_db,
            db_offsets,
            cells,
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn database_count(&self) -> usize {
        self.records_per_db.len()
    }

    pub fn records_per_db(&self) -> &[usize] {
        &self.records_per_db
    }

    pub fn total_records(&self) -> usize {
        self.db_offsets.last().map_or(0, |o| o + self.records_per_db.last().unwrap())
    }

    pub fn field_count(&self) -> usize {
        self.schema.field_count()
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.schema.cardinalities()
    }

    /// Flat record index of `(d, r)`; records are numbered database by
    /// database in file order.
    pub fn flat_index(&self, d: usize, r: usize) -> Result<usize> {
        match self.records_per_db.get(d) {
            Some(&len) if r < len => Ok(self.db_offsets[d] + r),
            Some(&len) => Err(Error::Index(format!("record {r} in database {d} of {len} records"))),
            None => Err(Error::Index(format!("database {d} of {}", self.database_count()))),
        }
    }

    /// Inverse of [`Corpus::flat_index`].
    pub fn position(&self, n: usize) -> Result<(usize, usize)> {
        if n >= self.total_records() {
            return Err(Error::Index(format!("record {n} of {}", self.total_records())));
        }
        let d = self.db_offsets.partition_point(|&o| o <= n) - 1;
        // Skip empty databases sharing the same offset.
        let d = (d..self.database_count()).find(|&d| n < self.db_offsets[d] + self.records_per_db[d]).unwrap();
        Ok((d, n - self.db_offsets[d]))
    }

    /// 0-based value indices of flat record `n`.
    #[inline]
    pub fn record(&self, n: usize) -> &[u32] {
        let f = self.field_count();
        &self.cells[n * f..(n + 1) * f]
    }

    pub fn records(&self) -> impl ExactSizeIterator<Item = &[u32]> + '_ {
        (0..self.total_records()).map(move |n| self.record(n))
    }

    /// 1-based attribute code of field `f` in record `(d, r)`.
    pub fn code(&self, d: usize, r: usize, f: usize) -> Result<u32> {
        let n = self.flat_index(d, r)?;
        self.record(n)
            .get(f)
            .map(|&i| i + 1)
            .ok_or_else(|| Error::Index(format!("field {f} of {}", self.field_count())))
    }

    /// Raw attribute strings of record `(d, r)`.
    pub fn decode(&self, d: usize, r: usize) -> Result<Vec<&str>> {
        let n = self.flat_index(d, r)?;
        Ok(self
            .record(n)
            .iter()
            .enumerate()
            .map(|(f, &i)| self.schema.value_at(f, i).expect("cells validated at construction"))
            .collect())
    }

    /// Writes one CSV per database as `<dir>/db<d>.csv` (1-based `d`) and
    /// returns the paths in database order.
    pub fn write_databases(&self, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
        let dir = dir.as_ref();
        let mut paths = Vec::new();
        for d in 0..self.database_count() {
            let path = dir.join(format!("db{}.csv", d + 1));
            let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = csv::Writer::from_writer(BufWriter::new(file));
            w.write_record(self.schema.field_names()).map_err(|e| Error::csv(&path, e))?;
            for r in 0..self.records_per_db[d] {
                w.write_record(self.decode(d, r)?).map_err(|e| Error::csv(&path, e))?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            paths.push(path);
        }
        Ok(paths)
    }
}

/// Loads one database per CSV file. Every file must carry the same header
/// and no empty cells.
pub fn load_databases<P: AsRef<Path>>(paths: &[P], policy: SchemaPolicy) -> Result<Corpus> {
    if paths.is_empty() {
        return Err(Error::Argument("no input files".into()));
    }
    let (mut fields, fixed) = match policy {
        SchemaPolicy::UnionOfObserved => (None, false),
        SchemaPolicy::Explicit(schema) => (Some(schema.fields), true),
    };
    let mut records_per_db = Vec::with_capacity(paths.len());
    let mut cells = Vec::new();

    for path in paths {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(BufReader::new(file));
        let header: Vec<String> = reader
            .headers()
            .map_err(|e| Error::csv(path, e))?
            .iter()
            .map(str::to_string)
            .collect();

        let fields = fields.get_or_insert_with(|| {
            header
                .iter()
                .map(|name| Field {
                    name: name.clone(),
                    values: IndexSet::new(),
                })
                .collect()
        });
        check_header(path, &header, fields)?;

        let mut count = 0;
        for (row, result) in reader.records().enumerate() {
            let record = result.map_err(|e| Error::csv(path, e))?;
            for (f, raw) in record.iter().enumerate() {
                if raw.is_empty() {
                    return Err(Error::MissingValue {
                        file: path.to_path_buf(),
                        row: row + 1,
                        column: f + 1,
                    });
                }
                let values = &mut fields[f].values;
                let index = match values.get_index_of(raw) {
                    Some(i) => i,
                    None if fixed => {
                        return Err(Error::UnknownAttribute {
                            file: path.to_path_buf(),
                            row: row + 1,
                            field: fields[f].name.clone(),
                            value: raw.to_string(),
                        })
                    }
                    None => values.insert_full(raw.to_string()).0,
                };
                cells.push(index as u32);
            }
            count += 1;
        }
        records_per_db.push(count);
    }

    // Under the union policy a field of an empty input has no observed
    // values; cells are in range by construction.
    let schema = Schema {
        fields: fields.unwrap_or_default(),
    };
    Ok(Corpus::assemble(schema, records_per_db, cells))
}

fn check_header(path: &Path, header: &[String], fields: &[Field]) -> Result<()> {
    for (i, field) in fields.iter().enumerate() {
        match header.get(i) {
            Some(name) if *name == field.name => {}
            Some(name) => {
                return Err(Error::Schema {
                    file: path.to_path_buf(),
                    field: name.clone(),
                    message: format!("expected `{}` in column {}", field.name, i + 1),
                })
            }
            None => {
                return Err(Error::Schema {
                    file: path.to_path_buf(),
                    field: field.name.clone(),
                    message: "column missing".into(),
                })
            }
        }
    }
    if let Some(extra) = header.get(fields.len()) {
        return Err(Error::Schema {
            file: path.to_path_buf(),
            field: extra.clone(),
            message: "unexpected extra column".into(),
        });
    }
    Ok(())
}
