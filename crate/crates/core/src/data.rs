//! Labelled, environment-partitioned samples and their delimited-text form.
//!
//! A dataset file has a header row `<feature columns...>,y,e` followed by
//! one sample per line. Feature values are written with the shortest
//! decimal representation that round-trips, so integer-valued features
//! appear as plain integers.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{invalid, Error, Result};

pub const LABEL_COLUMN: &str = "y";
pub const ENV_COLUMN: &str = "e";

/// One `(features, y, e)` tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub features: Vec<f64>,
    pub y: u8,
    pub env: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub columns: Vec<String>,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn new(columns: Vec<String>) -> Self {
        Dataset {
            columns,
            records: Vec::new(),
        }
    }

    pub fn with_records(columns: Vec<String>, records: Vec<Record>) -> Result<Self> {
        let mut ds = Dataset::new(columns);
        for r in records {
            ds.push(r)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, record: Record) -> Result<()> {
        if record.features.len() != self.columns.len() {
            return Err(Error::DimensionMismatch {
                expected: self.columns.len(),
                got: record.features.len(),
            });
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of feature columns.
    pub fn dim(&self) -> usize {
        self.columns.len()
    }

    /// Sorted distinct environment values.
    pub fn envs(&self) -> Vec<usize> {
        let mut envs: Vec<usize> = self.records.iter().map(|r| r.env).collect();
        envs.sort_unstable();
        envs.dedup();
        envs
    }

    pub fn by_env(&self) -> BTreeMap<usize, Dataset> {
        let mut out: BTreeMap<usize, Dataset> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.env)
                .or_insert_with(|| Dataset::new(self.columns.clone()))
                .records
                .push(r.clone());
        }
        out
    }

    pub fn filter_env(&self, envs: &[usize]) -> Dataset {
        Dataset {
            columns: self.columns.clone(),
            records: self
                .records
                .iter()
                .filter(|r| envs.contains(&r.env))
                .cloned()
                .collect(),
        }
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::UnknownVariable(name.to_string()))
    }

    /// Project onto a subset of feature columns, in the given order.
    pub fn select(&self, names: &[&str]) -> Result<Dataset> {
        let idx = names
            .iter()
            .map(|n| self.column_index(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            columns: names.iter().map(|s| s.to_string()).collect(),
            records: self
                .records
                .iter()
                .map(|r| Record {
                    features: idx.iter().map(|&i| r.features[i]).collect(),
                    y: r.y,
                    env: r.env,
                })
                .collect(),
        })
    }

    /// Append another dataset with identical columns.
    pub fn extend(&mut self, other: &Dataset) -> Result<()> {
        if self.columns != other.columns {
            return Err(invalid(format!(
                "column mismatch: {:?} vs {:?}",
                self.columns, other.columns
            )));
        }
        self.records.extend(other.records.iter().cloned());
        Ok(())
    }

    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("cannot concatenate zero datasets"))?;
        let mut out = Dataset::new(first.columns.clone());
        for p in parts {
            out.extend(p)?;
        }
        Ok(out)
    }

    /// Values of a feature column, or of the `y` / `e` pseudo-columns.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        match name {
            LABEL_COLUMN => Ok(self.records.iter().map(|r| f64::from(r.y)).collect()),
            ENV_COLUMN => Ok(self.records.iter().map(|r| r.env as f64).collect()),
            _ => {
                let i = self.column_index(name)?;
                Ok(self.records.iter().map(|r| r.features[i]).collect())
            }
        }
    }

    /// Integer-valued view of a column, for discrete tests.
    pub fn discrete_column(&self, name: &str) -> Result<Vec<i64>> {
        self.column(name)?
            .into_iter()
            .map(|v| {
                if v.fract() == 0.0 && v.is_finite() {
                    Ok(v as i64)
                } else {
                    Err(invalid(format!(
                        "column `{name}` holds non-integer value {v}"
                    )))
                }
            })
            .collect()
    }

    pub fn shuffled(&self, rng: &mut impl Rng) -> Dataset {
        let mut records = self.records.clone();
        records.shuffle(rng);
        Dataset {
            columns: self.columns.clone(),
            records,
        }
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.columns.iter().map(String::as_str).collect();
        header.push(LABEL_COLUMN);
        header.push(ENV_COLUMN);
        w.write_record(&header)?;
        for r in &self.records {
            let mut row: Vec<String> = r.features.iter().map(|v| v.to_string()).collect();
            row.push(r.y.to_string());
            row.push(r.env.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.clone();
        let n = header.len();
        if n < 2 || &header[n - 2] != LABEL_COLUMN || &header[n - 1] != ENV_COLUMN {
            return Err(Error::Parse(format!(
                "dataset header must end with `{LABEL_COLUMN},{ENV_COLUMN}`, got `{}`",
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let columns: Vec<String> = header.iter().take(n - 2).map(str::to_string).collect();
        let mut ds = Dataset::new(columns);
        for (line, row) in rdr.records().enumerate() {
            let row = row?;
            let parse_err =
                |field: &str| Error::Parse(format!("row {}: bad value `{field}`", line + 1));
            let features = row
                .iter()
                .take(n - 2)
                .map(|f| f.trim().parse::<f64>().map_err(|_| parse_err(f)))
                .collect::<Result<Vec<_>>>()?;
            let y: u8 = row[n - 2]
                .trim()
                .parse()
                .map_err(|_| parse_err(&row[n - 2]))?;
            if y > 1 {
                return Err(parse_err(&row[n - 2]));
            }
            let env: usize = row[n - 1]
                .trim()
                .parse()
                .map_err(|_| parse_err(&row[n - 1]))?;
            ds.push(Record { features, y, env })?;
        }
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
        let f = std::fs::File::open(path)?;
        Dataset::read_csv(std::io::BufReader::new(f))
    }
}
