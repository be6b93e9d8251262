//! Feature datasets: CSV and NNKF binary encodings.
//!
//! Features are held as `f64` but always carry `f32`-exact values, so both
//! encodings round-trip bit-identically.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

const FEATURE_MAGIC: &[u8; 4] = b"NNKF";
const FEATURE_VERSION: u16 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    /// Dense class ids in `[0, num_classes)`.
    pub labels: Vec<usize>,
    pub splits: Vec<Split>,
    /// Original label token for each dense id.
    pub label_names: Vec<String>,
}

/// Dense ids for raw label tokens: numeric order when every token is an
/// integer, lexicographic otherwise.
fn densify(raw: &[String]) -> (Vec<usize>, Vec<String>) {
    let numeric: Option<Vec<i64>> = raw.iter().map(|s| s.parse().ok()).collect();
    let names: Vec<String> = match numeric {
        Some(values) => values
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(|v| v.to_string())
            .collect(),
        None => raw.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect(),
    };
    let lookup: BTreeMap<String, usize> = names.iter().cloned().enumerate().map(|(i, n)| (n, i)).collect();
    let ids = raw
        .iter()
        .map(|s| {
            let key = s.parse::<i64>().map(|v| v.to_string()).unwrap_or_else(|_| s.clone());
            lookup[&key]
        })
        .collect();
    (ids, names)
}

impl Dataset {
    /// Builds a dataset, tagging every row as training data.
    pub fn new(features: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        let raw: Vec<String> = labels.iter().map(|l| l.to_string()).collect();
        let (labels, label_names) = densify(&raw);
        let n = features.nrows();
        let ds = Self {
            features: features.mapv(|v| v as f32 as f64),
            labels,
            splits: vec![Split::Train; n],
            label_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let n = self.features.nrows();
        if self.labels.len() != n || self.splits.len() != n {
            return Err(Error::input("features, labels and split tags differ in length"));
        }
        if let Some(pos) = self.features.iter().position(|v| !v.is_finite()) {
            let d = self.features.ncols().max(1);
            return Err(Error::format(
                format!("row {}, feature {}", pos / d, pos % d),
                "non-finite feature value",
            ));
        }
        let c = self.num_classes();
        let present: BTreeSet<usize> = self.labels.iter().copied().collect();
        if present.len() != c || present.iter().any(|&l| l >= c) {
            return Err(Error::input("class ids are not dense"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    /// Reads NNKF when the file starts with its magic, CSV otherwise.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        File::open(path.as_ref())?.read_to_end(&mut bytes)?;
        if bytes.starts_with(FEATURE_MAGIC) {
            Self::read_nnkf(&bytes[..])
        } else {
            Self::read_csv(&bytes[..])
        }
    }

    pub fn read_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| Error::format("line 1", e.to_string()))?
            .clone();
        if header.get(0) != Some("label") {
            return Err(Error::format("line 1", "header must start with `label`"));
        }
        for (i, name) in header.iter().skip(1).enumerate() {
            if name != format!("f{i}") {
                return Err(Error::format("line 1", format!("expected column f{i}, found `{name}`")));
            }
        }
        let d = header.len() - 1;
        let mut raw_labels = Vec::new();
        let mut values = Vec::new();
        for (row, record) in rdr.records().enumerate() {
            let line = row + 2;
            let record = record.map_err(|e| Error::format(format!("line {line}"), e.to_string()))?;
            if record.len() != d + 1 {
                return Err(Error::format(
                    format!("line {line}"),
                    format!("expected {} fields, found {}", d + 1, record.len()),
                ));
            }
            let label = record[0].trim();
            if label.is_empty() {
                return Err(Error::format(format!("line {line}"), "empty label"));
            }
            raw_labels.push(label.to_string());
            for (col, field) in record.iter().skip(1).enumerate() {
                let v: f32 = field.trim().parse().map_err(|_| {
                    Error::format(format!("line {line}, column f{col}"), format!("cannot parse `{field}`"))
                })?;
                if !v.is_finite() {
                    return Err(Error::format(
                        format!("line {line}, column f{col}"),
                        "non-finite feature value",
                    ));
                }
                values.push(v as f64);
            }
        }
        let n = raw_labels.len();
        let features = Array2::from_shape_vec((n, d), values).map_err(|e| Error::input(e.to_string()))?;
        let (labels, label_names) = densify(&raw_labels);
        let ds = Self {
            features,
            labels,
            splits: vec![Split::Train; n],
            label_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["label".to_string()];
        header.extend((0..self.dim()).map(|i| format!("f{i}")));
        w.write_record(&header).map_err(|e| Error::input(e.to_string()))?;
        for (i, row) in self.features.outer_iter().enumerate() {
            let mut rec = vec![self.label_names[self.labels[i]].clone()];
            // f32 Display is the shortest string that parses back exactly.
            rec.extend(row.iter().map(|&v| (v as f32).to_string()));
            w.write_record(&rec).map_err(|e| Error::input(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_nnkf(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != FEATURE_MAGIC {
            return Err(Error::format("byte 0", "bad magic, expected NNKF"));
        }
        let version = r.read_u16::<LittleEndian>()?;
        if version != FEATURE_VERSION {
            return Err(Error::format("byte 4", format!("unsupported version {version}")));
        }
        let n = r.read_u64::<LittleEndian>()? as usize;
        let d = r.read_u64::<LittleEndian>()? as usize;
        let header = 4 + 2 + 8 + 8;
        let mut raw_labels = Vec::with_capacity(n.min(1 << 24));
        for i in 0..n {
            let l = r
                .read_u32::<LittleEndian>()
                .map_err(|e| Error::format(format!("byte {}", header + 4 * i), e.to_string()))?;
            raw_labels.push(l.to_string());
        }
        let base = header + 4 * n;
        let mut values = Vec::with_capacity((n * d).min(1 << 28));
        for i in 0..n * d {
            let v = r
                .read_f32::<LittleEndian>()
                .map_err(|e| Error::format(format!("byte {}", base + 4 * i), e.to_string()))?;
            if !v.is_finite() {
                return Err(Error::format(
                    format!("byte {}", base + 4 * i),
                    "non-finite feature value",
                ));
            }
            values.push(v as f64);
        }
        let features = Array2::from_shape_vec((n, d), values).map_err(|e| Error::input(e.to_string()))?;
        let (labels, label_names) = densify(&raw_labels);
        let ds = Self {
            features,
            labels,
            splits: vec![Split::Train; n],
            label_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Writes dense class ids as the label column.
    pub fn write_nnkf(&self, mut w: impl Write) -> Result<()> {
        w.write_all(FEATURE_MAGIC)?;
        w.write_u16::<LittleEndian>(FEATURE_VERSION)?;
        w.write_u64::<LittleEndian>(self.len() as u64)?;
        w.write_u64::<LittleEndian>(self.dim() as u64)?;
        for &l in &self.labels {
            w.write_u32::<LittleEndian>(l as u32)?;
        }
        for &v in &self.features {
            w.write_f32::<LittleEndian>(v as f32)?;
        }
        Ok(())
    }

    pub fn save_nnkf(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_nnkf(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(BufWriter::new(File::create(path)?))
    }

    fn rows(&self, keep: impl Fn(usize) -> bool) -> Vec<usize> {
        (0..self.len()).filter(|&i| keep(i)).collect()
    }

    fn take(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), rows),
            labels: rows.iter().map(|&i| self.labels[i]).collect(),
            splits: rows.iter().map(|&i| self.splits[i]).collect(),
            label_names: self.label_names.clone(),
        }
    }

    /// Rows tagged with `split`; class ids are left unchanged.
    pub fn split(&self, split: Split) -> Self {
        self.take(&self.rows(|i| self.splits[i] == split))
    }

    /// Rows whose class is in `classes`, relabelled densely in class order.
    pub fn with_classes(&self, classes: &[usize]) -> Result<Self> {
        let keep: BTreeSet<usize> = classes.iter().copied().collect();
        let mut sub = self.take(&self.rows(|i| keep.contains(&self.labels[i])));
        let remap: BTreeMap<usize, usize> = keep.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        for l in &mut sub.labels {
            *l = remap[l];
        }
        sub.label_names = keep
            .iter()
            .map(|&c| self.label_names.get(c).cloned().ok_or(Error::UnknownId(c)))
            .collect::<Result<_>>()?;
        sub.validate()?;
        Ok(sub)
    }

    /// Stratified random tagging: per class, a `val_fraction` share goes to
    /// validation and a `test_fraction` share to test.
    pub fn assign_splits(&mut self, val_fraction: f64, test_fraction: f64, seed: u64) -> Result<()> {
        if !(0.0..1.0).contains(&val_fraction)
            || !(0.0..1.0).contains(&test_fraction)
            || val_fraction + test_fraction >= 1.0
        {
            return Err(Error::config("split fractions must be non-negative and sum below 1"));
        }
        let mut rng = stream_rng(seed, Stream::Split);
        for class in 0..self.num_classes() {
            let mut members = self.rows(|i| self.labels[i] == class);
            members.shuffle(&mut rng);
            let n = members.len() as f64;
            let n_val = (val_fraction * n).round() as usize;
            let n_test = (test_fraction * n).round() as usize;
            for (rank, &i) in members.iter().enumerate() {
                self.splits[i] = if rank < n_val {
                    Split::Val
                } else if rank < n_val + n_test {
                    Split::Test
                } else {
                    Split::Train
                };
            }
        }
        Ok(())
    }

    pub fn set_split(&mut self, split: Split) {
        self.splits.iter_mut().for_each(|s| *s = split);
    }

    /// Concatenates rows. Both sides must already share dense ids.
    pub fn concat(&self, other: &Dataset) -> Result<Self> {
        if self.dim() != other.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        let mut features = self.features.clone();
        features
            .append(Axis(0), other.features.view())
            .map_err(|e| Error::input(e.to_string()))?;
        let label_names = if self.num_classes() >= other.num_classes() {
            self.label_names.clone()
        } else {
            other.label_names.clone()
        };
        let ds = Self {
            features,
            labels: self.labels.iter().chain(&other.labels).copied().collect(),
            splits: self.splits.iter().chain(&other.splits).copied().collect(),
            label_names,
        };
        ds.validate()?;
        Ok(ds)
    }
}
