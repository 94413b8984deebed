//! `path,id,modality,split,size,aspect` CSV manifests.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use crate::error::{Error, Result};

pub const HEADER: [&str; 6] = ["path", "id", "modality", "split", "size", "aspect"];

/// Identity label of gallery-only clutter.
pub const DISTRACTOR: i64 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "query" => Some(Split::Query),
            "gallery" => Some(Split::Gallery),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    /// Relative to the dataset root.
    pub path: String,
    pub id: i64,
    pub modality: String,
    pub split: Split,
    pub size: Option<f64>,
    pub aspect: Option<f64>,
}

impl SampleRecord {
    pub fn is_distractor(&self) -> bool {
        self.id == DISTRACTOR
    }

    /// Ship-size metadata when both fields are present.
    pub fn meta(&self) -> Option<(f64, f64)> {
        Some((self.size?, self.aspect?))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
}

fn field_err(line: u64, column: &str, msg: impl fmt::Display) -> Error {
    Error::Parse(format!("manifest line {line}, column {column}: {msg}"))
}

fn opt_real(raw: &str, line: u64, column: &str) -> Result<Option<f64>> {
    if raw.is_empty() {
        return Ok(None);
    }
    match raw.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(Some(v)),
        _ => Err(field_err(line, column, format!("{raw:?} is not a finite number"))),
    }
}

impl Manifest {
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let header = rdr
            .headers()
            .map_err(|e| Error::Parse(format!("manifest header: {e}")))?
            .clone();
        let mut cols = [0usize; 6];
        for (slot, name) in cols.iter_mut().zip(HEADER) {
            *slot = header
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Parse(format!("manifest line 1: missing column {name:?}")))?;
        }
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row.map_err(|e| {
                let line = e.position().map_or(0, |p| p.line());
                Error::Parse(format!("manifest line {line}: {e}"))
            })?;
            let line = row.position().map_or(0, |p| p.line());
            let get = |i: usize| row.get(cols[i]).unwrap_or("");
            let id: i64 = get(1)
                .parse()
                .map_err(|_| field_err(line, "id", format!("{:?} is not an integer", get(1))))?;
            let split = Split::parse(get(3))
                .ok_or_else(|| field_err(line, "split", format!("{:?} is not train/query/gallery", get(3))))?;
            let rec = SampleRecord {
                path: get(0).to_string(),
                id,
                modality: get(2).to_string(),
                split,
                size: opt_real(get(4), line, "size")?,
                aspect: opt_real(get(5), line, "aspect")?,
            };
            if rec.path.is_empty() {
                return Err(field_err(line, "path", "empty path"));
            }
            if rec.id < DISTRACTOR {
                return Err(field_err(line, "id", format!("{} is below -1", rec.id)));
            }
            if rec.modality.is_empty() {
                return Err(field_err(line, "modality", "empty modality"));
            }
            records.push(rec);
        }
        let m = Manifest { records };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text).map_err(|e| match e {
            Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Train holds no distractors and every query identity has a gallery
    /// counterpart.
    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.split(Split::Train).find(|r| r.is_distractor()) {
            return Err(Error::Data(format!("train record {} has the distractor id -1", r.path)));
        }
        let gallery: BTreeSet<i64> = self.split(Split::Gallery).map(|r| r.id).collect();
        let missing: BTreeSet<i64> = self
            .split(Split::Query)
            .map(|r| r.id)
            .filter(|id| !gallery.contains(id))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!("query ids {missing:?} do not appear in the gallery")));
        }
        if let Some(r) = self.split(Split::Query).find(|r| r.is_distractor()) {
            return Err(Error::Data(format!("query record {} has the distractor id -1", r.path)));
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(HEADER).expect("in-memory write");
        let real = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.records {
            w.write_record([
                r.path.clone(),
                r.id.to_string(),
                r.modality.clone(),
                r.split.name().to_string(),
                real(r.size),
                real(r.aspect),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn modalities(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.modality.as_str()).collect()
    }
}
