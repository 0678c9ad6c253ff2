//! Dataset manifests: ingestion from CSV- or folder-labeled layouts,
//! combination of sources, and image preprocessing.

mod combine;
mod ingest;
mod preprocess;

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use combine::{combination_presets, combine, parse_combination, resolve_combination};
pub use ingest::{
    ingest_csv, ingest_folders, CsvIngest, CsvOptions, FolderIngest, LabelAliases, RejectedRow,
};
pub use preprocess::{
    preprocess, preprocess_bytes, preprocess_rgb, preprocess_rgba, resize_bilinear,
    DEFAULT_TARGET_SIZE,
};

use crate::label::Label;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed CSV: {reason}")]
    Csv { path: PathBuf, reason: String },
    #[error("{path}: missing column {column:?}")]
    MissingColumn { path: PathBuf, column: String },
    #[error("{path}: zero valid rows ({rejected} rejected)")]
    NoValidRows { path: PathBuf, rejected: usize },
    #[error("{0}: neither a benign/ nor a malignant/ subdirectory exists")]
    NoLabelFolders(PathBuf),
    #[error("{0}: no JPEG or PNG images under benign/ or malignant/")]
    NoImages(PathBuf),
    #[error("invalid source code {0:?}: use 1-16 characters from [a-z0-9_-]")]
    InvalidCode(String),
    #[error("unknown source code {0:?}")]
    UnknownCode(String),
    #[error("source code {0:?} listed twice in one combination")]
    DuplicateCode(String),
    #[error("duplicate record {path} from source {source_code}")]
    DuplicateRecord { path: PathBuf, source_code: String },
    #[error("{path}: cannot decode image: {reason}")]
    Decode { path: PathBuf, reason: String },
    #[error("class {0} has no samples")]
    EmptyClass(Label),
    #[error("invalid label alias table: {0}")]
    Alias(String),
}

/// Short identifier of a source dataset, e.g. `a` for ISIC 2016.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SourceCode(String);

impl SourceCode {
    pub fn new(code: &str) -> Result<Self, DataError> {
        let ok = !code.is_empty()
            && code.len() <= 16
            && code
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-');
        if ok {
            Ok(Self(code.to_string()))
        } else {
            Err(DataError::InvalidCode(code.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Dataset conventionally assigned to the single-letter codes.
    pub fn dataset_name(&self) -> Option<&'static str> {
        KNOWN_SOURCES
            .iter()
            .find(|(c, _)| *c == self.0)
            .map(|(_, name)| *name)
    }
}

/// Codes `a`–`k` and their datasets.
pub const KNOWN_SOURCES: [(&str, &str); 11] = [
    ("a", "ISIC 2016"),
    ("b", "ISIC 2017"),
    ("c", "ISIC 2018"),
    ("d", "ISIC 2019"),
    ("e", "ISIC 2020"),
    ("f", "7-point criteria"),
    ("g", "PH2"),
    ("h", "PAD-UFES-20"),
    ("i", "MED-NODE"),
    ("j", "Kaggle"),
    ("k", "HAM10000"),
];

impl TryFrom<String> for SourceCode {
    type Error = DataError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        SourceCode::new(&s)
    }
}

impl From<SourceCode> for String {
    fn from(c: SourceCode) -> String {
        c.0
    }
}

impl fmt::Display for SourceCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SampleRecord {
    pub image_path: PathBuf,
    pub label: Label,
    pub source: SourceCode,
    /// Set on oversampled copies; the image is augmented with this seed.
    pub augment_seed: Option<u64>,
}

impl SampleRecord {
    pub fn new(image_path: impl Into<PathBuf>, label: Label, source: SourceCode) -> Self {
        Self {
            image_path: image_path.into(),
            label,
            source,
            augment_seed: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LabelCounts {
    pub benign: usize,
    pub malignant: usize,
}

impl LabelCounts {
    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::Benign => self.benign,
            Label::Malignant => self.malignant,
        }
    }

    pub fn total(&self) -> usize {
        self.benign + self.malignant
    }
}

/// An ordered list of labeled images with the sources they came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    records: Vec<SampleRecord>,
    provenance: Vec<SourceCode>,
}

impl DatasetManifest {
    /// Builds a manifest, rejecting repeated `(path, source, augment_seed)`
    /// entries. Sources of the records are appended to `provenance` if absent.
    pub fn new(records: Vec<SampleRecord>, mut provenance: Vec<SourceCode>) -> Result<Self, DataError> {
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert((&r.image_path, &r.source, r.augment_seed)) {
                return Err(DataError::DuplicateRecord {
                    path: r.image_path.clone(),
                    source_code: r.source.to_string(),
                });
            }
            if !provenance.contains(&r.source) {
                provenance.push(r.source.clone());
            }
        }
        Ok(Self {
            records,
            provenance,
        })
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn provenance(&self) -> &[SourceCode] {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn counts(&self) -> LabelCounts {
        let mut c = LabelCounts::default();
        for r in &self.records {
            match r.label {
                Label::Benign => c.benign += 1,
                Label::Malignant => c.malignant += 1,
            }
        }
        c
    }

    /// CSV with header `image_path,label,source`. An `augment_seed` column is
    /// appended only when some record carries a seed.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let seeded = self.records.iter().any(|r| r.augment_seed.is_some());
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let mut header = vec!["image_path", "label", "source"];
        if seeded {
            header.push("augment_seed");
        }
        w.write_record(&header)?;
        for r in &self.records {
            let path = r.image_path.to_string_lossy();
            let mut row = vec![path.to_string(), r.label.to_string(), r.source.to_string()];
            if seeded {
                row.push(r.augment_seed.map(|s| s.to_string()).unwrap_or_default());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, origin: &Path) -> Result<Self, DataError> {
        let bad = |reason: String| DataError::Csv {
            path: origin.to_path_buf(),
            reason,
        };
        let mut rdr = csv::Reader::from_reader(input);
        let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| DataError::MissingColumn {
                    path: origin.to_path_buf(),
                    column: name.to_string(),
                })
        };
        let (pi, li, si) = (col("image_path")?, col("label")?, col("source")?);
        let seed_col = headers.iter().position(|h| h == "augment_seed");
        let mut records = Vec::new();
        for (line, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| bad(e.to_string()))?;
            let field = |i: usize| row.get(i).ok_or_else(|| bad(format!("row {}: too few fields", line + 1)));
            let label = field(li)?.parse::<Label>().map_err(|e| bad(format!("row {}: {e}", line + 1)))?;
            let augment_seed = match seed_col.and_then(|i| row.get(i)).filter(|s| !s.is_empty()) {
                Some(s) => Some(s.parse().map_err(|_| bad(format!("row {}: bad seed {s:?}", line + 1)))?),
                None => None,
            };
            records.push(SampleRecord {
                image_path: PathBuf::from(field(pi)?),
                label,
                source: SourceCode::new(field(si)?)?,
                augment_seed,
            });
        }
        Self::new(records, Vec::new())
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let file = std::fs::File::create(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        self.write_csv(std::io::BufWriter::new(file)).map_err(|e| DataError::Csv {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Reads a manifest file. Relative image paths are taken relative to the
    /// directory holding the manifest.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let file = std::fs::File::open(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut m = Self::read_csv(std::io::BufReader::new(file), path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for r in &mut m.records {
            if r.image_path.is_relative() {
                r.image_path = base.join(&r.image_path);
            }
        }
        Ok(m)
    }
}
