use std::collections::HashMap;
use std::path::{Path, PathBuf};

use log::warn;

use super::{DataError, DatasetManifest, SampleRecord, SourceCode};
use crate::label::Label;

/// Case-insensitive map from raw label strings to the binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelAliases(HashMap<String, Label>);

impl Default for LabelAliases {
    fn default() -> Self {
        let mut map = HashMap::new();
        for raw in ["benign", "0", "0.0", "nevus"] {
            map.insert(raw.to_string(), Label::Benign);
        }
        for raw in ["malignant", "1", "1.0", "melanoma"] {
            map.insert(raw.to_string(), Label::Malignant);
        }
        Self(map)
    }
}

impl LabelAliases {
    pub fn resolve(&self, raw: &str) -> Option<Label> {
        self.0.get(&raw.trim().to_lowercase()).copied()
    }

    pub fn insert(&mut self, raw: &str, label: Label) {
        self.0.insert(raw.trim().to_lowercase(), label);
    }

    /// Adds entries from a JSON object `{ "raw": "benign" | "malignant", ... }`
    /// on top of the defaults.
    pub fn with_json(mut self, text: &str) -> Result<Self, DataError> {
        let map: HashMap<String, String> =
            serde_json::from_str(text).map_err(|e| DataError::Alias(e.to_string()))?;
        for (raw, label) in map {
            let label = label.parse::<Label>().map_err(DataError::Alias)?;
            self.insert(&raw, label);
        }
        Ok(self)
    }
}

#[derive(Debug, Clone)]
pub struct CsvOptions {
    pub image_column: String,
    pub label_column: String,
    pub aliases: LabelAliases,
    pub source: SourceCode,
}

impl CsvOptions {
    pub fn new(source: SourceCode) -> Self {
        Self {
            image_column: "image".into(),
            label_column: "label".into(),
            aliases: LabelAliases::default(),
            source,
        }
    }
}

/// A CSV row that could not be turned into a record.
#[derive(Debug, Clone, PartialEq)]
pub struct RejectedRow {
    /// 1-based data row number (the header is row 0).
    pub row: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct CsvIngest {
    pub manifest: DatasetManifest,
    pub rejects: Vec<RejectedRow>,
    /// Data rows read, accepted or not.
    pub rows: usize,
}

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image identifiers without an extension (ISIC style `ISIC_0000000`) resolve
/// to the first existing `.jpg`, `.jpeg` or `.png` file.
fn resolve_image(root: &Path, id: &str) -> PathBuf {
    let direct = root.join(id);
    if Path::new(id).extension().is_some() || direct.exists() {
        return direct;
    }
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| root.join(format!("{id}.{ext}")))
        .find(|p| p.exists())
        .unwrap_or(direct)
}

/// Reads a ground-truth CSV. Rows whose label is not in the alias table (or
/// whose image field is empty) go to `rejects`.
pub fn ingest_csv(csv_path: &Path, image_root: &Path, opts: &CsvOptions) -> Result<CsvIngest, DataError> {
    let file = std::fs::File::open(csv_path).map_err(|source| DataError::Io {
        path: csv_path.to_path_buf(),
        source,
    })?;
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let headers = rdr
        .headers()
        .map_err(|e| DataError::Csv {
            path: csv_path.to_path_buf(),
            reason: e.to_string(),
        })?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| DataError::MissingColumn {
                path: csv_path.to_path_buf(),
                column: name.to_string(),
            })
    };
    let (image_col, label_col) = (column(&opts.image_column)?, column(&opts.label_column)?);

    let mut records = Vec::new();
    let mut rejects = Vec::new();
    let mut rows = 0;
    for (i, row) in rdr.records().enumerate() {
        rows += 1;
        let reject = |reason: String| RejectedRow { row: i + 1, reason };
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                rejects.push(reject(e.to_string()));
                continue;
            }
        };
        let image = row.get(image_col).map(str::trim).unwrap_or("");
        let raw_label = row.get(label_col).unwrap_or("");
        if image.is_empty() {
            rejects.push(reject("empty image field".into()));
            continue;
        }
        match opts.aliases.resolve(raw_label) {
            Some(label) => {
                records.push(SampleRecord::new(resolve_image(image_root, image), label, opts.source.clone()))
            }
            None => rejects.push(reject(format!("unmappable label {raw_label:?}"))),
        }
    }
    if records.is_empty() {
        return Err(DataError::NoValidRows {
            path: csv_path.to_path_buf(),
            rejected: rejects.len(),
        });
    }
    for r in &rejects {
        warn!("{}: row {} rejected: {}", csv_path.display(), r.row, r.reason);
    }
    Ok(CsvIngest {
        manifest: DatasetManifest::new(records, vec![opts.source.clone()])?,
        rejects,
        rows,
    })
}

#[derive(Debug, Clone)]
pub struct FolderIngest {
    pub manifest: DatasetManifest,
    pub warnings: Vec<String>,
}

fn collect_images(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    };
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.is_dir() {
            collect_images(&path, out)?;
        } else if is_image(&path) {
            out.push(path);
        }
    }
    Ok(())
}

/// Reads a dataset whose labels are the names of its `benign/` and
/// `malignant/` subdirectories (matched case-insensitively, searched
/// recursively). Other subdirectories are ignored with a warning.
pub fn ingest_folders(root: &Path, source: &SourceCode) -> Result<FolderIngest, DataError> {
    let io = |source| DataError::Io {
        path: root.to_path_buf(),
        source,
    };
    let mut warnings = Vec::new();
    let mut label_dirs: Vec<(Label, PathBuf)> = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<_, _>>()
        .map_err(io)?;
    entries.sort();
    for path in entries.into_iter().filter(|p| p.is_dir()) {
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("").to_string();
        match name.parse::<Label>() {
            Ok(label) => label_dirs.push((label, path)),
            Err(_) => warnings.push(format!("ignoring directory {}", path.display())),
        }
    }
    if label_dirs.is_empty() {
        return Err(DataError::NoLabelFolders(root.to_path_buf()));
    }
    label_dirs.sort();
    let mut records = Vec::new();
    for label in Label::ALL {
        let mut files = Vec::new();
        for (_, dir) in label_dirs.iter().filter(|(l, _)| *l == label) {
            collect_images(dir, &mut files)?;
        }
        if files.is_empty() {
            warnings.push(format!("no {label} images under {}", root.display()));
        }
        files.sort();
        records.extend(files.into_iter().map(|p| SampleRecord::new(p, label, source.clone())));
    }
    if records.is_empty() {
        return Err(DataError::NoImages(root.to_path_buf()));
    }
    for w in &warnings {
        warn!("{w}");
    }
    Ok(FolderIngest {
        manifest: DatasetManifest::new(records, vec![source.clone()])?,
        warnings,
    })
}
