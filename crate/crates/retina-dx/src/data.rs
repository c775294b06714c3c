//! Dataset plumbing: manifest files, the seeded 80/20 split, mini-batch
//! index slicing, and directory ingestion with per-folder or per-list
//! labeling rules.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, Rng};

/// Binary screening label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Healthy,
    DrSigns,
}

impl Label {
    /// The manifest token: `healthy` or `dr_signs`.
    pub fn token(self) -> &'static str {
        match self {
            Label::Healthy => "healthy",
            Label::DrSigns => "dr_signs",
        }
    }

    pub fn parse(token: &str) -> Option<Self> {
        match token {
            "healthy" => Some(Label::Healthy),
            "dr_signs" => Some(Label::DrSigns),
            _ => None,
        }
    }

    /// Class index used by the network: healthy = 0, dr_signs = 1.
    pub fn index(self) -> usize {
        match self {
            Label::Healthy => 0,
            Label::DrSigns => 1,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        match index {
            0 => Some(Label::Healthy),
            1 => Some(Label::DrSigns),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// An ordered list of (relative path, label) pairs. Paths are unique and use
/// forward slashes regardless of platform.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    pub entries: Vec<(String, Label)>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, entries: Vec<(String, Label)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (row, (path, _)) in entries.iter().enumerate() {
            if path.is_empty() {
                return Err(Error::ManifestRow {
                    row: row + 1,
                    reason: "empty path".into(),
                });
            }
            if !seen.insert(path.as_str()) {
                return Err(Error::ManifestRow {
                    row: row + 1,
                    reason: format!("duplicate path {path:?}"),
                });
            }
        }
        Ok(Self {
            name: name.into(),
            entries,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

const MANIFEST_HEADER: &str = "path,label";

/// Parses manifest text: a `path,label` header then one `path,token` row per
/// line, LF separated. Label is the text after the LAST comma so paths may
/// contain commas. Errors name the offending data row (1-based).
pub fn parse_manifest(name: &str, text: &str) -> Result<DatasetManifest> {
    let mut lines = text
        .lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l))
        .peekable();
    // A completely empty file is an empty manifest.
    if lines.peek().is_none() {
        return DatasetManifest::new(name, Vec::new());
    }
    let header = lines.next().unwrap();
    if header != MANIFEST_HEADER {
        return Err(Error::ManifestRow {
            row: 0,
            reason: format!("header must be {MANIFEST_HEADER:?}, got {header:?}"),
        });
    }
    let mut entries = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 1;
        if line.is_empty() {
            continue;
        }
        let (path, token) = line.rsplit_once(',').ok_or_else(|| Error::ManifestRow {
            row,
            reason: format!("no comma in {line:?}"),
        })?;
        let label = Label::parse(token).ok_or_else(|| Error::ManifestRow {
            row,
            reason: format!("unknown label token {token:?}"),
        })?;
        if path.is_empty() {
            return Err(Error::ManifestRow {
                row,
                reason: "empty path".into(),
            });
        }
        entries.push((path.to_string(), label));
    }
    // Re-validate uniqueness with real row numbers.
    let mut seen = BTreeSet::new();
    for (i, (path, _)) in entries.iter().enumerate() {
        if !seen.insert(path.as_str()) {
            return Err(Error::ManifestRow {
                row: i + 1,
                reason: format!("duplicate path {path:?}"),
            });
        }
    }
    DatasetManifest::new(name, entries)
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "manifest".into());
    parse_manifest(&name, &text)
}

pub fn manifest_to_string(manifest: &DatasetManifest) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for (path, label) in &manifest.entries {
        out.push_str(path);
        out.push(',');
        out.push_str(label.token());
        out.push('\n');
    }
    out
}

pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    std::fs::write(path, manifest_to_string(manifest))?;
    Ok(())
}

/// Index sets of a seeded split. Both lists keep permutation order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

/// Splits `0..n` into train/test by permuting the indices on the seed's
/// split stream and taking the first floor(0.8·n) for training. Needs at
/// least 2 samples so both sides are non-empty.
pub fn split_indices(n: usize, seed: u64) -> Result<SplitAssignment> {
    if n < 2 {
        return Err(Error::InvalidParam(format!(
            "need at least 2 samples to split, got {n}"
        )));
    }
    let perm = Rng::with_stream(seed, streams::SPLIT).shuffle(n);
    let cut = n * 8 / 10; // floor(0.8·n), exact in integers
    let (train, test) = perm.split_at(cut);
    Ok(SplitAssignment {
        train: train.to_vec(),
        test: test.to_vec(),
        seed,
    })
}

/// The 80/20 split over a manifest's rows.
pub fn split_80_20(manifest: &DatasetManifest, seed: u64) -> Result<SplitAssignment> {
    split_indices(manifest.len(), seed)
}

/// Cuts an index list into consecutive batches of `batch_size`; the final
/// batch keeps the remainder (it is smaller, never dropped).
pub fn make_batches(indices: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    assert!(batch_size > 0, "batch size must be >= 1");
    indices.chunks(batch_size).map(|c| c.to_vec()).collect()
}

/// How ingestion assigns labels to files found under the dataset root.
#[derive(Clone, Debug)]
pub enum LabelRule {
    /// Label by the first path component under the root: files below
    /// `healthy_dir` are healthy, below `dr_signs_dir` have signs, anything
    /// else is skipped.
    Subdirs {
        healthy_dir: String,
        dr_signs_dir: String,
    },
    /// A text file naming the healthy images (one file name per line);
    /// every other image is labeled dr_signs. Matching is by file name.
    NormalList { list_file: PathBuf },
}

/// Walks `root` for `.ppm`/`.pgm` images, labels them with `rule`, and
/// returns a manifest ordered by relative path plus the count of files that
/// were skipped (non-image extensions, or subdirs outside the rule). Paths
/// in the manifest are relative to `root` with `/` separators.
pub fn ingest_directory(root: &Path, rule: &LabelRule) -> Result<(DatasetManifest, usize)> {
    let normal_names: Option<BTreeSet<String>> = match rule {
        LabelRule::NormalList { list_file } => {
            let text = std::fs::read_to_string(list_file)?;
            Some(
                text.lines()
                    .map(|l| l.trim())
                    .filter(|l| !l.is_empty())
                    .map(|l| l.to_string())
                    .collect(),
            )
        }
        LabelRule::Subdirs { .. } => None,
    };

    let mut files: Vec<PathBuf> = Vec::new();
    for entry in walkdir::WalkDir::new(root) {
        let entry = entry.map_err(|e| {
            Error::Io(e.into_io_error().unwrap_or_else(|| {
                std::io::Error::new(std::io::ErrorKind::Other, "walk error")
            }))
        })?;
        if entry.file_type().is_file() {
            files.push(entry.into_path());
        }
    }

    let mut keyed: Vec<(String, PathBuf)> = files
        .into_iter()
        .map(|p| {
            let rel = p
                .strip_prefix(root)
                .unwrap_or(&p)
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            (rel, p)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0));

    let mut entries = Vec::new();
    let mut skipped = 0usize;
    for (rel, path) in keyed {
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase());
        if !matches!(ext.as_deref(), Some("ppm") | Some("pgm")) {
            skipped += 1;
            continue;
        }
        let label = match rule {
            LabelRule::Subdirs {
                healthy_dir,
                dr_signs_dir,
            } => {
                let first = rel.split('/').next().unwrap_or("");
                if first == healthy_dir {
                    Label::Healthy
                } else if first == dr_signs_dir {
                    Label::DrSigns
                } else {
                    skipped += 1;
                    continue;
                }
            }
            LabelRule::NormalList { .. } => {
                let names = normal_names.as_ref().unwrap();
                let base = path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                if names.contains(&base) {
                    Label::Healthy
                } else {
                    Label::DrSigns
                }
            }
        };
        entries.push((rel, label));
    }

    if entries.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let name = root
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    Ok((DatasetManifest::new(name, entries)?, skipped))
}
