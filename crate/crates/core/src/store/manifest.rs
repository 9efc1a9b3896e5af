//! Dataset manifest: a JSON catalog of videos, their views, labels and splits.
//!
//! ```json
//! {
//!   "dataset": "order-bench",
//!   "classes": ["a", "b"],
//!   "views": ["front", "side"],
//!   "tokens_per_frame": 5,
//!   "dim": 32,
//!   "is_clip_level": false,
//!   "records": [
//!     {"video_id": "front_0_0", "view": "front", "class_id": 0,
//!      "split": "train", "path": "embeddings/front_0_0.fpeb", "frame_count": 48}
//!   ]
//! }
//! ```
//!
//! Record paths are relative to the manifest's directory.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::embedding::read_header;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub video_id: String,
    pub view: String,
    pub class_id: usize,
    pub split: Split,
    pub path: PathBuf,
    pub frame_count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub classes: Vec<String>,
    pub views: Vec<String>,
    pub tokens_per_frame: u32,
    pub dim: u32,
    /// Records hold clip-level embeddings from a video backbone; temporal fusion is bypassed.
    #[serde(default)]
    pub is_clip_level: bool,
    pub records: Vec<VideoRecord>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Manifest = serde_json::from_str(&text)?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, record: &VideoRecord) -> PathBuf {
        self.base_dir.join(&record.path)
    }

    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &VideoRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Views that have at least one record in `split`, in manifest view order.
    pub fn views_in(&self, split: Split) -> Vec<String> {
        self.views
            .iter()
            .filter(|v| self.records_in(split).any(|r| &r.view == *v))
            .cloned()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IssueCode {
    MissingFile,
    HeaderMismatch,
    CorruptFile,
    OverlappingSplits,
    UnknownView,
    BadClassId,
    Empty,
}

impl IssueCode {
    pub fn as_str(&self) -> &'static str {
        match self {
            IssueCode::MissingFile => "MISSING_FILE",
            IssueCode::HeaderMismatch => "HEADER_MISMATCH",
            IssueCode::CorruptFile => "CORRUPT_FILE",
            IssueCode::OverlappingSplits => "OVERLAPPING_SPLITS",
            IssueCode::UnknownView => "UNKNOWN_VIEW",
            IssueCode::BadClassId => "BAD_CLASS_ID",
            IssueCode::Empty => "EMPTY_MANIFEST",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationIssue {
    pub code: IssueCode,
    pub video_id: Option<String>,
    pub detail: String,
}

impl fmt::Display for ValidationIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.code.as_str())?;
        if let Some(id) = &self.video_id {
            write!(f, " [{id}]")?;
        }
        write!(f, ": {}", self.detail)
    }
}

/// Every problem found in a manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationErrors {
    pub issues: Vec<ValidationIssue>,
}

impl ValidationErrors {
    pub fn codes(&self) -> BTreeSet<IssueCode> {
        self.issues.iter().map(|i| i.code).collect()
    }

    pub fn has(&self, code: IssueCode) -> bool {
        self.issues.iter().any(|i| i.code == code)
    }
}

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} issue(s)", self.issues.len())?;
        for issue in &self.issues {
            write!(f, "\n  {issue}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationErrors {}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ManifestReport {
    pub records: usize,
    pub per_split: BTreeMap<Split, usize>,
    pub per_view: BTreeMap<String, usize>,
    pub per_class: Vec<usize>,
    /// `per_view_class[view][class]` record counts.
    pub per_view_class: BTreeMap<String, Vec<usize>>,
}

impl fmt::Display for ManifestReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "records: {}", self.records)?;
        for (split, n) in &self.per_split {
            writeln!(f, "  split {split}: {n}")?;
        }
        for (view, counts) in &self.per_view_class {
            writeln!(f, "  view {view}: {} {:?}", self.per_view[view], counts)?;
        }
        Ok(())
    }
}

/// Checks manifest invariants and every referenced file's header.
pub fn validate_manifest(manifest: &Manifest) -> std::result::Result<ManifestReport, ValidationErrors> {
    let mut issues = Vec::new();
    let mut issue = |code, video_id: Option<&str>, detail: String| {
        issues.push(ValidationIssue {
            code,
            video_id: video_id.map(str::to_string),
            detail,
        })
    };

    if manifest.records.is_empty() {
        issue(IssueCode::Empty, None, "manifest has no records".into());
    }
    let views: BTreeSet<&str> = manifest.views.iter().map(String::as_str).collect();
    let mut splits_by_id: HashMap<&str, BTreeSet<Split>> = HashMap::new();

    for record in &manifest.records {
        let id = Some(record.video_id.as_str());
        splits_by_id
            .entry(record.video_id.as_str())
            .or_default()
            .insert(record.split);
        if !views.contains(record.view.as_str()) {
            issue(IssueCode::UnknownView, id, format!("view `{}` is not declared", record.view));
        }
        if record.class_id >= manifest.classes.len() {
            issue(
                IssueCode::BadClassId,
                id,
                format!("class id {} >= {} classes", record.class_id, manifest.classes.len()),
            );
        }
        let path = manifest.resolve(record);
        if !path.is_file() {
            issue(IssueCode::MissingFile, id, format!("{} does not exist", path.display()));
            continue;
        }
        match read_header(&path) {
            Err(e) => issue(IssueCode::CorruptFile, id, e.to_string()),
            Ok(h) => {
                let expected = (record.frame_count, manifest.tokens_per_frame, manifest.dim);
                let found = (h.frame_count, h.tokens, h.dim);
                if expected != found {
                    issue(
                        IssueCode::HeaderMismatch,
                        id,
                        format!("header (F, N, D) = {found:?}, manifest says {expected:?}"),
                    );
                } else if let Ok(len) = std::fs::metadata(&path).map(|m| m.len()) {
                    let want = (super::embedding::HEADER_LEN + h.payload_len() * 4) as u64;
                    if len != want {
                        issue(
                            IssueCode::CorruptFile,
                            id,
                            format!("file is {len} bytes, header implies {want}"),
                        );
                    }
                }
            }
        }
    }

    let mut overlapping: Vec<_> = splits_by_id.iter().filter(|(_, s)| s.len() > 1).collect();
    overlapping.sort();
    for (id, splits) in overlapping {
        issue(
            IssueCode::OverlappingSplits,
            Some(id),
            format!("video appears in splits {splits:?}"),
        );
    }

    if !issues.is_empty() {
        return Err(ValidationErrors { issues });
    }

    let mut report = ManifestReport {
        records: manifest.records.len(),
        per_split: BTreeMap::new(),
        per_view: BTreeMap::new(),
        per_class: vec![0; manifest.classes.len()],
        per_view_class: BTreeMap::new(),
    };
    for r in &manifest.records {
        *report.per_split.entry(r.split).or_default() += 1;
        *report.per_view.entry(r.view.clone()).or_default() += 1;
        report.per_class[r.class_id] += 1;
        report
            .per_view_class
            .entry(r.view.clone())
            .or_insert_with(|| vec![0; manifest.classes.len()])[r.class_id] += 1;
    }
    Ok(report)
}
