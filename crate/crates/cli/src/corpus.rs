//! Evaluation corpora on disk: `reports/<id>.txt` plus `annotations.json`.

use std::fs;
use std::path::{Path, PathBuf};

use clinex_core::chat::sha256_hex;
use clinex_core::metrics::AnnotationSet;
use clinex_core::Report;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const ANNOTATIONS_FILE: &str = "annotations.json";
pub const REPORTS_DIR: &str = "reports";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnnotationFile {
    pub schema_version: u32,
    pub annotations: Vec<AnnotationSet>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub dir: PathBuf,
    /// Directory name plus a content hash of every report and the annotations.
    pub id: String,
    /// Sorted by id.
    pub reports: Vec<Report>,
    pub annotations: Vec<AnnotationSet>,
}

impl Corpus {
    pub fn load(dir: impl AsRef<Path>) -> Result<Corpus, CliError> {
        let dir = dir.as_ref().to_path_buf();
        let rdir = dir.join(REPORTS_DIR);
        let entries = fs::read_dir(&rdir).map_err(|e| CliError::io(&rdir, e))?;
        let mut reports = Vec::new();
        for entry in entries {
            let path = entry.map_err(|e| CliError::io(&rdir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("txt") {
                continue;
            }
            let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
            reports.push(Report::new(id, text.trim_end()));
        }
        reports.sort_by(|a, b| a.id.cmp(&b.id));
        if reports.is_empty() {
            return Err(CliError::Config(format!("no reports found in {}", rdir.display())));
        }

        let apath = dir.join(ANNOTATIONS_FILE);
        let annotations = if apath.exists() {
            let text = fs::read_to_string(&apath).map_err(|e| CliError::io(&apath, e))?;
            let file: AnnotationFile = serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", apath.display())))?;
            file.annotations
        } else {
            Vec::new()
        };

        let mut digest = String::new();
        for r in &reports {
            digest.push_str(&r.id);
            digest.push('\0');
            digest.push_str(&r.text);
            digest.push('\0');
        }
        digest.push_str(&serde_json::to_string(&annotations).unwrap_or_default());
        let name = match dir.file_name().and_then(|s| s.to_str()) {
            Some("corpus") | None => dir.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()).unwrap_or("corpus"),
            Some(n) => n,
        };
        let id = format!("{name}-{}", &sha256_hex(digest.as_bytes())[..12]);
        Ok(Corpus { dir, id, reports, annotations })
    }

    pub fn report_ids(&self) -> impl Iterator<Item = &str> {
        self.reports.iter().map(|r| r.id.as_str())
    }

    pub fn annotation(&self, report_id: &str) -> Option<&AnnotationSet> {
        self.annotations.iter().find(|a| a.report_id == report_id)
    }
}

/// Writes a corpus directory; used by fixtures and tests.
pub fn write_corpus(dir: impl AsRef<Path>, reports: &[Report], annotations: &[AnnotationSet]) -> std::io::Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir.join(REPORTS_DIR))?;
    for r in reports {
        fs::write(dir.join(REPORTS_DIR).join(format!("{}.txt", r.id)), format!("{}\n", r.text))?;
    }
    let file = AnnotationFile { schema_version: 1, annotations: annotations.to_vec() };
    fs::write(dir.join(ANNOTATIONS_FILE), serde_json::to_string_pretty(&file)? + "\n")
}
