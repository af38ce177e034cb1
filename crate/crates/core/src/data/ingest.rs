use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::AugmentConfig;
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "bmp", "gif", "tif", "tiff", "webp"];

/// Name of the optional CSV manifest (`path,label` columns) at a dataset root.
pub const CSV_MANIFEST: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    /// Paths relative to the dataset root, sorted.
    pub images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub classes: Vec<ClassEntry>,
    pub split: String,
    pub image_size: usize,
    pub augmentation: AugmentConfig,
    pub skipped: Vec<SkippedFile>,
}

impl DatasetManifest {
    pub fn num_images(&self) -> usize {
        self.classes.iter().map(|c| c.images.len()).sum()
    }

    /// SHA-256 over the class/image listing.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.classes {
            h.update(c.name.as_bytes());
            h.update([0]);
            for img in &c.images {
                h.update(img.as_bytes());
                h.update([1]);
            }
        }
        h.update(self.split.as_bytes());
        h.update((self.image_size as u64).to_le_bytes());
        hex::encode(h.finalize())
    }
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

fn decodable(path: &Path) -> std::result::Result<(), String> {
    image::ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .decode()
        .map(|_| ())
        .map_err(|e| e.to_string())
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

fn rel(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .to_string_lossy()
        .replace('\\', "/")
}

fn listing_from_folders(root: &Path) -> Result<BTreeMap<String, Vec<PathBuf>>> {
    let mut out = BTreeMap::new();
    for dir in read_dir_sorted(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if name.starts_with('.') {
            continue;
        }
        let files = read_dir_sorted(&dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_image(p))
            .collect();
        out.insert(name, files);
    }
    Ok(out)
}

fn listing_from_csv(root: &Path, csv_path: &Path) -> Result<BTreeMap<String, Vec<PathBuf>>> {
    let mut reader = csv::Reader::from_path(csv_path)
        .map_err(|e| Error::Format(format!("{}: {e}", csv_path.display())))?;
    let mut out: BTreeMap<String, Vec<PathBuf>> = BTreeMap::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Format(format!("{}: {e}", csv_path.display())))?;
        let (Some(path), Some(label)) = (row.get(0), row.get(1)) else {
            return Err(Error::Format(format!(
                "{}: expected `path,label` columns",
                csv_path.display()
            )));
        };
        out.entry(label.trim().to_string())
            .or_default()
            .push(root.join(path.trim()));
    }
    for files in out.values_mut() {
        files.sort();
    }
    Ok(out)
}

/// Enumerates decodable images of a folder-per-class dataset (or one described
/// by `manifest.csv`). Undecodable files are skipped and logged.
pub fn ingest_dataset(root: &Path, aug: &AugmentConfig) -> Result<DatasetManifest> {
    if !root.is_dir() {
        return Err(Error::Validation(format!(
            "dataset root {} is not a directory",
            root.display()
        )));
    }
    let csv_path = root.join(CSV_MANIFEST);
    let listing = if csv_path.is_file() {
        listing_from_csv(root, &csv_path)?
    } else {
        listing_from_folders(root)?
    };
    let mut seen = BTreeSet::new();
    let mut skipped = Vec::new();
    let mut classes = Vec::new();
    for (name, files) in listing {
        let mut images = Vec::new();
        for path in files {
            let r = rel(root, &path);
            if !seen.insert(r.clone()) {
                log::warn!("{r} listed more than once; keeping the first entry");
                skipped.push(SkippedFile {
                    path: r,
                    reason: "duplicate entry".into(),
                });
                continue;
            }
            match decodable(&path) {
                Ok(()) => images.push(r),
                Err(reason) => {
                    log::warn!("skipping {r}: {reason}");
                    skipped.push(SkippedFile { path: r, reason });
                }
            }
        }
        if images.is_empty() {
            log::warn!("class {name} has no decodable images and is dropped");
            continue;
        }
        classes.push(ClassEntry { name, images });
    }
    if classes.len() < 2 {
        return Err(Error::Validation(format!(
            "{} has {} usable class folders, need at least 2",
            root.display(),
            classes.len()
        )));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        classes,
        split: "train".into(),
        image_size: crate::proto_model::INPUT_SIZE,
        augmentation: aug.clone(),
        skipped,
    })
}
