//! Artifact directories: versioned JSON envelopes, flat binary tensors and a
//! digest manifest tying every file to the config that produced it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::binfmt;
use crate::error::{Error, Result};
use crate::explanation::ConceptModel;
use crate::proto_model::{AddOn, Backbone, BasisBank, ClassifierHead, ModelConfig, ProtoModel};
use crate::trainer::{ProvenanceRecord, StageEvent};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

pub const NETWORK_FILE: &str = "network.json";
pub const BANK_FILE: &str = "basis_bank.bin";
pub const HEAD_FILE: &str = "head.bin";
pub const META_FILE: &str = "meta.json";
pub const PROVENANCE_FILE: &str = "provenance.json";
pub const CONCEPTS_FILE: &str = "concepts.json";
pub const TRAINING_LOG_FILE: &str = "training_log.jsonl";

/// Wrapper written around every JSON artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub schema_version: u32,
    pub config_hash: String,
    pub kind: String,
    pub data: T,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub sha256: String,
    pub config_hash: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub files: BTreeMap<String, FileRecord>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes into one directory and records each file in `manifest.json`.
pub struct ArtifactStore {
    dir: PathBuf,
    config_hash: String,
    manifest: Manifest,
}

impl ArtifactStore {
    pub fn open(dir: &Path, config_hash: &str) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST);
        let manifest = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            serde_json::from_str(&text)?
        } else {
            Manifest {
                schema_version: SCHEMA_VERSION,
                files: BTreeMap::new(),
            }
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            config_hash: config_hash.to_string(),
            manifest,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes raw bytes and records their digest. Updates the manifest on disk.
    pub fn write_bytes(&mut self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.manifest.files.insert(
            name.to_string(),
            FileRecord {
                sha256: sha256_hex(bytes),
                config_hash: self.config_hash.clone(),
            },
        );
        self.flush()?;
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, kind: &str, data: &T) -> Result<PathBuf> {
        let env = Envelope {
            schema_version: SCHEMA_VERSION,
            config_hash: self.config_hash.clone(),
            kind: kind.to_string(),
            data,
        };
        let mut text = serde_json::to_string_pretty(&env)?;
        text.push('\n');
        self.write_bytes(name, text.as_bytes())
    }

    pub fn write_tensor(&mut self, name: &str, dims: &[usize], values: &[f64]) -> Result<PathBuf> {
        let dims = dims.iter().map(|&d| binfmt::dim_u32(d)).collect::<Result<Vec<_>>>()?;
        let bytes = binfmt::encode(&dims, values)?;
        self.write_bytes(name, &bytes)
    }

    pub fn write_png(&mut self, name: &str, img: &image::RgbImage) -> Result<PathBuf> {
        let mut bytes = Vec::new();
        img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: self.path(name),
                source,
            })?;
        self.write_bytes(name, &bytes)
    }

    fn flush(&self) -> Result<()> {
        let path = self.path(MANIFEST);
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// Reads a JSON artifact, returning its payload and config hash.
pub fn read_json<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<(T, String)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let env: Envelope<T> = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if env.schema_version != SCHEMA_VERSION {
        return Err(Error::Format(format!(
            "{}: schema version {} (expected {SCHEMA_VERSION})",
            path.display(),
            env.schema_version
        )));
    }
    if env.kind != kind {
        return Err(Error::Format(format!(
            "{}: holds '{}', expected '{kind}'",
            path.display(),
            env.kind
        )));
    }
    Ok((env.data, env.config_hash))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkWeights {
    pub model_config: ModelConfig,
    pub backbone: Backbone,
    pub addon: AddOn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub class_names: Vec<String>,
    pub stages: Vec<StageEvent>,
    pub cycles: usize,
    pub converged: bool,
    pub config: serde_json::Value,
}

/// Everything `explain` and the analysis commands need.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ProtoModel,
    pub model_config: ModelConfig,
    pub meta: CheckpointMeta,
    pub provenance: Vec<ProvenanceRecord>,
    pub concepts: Option<ConceptModel>,
    pub config_hash: String,
}

pub fn save_model(store: &mut ArtifactStore, model: &ProtoModel, model_config: &ModelConfig) -> Result<()> {
    store.write_json(
        NETWORK_FILE,
        "network",
        &NetworkWeights {
            model_config: model_config.clone(),
            backbone: model.backbone.clone(),
            addon: model.addon.clone(),
        },
    )?;
    let (c, m, d) = model.bank.vectors.dim();
    let bank: Vec<f64> = model.bank.vectors.iter().copied().collect();
    store.write_tensor(BANK_FILE, &[c, m, d], &bank)?;
    let (r, k) = model.head.weights.dim();
    let head: Vec<f64> = model.head.weights.iter().copied().collect();
    store.write_tensor(HEAD_FILE, &[r, k], &head)?;
    Ok(())
}

pub fn save_checkpoint(
    store: &mut ArtifactStore,
    model: &ProtoModel,
    model_config: &ModelConfig,
    meta: &CheckpointMeta,
    provenance: &[ProvenanceRecord],
) -> Result<()> {
    save_model(store, model, model_config)?;
    store.write_json(META_FILE, "meta", meta)?;
    store.write_json(PROVENANCE_FILE, "provenance", &provenance)?;
    Ok(())
}

fn check_hash(expected: &str, got: &str, file: &str) -> Result<()> {
    if expected != got {
        return Err(Error::Format(format!(
            "{file} was written under config {got}, checkpoint meta under {expected}"
        )));
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let (meta, config_hash): (CheckpointMeta, String) = read_json(&dir.join(META_FILE), "meta")?;
    let (net, h): (NetworkWeights, String) = read_json(&dir.join(NETWORK_FILE), "network")?;
    check_hash(&config_hash, &h, NETWORK_FILE)?;
    let (provenance, h): (Vec<ProvenanceRecord>, String) = read_json(&dir.join(PROVENANCE_FILE), "provenance")?;
    check_hash(&config_hash, &h, PROVENANCE_FILE)?;

    let (dims, values) = binfmt::read(&dir.join(BANK_FILE), 3)?;
    let vectors = Array3::from_shape_vec((dims[0], dims[1], dims[2]), values)
        .map_err(|e| Error::Format(format!("{BANK_FILE}: {e}")))?;
    let bank = BasisBank::new(vectors, meta.class_names.clone())?;
    let (dims, values) = binfmt::read(&dir.join(HEAD_FILE), 2)?;
    let weights = Array2::from_shape_vec((dims[0], dims[1]), values)
        .map_err(|e| Error::Format(format!("{HEAD_FILE}: {e}")))?;
    if weights.dim() != (bank.num_classes(), bank.total()) {
        return Err(Error::Dimension(format!(
            "head {:?} does not match bank of {} classes x {} vectors",
            weights.dim(),
            bank.num_classes(),
            bank.total()
        )));
    }
    let concepts_path = dir.join(CONCEPTS_FILE);
    let concepts = if concepts_path.exists() {
        let (c, h): (ConceptModel, String) = read_json(&concepts_path, "concepts")?;
        check_hash(&config_hash, &h, CONCEPTS_FILE)?;
        Some(c)
    } else {
        None
    };
    Ok(Checkpoint {
        model: ProtoModel {
            backbone: net.backbone,
            addon: net.addon,
            bank,
            head: ClassifierHead { weights },
        },
        model_config: net.model_config,
        meta,
        provenance,
        concepts,
        config_hash,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub config_hashes: Vec<String>,
    /// Files whose bytes no longer match their recorded digest.
    pub modified: Vec<String>,
    /// Files present on disk but absent from the manifest.
    pub unrecorded: Vec<String>,
    /// Manifest entries whose file is gone.
    pub missing: Vec<String>,
    /// JSON files whose embedded hash differs from the manifest entry.
    pub inconsistent: Vec<String>,
}

impl VerifyReport {
    pub fn is_clean(&self) -> bool {
        self.config_hashes.len() <= 1
            && self.modified.is_empty()
            && self.unrecorded.is_empty()
            && self.missing.is_empty()
            && self.inconsistent.is_empty()
    }
}

fn list_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        if p.is_dir() {
            list_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).unwrap_or(&p).to_string_lossy().replace('\\', "/");
            out.push(rel);
        }
    }
    Ok(())
}

/// Checks that every artifact in `dir` stems from a single config and is unmodified.
pub fn verify_dir(dir: &Path) -> Result<VerifyReport> {
    let path = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut report = VerifyReport::default();
    let mut hashes = std::collections::BTreeSet::new();
    for (name, rec) in &manifest.files {
        hashes.insert(rec.config_hash.clone());
        let p = dir.join(name);
        let Ok(bytes) = std::fs::read(&p) else {
            report.missing.push(name.clone());
            continue;
        };
        if sha256_hex(&bytes) != rec.sha256 {
            report.modified.push(name.clone());
        }
        if name.ends_with(".json") {
            let embedded = serde_json::from_slice::<serde_json::Value>(&bytes)
                .ok()
                .and_then(|v| v.get("config_hash").and_then(|h| h.as_str()).map(str::to_string));
            if embedded.as_deref() != Some(rec.config_hash.as_str()) {
                report.inconsistent.push(name.clone());
            }
        }
    }
    let mut on_disk = Vec::new();
    list_files(dir, dir, &mut on_disk)?;
    report.unrecorded = on_disk
        .into_iter()
        .filter(|f| f != MANIFEST && !manifest.files.contains_key(f))
        .collect();
    report.config_hashes = hashes.into_iter().collect();
    Ok(report)
}
