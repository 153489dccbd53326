//! Dataset manifest: a JSON-lines index of samples plus a small meta sidecar.
//!
//! On disk a dataset is a directory:
//! ```text
//! dataset/
//!   manifest.jsonl      one sample entry per line (reviewable in diffs)
//!   meta.json           schema version + creation seed
//!   samples/<id>/       one directory per sample:
//!     landsat.cyb  climate.cyb  et.cyb  soil.cyb  sample.json
//! ```

use super::container::{read_container, write_container, ContainerError};
use super::{validate_sample, CountyCropSample, Violation};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad JSON in {path} line {line}: {source}")]
    Json {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("sample at {path} violates invariants: {}", summarize(.violations))]
    InvalidSample {
        path: String,
        violations: Vec<Violation>,
    },
    #[error("manifest entry for {path} disagrees with stored sample: {what}")]
    EntryMismatch { path: String, what: String },
}

fn summarize(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// One line of manifest.jsonl.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub county: String,
    pub crop: u32,
    pub crop_name: String,
    pub year: i32,
    /// Sample directory, relative to the dataset root.
    pub path: String,
    pub n_pixels: usize,
    pub m_pixels: usize,
    pub yield_t_ha: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetaInfo {
    pub schema_version: u32,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub meta: MetaInfo,
    pub root: PathBuf,
}

/// Per-sample scalar fields stored next to the tensors, so a sample directory
/// is self-describing even without the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SampleInfo {
    county: String,
    crop: u32,
    crop_name: String,
    year: i32,
    yield_t_ha: f64,
}

impl DatasetManifest {
    pub fn new(root: PathBuf, seed: u64) -> Self {
        DatasetManifest {
            entries: Vec::new(),
            meta: MetaInfo {
                schema_version: SCHEMA_VERSION,
                seed,
            },
            root,
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }

    pub fn write(&self) -> Result<(), DatasetError> {
        std::fs::create_dir_all(&self.root).map_err(io_err(&self.root))?;
        let mpath = self.manifest_path();
        let mut out = Vec::new();
        for e in &self.entries {
            let line = serde_json::to_string(e).expect("manifest entries serialize");
            out.extend_from_slice(line.as_bytes());
            out.push(b'\n');
        }
        std::fs::File::create(&mpath)
            .and_then(|mut f| f.write_all(&out))
            .map_err(io_err(&mpath))?;
        let meta_path = self.root.join("meta.json");
        let meta = serde_json::to_string_pretty(&self.meta).expect("meta serializes");
        std::fs::write(&meta_path, meta).map_err(io_err(&meta_path))?;
        Ok(())
    }

    pub fn read(root: &Path) -> Result<Self, DatasetError> {
        let mpath = root.join("manifest.jsonl");
        let file = std::fs::File::open(&mpath).map_err(io_err(&mpath))?;
        let mut entries = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(&mpath))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry =
                serde_json::from_str(&line).map_err(|source| DatasetError::Json {
                    path: mpath.display().to_string(),
                    line: i + 1,
                    source,
                })?;
            entries.push(entry);
        }
        let meta_path = root.join("meta.json");
        let meta_text = std::fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        let meta: MetaInfo =
            serde_json::from_str(&meta_text).map_err(|source| DatasetError::Json {
                path: meta_path.display().to_string(),
                line: 1,
                source,
            })?;
        Ok(DatasetManifest {
            entries,
            meta,
            root: root.to_path_buf(),
        })
    }

    /// Loads the tensors behind one entry and cross-checks them against the
    /// entry's declared pixel counts and label.
    pub fn load_sample(&self, entry: &ManifestEntry) -> Result<CountyCropSample, DatasetError> {
        let dir = self.root.join(&entry.path);
        let s = load_sample_dir(&dir)?;
        if s.n_pixels != entry.n_pixels || s.m_pixels != entry.m_pixels {
            return Err(DatasetError::EntryMismatch {
                path: entry.path.clone(),
                what: format!(
                    "pixels (N={}, M={}) on disk vs (N={}, M={}) in manifest",
                    s.n_pixels, s.m_pixels, entry.n_pixels, entry.m_pixels
                ),
            });
        }
        if s.yield_label.to_bits() != entry.yield_t_ha.to_bits() {
            return Err(DatasetError::EntryMismatch {
                path: entry.path.clone(),
                what: format!(
                    "yield {} on disk vs {} in manifest",
                    s.yield_label, entry.yield_t_ha
                ),
            });
        }
        Ok(s)
    }

    /// Loads and validates every sample; the manifest invariant is that all
    /// referenced files exist and round-trip to their declared shapes.
    pub fn verify_all(&self) -> Result<(), DatasetError> {
        for entry in &self.entries {
            let s = self.load_sample(entry)?;
            let violations = validate_sample(&s);
            if !violations.is_empty() {
                return Err(DatasetError::InvalidSample {
                    path: entry.path.clone(),
                    violations,
                });
            }
        }
        Ok(())
    }
}

/// Writes one sample's tensors + scalars into `dir`.
pub fn write_sample_dir(dir: &Path, s: &CountyCropSample) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_container(&s.landsat, &dir.join("landsat.cyb"))?;
    write_container(&s.climate, &dir.join("climate.cyb"))?;
    write_container(&s.et, &dir.join("et.cyb"))?;
    write_container(&s.soil, &dir.join("soil.cyb"))?;
    let info = SampleInfo {
        county: s.county_id.clone(),
        crop: s.crop_code,
        crop_name: s.crop_name.clone(),
        year: s.year,
        yield_t_ha: s.yield_label,
    };
    let ipath = dir.join("sample.json");
    let text = serde_json::to_string_pretty(&info).expect("sample info serializes");
    std::fs::write(&ipath, text).map_err(io_err(&ipath))?;
    Ok(())
}

/// Reads a sample directory back into memory. Pixel counts come from the
/// stored tensor shapes.
pub fn load_sample_dir(dir: &Path) -> Result<CountyCropSample, DatasetError> {
    let ipath = dir.join("sample.json");
    let text = std::fs::read_to_string(&ipath).map_err(io_err(&ipath))?;
    let info: SampleInfo = serde_json::from_str(&text).map_err(|source| DatasetError::Json {
        path: ipath.display().to_string(),
        line: 1,
        source,
    })?;
    let landsat = read_container(&dir.join("landsat.cyb"))?;
    let climate = read_container(&dir.join("climate.cyb"))?;
    let et = read_container(&dir.join("et.cyb"))?;
    let soil = read_container(&dir.join("soil.cyb"))?;
    let n_pixels = landsat.shape.get(2).copied().unwrap_or(0);
    let m_pixels = climate.shape.get(2).copied().unwrap_or(0);
    Ok(CountyCropSample {
        county_id: info.county,
        crop_code: info.crop,
        crop_name: info.crop_name,
        year: info.year,
        landsat,
        climate,
        et,
        soil,
        yield_label: info.yield_t_ha,
        n_pixels,
        m_pixels,
    })
}
