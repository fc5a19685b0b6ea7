//! On-disk dataset layout.
//!
//! ```text
//! <dir>/manifest.json          name, domain id, thresholds, index path
//! <dir>/index.csv              sample_id,split,file,easting,northing
//! <dir>/clouds/<id>.bin        "PCPR" | u32 version | u32 N | N x 3 f32 (LE)
//! ```

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{DataError, DomainDataset, GeoLocation, PointCloud, Sample, Split, ThresholdSpec};

pub const CLOUD_MAGIC: &[u8; 4] = b"PCPR";
pub const CLOUD_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const INDEX_FILE: &str = "index.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub domain_id: u32,
    pub thresholds: ThresholdSpec,
    /// Relative to the manifest's directory.
    pub index: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct IndexRow {
    sample_id: u64,
    split: Split,
    file: String,
    easting: f64,
    northing: f64,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, offset: u64, reason: impl Into<String>) -> DataError {
    DataError::Format {
        file: path.to_path_buf(),
        offset,
        reason: reason.into(),
    }
}

pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + cloud.len() * 12);
    buf.extend_from_slice(CLOUD_MAGIC);
    buf.extend_from_slice(&CLOUD_VERSION.to_le_bytes());
    buf.extend_from_slice(&(cloud.len() as u32).to_le_bytes());
    for p in cloud.points() {
        for c in p {
            buf.extend_from_slice(&(*c as f32).to_le_bytes());
        }
    }
    buf
}

/// Parses a cloud file; `path` is only used for error reporting.
pub fn decode_cloud(bytes: &[u8], path: &Path) -> Result<PointCloud, DataError> {
    if bytes.len() < 12 {
        return Err(format_err(path, bytes.len() as u64, "truncated header"));
    }
    if &bytes[0..4] != CLOUD_MAGIC {
        return Err(format_err(path, 0, "bad magic"));
    }
    let word = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = word(4);
    if version != CLOUD_VERSION {
        return Err(format_err(path, 4, format!("unsupported version {version}")));
    }
    let n = word(8) as usize;
    let expected = 12 + n * 12;
    if bytes.len() != expected {
        return Err(format_err(
            path,
            bytes.len().min(expected) as u64,
            format!("expected {expected} bytes for {n} points, found {}", bytes.len()),
        ));
    }
    let points = bytes[12..]
        .chunks_exact(12)
        .map(|c| {
            [0, 1, 2].map(|k| f64::from(f32::from_le_bytes(c[4 * k..4 * k + 4].try_into().unwrap())))
        })
        .collect();
    PointCloud::new(points).map_err(|e| format_err(path, 12, e.to_string()))
}

pub fn save_cloud(cloud: &PointCloud, path: &Path) -> Result<(), DataError> {
    fs::write(path, encode_cloud(cloud)).map_err(io_err(path))
}

pub fn load_cloud(path: &Path) -> Result<PointCloud, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_cloud(&bytes, path)
}

/// Writes manifest, index and cloud files under `dir`; returns the manifest
/// path.
pub fn save_dataset(dataset: &DomainDataset, dir: &Path) -> Result<PathBuf, DataError> {
    let clouds_dir = dir.join("clouds");
    fs::create_dir_all(&clouds_dir).map_err(io_err(&clouds_dir))?;
    let index_path = dir.join(INDEX_FILE);
    let mut writer = csv::Writer::from_path(&index_path).map_err(|e| csv_err(&index_path, e))?;
    for (split, s) in dataset.all_samples() {
        let file = format!("clouds/{}.bin", s.sample_id);
        save_cloud(&s.cloud, &dir.join(&file))?;
        writer
            .serialize(IndexRow {
                sample_id: s.sample_id,
                split,
                file,
                easting: s.location.x,
                northing: s.location.y,
            })
            .map_err(|e| csv_err(&index_path, e))?;
    }
    writer.flush().map_err(io_err(&index_path))?;
    let manifest = DatasetManifest {
        name: dataset.name.clone(),
        domain_id: dataset.domain_id,
        thresholds: dataset.thresholds,
        index: INDEX_FILE.into(),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, json).map_err(io_err(&manifest_path))?;
    Ok(manifest_path)
}

fn csv_err(path: &Path, e: csv::Error) -> DataError {
    let offset = e.position().map_or(0, |p| p.byte());
    format_err(path, offset, e.to_string())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| format_err(path, 0, e.to_string()))
}

pub fn load_dataset(manifest_path: &Path) -> Result<DomainDataset, DataError> {
    let manifest = read_manifest(manifest_path)?;
    manifest.thresholds.validate()?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let index_path = root.join(&manifest.index);
    let mut reader = csv::Reader::from_path(&index_path).map_err(|e| csv_err(&index_path, e))?;
    let mut dataset = DomainDataset {
        name: manifest.name,
        domain_id: manifest.domain_id,
        train: Vec::new(),
        test_database: Vec::new(),
        test_queries: Vec::new(),
        thresholds: manifest.thresholds,
    };
    for row in reader.deserialize::<IndexRow>() {
        let row = row.map_err(|e| csv_err(&index_path, e))?;
        let cloud_path = root.join(&row.file);
        if !cloud_path.is_file() {
            return Err(DataError::MissingIndexEntry {
                index: index_path.clone(),
                file: cloud_path,
            });
        }
        let sample = Sample {
            cloud: Arc::new(load_cloud(&cloud_path)?),
            location: GeoLocation::new(row.easting, row.northing),
            domain_id: manifest.domain_id,
            sample_id: row.sample_id,
        };
        match row.split {
            Split::Train => dataset.train.push(sample),
            Split::Db => dataset.test_database.push(sample),
            Split::Query => dataset.test_queries.push(sample),
        }
    }
    dataset.validate()?;
    let uncovered = dataset.uncovered_queries();
    if uncovered > 0 {
        log::warn!(
            "{}: {uncovered} queries have no database entry within {} m",
            dataset.name,
            dataset.thresholds.pos_test
        );
    }
    Ok(dataset)
}
