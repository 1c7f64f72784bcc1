//! On-disk dataset layout:
//!
//! ```text
//! <dir>/manifest.json        format tag, version, generator config, separability,
//!                            split item counts and the SHA-256 of every other file
//! <dir>/<split>.jsonl        one record per item: id, split, labels, tokens,
//!                            offset and len into the feature blob (in floats)
//! <dir>/features.bin         "EVPAFEAT", u32 version, u64 float count,
//!                            then the floats as little-endian f32
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, GeneratorConfig, Item, Split, SplitName};
use crate::error::{DataError, Result};

pub const FEATURE_MAGIC: &[u8; 8] = b"EVPAFEAT";
pub const FORMAT_VERSION: u32 = 1;
const FORMAT_TAG: &str = "egovpa-dataset";
const FEATURES: &str = "features.bin";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: GeneratorConfig,
    separability: f64,
    counts: Vec<(String, usize)>,
    /// File name to hex SHA-256.
    checksums: Vec<(String, String)>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: u64,
    split: SplitName,
    labels: Vec<usize>,
    tokens: Vec<usize>,
    offset: u64,
    len: u64,
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn malformed(what: impl Into<String>) -> DataError {
    DataError::Malformed(what.into())
}

fn split_file(s: SplitName) -> String {
    format!("{}.jsonl", s.name())
}

/// Writes the dataset into directory `dir` (created if needed).
pub fn save(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::new();
    blob.extend_from_slice(FEATURE_MAGIC);
    blob.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let total: usize = ds.splits.iter().flat_map(|s| &s.items).map(|i| i.patches.len()).sum();
    blob.extend_from_slice(&(total as u64).to_le_bytes());
    let mut checksums = Vec::new();
    let mut offset = 0u64;
    for split in &ds.splits {
        let mut text = String::new();
        for it in &split.items {
            let rec = Record {
                id: it.id,
                split: split.name,
                labels: it.labels.clone(),
                tokens: it.words.clone(),
                offset,
                len: it.patches.len() as u64,
            };
            text.push_str(&serde_json::to_string(&rec).map_err(|e| malformed(e.to_string()))?);
            text.push('\n');
            for &x in &it.patches {
                blob.extend_from_slice(&x.to_le_bytes());
            }
            offset += it.patches.len() as u64;
        }
        let name = split_file(split.name);
        checksums.push((name.clone(), sha(text.as_bytes())));
        fs::write(dir.join(&name), text)?;
    }
    checksums.push((FEATURES.into(), sha(&blob)));
    fs::write(dir.join(FEATURES), &blob)?;
    let manifest = Manifest {
        format: FORMAT_TAG.into(),
        version: FORMAT_VERSION,
        config: ds.config.clone(),
        separability: ds.separability,
        counts: ds.splits.iter().map(|s| (s.name.name().into(), s.items.len())).collect(),
        checksums,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| malformed(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(())
}

fn read_checked(dir: &Path, name: &str, manifest: &Manifest) -> Result<Vec<u8>> {
    let bytes = fs::read(dir.join(name))?;
    let expected = manifest
        .checksums
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, h)| h.clone())
        .ok_or_else(|| malformed(format!("manifest lists no checksum for {name}")))?;
    let found = sha(&bytes);
    if found != expected {
        return Err(DataError::Checksum {
            file: name.into(),
            expected,
            found,
        }
        .into());
    }
    Ok(bytes)
}

fn parse_features(bytes: &[u8]) -> Result<Vec<f32>, DataError> {
    if bytes.len() < 20 {
        return Err(DataError::Truncated(format!("{FEATURES} header")));
    }
    if &bytes[..8] != FEATURE_MAGIC {
        return Err(malformed(format!("{FEATURES} has a bad magic tag")));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(DataError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let count = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[20..];
    if body.len() < count * 4 {
        return Err(DataError::Truncated(format!(
            "{FEATURES} declares {count} floats but holds {}",
            body.len() / 4
        )));
    }
    if body.len() > count * 4 {
        return Err(malformed(format!("{FEATURES} has trailing bytes")));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect())
}

/// Reads a dataset directory, verifying version, checksums and offsets.
pub fn load(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| malformed(format!("manifest.json: {e}")))?;
    if let Some(v) = raw.get("version").and_then(|v| v.as_u64()) {
        if v != FORMAT_VERSION as u64 {
            return Err(DataError::VersionMismatch {
                found: v as u32,
                expected: FORMAT_VERSION,
            }
            .into());
        }
    }
    let manifest: Manifest =
        serde_json::from_value(raw).map_err(|e| malformed(format!("manifest.json: {e}")))?;
    if manifest.format != FORMAT_TAG {
        return Err(malformed(format!("unknown dataset format `{}`", manifest.format)).into());
    }
    let floats = parse_features(&read_checked(dir, FEATURES, &manifest)?)?;
    let cfg = manifest.config.clone();
    let per_item = cfg.item_floats();
    let mut splits = Vec::new();
    for name in SplitName::ALL {
        let file = split_file(name);
        let bytes = read_checked(dir, &file, &manifest)?;
        let body = String::from_utf8(bytes).map_err(|_| malformed(format!("{file} is not UTF-8")))?;
        let mut items = Vec::new();
        for (n, line) in body.lines().enumerate() {
            let rec: Record =
                serde_json::from_str(line).map_err(|e| malformed(format!("{file} line {}: {e}", n + 1)))?;
            let (start, len) = (rec.offset as usize, rec.len as usize);
            if rec.split != name || len != per_item {
                return Err(malformed(format!("{file} line {}: record does not fit its split", n + 1)).into());
            }
            let patches = floats
                .get(start..start + len)
                .ok_or_else(|| DataError::Truncated(format!("{file} line {} points past the features", n + 1)))?
                .to_vec();
            items.push(Item {
                id: rec.id,
                labels: rec.labels,
                words: rec.tokens,
                patches,
            });
        }
        let declared = manifest.counts.iter().find(|(s, _)| s == name.name()).map(|(_, c)| *c);
        if declared != Some(items.len()) {
            return Err(malformed(format!("{file} holds {} items, manifest says {declared:?}", items.len())).into());
        }
        splits.push(Split { name, items });
    }
    Ok(Dataset {
        config: cfg,
        splits,
        separability: manifest.separability,
    })
}
