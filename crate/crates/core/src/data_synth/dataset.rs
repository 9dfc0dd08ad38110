//! On-disk datasets: a plain-text `manifest` plus one archive per sample
//! under `samples/<id>.bin`.
//!
//! Manifest lines:
//!
//! ```text
//! eta-dataset 1
//! split target_stream
//! geometry <height> <width>
//! depth_range <d_min> <d_max>
//! sample <id> <sha256 of samples/<id>.bin>
//! ...
//! ```
//!
//! Sample archives hold `image` (f32, H x W x 3), `sparse` (f32, H x W),
//! `sparse_mask` (u8, H x W) and, when ground truth exists, `gt` (f32) and
//! `gt_mask` (u8).

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::sample::{DepthMap, Sample};
use crate::archive::{read_artifact, sha256_hex, Archive, ArrayData};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest";
const MANIFEST_MAGIC: &str = "eta-dataset 1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    SourceTrain,
    SourceVal,
    TargetStream,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::SourceTrain => "source_train",
            Split::SourceVal => "source_val",
            Split::TargetStream => "target_stream",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source_train" => Ok(Split::SourceTrain),
            "source_val" => Ok(Split::SourceVal),
            "target_stream" => Ok(Split::TargetStream),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub root_path: PathBuf,
    pub sample_ids: Vec<String>,
    pub split: Split,
    pub geometry: (usize, usize),
    pub depth_range: (f64, f64),
    /// SHA-256 of each sample file, parallel to `sample_ids`. Filled on save.
    pub checksums: Vec<String>,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, split: Split, geometry: (usize, usize), depth_range: (f64, f64)) -> Self {
        Self {
            root_path: root.into(),
            sample_ids: Vec::new(),
            split,
            geometry,
            depth_range,
            checksums: Vec::new(),
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root_path.join(MANIFEST_FILE)
    }

    pub fn sample_path(&self, id: &str) -> PathBuf {
        sample_path(&self.root_path, id)
    }

    fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(MANIFEST_MAGIC);
        s.push('\n');
        s.push_str(&format!("split {}\n", self.split));
        s.push_str(&format!("geometry {} {}\n", self.geometry.0, self.geometry.1));
        s.push_str(&format!("depth_range {} {}\n", self.depth_range.0, self.depth_range.1));
        for (id, sum) in self.sample_ids.iter().zip(&self.checksums) {
            s.push_str(&format!("sample {id} {sum}\n"));
        }
        s
    }

    fn parse(text: &str, root: &Path, path: &Path) -> Result<Self> {
        let bad = |m: String| Error::Format {
            path: path.to_path_buf(),
            message: m,
        };
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_MAGIC) {
            return Err(bad("missing manifest header".into()));
        }
        let mut split = None;
        let mut geometry = None;
        let mut depth_range = None;
        let mut ids = Vec::new();
        let mut sums = Vec::new();
        for (no, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let num = |i: usize| -> Result<f64> {
                fields
                    .get(i)
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| bad(format!("line {}: bad number", no + 2)))
            };
            match fields.first().copied() {
                None => continue,
                Some("split") => split = Some(fields.get(1).copied().unwrap_or("").parse::<Split>()?),
                Some("geometry") => geometry = Some((num(1)? as usize, num(2)? as usize)),
                Some("depth_range") => depth_range = Some((num(1)?, num(2)?)),
                Some("sample") if fields.len() == 3 => {
                    ids.push(fields[1].to_string());
                    sums.push(fields[2].to_string());
                }
                Some(other) => return Err(bad(format!("line {}: unexpected `{other}`", no + 2))),
            }
        }
        let m = Self {
            root_path: root.to_path_buf(),
            sample_ids: ids,
            split: split.ok_or_else(|| bad("missing split".into()))?,
            geometry: geometry.ok_or_else(|| bad("missing geometry".into()))?,
            depth_range: depth_range.ok_or_else(|| bad("missing depth_range".into()))?,
            checksums: sums,
        };
        m.check_ids()?;
        Ok(m)
    }

    fn check_ids(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in &self.sample_ids {
            if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) || id.starts_with('.') {
                return Err(Error::invalid(format!("sample id `{id}` is not filename-safe")));
            }
            if !seen.insert(id) {
                return Err(Error::invalid(format!("duplicate sample id `{id}`")));
            }
        }
        Ok(())
    }
}

pub fn sample_path(root: &Path, id: &str) -> PathBuf {
    root.join("samples").join(format!("{id}.bin"))
}

fn mask_bytes(m: &[bool]) -> Vec<u8> {
    m.iter().map(|&b| b as u8).collect()
}

fn sample_archive(s: &Sample) -> Archive {
    let (h, w) = (s.height, s.width);
    let mut a = Archive::new(json!({ "kind": "sample", "frame_id": s.frame_id }));
    a.push("image", &[h, w, 3], ArrayData::F32(s.image.clone()));
    a.push("sparse", &[h, w], ArrayData::F32(s.sparse.values.clone()));
    a.push("sparse_mask", &[h, w], ArrayData::U8(mask_bytes(&s.sparse.mask)));
    if let Some(gt) = &s.gt {
        a.push("gt", &[h, w], ArrayData::F32(gt.values.clone()));
        a.push("gt_mask", &[h, w], ArrayData::U8(mask_bytes(&gt.mask)));
    }
    a
}

fn decode_sample(a: &Archive, id: &str, path: &Path) -> Result<Sample> {
    let bad = |m: &str| Error::Format {
        path: path.to_path_buf(),
        message: m.to_string(),
    };
    let f32s = |name: &str| -> Result<(Vec<usize>, Vec<f32>)> {
        match a.get(name) {
            Some(arr) => match &arr.data {
                ArrayData::F32(v) => Ok((arr.shape.clone(), v.clone())),
                _ => Err(bad(&format!("`{name}` is not f32"))),
            },
            None => Err(bad(&format!("missing array `{name}`"))),
        }
    };
    let mask = |name: &str| -> Result<Vec<bool>> {
        match a.get(name).map(|arr| &arr.data) {
            Some(ArrayData::U8(v)) => Ok(v.iter().map(|&b| b != 0).collect()),
            _ => Err(bad(&format!("missing or mistyped mask `{name}`"))),
        }
    };
    let (shape, image) = f32s("image")?;
    if shape.len() != 3 || shape[2] != 3 {
        return Err(bad("image must be H x W x 3"));
    }
    let (h, w) = (shape[0], shape[1]);
    let (_, sparse) = f32s("sparse")?;
    let sparse_mask = mask("sparse_mask")?;
    let gt = if a.get("gt").is_some() {
        Some(DepthMap {
            values: f32s("gt")?.1,
            mask: mask("gt_mask")?,
        })
    } else {
        None
    };
    let s = Sample {
        frame_id: id.to_string(),
        height: h,
        width: w,
        image,
        sparse: DepthMap {
            values: sparse,
            mask: sparse_mask,
        },
        gt,
    };
    s.validate()?;
    Ok(s)
}

/// Writes every sample and the manifest. `manifest.sample_ids` is replaced
/// by the sample frame ids in the given order.
pub fn save_dataset(samples: &[Sample], manifest: &mut DatasetManifest) -> Result<()> {
    manifest.sample_ids = samples.iter().map(|s| s.frame_id.clone()).collect();
    manifest.check_ids()?;
    manifest.checksums.clear();
    for s in samples {
        s.validate()?;
        if (s.height, s.width) != manifest.geometry {
            return Err(Error::GeometryMismatch {
                id: s.frame_id.clone(),
                expected: manifest.geometry,
                found: (s.height, s.width),
            });
        }
        let bytes = sample_archive(s).to_bytes();
        let path = manifest.sample_path(&s.frame_id);
        fs::create_dir_all(path.parent().unwrap()).map_err(|e| Error::io(&path, e))?;
        fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
        manifest.checksums.push(sha256_hex(&bytes));
    }
    let mp = manifest.manifest_path();
    fs::write(&mp, manifest.to_text()).map_err(|e| Error::io(&mp, e))
}

/// Reads a manifest. `path` may be the manifest file or its directory.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let (root, file) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
    };
    let text = String::from_utf8(read_artifact(&file)?).map_err(|_| Error::Format {
        path: file.clone(),
        message: "manifest is not utf-8".into(),
    })?;
    DatasetManifest::parse(&text, &root, &file)
}

/// Yields samples strictly in manifest order, verifying each file.
pub struct DatasetReader {
    manifest: DatasetManifest,
    next: usize,
}

impl DatasetReader {
    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    fn load(&self, i: usize) -> Result<Sample> {
        let m = &self.manifest;
        let id = &m.sample_ids[i];
        let path = m.sample_path(id);
        let bytes = match read_artifact(&path) {
            Ok(b) => b,
            Err(Error::MissingArtifact { .. }) => {
                return Err(Error::MissingSample {
                    root: m.root_path.clone(),
                    id: id.clone(),
                })
            }
            Err(e) => return Err(e),
        };
        let actual = sha256_hex(&bytes);
        if actual != m.checksums[i] {
            return Err(Error::ChecksumMismatch {
                id: id.clone(),
                expected: m.checksums[i].clone(),
                actual,
            });
        }
        let s = decode_sample(&Archive::from_bytes(&bytes, &path)?, id, &path)?;
        if (s.height, s.width) != m.geometry {
            return Err(Error::GeometryMismatch {
                id: id.clone(),
                expected: m.geometry,
                found: (s.height, s.width),
            });
        }
        Ok(s)
    }
}

impl Iterator for DatasetReader {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.manifest.sample_ids.len() {
            return None;
        }
        let i = self.next;
        self.next += 1;
        Some(self.load(i))
    }
}

pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetReader, DatasetManifest)> {
    let manifest = read_manifest(manifest_path)?;
    Ok((
        DatasetReader {
            manifest: manifest.clone(),
            next: 0,
        },
        manifest,
    ))
}

/// Loads every sample eagerly.
pub fn load_all(manifest_path: &Path) -> Result<(Vec<Sample>, DatasetManifest)> {
    let (reader, manifest) = load_dataset(manifest_path)?;
    let samples = reader.collect::<Result<Vec<_>>>()?;
    Ok((samples, manifest))
}
