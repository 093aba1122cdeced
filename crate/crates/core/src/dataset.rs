//! YOLO-style training datasets: emission from fitted labels and reading
//! back with checksum verification.
//!
//! Layout: `images/`, `labels/` (detect) or `labels_seg/` (segment),
//! `classes.txt`, `train.txt`, `val.txt` and `dataset_manifest`, written last.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::format::{parse_box_file, parse_polygon_file, write_box_lines, write_polygon_lines};
use crate::model::{FrameLabels, Provenance, SelectionMode};
use crate::store::{frame_stem, io_err, write_atomic, StoreError};

pub const DATASET_MANIFEST: &str = "dataset_manifest";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetVariant {
    Detect,
    Segment,
}

impl DatasetVariant {
    pub fn label_dir(self) -> &'static str {
        match self {
            DatasetVariant::Detect => "labels",
            DatasetVariant::Segment => "labels_seg",
        }
    }
}

/// Which ablation produced a dataset: selection mode, box resizing on or
/// off, positional filter on or off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationTag {
    pub mode: SelectionMode,
    pub sam: bool,
    pub filter: bool,
}

impl AblationTag {
    /// The eight tags in report row order.
    pub fn all() -> [AblationTag; 8] {
        let mut out = [AblationTag {
            mode: SelectionMode::FixedBox,
            sam: false,
            filter: false,
        }; 8];
        let mut i = 0;
        for sam in [false, true] {
            for mode in [SelectionMode::FixedBox, SelectionMode::VariableBox] {
                for filter in [false, true] {
                    out[i] = AblationTag { mode, sam, filter };
                    i += 1;
                }
            }
        }
        out
    }

    pub fn label(&self) -> String {
        format!(
            "{} / {} / {}",
            self.mode.label(),
            if self.sam { "SAM" } else { "No SAM" },
            if self.filter {
                "Positional Filter"
            } else {
                "No Positional Filter"
            }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub variant: DatasetVariant,
    /// Indices into the project's pairs.
    pub pairs: Vec<usize>,
    /// Fraction of frames in the training split, in (0, 1].
    pub train_fraction: f64,
    pub tag: AblationTag,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), StoreError> {
        if self.pairs.is_empty() {
            return Err(StoreError::Invalid("dataset needs at least one source pair".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(StoreError::Invalid(format!(
                "train fraction {} outside (0, 1]",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub variant: DatasetVariant,
    pub tag: AblationTag,
    pub pairs: Vec<usize>,
    pub class_names: Vec<String>,
    pub frames: Vec<u32>,
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub files: Vec<FileEntry>,
}

impl DatasetManifest {
    pub fn label_count(&self, labels: &[FrameLabels]) -> usize {
        labels
            .iter()
            .map(|l| match self.variant {
                DatasetVariant::Detect => l.boxes.len(),
                DatasetVariant::Segment => l.polygons.len(),
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    /// Labels per manifest frame, in manifest order. Only the variant's
    /// geometry (boxes or polygons) is filled in.
    pub labels: Vec<FrameLabels>,
}

fn sha256_file(path: &Path) -> Result<String, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn link_or_copy(from: &Path, to: &Path) -> Result<(), StoreError> {
    if fs::hard_link(from, to).is_ok() {
        return Ok(());
    }
    fs::copy(from, to).map(|_| ()).map_err(io_err(to))
}

/// Writes a dataset under `dest`, which must not exist yet. `image_of`
/// gives the source image for a frame index.
pub fn emit_dataset(
    dest: &Path,
    labels: &[FrameLabels],
    class_names: &[String],
    image_of: &(dyn Fn(u32) -> PathBuf + Sync),
    spec: &DatasetSpec,
) -> Result<DatasetManifest, StoreError> {
    spec.validate()?;
    if labels.is_empty() {
        return Err(StoreError::Invalid("dataset of 0 frames".into()));
    }
    let mut seen = BTreeSet::new();
    for l in labels {
        if !seen.insert(l.frame_index) {
            return Err(StoreError::Invalid(format!("frame {} labelled twice", l.frame_index)));
        }
        for c in l.boxes.iter().map(|b| b.class_id).chain(l.polygons.iter().map(|p| p.class_id)) {
            if c as usize >= class_names.len() {
                return Err(StoreError::Invalid(format!(
                    "frame {}: class {c} has no name",
                    l.frame_index
                )));
            }
        }
    }
    if spec.variant == DatasetVariant::Segment && labels.iter().all(|l| l.polygons.is_empty()) {
        return Err(StoreError::Invalid("segment dataset without any polygons".into()));
    }
    let missing: Vec<u32> = labels
        .iter()
        .filter(|l| !image_of(l.frame_index).is_file())
        .map(|l| l.frame_index)
        .collect();
    if !missing.is_empty() {
        return Err(StoreError::Invalid(format!("frames without images: {missing:?}")));
    }
    if dest.exists() {
        return Err(StoreError::Invalid(format!("{} already exists", dest.display())));
    }

    let label_dir = spec.variant.label_dir();
    for sub in ["images", label_dir] {
        let p = dest.join(sub);
        fs::create_dir_all(&p).map_err(io_err(&p))?;
    }

    let mut files: Vec<FileEntry> = labels
        .par_iter()
        .map(|l| {
            let stem = frame_stem(l.frame_index);
            let src = image_of(l.frame_index);
            let ext = src.extension().and_then(|e| e.to_str()).unwrap_or("png");
            let image_rel = format!("images/{stem}.{ext}");
            link_or_copy(&src, &dest.join(&image_rel))?;
            let text = match spec.variant {
                DatasetVariant::Detect => write_box_lines(&l.boxes),
                DatasetVariant::Segment => write_polygon_lines(&l.polygons),
            };
            let label_rel = format!("{label_dir}/{stem}.txt");
            fs::write(dest.join(&label_rel), &text).map_err(io_err(&dest.join(&label_rel)))?;
            Ok(vec![
                FileEntry {
                    sha256: sha256_file(&dest.join(&image_rel))?,
                    path: image_rel,
                },
                FileEntry {
                    sha256: hex::encode(Sha256::digest(text.as_bytes())),
                    path: label_rel,
                },
            ])
        })
        .collect::<Result<Vec<_>, StoreError>>()?
        .into_iter()
        .flatten()
        .collect();

    let frames: Vec<u32> = seen.into_iter().collect();
    let n_train = ((spec.train_fraction * frames.len() as f64).round() as usize).clamp(1, frames.len());
    let train = frames[..n_train].to_vec();
    // Validation points at the training split when nothing is held out.
    let val = if n_train == frames.len() {
        train.clone()
    } else {
        frames[n_train..].to_vec()
    };
    let image_name = |f: &u32| {
        files
            .iter()
            .find(|e| e.path.starts_with(&format!("images/{}.", frame_stem(*f))))
            .map(|e| format!("{}\n", e.path))
            .unwrap_or_default()
    };
    let train_txt: String = train.iter().map(image_name).collect();
    let val_txt: String = val.iter().map(image_name).collect();
    let classes_txt: String = class_names.iter().map(|c| format!("{c}\n")).collect();
    for (name, text) in [("classes.txt", &classes_txt), ("train.txt", &train_txt), ("val.txt", &val_txt)] {
        let p = dest.join(name);
        fs::write(&p, text).map_err(io_err(&p))?;
        files.push(FileEntry {
            path: name.to_string(),
            sha256: hex::encode(Sha256::digest(text.as_bytes())),
        });
    }
    files.sort_by(|a, b| a.path.cmp(&b.path));

    let manifest = DatasetManifest {
        version: DATASET_VERSION,
        variant: spec.variant,
        tag: spec.tag,
        pairs: spec.pairs.clone(),
        class_names: class_names.to_vec(),
        frames,
        train,
        val,
        files,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dest.join(DATASET_MANIFEST), text.as_bytes())?;
    Ok(manifest)
}

/// Reads a dataset back, verifying its version and every checksum.
pub fn read_dataset(root: &Path) -> Result<Dataset, StoreError> {
    let mpath = root.join(DATASET_MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|source| StoreError::Manifest {
            path: mpath.clone(),
            source,
        })?;
    let found = value.get("version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != DATASET_VERSION {
        return Err(StoreError::Version { path: mpath, found });
    }
    let manifest: DatasetManifest =
        serde_json::from_value(value).map_err(|source| StoreError::Manifest {
            path: mpath.clone(),
            source,
        })?;
    manifest.files.par_iter().try_for_each(|f| {
        let p = root.join(&f.path);
        let got = sha256_file(&p)?;
        if got != f.sha256 {
            return Err(StoreError::Invalid(format!("checksum mismatch on {}", f.path)));
        }
        Ok(())
    })?;
    let n = manifest.class_names.len();
    let labels = manifest
        .frames
        .iter()
        .map(|&frame_index| {
            let p = root
                .join(manifest.variant.label_dir())
                .join(format!("{}.txt", frame_stem(frame_index)));
            let text = fs::read_to_string(&p).map_err(io_err(&p))?;
            let fmt = |source| StoreError::Format {
                path: p.clone(),
                source,
            };
            let mut l = FrameLabels::empty(frame_index, Provenance::Propagated);
            match manifest.variant {
                DatasetVariant::Detect => l.boxes = parse_box_file(&text, Some(n)).map_err(fmt)?,
                DatasetVariant::Segment => {
                    l.polygons = parse_polygon_file(&text, Some(n)).map_err(fmt)?
                }
            }
            Ok(l)
        })
        .collect::<Result<_, StoreError>>()?;
    Ok(Dataset {
        root: root.to_path_buf(),
        manifest,
        labels,
    })
}
