//! Tab-separated dataset manifests and the image files they point to.
//!
//! Columns (header required, any order): `sample_id split dataset_id label
//! pai rgb_path depth_path ir_path`. Empty `pai`, `depth_path` or `ir_path`
//! means none. Relative paths resolve against the manifest's directory.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma, Rgb};
use serde::{Deserialize, Serialize};

use crate::error::{FlexError, Result};
use crate::fsutil::{not_found_or_io, write_atomic};
use crate::sample::{validate_sample, Label, ModalityId, ModalitySample};
use crate::synthgen::{SynthDataset, QUANT_LEVELS};
use crate::tensor::Tensor;

pub const MANIFEST_COLUMNS: [&str; 8] =
    ["sample_id", "split", "dataset_id", "label", "pai", "rgb_path", "depth_path", "ir_path"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "dev" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub sample_id: String,
    pub split: Split,
    pub dataset_id: String,
    pub label: Label,
    pub pai: Option<String>,
    pub rgb_path: PathBuf,
    pub depth_path: Option<PathBuf>,
    pub ir_path: Option<PathBuf>,
}

impl ManifestRow {
    pub fn path(&self, m: ModalityId) -> Option<&Path> {
        match m {
            ModalityId::Rgb => Some(&self.rgb_path),
            ModalityId::Depth => self.depth_path.as_deref(),
            ModalityId::Ir => self.ir_path.as_deref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    rows: Vec<ManifestRow>,
    root: PathBuf,
}

impl DatasetManifest {
    /// Checks id uniqueness; relative paths resolve against the working directory.
    pub fn new(rows: Vec<ManifestRow>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &rows {
            if !seen.insert(r.sample_id.as_str()) {
                return Err(FlexError::DuplicateId(r.sample_id.clone()));
            }
        }
        Ok(Self { rows, root: PathBuf::new() })
    }

    pub fn with_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.root = root.into();
        self
    }

    pub fn rows(&self) -> &[ManifestRow] {
        &self.rows
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn dataset_ids(&self) -> BTreeSet<String> {
        self.rows.iter().map(|r| r.dataset_id.clone()).collect()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn to_tsv(&self) -> Result<Vec<u8>> {
        let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_writer(Vec::new());
        w.write_record(MANIFEST_COLUMNS).map_err(csv_io)?;
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                r.sample_id.clone(),
                r.split.to_string(),
                r.dataset_id.clone(),
                r.label.to_string(),
                r.pai.clone().unwrap_or_default(),
                r.rgb_path.display().to_string(),
                opt(&r.depth_path),
                opt(&r.ir_path),
            ])
            .map_err(csv_io)?;
        }
        w.into_inner().map_err(|e| FlexError::Io(e.into_error()))
    }

    /// Loads every row of `split` as a validated sample.
    pub fn load_split(&self, split: Split) -> Result<Vec<ModalitySample>> {
        self.split(split).map(|r| self.load_row(r)).collect()
    }

    pub fn load_row(&self, row: &ManifestRow) -> Result<ModalitySample> {
        let mut images = std::collections::BTreeMap::new();
        for m in ModalityId::ALL {
            if let Some(p) = row.path(m) {
                images.insert(m, read_image(&self.resolve(p), m)?);
            }
        }
        let s = ModalitySample {
            sample_id: row.sample_id.clone(),
            images,
            label: row.label,
            pai: row.pai.clone(),
            // The manifest has no subject column; each row stands alone.
            subject_id: row.sample_id.clone(),
            dataset_id: row.dataset_id.clone(),
        };
        validate_sample(&s)?;
        Ok(s)
    }
}

fn csv_io(e: csv::Error) -> FlexError {
    FlexError::Io(std::io::Error::other(e.to_string()))
}

fn parse_err(line: u64, message: impl Into<String>) -> FlexError {
    FlexError::Parse { line, message: message.into() }
}

fn non_empty(s: &str) -> Option<String> {
    let t = s.trim();
    (!t.is_empty()).then(|| t.to_string())
}

pub fn parse_manifest(text: &str) -> Result<DatasetManifest> {
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(true)
        .quoting(false)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let mut index = [0usize; 8];
    for (slot, col) in index.iter_mut().zip(MANIFEST_COLUMNS) {
        *slot = header
            .iter()
            .position(|h| h.trim() == col)
            .ok_or_else(|| parse_err(1, format!("header lacks column `{col}`")))?;
    }
    if let Some(extra) = header.iter().find(|h| !MANIFEST_COLUMNS.contains(&h.trim())) {
        return Err(parse_err(1, format!("unknown column `{extra}`")));
    }
    let mut rows = Vec::new();
    let mut seen = BTreeSet::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| rec.get(index[i]).unwrap_or("").trim();
        let sample_id = non_empty(field(0)).ok_or_else(|| parse_err(line, "empty sample_id"))?;
        let split = field(1).parse::<Split>().map_err(|e| parse_err(line, e))?;
        let dataset_id = non_empty(field(2)).ok_or_else(|| parse_err(line, "empty dataset_id"))?;
        let label = field(3).parse::<Label>().map_err(|e| parse_err(line, e.to_string()))?;
        let rgb_path = non_empty(field(5))
            .ok_or_else(|| FlexError::MissingRgbPath { line, sample_id: sample_id.clone() })?;
        if !seen.insert(sample_id.clone()) {
            return Err(FlexError::DuplicateId(sample_id));
        }
        rows.push(ManifestRow {
            sample_id,
            split,
            dataset_id,
            label,
            pai: non_empty(field(4)),
            rgb_path: rgb_path.into(),
            depth_path: non_empty(field(6)).map(PathBuf::from),
            ir_path: non_empty(field(7)).map(PathBuf::from),
        });
    }
    DatasetManifest::new(rows)
}

/// Reads a manifest; relative image paths resolve against its directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| not_found_or_io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(parse_manifest(&text)?.with_root(root))
}

fn to_u16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * QUANT_LEVELS).round() as u16
}

/// Encodes a `[3, H, W]` or `[1, H, W]` tensor as a 16-bit PNG.
pub fn encode_png(t: &Tensor) -> Result<Vec<u8>> {
    let s = t.shape();
    if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
        return Err(FlexError::ShapeMismatch(format!("cannot encode image of shape {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = t.data();
    let plane = h * w;
    let img = if c == 3 {
        let mut px = Vec::with_capacity(3 * plane);
        for i in 0..plane {
            for k in 0..3 {
                px.push(to_u16(d[k * plane + i]));
            }
        }
        DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(w as u32, h as u32, px).expect("buffer size"),
        )
    } else {
        let px = d.iter().map(|v| to_u16(*v)).collect();
        DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, px).expect("buffer size"),
        )
    };
    let mut buf = Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png)?;
    Ok(buf.into_inner())
}

/// RGB loads as `[3, H, W]`, Depth and IR as `[1, H, W]`, scaled to [0, 1].
pub fn read_image(path: &Path, m: ModalityId) -> Result<Tensor> {
    if !path.exists() {
        return Err(FlexError::FileNotFound(path.to_path_buf()));
    }
    let img = image::open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = h * w;
    if m == ModalityId::Rgb {
        let raw = img.to_rgb16().into_raw();
        let mut data = vec![0.0; 3 * plane];
        for i in 0..plane {
            for k in 0..3 {
                data[k * plane + i] = raw[3 * i + k] as f64 / QUANT_LEVELS;
            }
        }
        Tensor::new(&[3, h, w], data)
    } else {
        let raw = img.to_luma16().into_raw();
        Tensor::new(&[1, h, w], raw.iter().map(|v| *v as f64 / QUANT_LEVELS).collect())
    }
}

/// Writes every image plus `manifest.tsv` under `dir`; returns the manifest path.
pub fn write_dataset(dir: &Path, ds: &SynthDataset) -> Result<PathBuf> {
    for (row, sample) in ds.manifest.rows().iter().zip(&ds.samples) {
        for m in ModalityId::ALL {
            if let (Some(p), Some(img)) = (row.path(m), sample.image(m)) {
                write_atomic(&dir.join(p), &encode_png(img)?)?;
            }
        }
    }
    let path = dir.join("manifest.tsv");
    write_atomic(&path, &ds.manifest.to_tsv()?)?;
    Ok(path)
}
