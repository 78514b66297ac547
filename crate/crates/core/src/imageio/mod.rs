//! Image decoding, dataset manifests, resizing, and the stratified split.
//!
//! Supported containers are deliberately narrow: binary PGM, 8-bit grayscale
//! PNG, and baseline uncompressed 8-bit grayscale TIFF. Anything else —
//! multi-channel, deeper than 8 bits, compressed TIFF variants — fails with
//! `UnsupportedFormat` so that no value rescaling can slip in silently.

mod pgm;
mod png_io;
mod tiff;

pub use pgm::{decode_pgm, encode_pgm};

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;
use thiserror::Error;

use crate::featuremap::FeatureMap;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt file: {0}")]
    CorruptFile(String),
    #[error("input too small to resize: {height}x{width} (need at least 2x2)")]
    DegenerateInput { height: usize, width: usize },
    #[error("expected {expected} class directories, found {found}")]
    ClassCountMismatch { expected: usize, found: usize },
    #[error("manifest line {line}: {reason}")]
    BadManifest { line: usize, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ImageError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        ImageError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// 8-bit grayscale raster exactly as decoded from disk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl RawImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        if height == 0 || width == 0 {
            return Err(ImageError::CorruptFile(
                "image dimensions must be at least 1x1".into(),
            ));
        }
        if pixels.len() != height * width {
            return Err(ImageError::CorruptFile(format!(
                "pixel buffer holds {} bytes, expected {}",
                pixels.len(),
                height * width
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }
}

/// Decodes a PGM, PNG, or baseline grayscale TIFF by sniffing its magic
/// bytes. Pixel values arrive exactly as stored; no rescaling.
pub fn load_image(path: &Path) -> Result<RawImage, ImageError> {
    let bytes = fs::read(path).map_err(|e| ImageError::io(path, e))?;
    decode_image(&bytes)
}

/// Decodes from an in-memory buffer; see [`load_image`].
pub fn decode_image(bytes: &[u8]) -> Result<RawImage, ImageError> {
    if bytes.len() < 4 {
        return Err(ImageError::CorruptFile("file shorter than any header".into()));
    }
    match &bytes[..2] {
        b"P5" => pgm::decode_pgm(bytes),
        b"\x89P" if bytes.starts_with(b"\x89PNG") => png_io::decode_png(bytes),
        b"II" | b"MM" => tiff::decode_tiff(bytes),
        _ => Err(ImageError::UnsupportedFormat(
            "unrecognized container (expected PGM, PNG, or TIFF)".into(),
        )),
    }
}

/// Scales integer intensities to real values in [0, 1] by dividing by 255.
pub fn normalize(img: &RawImage) -> FeatureMap {
    let values = img.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
    FeatureMap::new(img.height, img.width, values).expect("u8/255 is always finite")
}

/// Bilinear resample with pixel-center alignment. Matching sizes return the
/// input bit for bit; outputs never leave the input value range.
pub fn resize_bilinear(
    img: &FeatureMap,
    out_h: usize,
    out_w: usize,
) -> Result<FeatureMap, ImageError> {
    let (h, w) = (img.height(), img.width());
    if h < 2 || w < 2 {
        return Err(ImageError::DegenerateInput {
            height: h,
            width: w,
        });
    }
    assert!(out_h >= 1 && out_w >= 1, "output dimensions must be positive");
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    let mut out = Vec::with_capacity(out_h * out_w);
    for dy in 0..out_h {
        let sy = ((dy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = sy - y0 as f64;
        for dx in 0..out_w {
            let sx = ((dx as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = sx - x0 as f64;
            let top = img.get(y0, x0) * (1.0 - tx) + img.get(y0, x1) * tx;
            let bottom = img.get(y1, x0) * (1.0 - tx) + img.get(y1, x1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    Ok(FeatureMap::new(out_h, out_w, out).expect("convex combination of finite values"))
}

/// Train/test assignment of one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub class_id: usize,
    pub split: Split,
}

/// Ordered sample list plus the class-name table it indexes into.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    pub class_names: Vec<String>,
}

const IMAGE_EXTENSIONS: [&str; 4] = ["pgm", "png", "tif", "tiff"];

/// Scans `<root>/<class_name>/<images>` into a manifest. Class names are the
/// subdirectory names sorted lexicographically; records are sorted by
/// (class_id, path) so the result is independent of filesystem enumeration
/// order. Every record starts in the train split until `split_stratified`
/// reassigns it.
pub fn build_manifest(root: &Path, expected_classes: usize) -> Result<DatasetManifest, ImageError> {
    let mut class_names: Vec<String> = Vec::new();
    let entries = fs::read_dir(root).map_err(|e| ImageError::io(root, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| ImageError::io(root, e))?;
        if entry.path().is_dir() {
            class_names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    class_names.sort();
    if class_names.len() != expected_classes {
        return Err(ImageError::ClassCountMismatch {
            expected: expected_classes,
            found: class_names.len(),
        });
    }
    let mut records = Vec::new();
    for (class_id, name) in class_names.iter().enumerate() {
        let dir = root.join(name);
        for entry in fs::read_dir(&dir).map_err(|e| ImageError::io(&dir, e))? {
            let entry = entry.map_err(|e| ImageError::io(&dir, e))?;
            let path = entry.path();
            let is_image = path
                .extension()
                .and_then(|e| e.to_str())
                .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                .unwrap_or(false);
            if path.is_file() && is_image {
                records.push(SampleRecord {
                    path,
                    class_id,
                    split: Split::Train,
                });
            }
        }
    }
    records.sort_by(|a, b| (a.class_id, &a.path).cmp(&(b.class_id, &b.path)));
    Ok(DatasetManifest {
        records,
        class_names,
    })
}

/// Reassigns splits so each class has exactly `floor(train_fraction * n)`
/// train records. Per class, the records are taken in sorted order and
/// shuffled by a splitmix64-seeded xoshiro256** stream, making the
/// assignment a pure function of `(seed, sorted record order)`.
pub fn split_stratified(
    manifest: &DatasetManifest,
    train_fraction: f64,
    seed: u64,
) -> DatasetManifest {
    assert!(
        train_fraction > 0.0 && train_fraction < 1.0,
        "train_fraction must be in (0, 1)"
    );
    let mut records = manifest.records.clone();
    records.sort_by(|a, b| (a.class_id, &a.path).cmp(&(b.class_id, &b.path)));
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut out: Vec<SampleRecord> = Vec::with_capacity(records.len());
    let mut start = 0;
    while start < records.len() {
        let class_id = records[start].class_id;
        let end = records[start..]
            .iter()
            .position(|r| r.class_id != class_id)
            .map(|p| start + p)
            .unwrap_or(records.len());
        let mut class_records: Vec<SampleRecord> = records[start..end].to_vec();
        class_records.shuffle(&mut rng);
        let n_train = (train_fraction * class_records.len() as f64).floor() as usize;
        for (i, mut rec) in class_records.into_iter().enumerate() {
            rec.split = if i < n_train { Split::Train } else { Split::Test };
            out.push(rec);
        }
        start = end;
    }
    out.sort_by(|a, b| (a.class_id, &a.path).cmp(&(b.class_id, &b.path)));
    DatasetManifest {
        records: out,
        class_names: manifest.class_names.clone(),
    }
}

/// Writes the manifest as CSV: header `path,class_id,split`, UTF-8, LF.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), ImageError> {
    let mut out = String::from("path,class_id,split\n");
    for rec in &manifest.records {
        out.push_str(&format!(
            "{},{},{}\n",
            rec.path.display(),
            rec.class_id,
            rec.split.name()
        ));
    }
    let mut f = fs::File::create(path).map_err(|e| ImageError::io(path, e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| ImageError::io(path, e))
}

/// Reads a manifest CSV. Class names are recovered from each class's first
/// record (its parent directory name); classes never seen keep a
/// `class_<id>` placeholder.
pub fn read_manifest(path: &Path) -> Result<DatasetManifest, ImageError> {
    let text = fs::read_to_string(path).map_err(|e| ImageError::io(path, e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "path,class_id,split" => {}
        _ => {
            return Err(ImageError::BadManifest {
                line: 1,
                reason: "missing `path,class_id,split` header".into(),
            })
        }
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        // The split and class id never contain commas; the path might.
        let mut fields = line.rsplitn(3, ',');
        let split_s = fields.next().unwrap_or("");
        let class_s = fields.next().unwrap_or("");
        let path_s = fields.next().ok_or_else(|| ImageError::BadManifest {
            line: idx + 1,
            reason: "expected three comma-separated fields".into(),
        })?;
        let class_id = class_s
            .trim()
            .parse::<usize>()
            .map_err(|_| ImageError::BadManifest {
                line: idx + 1,
                reason: format!("bad class id `{class_s}`"),
            })?;
        let split = Split::parse(split_s.trim()).ok_or_else(|| ImageError::BadManifest {
            line: idx + 1,
            reason: format!("bad split `{split_s}`"),
        })?;
        records.push(SampleRecord {
            path: PathBuf::from(path_s),
            class_id,
            split,
        });
    }
    let n_classes = records.iter().map(|r| r.class_id + 1).max().unwrap_or(0);
    let mut class_names: Vec<String> = (0..n_classes).map(|i| format!("class_{i}")).collect();
    for rec in &records {
        let name = &mut class_names[rec.class_id];
        if name.starts_with("class_") {
            if let Some(parent) = rec.path.parent().and_then(|p| p.file_name()) {
                *name = parent.to_string_lossy().into_owned();
            }
        }
    }
    Ok(DatasetManifest {
        records,
        class_names,
    })
}
