//! Gallery ingestion: full-scene images, the pedestrian crops detected in
//! them, and the hygiene passes (completeness filter, near-duplicate removal)
//! applied before anything is indexed.
//!
//! Both input files are line-delimited JSON. Records are validated as they are
//! read; by default the first invalid record aborts ingestion with its line
//! number, while [`Strictness::Lenient`] logs and skips it instead.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_similarity, EmbeddingError, EmbeddingMatrix};

/// Default cosine threshold for [`dedup`].
pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.95;

/// Axis-aligned box in source-image pixels, serialized as `[x, y, w, h]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 4]", into = "[u32; 4]")]
pub struct BBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BBox {
    pub const fn new(x: u32, y: u32, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> u64 {
        u64::from(self.w) * u64::from(self.h)
    }

    /// True when the box is non-empty and lies inside a `width` x `height` image.
    pub fn fits_within(&self, width: u32, height: u32) -> bool {
        self.w > 0
            && self.h > 0
            && u64::from(self.x) + u64::from(self.w) <= u64::from(width)
            && u64::from(self.y) + u64::from(self.h) <= u64::from(height)
    }
}

impl From<[u32; 4]> for BBox {
    fn from([x, y, w, h]: [u32; 4]) -> Self {
        Self { x, y, w, h }
    }
}

impl From<BBox> for [u32; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl std::fmt::Display for BBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x, self.y, self.w, self.h)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GalleryImage {
    pub image_id: String,
    pub uri: String,
    pub width: u32,
    pub height: u32,
}

/// Keypoint visibility for a detection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeypointFlags {
    #[serde(rename = "head")]
    pub head_visible: bool,
    #[serde(rename = "l_shoulder")]
    pub left_shoulder_visible: bool,
    #[serde(rename = "r_shoulder")]
    pub right_shoulder_visible: bool,
}

impl KeypointFlags {
    pub const fn new(head: bool, left_shoulder: bool, right_shoulder: bool) -> Self {
        Self {
            head_visible: head,
            left_shoulder_visible: left_shoulder,
            right_shoulder_visible: right_shoulder,
        }
    }

    pub const ALL: Self = Self::new(true, true, true);
}

/// A detected pedestrian and the scene it was cut from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonCrop {
    pub crop_id: String,
    #[serde(rename = "image_id")]
    pub source_image_id: String,
    pub bbox: BBox,
    pub confidence: f64,
    pub keypoints: KeypointFlags,
}

#[derive(Debug, Error, PartialEq)]
pub enum RecordError {
    #[error("image {image_id}: width and height must be positive (got {width}x{height})")]
    EmptyImage {
        image_id: String,
        width: u32,
        height: u32,
    },
    #[error("crop {crop_id}: bbox out of bounds: {bbox} on {width}x{height} image")]
    BboxOutOfBounds {
        crop_id: String,
        bbox: BBox,
        width: u32,
        height: u32,
    },
    #[error("crop {crop_id}: confidence {confidence} is outside [0, 1]")]
    BadConfidence { crop_id: String, confidence: f64 },
    #[error("duplicate image_id {0}")]
    DuplicateImage(String),
    #[error("duplicate crop_id {0}")]
    DuplicateCrop(String),
    #[error("crop {crop_id}: dangling source image {image_id}")]
    DanglingImage { crop_id: String, image_id: String },
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: malformed record: {message}", path.display())]
    Malformed {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}:{line}: {source}", path.display())]
    Record {
        path: PathBuf,
        line: usize,
        #[source]
        source: RecordError,
    },
    #[error(transparent)]
    Invalid(#[from] RecordError),
}

/// How [`load_manifest`] treats invalid records.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Strictness {
    /// First invalid record aborts ingestion.
    #[default]
    Strict,
    /// Invalid records are logged and skipped.
    Lenient,
}

/// An immutable set of scene images and their crops.
///
/// Every crop resolves to exactly one image; ids are unique. Order is the
/// order records were supplied in.
#[derive(Debug, Clone, Default)]
pub struct Gallery {
    images: Vec<GalleryImage>,
    crops: Vec<PersonCrop>,
    image_index: HashMap<String, usize>,
    crop_index: HashMap<String, usize>,
}

impl PartialEq for Gallery {
    fn eq(&self, other: &Self) -> bool {
        self.images == other.images && self.crops == other.crops
    }
}

impl Gallery {
    pub fn new(images: Vec<GalleryImage>, crops: Vec<PersonCrop>) -> Result<Self, RecordError> {
        let mut image_index = HashMap::with_capacity(images.len());
        for (i, image) in images.iter().enumerate() {
            validate_image(image)?;
            if image_index.insert(image.image_id.clone(), i).is_some() {
                return Err(RecordError::DuplicateImage(image.image_id.clone()));
            }
        }
        let mut crop_index = HashMap::with_capacity(crops.len());
        for (i, crop) in crops.iter().enumerate() {
            let image = image_index
                .get(&crop.source_image_id)
                .map(|&idx| &images[idx])
                .ok_or_else(|| RecordError::DanglingImage {
                    crop_id: crop.crop_id.clone(),
                    image_id: crop.source_image_id.clone(),
                })?;
            validate_crop(crop, image)?;
            if crop_index.insert(crop.crop_id.clone(), i).is_some() {
                return Err(RecordError::DuplicateCrop(crop.crop_id.clone()));
            }
        }
        Ok(Self {
            images,
            crops,
            image_index,
            crop_index,
        })
    }

    pub fn images(&self) -> &[GalleryImage] {
        &self.images
    }

    pub fn crops(&self) -> &[PersonCrop] {
        &self.crops
    }

    pub fn image(&self, image_id: &str) -> Option<&GalleryImage> {
        self.image_index.get(image_id).map(|&i| &self.images[i])
    }

    pub fn crop(&self, crop_id: &str) -> Option<&PersonCrop> {
        self.crop_index.get(crop_id).map(|&i| &self.crops[i])
    }

    /// Source scene of a crop.
    pub fn source_of(&self, crop_id: &str) -> Option<&GalleryImage> {
        self.crop(crop_id)
            .and_then(|c| self.image(&c.source_image_id))
    }

    /// Same images, keeping only the crops for which `keep` returns true.
    pub fn retain_crops(&self, mut keep: impl FnMut(&PersonCrop) -> bool) -> Gallery {
        let crops: Vec<PersonCrop> = self.crops.iter().filter(|c| keep(c)).cloned().collect();
        let crop_index = crops
            .iter()
            .enumerate()
            .map(|(i, c)| (c.crop_id.clone(), i))
            .collect();
        Gallery {
            images: self.images.clone(),
            crops,
            image_index: self.image_index.clone(),
            crop_index,
        }
    }
}

fn validate_image(image: &GalleryImage) -> Result<(), RecordError> {
    if image.width == 0 || image.height == 0 {
        return Err(RecordError::EmptyImage {
            image_id: image.image_id.clone(),
            width: image.width,
            height: image.height,
        });
    }
    Ok(())
}

fn validate_crop(crop: &PersonCrop, image: &GalleryImage) -> Result<(), RecordError> {
    if !crop.bbox.fits_within(image.width, image.height) {
        return Err(RecordError::BboxOutOfBounds {
            crop_id: crop.crop_id.clone(),
            bbox: crop.bbox,
            width: image.width,
            height: image.height,
        });
    }
    if !(0.0..=1.0).contains(&crop.confidence) {
        return Err(RecordError::BadConfidence {
            crop_id: crop.crop_id.clone(),
            confidence: crop.confidence,
        });
    }
    Ok(())
}

/// A 1-based line number and the record parsed from it, or why it failed.
type NumberedRecord<T> = (usize, Result<T, String>);

/// Iterates `(line_number, record)` over a JSON-lines file, skipping blank lines.
fn read_json_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<NumberedRecord<T>>, IngestError> {
    let io_err = |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((i + 1, serde_json::from_str(&line).map_err(|e| e.to_string())));
    }
    Ok(out)
}

/// Loads and validates a gallery from a manifest and a detections file.
pub fn load_manifest(
    manifest_path: impl AsRef<Path>,
    detections_path: impl AsRef<Path>,
    strictness: Strictness,
) -> Result<Gallery, IngestError> {
    let manifest_path = manifest_path.as_ref();
    let detections_path = detections_path.as_ref();

    // Either aborts or logs-and-skips, depending on strictness.
    let reject = |err: IngestError| -> Result<(), IngestError> {
        match strictness {
            Strictness::Strict => Err(err),
            Strictness::Lenient => {
                log::warn!("skipping record: {err}");
                Ok(())
            }
        }
    };

    let mut images: Vec<GalleryImage> = Vec::new();
    let mut image_ids = HashMap::new();
    for (line, record) in read_json_lines::<GalleryImage>(manifest_path)? {
        let image = match record {
            Ok(image) => image,
            Err(message) => {
                reject(IngestError::Malformed {
                    path: manifest_path.to_path_buf(),
                    line,
                    message,
                })?;
                continue;
            }
        };
        let check = validate_image(&image).and_then(|()| {
            if image_ids.contains_key(&image.image_id) {
                Err(RecordError::DuplicateImage(image.image_id.clone()))
            } else {
                Ok(())
            }
        });
        if let Err(source) = check {
            reject(IngestError::Record {
                path: manifest_path.to_path_buf(),
                line,
                source,
            })?;
            continue;
        }
        image_ids.insert(image.image_id.clone(), images.len());
        images.push(image);
    }

    let mut crops = Vec::new();
    let mut crop_ids = HashSet::new();
    for (line, record) in read_json_lines::<PersonCrop>(detections_path)? {
        let crop = match record {
            Ok(crop) => crop,
            Err(message) => {
                reject(IngestError::Malformed {
                    path: detections_path.to_path_buf(),
                    line,
                    message,
                })?;
                continue;
            }
        };
        let check = match image_ids.get(&crop.source_image_id) {
            None => Err(RecordError::DanglingImage {
                crop_id: crop.crop_id.clone(),
                image_id: crop.source_image_id.clone(),
            }),
            Some(&idx) => validate_crop(&crop, &images[idx]),
        }
        .and_then(|()| {
            if crop_ids.contains(&crop.crop_id) {
                Err(RecordError::DuplicateCrop(crop.crop_id.clone()))
            } else {
                Ok(())
            }
        });
        if let Err(source) = check {
            reject(IngestError::Record {
                path: detections_path.to_path_buf(),
                line,
                source,
            })?;
            continue;
        }
        crop_ids.insert(crop.crop_id.clone());
        crops.push(crop);
    }

    Ok(Gallery::new(images, crops)?)
}

/// Writes a gallery back out in the manifest and detections formats.
pub fn save_gallery(
    gallery: &Gallery,
    manifest_path: impl AsRef<Path>,
    detections_path: impl AsRef<Path>,
) -> Result<(), IngestError> {
    write_json_lines(manifest_path.as_ref(), gallery.images())?;
    write_json_lines(detections_path.as_ref(), gallery.crops())
}

/// Writes only the detections file.
pub fn save_detections(gallery: &Gallery, detections_path: impl AsRef<Path>) -> Result<(), IngestError> {
    write_json_lines(detections_path.as_ref(), gallery.crops())
}

fn write_json_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<(), IngestError> {
    let io_err = |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut out = BufWriter::new(File::create(path).map_err(io_err)?);
    for record in records {
        let line = serde_json::to_string(record).expect("gallery records serialize");
        writeln!(out, "{line}").map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

/// Keep a detection only if the head and at least one shoulder are visible.
pub fn completeness_filter(flags: KeypointFlags) -> bool {
    flags.head_visible && (flags.left_shoulder_visible || flags.right_shoulder_visible)
}

/// Drops every crop that fails [`completeness_filter`]. Images are untouched.
pub fn apply_filter(gallery: &Gallery) -> Gallery {
    gallery.retain_crops(|c| completeness_filter(c.keypoints))
}

#[derive(Debug, Error)]
pub enum DedupError {
    #[error("no crop embedding for {0}")]
    MissingCropEmbedding(String),
    #[error("no scene embedding for {0}")]
    MissingSceneEmbedding(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Removes near-duplicate crops.
///
/// Crops are scanned in ascending `crop_id` order. A crop is discarded when an
/// earlier retained crop reaches `threshold` cosine similarity on both the crop
/// embeddings and the embeddings of their source scenes. Comparison spans the
/// whole gallery, not just crops from the same video.
pub fn dedup(
    gallery: &Gallery,
    crop_embeddings: &EmbeddingMatrix,
    scene_embeddings: &EmbeddingMatrix,
    threshold: f64,
) -> Result<Gallery, DedupError> {
    let mut order: Vec<&PersonCrop> = gallery.crops().iter().collect();
    order.sort_by(|a, b| a.crop_id.cmp(&b.crop_id));

    let lookup = |crop: &PersonCrop| -> Result<(&[f32], &[f32]), DedupError> {
        let c = crop_embeddings
            .get(&crop.crop_id)
            .ok_or_else(|| DedupError::MissingCropEmbedding(crop.crop_id.clone()))?;
        let s = scene_embeddings
            .get(&crop.source_image_id)
            .ok_or_else(|| DedupError::MissingSceneEmbedding(crop.source_image_id.clone()))?;
        Ok((c, s))
    };

    let mut retained: Vec<(&[f32], &[f32])> = Vec::new();
    let mut kept = HashSet::new();
    for crop in order {
        let (c, s) = lookup(crop)?;
        let mut duplicate = false;
        for &(rc, rs) in &retained {
            if cosine_similarity(c, rc)? >= threshold && cosine_similarity(s, rs)? >= threshold {
                duplicate = true;
                break;
            }
        }
        if !duplicate {
            retained.push((c, s));
            kept.insert(crop.crop_id.as_str());
        }
    }
    Ok(gallery.retain_crops(|c| kept.contains(c.crop_id.as_str())))
}
