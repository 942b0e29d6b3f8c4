//! Annotation ingestion and per-relation image contexts.
//!
//! A corpus is described by a TOML manifest naming one JSON-lines file per
//! annotation class. Every key is optional; relative paths resolve against
//! the manifest's directory.
//!
//! ```toml
//! images = "images.jsonl"       # {"image_id", "width", "height", "file_ref"}
//! objects = "objects.jsonl"     # {"image_id", "category", "box", "mask"?}
//! captions = "captions.jsonl"   # {"image_id", "caption"}
//! regions = "regions.jsonl"     # {"image_id", "text", "box"}
//! relations = "relations.jsonl" # {"relation_id", "image_id", "subject", "object", "predicate"}
//! ```
//!
//! Boxes are `[x1, y1, x2, y2]` relative floats; masks are RLE objects
//! (`{"size": [H, W], "counts": [...]}`).

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{intersection_over_region, BinaryMask, BoundingBox};
use crate::jsonl::{self, JsonlError};

/// Default minimum fraction of a region's area that must fall inside the
/// subject or object box.
pub const DEFAULT_OVERLAP_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum AnnotationError {
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("parse error in {}:{line}: {message}", file.display())]
    ParseError {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("relation {relation_id} references unknown image {image_id}")]
    DanglingReference {
        relation_id: String,
        image_id: String,
    },
    #[error("{}:{line}: unknown image {image_id}", file.display())]
    UnknownImage {
        file: PathBuf,
        line: usize,
        image_id: String,
    },
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<JsonlError> for AnnotationError {
    fn from(e: JsonlError) -> Self {
        match e {
            JsonlError::Io { path, source } if source.kind() == std::io::ErrorKind::NotFound => {
                Self::MissingFile(path)
            }
            JsonlError::Io { path, source } => Self::Io { path, source },
            JsonlError::Parse {
                path,
                line,
                message,
            } => Self::ParseError {
                file: path,
                line,
                message,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub file_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<BinaryMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionDescription {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
}

/// One subject-predicate-object seed annotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationAnnotation {
    pub relation_id: String,
    pub image_id: String,
    pub subject: ObjectInstance,
    pub object: ObjectInstance,
    pub predicate: String,
}

/// Everything the generator prompt says about an image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageContext {
    pub captions: Vec<String>,
    pub objects: Vec<ObjectInstance>,
    pub regions: Vec<RegionDescription>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub images: BTreeMap<String, ImageRecord>,
    /// Sorted by `relation_id`.
    pub relations: Vec<RelationAnnotation>,
    pub captions: BTreeMap<String, Vec<String>>,
    pub regions: BTreeMap<String, Vec<RegionDescription>>,
    pub objects: BTreeMap<String, Vec<ObjectInstance>>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objects: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captions: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regions: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relations: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ObjectLine {
    image_id: String,
    #[serde(flatten)]
    object: ObjectInstance,
}

#[derive(Debug, Serialize, Deserialize)]
struct CaptionLine {
    image_id: String,
    caption: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct RegionLine {
    image_id: String,
    #[serde(flatten)]
    region: RegionDescription,
}

fn invalid(file: &Path, line: usize, message: impl Into<String>) -> AnnotationError {
    AnnotationError::ParseError {
        file: file.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_class<T: serde::de::DeserializeOwned>(
    base: &Path,
    rel: &Option<PathBuf>,
) -> Result<Option<(PathBuf, Vec<T>)>, AnnotationError> {
    let Some(rel) = rel else { return Ok(None) };
    let path = base.join(rel);
    if !path.exists() {
        return Err(AnnotationError::MissingFile(path));
    }
    let records = jsonl::read_jsonl(&path)?;
    Ok(Some((path, records)))
}

fn check_mask(
    file: &Path,
    line: usize,
    what: &str,
    obj: &ObjectInstance,
    image: &ImageRecord,
    required: bool,
) -> Result<(), AnnotationError> {
    match &obj.mask {
        None if required => Err(invalid(file, line, format!("{what} mask is required"))),
        None => Ok(()),
        Some(m) if m.dims() != (image.height, image.width) => Err(invalid(
            file,
            line,
            format!(
                "{what} mask is {}x{} but image {} is {}x{}",
                m.height(),
                m.width(),
                image.image_id,
                image.height,
                image.width
            ),
        )),
        Some(_) => Ok(()),
    }
}

/// Loads every annotation file named by the manifest and resolves image
/// references. Files may appear in any order.
pub fn load_corpus(manifest_path: &Path) -> Result<Corpus, AnnotationError> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            AnnotationError::MissingFile(manifest_path.to_path_buf())
        } else {
            AnnotationError::Io {
                path: manifest_path.to_path_buf(),
                source: e,
            }
        }
    })?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| AnnotationError::ParseError {
        file: manifest_path.to_path_buf(),
        line: e
            .span()
            .map(|s| text[..s.start].lines().count().max(1))
            .unwrap_or(0),
        message: e.message().to_string(),
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    load_from_manifest(base, &manifest)
}

pub fn load_from_manifest(base: &Path, manifest: &Manifest) -> Result<Corpus, AnnotationError> {
    let mut corpus = Corpus::default();

    if let Some((file, images)) = read_class::<ImageRecord>(base, &manifest.images)? {
        for (idx, image) in images.into_iter().enumerate() {
            let line = idx + 1;
            if image.width == 0 || image.height == 0 {
                return Err(invalid(&file, line, "image dimensions must be positive"));
            }
            if corpus.images.contains_key(&image.image_id) {
                return Err(invalid(
                    &file,
                    line,
                    format!("duplicate image_id {}", image.image_id),
                ));
            }
            corpus.images.insert(image.image_id.clone(), image);
        }
    }

    let lookup = |file: &Path, line: usize, image_id: &str| {
        corpus
            .images
            .get(image_id)
            .cloned()
            .ok_or_else(|| AnnotationError::UnknownImage {
                file: file.to_path_buf(),
                line,
                image_id: image_id.to_string(),
            })
    };

    let mut objects: BTreeMap<String, Vec<ObjectInstance>> = BTreeMap::new();
    if let Some((file, lines)) = read_class::<ObjectLine>(base, &manifest.objects)? {
        for (idx, ol) in lines.into_iter().enumerate() {
            let image = lookup(&file, idx + 1, &ol.image_id)?;
            check_mask(&file, idx + 1, "object", &ol.object, &image, false)?;
            objects.entry(ol.image_id).or_default().push(ol.object);
        }
    }

    let mut captions: BTreeMap<String, Vec<String>> = BTreeMap::new();
    if let Some((file, lines)) = read_class::<CaptionLine>(base, &manifest.captions)? {
        for (idx, cl) in lines.into_iter().enumerate() {
            lookup(&file, idx + 1, &cl.image_id)?;
            captions.entry(cl.image_id).or_default().push(cl.caption);
        }
    }

    let mut regions: BTreeMap<String, Vec<RegionDescription>> = BTreeMap::new();
    if let Some((file, lines)) = read_class::<RegionLine>(base, &manifest.regions)? {
        for (idx, rl) in lines.into_iter().enumerate() {
            lookup(&file, idx + 1, &rl.image_id)?;
            if rl.region.text.trim().is_empty() {
                return Err(invalid(&file, idx + 1, "region text is empty"));
            }
            regions.entry(rl.image_id).or_default().push(rl.region);
        }
    }

    let mut relations = Vec::new();
    if let Some((file, lines)) = read_class::<RelationAnnotation>(base, &manifest.relations)? {
        let mut seen = HashSet::new();
        for (idx, rel) in lines.into_iter().enumerate() {
            let line = idx + 1;
            let Some(image) = corpus.images.get(&rel.image_id) else {
                return Err(AnnotationError::DanglingReference {
                    relation_id: rel.relation_id,
                    image_id: rel.image_id,
                });
            };
            if !seen.insert(rel.relation_id.clone()) {
                return Err(invalid(
                    &file,
                    line,
                    format!("duplicate relation_id {}", rel.relation_id),
                ));
            }
            if rel.predicate.trim().is_empty() {
                return Err(invalid(&file, line, "predicate is empty"));
            }
            check_mask(&file, line, "subject", &rel.subject, image, true)?;
            check_mask(&file, line, "object", &rel.object, image, true)?;
            relations.push(rel);
        }
    }
    relations.sort_by(|a, b| a.relation_id.cmp(&b.relation_id));

    corpus.objects = objects;
    corpus.captions = captions;
    corpus.regions = regions;
    corpus.relations = relations;
    Ok(corpus)
}

impl Corpus {
    pub fn relation(&self, relation_id: &str) -> Option<&RelationAnnotation> {
        self.relations
            .binary_search_by(|r| r.relation_id.as_str().cmp(relation_id))
            .ok()
            .map(|i| &self.relations[i])
    }

    /// Writes the corpus as a manifest plus one JSON-lines file per class.
    /// Returns the manifest path.
    pub fn save(&self, dir: &Path) -> Result<PathBuf, AnnotationError> {
        let images: Vec<_> = self.images.values().cloned().collect();
        let objects: Vec<_> = self
            .objects
            .iter()
            .flat_map(|(id, objs)| {
                objs.iter().map(move |o| ObjectLine {
                    image_id: id.clone(),
                    object: o.clone(),
                })
            })
            .collect();
        let captions: Vec<_> = self
            .captions
            .iter()
            .flat_map(|(id, caps)| {
                caps.iter().map(move |c| CaptionLine {
                    image_id: id.clone(),
                    caption: c.clone(),
                })
            })
            .collect();
        let regions: Vec<_> = self
            .regions
            .iter()
            .flat_map(|(id, regs)| {
                regs.iter().map(move |r| RegionLine {
                    image_id: id.clone(),
                    region: r.clone(),
                })
            })
            .collect();
        jsonl::write_jsonl(&dir.join("images.jsonl"), &images)?;
        jsonl::write_jsonl(&dir.join("objects.jsonl"), &objects)?;
        jsonl::write_jsonl(&dir.join("captions.jsonl"), &captions)?;
        jsonl::write_jsonl(&dir.join("regions.jsonl"), &regions)?;
        jsonl::write_jsonl(&dir.join("relations.jsonl"), &self.relations)?;
        let manifest = Manifest {
            images: Some("images.jsonl".into()),
            objects: Some("objects.jsonl".into()),
            captions: Some("captions.jsonl".into()),
            regions: Some("regions.jsonl".into()),
            relations: Some("relations.jsonl".into()),
        };
        let path = dir.join("manifest.toml");
        let text = toml::to_string(&manifest).expect("manifest serializes");
        jsonl::write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

/// True when the region shares positive area with `anchor` and at least
/// `threshold` of the region's area lies inside it.
pub fn region_overlaps(region: &BoundingBox, anchor: &BoundingBox, threshold: f64) -> bool {
    if region.intersection_area(anchor) <= 0.0 {
        return false;
    }
    intersection_over_region(region, anchor).is_ok_and(|f| f >= threshold)
}

/// Captions and objects for the relation's image verbatim, plus the regions
/// overlapping the subject or object box, all in source order.
pub fn build_image_context(
    corpus: &Corpus,
    relation: &RelationAnnotation,
    overlap_threshold: f64,
) -> ImageContext {
    let id = &relation.image_id;
    let regions = corpus
        .regions
        .get(id)
        .map(|regs| {
            regs.iter()
                .filter(|r| {
                    region_overlaps(&r.bbox, &relation.subject.bbox, overlap_threshold)
                        || region_overlaps(&r.bbox, &relation.object.bbox, overlap_threshold)
                })
                .cloned()
                .collect()
        })
        .unwrap_or_default();
    ImageContext {
        captions: corpus.captions.get(id).cloned().unwrap_or_default(),
        objects: corpus.objects.get(id).cloned().unwrap_or_default(),
        regions,
    }
}
