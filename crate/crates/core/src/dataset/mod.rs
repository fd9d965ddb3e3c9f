//! Annotation ingestion and dataset bookkeeping.
//!
//! Annotation files follow the VRD layout: a JSON object mapping each image
//! name to a list of relationship records
//!
//! ```json
//! {"img.jpg": [{"predicate": 3,
//!               "subject": {"category": 0, "bbox": [ymin, ymax, xmin, xmax]},
//!               "object":  {"category": 7, "bbox": [ymin, ymax, xmin, xmax]}}]}
//! ```
//!
//! Boxes are converted to `(x_min, y_min, x_max, y_max)` on load. VRD repeats
//! the full object record in every relationship that mentions it, so objects
//! are deduplicated per image by `(category, box)`.

mod dictionary;
mod split;
mod stats;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::io;

pub use dictionary::Dictionary;
pub use split::{split, split_with_test, Split, SplitManifest, SPLIT_PROPORTIONS};
pub use stats::{image_stats, ImageStatRow, ImageStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub instance_id: usize,
    pub category_id: usize,
    pub bbox: BoundingBox,
    pub score: f64,
}

/// A gold `(subject, predicate, object)` triple. Subject and object refer to
/// `instance_id`s of the same image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationshipAnnotation {
    pub subject: usize,
    pub predicate_id: usize,
    pub object: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ImageAnnotations {
    pub objects: Vec<ObjectInstance>,
    pub relationships: Vec<RelationshipAnnotation>,
}

impl ImageAnnotations {
    pub fn object(&self, instance_id: usize) -> Option<&ObjectInstance> {
        self.objects.get(instance_id).filter(|o| o.instance_id == instance_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetIndex {
    pub images: BTreeMap<String, ImageAnnotations>,
    pub objects: Dictionary,
    pub predicates: Dictionary,
}

#[derive(Deserialize)]
struct RawObject {
    category: i64,
    bbox: [f64; 4],
}

#[derive(Deserialize)]
struct RawRecord {
    predicate: i64,
    subject: RawObject,
    object: RawObject,
}

#[derive(Serialize)]
struct OutObject {
    category: usize,
    bbox: [f64; 4],
}

#[derive(Serialize)]
struct OutRecord {
    predicate: usize,
    subject: OutObject,
    object: OutObject,
}

fn check_index(value: i64, size: usize, what: &'static str) -> Result<usize> {
    if value < 0 || value as usize >= size {
        return Err(Error::OutOfBounds {
            what,
            index: value.max(0) as usize,
            size,
        });
    }
    Ok(value as usize)
}

impl DatasetIndex {
    pub fn empty(objects: Dictionary, predicates: Dictionary) -> Self {
        DatasetIndex {
            images: BTreeMap::new(),
            objects,
            predicates,
        }
    }

    pub fn num_images(&self) -> usize {
        self.images.len()
    }

    pub fn num_relationships(&self) -> usize {
        self.images.values().map(|i| i.relationships.len()).sum()
    }

    /// Parses an annotation document (see module docs).
    pub fn load_annotations(text: &str, objects: Dictionary, predicates: Dictionary) -> Result<Self> {
        let raw: BTreeMap<String, Value> =
            serde_json::from_str(text).map_err(|e| Error::Parse(format!("annotations: {e}")))?;
        let mut images = BTreeMap::new();
        for (image, records) in raw {
            let records = match records {
                Value::Array(r) => r,
                other => {
                    return Err(Error::Record {
                        image,
                        record: 0,
                        message: format!("expected a list of records, found {other}"),
                    })
                }
            };
            let mut ann = ImageAnnotations::default();
            let mut seen: HashMap<(usize, [u64; 4]), usize> = HashMap::new();
            for (ordinal, rec) in records.into_iter().enumerate() {
                let rec: RawRecord = serde_json::from_value(rec).map_err(|e| Error::Record {
                    image: image.clone(),
                    record: ordinal,
                    message: e.to_string(),
                })?;
                let predicate_id = check_index(rec.predicate, predicates.len(), "predicate")?;
                let mut intern = |o: &RawObject| -> Result<usize> {
                    let category_id = check_index(o.category, objects.len(), "object category")?;
                    let bbox = BoundingBox::from_vrd(o.bbox).map_err(|e| Error::Record {
                        image: image.clone(),
                        record: ordinal,
                        message: e.to_string(),
                    })?;
                    let key = (category_id, bbox.to_array().map(f64::to_bits));
                    Ok(*seen.entry(key).or_insert_with(|| {
                        let id = ann.objects.len();
                        ann.objects.push(ObjectInstance {
                            instance_id: id,
                            category_id,
                            bbox,
                            score: 1.0,
                        });
                        id
                    }))
                };
                let subject = intern(&rec.subject)?;
                let object = intern(&rec.object)?;
                ann.relationships.push(RelationshipAnnotation {
                    subject,
                    predicate_id,
                    object,
                });
            }
            images.insert(image, ann);
        }
        Ok(DatasetIndex {
            images,
            objects,
            predicates,
        })
    }

    pub fn load_annotations_file(path: &Path, objects: Dictionary, predicates: Dictionary) -> Result<Self> {
        let text = io::read_to_string(path)?;
        Self::load_annotations(&text, objects, predicates)
    }

    /// Serializes back to the annotation layout. Loading the result yields an
    /// index equal to `self` (objects that take part in no relationship are
    /// not representable and are dropped).
    pub fn to_annotation_json(&self) -> String {
        let doc: BTreeMap<&str, Vec<OutRecord>> = self
            .images
            .iter()
            .map(|(name, ann)| {
                let out = |id: usize| {
                    let o = &ann.objects[id];
                    let b = o.bbox;
                    OutObject {
                        category: o.category_id,
                        bbox: [b.y_min(), b.y_max(), b.x_min(), b.x_max()],
                    }
                };
                let recs = ann
                    .relationships
                    .iter()
                    .map(|r| OutRecord {
                        predicate: r.predicate_id,
                        subject: out(r.subject),
                        object: out(r.object),
                    })
                    .collect();
                (name.as_str(), recs)
            })
            .collect();
        serde_json::to_string(&doc).expect("annotation records serialize")
    }

    /// Merges another index with identical dictionaries. Image names must not
    /// collide.
    pub fn merge(mut self, other: DatasetIndex) -> Result<Self> {
        if self.objects != other.objects || self.predicates != other.predicates {
            return Err(Error::invalid("cannot merge indexes with different dictionaries"));
        }
        for (name, ann) in other.images {
            if self.images.insert(name.clone(), ann).is_some() {
                return Err(Error::invalid(format!("image '{name}' present in both indexes")));
            }
        }
        Ok(self)
    }

    /// Restricts the index to the named images (unknown names are ignored).
    pub fn subset<'a>(&self, names: impl IntoIterator<Item = &'a str>) -> DatasetIndex {
        let images = names
            .into_iter()
            .filter_map(|n| self.images.get(n).map(|a| (n.to_string(), a.clone())))
            .collect();
        DatasetIndex {
            images,
            objects: self.objects.clone(),
            predicates: self.predicates.clone(),
        }
    }

    /// Writes `objects.json` and `predicates.json` into `dir`.
    pub fn export_dictionaries(&self, dir: &Path) -> Result<()> {
        self.objects.save(&dir.join("objects.json"))?;
        self.predicates.save(&dir.join("predicates.json"))
    }
}

/// Reads `objects.json` and `predicates.json` from `dir`.
pub fn import_dictionaries(dir: &Path) -> Result<(Dictionary, Dictionary)> {
    Ok((
        Dictionary::load(&dir.join("objects.json"))?,
        Dictionary::load(&dir.join("predicates.json"))?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PairMode {
    /// `n(n-1)` pairs, both directions.
    #[default]
    Ordered,
    /// `n(n-1)/2` pairs with `subject < object`.
    Unordered,
}

/// Candidate (subject, object) index pairs in lexicographic order.
pub fn enumerate_pairs<T>(items: &[T], mode: PairMode) -> Vec<(usize, usize)> {
    let n = items.len();
    let mut pairs = Vec::with_capacity(n * n.saturating_sub(1));
    for s in 0..n {
        let start = match mode {
            PairMode::Ordered => 0,
            PairMode::Unordered => s + 1,
        };
        pairs.extend((start..n).filter(|&o| o != s).map(|o| (s, o)));
    }
    pairs
}

#[derive(Deserialize)]
struct RawDetection {
    category: Value,
    bbox: [f64; 4],
    #[serde(default = "one")]
    score: f64,
}

fn one() -> f64 {
    1.0
}

/// Parses a detections document
/// `{image: [{"category": name, "bbox": [x_min, y_min, x_max, y_max], "score": s}]}`.
///
/// Categories may be names or dictionary indices. Names missing from the
/// dictionary are skipped with a warning.
pub fn load_detections(text: &str, objects: &Dictionary) -> Result<BTreeMap<String, Vec<ObjectInstance>>> {
    let raw: BTreeMap<String, Vec<Value>> =
        serde_json::from_str(text).map_err(|e| Error::Parse(format!("detections: {e}")))?;
    let mut out = BTreeMap::new();
    for (image, dets) in raw {
        let mut instances = Vec::new();
        for (ordinal, det) in dets.into_iter().enumerate() {
            let record_err = |message: String| Error::Record {
                image: image.clone(),
                record: ordinal,
                message,
            };
            let det: RawDetection = serde_json::from_value(det).map_err(|e| record_err(e.to_string()))?;
            let category_id = match &det.category {
                Value::String(name) => match objects.id(name) {
                    Some(id) => id,
                    None => {
                        log::warn!("{image}: detection category '{name}' not in dictionary, skipped");
                        continue;
                    }
                },
                Value::Number(n) => {
                    let v = n.as_i64().ok_or_else(|| record_err(format!("bad category {n}")))?;
                    check_index(v, objects.len(), "object category")?
                }
                other => return Err(record_err(format!("bad category {other}"))),
            };
            if !(0.0..=1.0).contains(&det.score) {
                return Err(record_err(format!("score {} outside [0, 1]", det.score)));
            }
            let bbox = BoundingBox::try_from(det.bbox).map_err(|e| record_err(e.to_string()))?;
            instances.push(ObjectInstance {
                instance_id: instances.len(),
                category_id,
                bbox,
                score: det.score,
            });
        }
        out.insert(image, instances);
    }
    Ok(out)
}
