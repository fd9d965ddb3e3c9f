use std::collections::BTreeMap;
use std::fmt::Write;

use super::DatasetIndex;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageStatRow {
    pub image_id: String,
    pub objects: usize,
    pub relationships: usize,
}

/// Per-image object/relationship counts with summary figures.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStats {
    pub rows: Vec<ImageStatRow>,
    pub total_relationships: usize,
    /// Image with the most relationships; first in name order on ties.
    pub max_relationships: Option<(String, usize)>,
    pub min_relationships: usize,
    pub mean_relationships: f64,
    pub max_objects: usize,
    pub min_objects: usize,
    pub mean_objects: f64,
    /// relationship count -> number of images
    pub relationship_histogram: BTreeMap<usize, usize>,
    /// object count -> number of images
    pub object_histogram: BTreeMap<usize, usize>,
}

pub fn image_stats(index: &DatasetIndex) -> ImageStats {
    let rows: Vec<ImageStatRow> = index
        .images
        .iter()
        .map(|(name, ann)| ImageStatRow {
            image_id: name.clone(),
            objects: ann.objects.len(),
            relationships: ann.relationships.len(),
        })
        .collect();
    let n = rows.len();
    let mut max_rel: Option<&ImageStatRow> = None;
    let mut rel_hist = BTreeMap::new();
    let mut obj_hist = BTreeMap::new();
    for r in &rows {
        if max_rel.map_or(true, |m| r.relationships > m.relationships) {
            max_rel = Some(r);
        }
        *rel_hist.entry(r.relationships).or_insert(0) += 1;
        *obj_hist.entry(r.objects).or_insert(0) += 1;
    }
    let total_rel: usize = rows.iter().map(|r| r.relationships).sum();
    let total_obj: usize = rows.iter().map(|r| r.objects).sum();
    let mean = |t: usize| if n == 0 { 0.0 } else { t as f64 / n as f64 };
    ImageStats {
        total_relationships: total_rel,
        max_relationships: max_rel.map(|r| (r.image_id.clone(), r.relationships)),
        min_relationships: rows.iter().map(|r| r.relationships).min().unwrap_or(0),
        mean_relationships: mean(total_rel),
        max_objects: rows.iter().map(|r| r.objects).max().unwrap_or(0),
        min_objects: rows.iter().map(|r| r.objects).min().unwrap_or(0),
        mean_objects: mean(total_obj),
        relationship_histogram: rel_hist,
        object_histogram: obj_hist,
        rows,
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl ImageStats {
    /// `image_id,objects,relationships` with one row per image.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_id,objects,relationships\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", csv_field(&r.image_id), r.objects, r.relationships);
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "images:               {}", self.rows.len());
        let _ = writeln!(s, "relationships:        {}", self.total_relationships);
        if let Some((img, n)) = &self.max_relationships {
            let _ = writeln!(s, "max relationships:    {n} ({img})");
        }
        let _ = writeln!(s, "min relationships:    {}", self.min_relationships);
        let _ = writeln!(s, "mean relationships:   {:.3}", self.mean_relationships);
        let _ = writeln!(s, "objects max/min/mean: {}/{}/{:.3}", self.max_objects, self.min_objects, self.mean_objects);
        s
    }
}
