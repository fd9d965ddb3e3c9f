//! Predicate accuracy, recall@k and detection mean average precision.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

pub fn predicate_accuracy(predictions: &[usize], gold: &[usize]) -> Result<f64> {
    if predictions.len() != gold.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} gold labels",
            predictions.len(),
            gold.len()
        )));
    }
    if gold.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let hits = predictions.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Fraction of samples whose gold predicate is among the first `k` entries.
pub fn recall_at_k(ranked: &[Vec<usize>], gold: &[usize], k: usize) -> Result<f64> {
    if ranked.len() != gold.len() {
        return Err(Error::invalid(format!("{} ranked lists for {} gold labels", ranked.len(), gold.len())));
    }
    if gold.is_empty() || k == 0 {
        return Err(Error::invalid("recall@k needs samples and k >= 1"));
    }
    let mut hits = 0;
    for (i, (list, g)) in ranked.iter().zip(gold).enumerate() {
        if list.len() < k {
            return Err(Error::invalid(format!("sample {i}: ranked list has {} < {k} entries", list.len())));
        }
        if list[..k].contains(g) {
            hits += 1;
        }
    }
    Ok(hits as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BoundingBox,
    pub category: usize,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GoldBox {
    pub bbox: BoundingBox,
    pub category: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapReport {
    pub map: f64,
    pub iou_threshold: f64,
    /// category id -> average precision, for categories present in gold
    pub per_class: BTreeMap<usize, f64>,
    pub warning: Option<String>,
}

/// Area under the precision/recall curve with all-point interpolation:
/// precision at each recall level is replaced by the best precision at any
/// equal or higher recall.
pub fn average_precision(tp_flags: &[bool], num_gold: usize) -> f64 {
    if num_gold == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(tp_flags.len());
    for (i, &hit) in tp_flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        points.push((tp as f64 / num_gold as f64, tp as f64 / (i + 1) as f64, hit));
    }
    let mut envelope = 0.0f64;
    for p in points.iter_mut().rev() {
        envelope = envelope.max(p.1);
        p.1 = envelope;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (recall, precision, hit) in points {
        if hit {
            ap += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
    }
    ap
}

/// VOC-style mAP. Detections of a category are visited by descending score
/// (input order on ties); each is a true positive when some not yet matched
/// gold box of its category in the same image has IoU >= `iou_threshold`
/// (the best such box is taken). The mean runs over categories present in
/// gold.
pub fn mean_average_precision(
    detections: &BTreeMap<String, Vec<Detection>>,
    gold: &BTreeMap<String, Vec<GoldBox>>,
    iou_threshold: f64,
) -> Result<MapReport> {
    if !(iou_threshold > 0.0 && iou_threshold < 1.0) {
        return Err(Error::invalid(format!("IoU threshold {iou_threshold} outside (0, 1)")));
    }
    if let Some(d) = detections.values().flatten().find(|d| !d.score.is_finite()) {
        return Err(Error::NonFinite(format!("detection score {}", d.score)));
    }
    let categories: BTreeSet<usize> = gold.values().flatten().map(|g| g.category).collect();
    if categories.is_empty() {
        return Ok(MapReport {
            map: 0.0,
            iou_threshold,
            per_class: BTreeMap::new(),
            warning: Some("no gold boxes; mAP defined as 0".into()),
        });
    }
    let mut per_class = BTreeMap::new();
    for &c in &categories {
        let num_gold = gold.values().flatten().filter(|g| g.category == c).count();
        let mut dets: Vec<(&str, &Detection)> = detections
            .iter()
            .flat_map(|(img, ds)| ds.iter().filter(|d| d.category == c).map(move |d| (img.as_str(), d)))
            .collect();
        dets.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
        let mut matched: BTreeMap<&str, Vec<bool>> = BTreeMap::new();
        let mut flags = Vec::with_capacity(dets.len());
        for (img, d) in dets {
            let boxes: Vec<&GoldBox> = gold.get(img).map(|g| g.iter().filter(|g| g.category == c).collect()).unwrap_or_default();
            let used = matched.entry(img).or_insert_with(|| vec![false; boxes.len()]);
            let best = boxes
                .iter()
                .enumerate()
                .filter(|(i, _)| !used[*i])
                .map(|(i, g)| (i, d.bbox.iou(&g.bbox)))
                .filter(|(_, iou)| *iou >= iou_threshold)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
            match best {
                Some((i, _)) => {
                    used[i] = true;
                    flags.push(true);
                }
                None => flags.push(false),
            }
        }
        per_class.insert(c, average_precision(&flags, num_gold));
    }
    let map = per_class.values().sum::<f64>() / per_class.len() as f64;
    let warning = detections
        .values()
        .all(Vec::is_empty)
        .then(|| "no detections".to_string());
    Ok(MapReport {
        map,
        iou_threshold,
        per_class,
        warning,
    })
}

/// A named scalar metric for reporting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_class: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>10}", "metric", "value");
        let _ = writeln!(s, "{:<24} {:>10.6}", self.metric, self.value);
        let _ = writeln!(s, "{:<24} {:>10}", "samples", self.samples);
        if let Some(pc) = &self.per_class {
            for (name, v) in pc {
                let _ = writeln!(s, "  {:<22} {:>10.6}", name, v);
            }
        }
        if let Some(w) = &self.warning {
            let _ = writeln!(s, "warning: {w}");
        }
        s
    }
}
