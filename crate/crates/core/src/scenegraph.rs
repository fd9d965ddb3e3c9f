//! Directed scene graphs.
//!
//! Nodes are object instances (identified by `instance_id`, so two people
//! stay two nodes). Each ordered subject/object pair carries up to `k`
//! parallel edges, one per retained predicate, ranked 1..k by probability.
//!
//! JSON layout (version 1):
//!
//! ```json
//! {"version": 1, "image": "img.jpg",
//!  "nodes": [{"id": 0, "category": 12, "bbox": [x_min, y_min, x_max, y_max], "score": 1.0}],
//!  "edges": [{"subject": 0, "object": 1, "predicate": 3, "probability": 0.61, "rank": 1}]}
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::dataset::{Dictionary, ImageAnnotations, ObjectInstance};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

pub const JSON_VERSION: u64 = 1;

/// Ranked predicates for one ordered pair, as produced by the classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPrediction {
    pub subject: usize,
    pub object: usize,
    /// `(predicate_id, probability)`, most probable first.
    pub ranked: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub subject: usize,
    pub object: usize,
    pub predicate: usize,
    pub probability: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneGraph {
    pub image_id: String,
    pub nodes: Vec<ObjectInstance>,
    pub edges: Vec<Edge>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub subject: String,
    pub predicate: String,
    pub object: String,
    pub probability: f64,
}

/// Builds a graph keeping the `k` best predicates of every pair whose
/// probability is at least `min_prob`. Node and edge order is canonical, so
/// the input order of `predictions` does not matter.
pub fn assemble(
    image_id: &str,
    instances: &[ObjectInstance],
    predictions: &[PairPrediction],
    k: usize,
    min_prob: f64,
) -> Result<SceneGraph> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if !(0.0..=1.0).contains(&min_prob) {
        return Err(Error::invalid(format!("min_prob {min_prob} outside [0, 1]")));
    }
    let mut nodes = instances.to_vec();
    nodes.sort_by_key(|n| n.instance_id);
    if nodes.windows(2).any(|w| w[0].instance_id == w[1].instance_id) {
        return Err(Error::invalid("duplicate instance id"));
    }
    let known: HashSet<usize> = nodes.iter().map(|n| n.instance_id).collect();
    let mut seen = HashSet::new();
    let mut edges = Vec::new();
    for p in predictions {
        for id in [p.subject, p.object] {
            if !known.contains(&id) {
                return Err(Error::invalid(format!("prediction references unknown instance {id}")));
            }
        }
        if p.subject == p.object {
            return Err(Error::invalid(format!("self-relationship on instance {}", p.subject)));
        }
        if !seen.insert((p.subject, p.object)) {
            return Err(Error::invalid(format!("duplicate prediction for pair ({}, {})", p.subject, p.object)));
        }
        let mut ranked = p.ranked.clone();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
        edges.extend(
            ranked
                .into_iter()
                .take(k)
                .enumerate()
                .filter(|(_, (_, prob))| *prob >= min_prob)
                .map(|(i, (predicate, probability))| Edge {
                    subject: p.subject,
                    object: p.object,
                    predicate,
                    probability,
                    rank: i + 1,
                }),
        );
    }
    edges.sort_by_key(|e| (e.subject, e.object, e.rank));
    Ok(SceneGraph {
        image_id: image_id.to_string(),
        nodes,
        edges,
    })
}

/// Gold relationships as predictions with probability 1, grouped per pair in
/// annotation order. Self-relationships are dropped.
pub fn gold_predictions(ann: &ImageAnnotations) -> Vec<PairPrediction> {
    let mut grouped: BTreeMap<(usize, usize), Vec<(usize, f64)>> = BTreeMap::new();
    for r in &ann.relationships {
        if r.subject == r.object {
            log::debug!("dropping self-relationship on instance {}", r.subject);
            continue;
        }
        let list = grouped.entry((r.subject, r.object)).or_default();
        if !list.iter().any(|(p, _)| *p == r.predicate_id) {
            list.push((r.predicate_id, 1.0));
        }
    }
    grouped
        .into_iter()
        .map(|((subject, object), ranked)| PairPrediction { subject, object, ranked })
        .collect()
}

impl SceneGraph {
    pub fn node(&self, id: usize) -> Option<&ObjectInstance> {
        self.nodes
            .binary_search_by_key(&id, |n| n.instance_id)
            .ok()
            .map(|i| &self.nodes[i])
    }

    /// `(subject category, predicate, object category)` per edge.
    pub fn categorical_triples(&self) -> Vec<(usize, usize, usize)> {
        let cat: HashMap<usize, usize> = self.nodes.iter().map(|n| (n.instance_id, n.category_id)).collect();
        self.edges
            .iter()
            .map(|e| (cat[&e.subject], e.predicate, cat[&e.object]))
            .collect()
    }

    pub fn triples(&self, objects: &Dictionary, predicates: &Dictionary) -> Result<Vec<Triple>> {
        self.edges
            .iter()
            .map(|e| {
                let name = |id: usize| -> Result<String> {
                    let node = self
                        .node(id)
                        .ok_or_else(|| Error::invalid(format!("edge references unknown node {id}")))?;
                    Ok(objects.name_checked(node.category_id, "object category")?.to_string())
                };
                Ok(Triple {
                    subject: name(e.subject)?,
                    predicate: predicates.name_checked(e.predicate, "predicate")?.to_string(),
                    object: name(e.object)?,
                    probability: e.probability,
                })
            })
            .collect()
    }

    /// Graphviz digraph; nodes labelled `category#instance`, edges
    /// `predicate (probability)`.
    pub fn to_dot(&self, objects: &Dictionary, predicates: &Dictionary) -> Result<String> {
        let mut out = format!("digraph {} {{\n", dot_quote(&self.image_id));
        for n in &self.nodes {
            let cat = objects.name_checked(n.category_id, "object category")?;
            let _ = writeln!(out, "  n{} [label={}];", n.instance_id, dot_quote(&format!("{cat}#{}", n.instance_id)));
        }
        for e in &self.edges {
            let p = predicates.name_checked(e.predicate, "predicate")?;
            let _ = writeln!(
                out,
                "  n{} -> n{} [label={}];",
                e.subject,
                e.object,
                dot_quote(&format!("{p} ({:.4})", e.probability))
            );
        }
        out.push_str("}\n");
        Ok(out)
    }

    pub fn to_json(&self) -> String {
        let doc = JsonGraph {
            version: JSON_VERSION,
            image: self.image_id.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|n| JsonNode {
                    id: n.instance_id,
                    category: n.category_id,
                    bbox: n.bbox.to_array(),
                    score: n.score,
                })
                .collect(),
            edges: self.edges.clone(),
        };
        serde_json::to_string_pretty(&doc).expect("graph serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let root: Value = serde_json::from_str(text).map_err(|e| Error::Parse(format!("scene graph: {e}")))?;
        let err = |path: String, msg: String| Error::Parse(format!("{path}: {msg}"));
        let version = root.get("version").and_then(Value::as_u64);
        if version != Some(JSON_VERSION) {
            return Err(err("/version".into(), format!("expected {JSON_VERSION}, found {version:?}")));
        }
        let image_id = root
            .get("image")
            .and_then(Value::as_str)
            .ok_or_else(|| err("/image".into(), "expected a string".into()))?
            .to_string();
        let list = |key: &str| -> Result<&Vec<Value>> {
            root.get(key)
                .and_then(Value::as_array)
                .ok_or_else(|| err(format!("/{key}"), "expected an array".into()))
        };
        let mut nodes = Vec::new();
        let mut ids = HashSet::new();
        for (i, v) in list("nodes")?.iter().enumerate() {
            let path = format!("/nodes/{i}");
            let n: JsonNode = serde_json::from_value(v.clone()).map_err(|e| err(path.clone(), e.to_string()))?;
            let bbox = BoundingBox::try_from(n.bbox).map_err(|e| err(format!("{path}/bbox"), e.to_string()))?;
            if !(0.0..=1.0).contains(&n.score) {
                return Err(err(format!("{path}/score"), "outside [0, 1]".into()));
            }
            if !ids.insert(n.id) {
                return Err(err(format!("{path}/id"), format!("duplicate node id {}", n.id)));
            }
            nodes.push(ObjectInstance {
                instance_id: n.id,
                category_id: n.category,
                bbox,
                score: n.score,
            });
        }
        let mut edges: Vec<Edge> = Vec::new();
        for (i, v) in list("edges")?.iter().enumerate() {
            let path = format!("/edges/{i}");
            let e: Edge = serde_json::from_value(v.clone()).map_err(|e| err(path.clone(), e.to_string()))?;
            for (field, id) in [("subject", e.subject), ("object", e.object)] {
                if !ids.contains(&id) {
                    return Err(err(format!("{path}/{field}"), format!("unknown node {id}")));
                }
            }
            if e.subject == e.object {
                return Err(err(format!("{path}/object"), "subject and object are the same node".into()));
            }
            if !(0.0..=1.0).contains(&e.probability) {
                return Err(err(format!("{path}/probability"), "outside [0, 1]".into()));
            }
            if e.rank == 0 {
                return Err(err(format!("{path}/rank"), "ranks start at 1".into()));
            }
            edges.push(e);
        }
        nodes.sort_by_key(|n| n.instance_id);
        edges.sort_by_key(|e| (e.subject, e.object, e.rank));
        for w in edges.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            if (a.subject, a.object) == (b.subject, b.object) && (a.rank == b.rank || a.probability < b.probability) {
                return Err(err(
                    "/edges".into(),
                    format!("pair ({}, {}) has inconsistent ranks", a.subject, a.object),
                ));
            }
        }
        Ok(SceneGraph { image_id, nodes, edges })
    }
}

#[derive(Serialize, Deserialize)]
struct JsonNode {
    id: usize,
    category: usize,
    bbox: [f64; 4],
    score: f64,
}

#[derive(Serialize)]
struct JsonGraph {
    version: u64,
    image: String,
    nodes: Vec<JsonNode>,
    edges: Vec<Edge>,
}

fn dot_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn inst(id: usize, cat: usize) -> ObjectInstance {
        ObjectInstance {
            instance_id: id,
            category_id: cat,
            bbox: BoundingBox::new(id as f64, 0.0, id as f64 + 5.0, 5.0).unwrap(),
            score: 1.0,
        }
    }

    fn dicts() -> (Dictionary, Dictionary) {
        (
            Dictionary::new(["person", "food", "table"]).unwrap(),
            Dictionary::new(["eating", "on", "near", "has"]).unwrap(),
        )
    }

    #[test]
    fn empty_graph() {
        let g = assemble("x", &[], &[], 3, 0.0).unwrap();
        assert!(g.nodes.is_empty() && g.edges.is_empty());
        let (o, p) = dicts();
        assert!(g.triples(&o, &p).unwrap().is_empty());
    }

    #[test]
    fn two_nodes_both_directions() {
        let preds = vec![
            PairPrediction { subject: 0, object: 1, ranked: vec![(0, 0.5), (1, 0.3), (2, 0.1), (3, 0.1)] },
            PairPrediction { subject: 1, object: 0, ranked: vec![(2, 0.4), (1, 0.35), (0, 0.2), (3, 0.05)] },
        ];
        let g = assemble("x", &[inst(0, 0), inst(1, 1)], &preds, 3, 0.0).unwrap();
        assert_eq!(g.edges.len(), 6);
        let g = assemble("x", &[inst(0, 0), inst(1, 1)], &preds, 3, 0.15).unwrap();
        // 0.5, 0.3 from the first pair and 0.4, 0.35, 0.2 from the second
        assert_eq!(g.edges.len(), 5);
        assert!(g.edges.iter().all(|e| e.probability >= 0.15));
    }

    #[test]
    fn direction_matters() {
        let (o, p) = dicts();
        let fwd = vec![PairPrediction { subject: 0, object: 1, ranked: vec![(0, 0.9)] }];
        let rev = vec![PairPrediction { subject: 1, object: 0, ranked: vec![(0, 0.9)] }];
        let nodes = [inst(0, 0), inst(1, 1)];
        let a = assemble("x", &nodes, &fwd, 1, 0.0).unwrap().triples(&o, &p).unwrap();
        let b = assemble("x", &nodes, &rev, 1, 0.0).unwrap().triples(&o, &p).unwrap();
        assert_eq!((a[0].subject.as_str(), a[0].predicate.as_str(), a[0].object.as_str()), ("person", "eating", "food"));
        assert_ne!(a, b);
    }

    #[test]
    fn rejects_bad_predictions() {
        let nodes = [inst(0, 0), inst(1, 1)];
        let unknown = vec![PairPrediction { subject: 0, object: 7, ranked: vec![(0, 1.0)] }];
        assert!(assemble("x", &nodes, &unknown, 1, 0.0).is_err());
        let selfp = vec![PairPrediction { subject: 1, object: 1, ranked: vec![(0, 1.0)] }];
        assert!(assemble("x", &nodes, &selfp, 1, 0.0).is_err());
        assert!(assemble("x", &nodes, &[], 0, 0.0).is_err());
    }

    #[test]
    fn single_node_dot() {
        let (o, p) = dicts();
        let g = assemble("img \"1\"", &[inst(4, 2)], &[], 3, 0.0).unwrap();
        let dot = g.to_dot(&o, &p).unwrap();
        assert_eq!(dot.matches("[label=").count(), 1);
        assert_eq!(dot.matches("->").count(), 0);
        assert!(dot.contains("n4 [label=\"table#4\"]"));
        assert!(dot.starts_with("digraph \"img \\\"1\\\"\" {"));
    }

    #[test]
    fn json_errors_carry_paths() {
        let g = assemble("x", &[inst(0, 0), inst(1, 1)], &[PairPrediction { subject: 0, object: 1, ranked: vec![(1, 0.7)] }], 1, 0.0).unwrap();
        let mut v: Value = serde_json::from_str(&g.to_json()).unwrap();
        v["edges"][0]["object"] = 9.into();
        let err = SceneGraph::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("/edges/0/object"), "{err}");
        let mut v: Value = serde_json::from_str(&g.to_json()).unwrap();
        v["nodes"][1]["bbox"] = serde_json::json!([5, 0, 1, 1]);
        let err = SceneGraph::from_json(&v.to_string()).unwrap_err().to_string();
        assert!(err.contains("/nodes/1/bbox"), "{err}");
        let err = SceneGraph::from_json(r#"{"version": 2}"#).unwrap_err().to_string();
        assert!(err.contains("/version"), "{err}");
    }

    #[test]
    fn gold_grouping() {
        use crate::dataset::RelationshipAnnotation as R;
        let ann = ImageAnnotations {
            objects: vec![inst(0, 0), inst(1, 1)],
            relationships: vec![
                R { subject: 0, predicate_id: 1, object: 1 },
                R { subject: 0, predicate_id: 3, object: 1 },
                R { subject: 0, predicate_id: 1, object: 1 },
                R { subject: 1, predicate_id: 2, object: 1 },
            ],
        };
        let preds = gold_predictions(&ann);
        assert_eq!(preds.len(), 1);
        assert_eq!(preds[0].ranked, vec![(1, 1.0), (3, 1.0)]);
        let g = assemble("x", &ann.objects, &preds, 1, 0.0).unwrap();
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.edges[0].predicate, 1);
    }

    fn arb_graph() -> impl Strategy<Value = (Vec<ObjectInstance>, Vec<PairPrediction>, usize)> {
        (1usize..6, 1usize..4, any::<u64>()).prop_map(|(n, k, seed)| {
            use rand::Rng;
            let mut r = crate::rng::seeded(seed);
            let nodes: Vec<ObjectInstance> = (0..n).map(|i| inst(i * 2 + 1, r.gen_range(0..3))).collect();
            let mut preds = Vec::new();
            for s in &nodes {
                for o in &nodes {
                    if s.instance_id != o.instance_id && r.gen_bool(0.7) {
                        let mut ranked: Vec<(usize, f64)> = (0..4).map(|p| (p, r.gen_range(0.0..1.0))).collect();
                        ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
                        preds.push(PairPrediction { subject: s.instance_id, object: o.instance_id, ranked });
                    }
                }
            }
            (nodes, preds, k)
        })
    }

    proptest! {
        #[test]
        fn json_round_trip((nodes, preds, k) in arb_graph()) {
            let g = assemble("img.jpg", &nodes, &preds, k, 0.0).unwrap();
            prop_assert_eq!(SceneGraph::from_json(&g.to_json()).unwrap(), g);
        }

        #[test]
        fn permutation_invariant((nodes, preds, k) in arb_graph(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let g = assemble("i", &nodes, &preds, k, 0.0).unwrap();
            let mut shuffled = preds.clone();
            shuffled.shuffle(&mut crate::rng::seeded(seed));
            let mut rnodes = nodes.clone();
            rnodes.reverse();
            prop_assert_eq!(assemble("i", &rnodes, &shuffled, k, 0.0).unwrap(), g.clone());
            let n = nodes.len();
            prop_assert!(g.edges.len() <= n * (n - 1) * k);
            for w in g.edges.windows(2) {
                if (w[0].subject, w[0].object) == (w[1].subject, w[1].object) {
                    prop_assert!(w[0].probability >= w[1].probability);
                    prop_assert_eq!(w[0].rank + 1, w[1].rank);
                }
            }
        }
    }
}
