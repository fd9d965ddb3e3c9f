//! Context-based retrieval over scene graphs.
//!
//! Both similarity measures look only at labels (object categories and
//! predicates), never at instance ids or boxes, so renumbering nodes does not
//! change a score.
//!
//! - Triple-set: Jaccard index of the sets of `(subject category, predicate,
//!   object category)` triples.
//! - Walk: every directed walk of 1..=L edges is reduced to its label
//!   sequence `c0 p1 c1 ... pL cL`. The score is the size of the multiset
//!   intersection of the two graphs' walk sequences divided by the geometric
//!   mean of their walk counts.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::dataset::Dictionary;
use crate::error::{Error, Result};
use crate::scenegraph::SceneGraph;

/// A `subject,predicate,object` query; `None` is the `*` wildcard.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriplePattern {
    pub subject: Option<String>,
    pub predicate: Option<String>,
    pub object: Option<String>,
}

impl FromStr for TriplePattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::Parse(format!("pattern '{s}': expected subject,predicate,object")));
        }
        let field = |p: &str| -> Result<Option<String>> {
            match p {
                "*" => Ok(None),
                "" => Err(Error::Parse(format!("pattern '{s}': empty field (use * for any)"))),
                name => Ok(Some(name.to_string())),
            }
        };
        let pat = TriplePattern {
            subject: field(parts[0])?,
            predicate: field(parts[1])?,
            object: field(parts[2])?,
        };
        if pat.subject.is_none() && pat.predicate.is_none() && pat.object.is_none() {
            return Err(Error::Parse(format!("pattern '{s}': at least one field must not be *")));
        }
        Ok(pat)
    }
}

impl fmt::Display for TriplePattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: &Option<String>| v.clone().unwrap_or_else(|| "*".into());
        write!(f, "{},{},{}", show(&self.subject), show(&self.predicate), show(&self.object))
    }
}

/// A pattern with names resolved to dictionary ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolvedPattern {
    pub subject: Option<usize>,
    pub predicate: Option<usize>,
    pub object: Option<usize>,
}

impl TriplePattern {
    pub fn resolve(&self, objects: &Dictionary, predicates: &Dictionary) -> Result<ResolvedPattern> {
        let look = |name: &Option<String>, dict: &Dictionary, what: &str| -> Result<Option<usize>> {
            match name {
                None => Ok(None),
                Some(n) => dict
                    .id(n)
                    .map(Some)
                    .ok_or_else(|| Error::invalid(format!("unknown {what} '{n}' in pattern"))),
            }
        };
        Ok(ResolvedPattern {
            subject: look(&self.subject, objects, "object category")?,
            predicate: look(&self.predicate, predicates, "predicate")?,
            object: look(&self.object, objects, "object category")?,
        })
    }
}

impl ResolvedPattern {
    pub fn matches(&self, triple: (usize, usize, usize)) -> bool {
        let ok = |want: Option<usize>, got: usize| want.map_or(true, |w| w == got);
        ok(self.subject, triple.0) && ok(self.predicate, triple.1) && ok(self.object, triple.2)
    }

    /// Number of edges of `g` matching the pattern.
    pub fn count(&self, g: &SceneGraph) -> usize {
        g.categorical_triples().into_iter().filter(|t| self.matches(*t)).count()
    }
}

/// Jaccard similarity of categorical triple sets; two empty graphs score 1.
pub fn triple_set_similarity(a: &SceneGraph, b: &SceneGraph) -> f64 {
    let sa: BTreeSet<_> = a.categorical_triples().into_iter().collect();
    let sb: BTreeSet<_> = b.categorical_triples().into_iter().collect();
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    let inter = sa.intersection(&sb).count();
    let union = sa.len() + sb.len() - inter;
    inter as f64 / union as f64
}

pub const MAX_WALK_LENGTH: usize = 3;

/// Label sequence -> number of walks with that sequence, over lengths 1..=max_len.
pub fn walk_profile(g: &SceneGraph, max_len: usize) -> HashMap<Vec<usize>, u64> {
    let cat: HashMap<usize, usize> = g.nodes.iter().map(|n| (n.instance_id, n.category_id)).collect();
    let mut out_edges: HashMap<usize, Vec<(usize, usize)>> = HashMap::new();
    for e in &g.edges {
        out_edges.entry(e.subject).or_default().push((e.predicate, e.object));
    }
    let mut profile: HashMap<Vec<usize>, u64> = HashMap::new();
    // (label sequence, end node) -> walk count
    let mut frontier: HashMap<(Vec<usize>, usize), u64> = HashMap::new();
    for e in &g.edges {
        let labels = vec![cat[&e.subject], e.predicate, cat[&e.object]];
        *frontier.entry((labels, e.object)).or_default() += 1;
    }
    for step in 1..=max_len {
        for ((labels, _), n) in &frontier {
            *profile.entry(labels.clone()).or_default() += n;
        }
        if step == max_len {
            break;
        }
        let mut next: HashMap<(Vec<usize>, usize), u64> = HashMap::new();
        for ((labels, end), n) in frontier {
            for &(p, o) in out_edges.get(&end).map(Vec::as_slice).unwrap_or(&[]) {
                let mut l = labels.clone();
                l.push(p);
                l.push(cat[&o]);
                *next.entry((l, o)).or_default() += n;
            }
        }
        frontier = next;
    }
    profile
}

/// Shared-walk similarity in [0, 1]; two graphs without walks score 1.
pub fn walk_similarity(a: &SceneGraph, b: &SceneGraph, max_len: usize) -> Result<f64> {
    if !(1..=MAX_WALK_LENGTH).contains(&max_len) {
        return Err(Error::invalid(format!("walk length {max_len} outside 1..={MAX_WALK_LENGTH}")));
    }
    let pa = walk_profile(a, max_len);
    let pb = walk_profile(b, max_len);
    let wa: u64 = pa.values().sum();
    let wb: u64 = pb.values().sum();
    if wa == 0 || wb == 0 {
        return Ok(if wa == wb { 1.0 } else { 0.0 });
    }
    let shared: u64 = pa.iter().map(|(s, n)| (*n).min(pb.get(s).copied().unwrap_or(0))).sum();
    Ok((shared as f64 / ((wa as f64) * (wb as f64)).sqrt()).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Jaccard,
    Walk(usize),
}

impl Method {
    pub fn parse(tag: &str, walk_length: usize) -> Result<Self> {
        match tag {
            "jaccard" => Ok(Method::Jaccard),
            "walk" => Ok(Method::Walk(walk_length)),
            other => Err(Error::invalid(format!("unknown retrieval method '{other}' (jaccard|walk)"))),
        }
    }

    pub fn score(&self, a: &SceneGraph, b: &SceneGraph) -> Result<f64> {
        match *self {
            Method::Jaccard => Ok(triple_set_similarity(a, b)),
            Method::Walk(l) => walk_similarity(a, b, l),
        }
    }
}

pub enum Query<'a> {
    Graph(&'a SceneGraph),
    Pattern(ResolvedPattern),
}

/// Scores every corpus graph against `query`, best first, ties by image id.
pub fn rank_by_context(
    query: &Query<'_>,
    corpus: &[SceneGraph],
    method: Method,
    limit: Option<usize>,
) -> Result<Vec<(String, f64)>> {
    if corpus.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    let mut scored: Vec<(String, f64)> = corpus
        .par_iter()
        .map(|g| {
            let s = match query {
                Query::Graph(q) => method.score(q, g)?,
                Query::Pattern(p) => p.count(g) as f64,
            };
            Ok((g.image_id.clone(), s))
        })
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    if let Some(n) = limit {
        scored.truncate(n);
    }
    Ok(scored)
}

pub fn results_csv(results: &[(String, f64)]) -> String {
    let mut s = String::from("image_id,score\n");
    for (id, score) in results {
        s.push_str(&format!("{id},{score}\n"));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ObjectInstance;
    use crate::geometry::BoundingBox;
    use crate::scenegraph::Edge;

    fn graph(id: &str, cats: &[usize], edges: &[(usize, usize, usize)]) -> SceneGraph {
        SceneGraph {
            image_id: id.into(),
            nodes: cats
                .iter()
                .enumerate()
                .map(|(i, &c)| ObjectInstance {
                    instance_id: i,
                    category_id: c,
                    bbox: BoundingBox::new(0., 0., 1., 1.).unwrap(),
                    score: 1.0,
                })
                .collect(),
            edges: edges
                .iter()
                .map(|&(s, p, o)| Edge { subject: s, object: o, predicate: p, probability: 1.0, rank: 1 })
                .collect(),
        }
    }

    /// All edge tuples of length l that chain, turned into label sequences.
    fn brute_walks(g: &SceneGraph, max_len: usize) -> Vec<Vec<usize>> {
        let cat = |id: usize| g.nodes.iter().find(|n| n.instance_id == id).unwrap().category_id;
        let m = g.edges.len();
        let mut out = Vec::new();
        for l in 1..=max_len {
            let total = m.pow(l as u32);
            for code in 0..total {
                let mut c = code;
                let seq: Vec<&Edge> = (0..l)
                    .map(|_| {
                        let e = &g.edges[c % m];
                        c /= m;
                        e
                    })
                    .collect();
                if seq.windows(2).all(|w| w[0].object == w[1].subject) {
                    let mut labels = vec![cat(seq[0].subject)];
                    for e in &seq {
                        labels.push(e.predicate);
                        labels.push(cat(e.object));
                    }
                    out.push(labels);
                }
            }
        }
        out.sort();
        out
    }

    fn brute_similarity(a: &SceneGraph, b: &SceneGraph, l: usize) -> f64 {
        let wa = brute_walks(a, l);
        let mut wb = brute_walks(b, l);
        let (na, nb) = (wa.len(), wb.len());
        let mut shared = 0;
        for w in wa {
            if let Some(pos) = wb.iter().position(|x| *x == w) {
                wb.remove(pos);
                shared += 1;
            }
        }
        shared as f64 / ((na * nb) as f64).sqrt()
    }

    #[test]
    fn jaccard_examples() {
        let g = graph("a", &[0, 1, 2], &[(0, 0, 1), (1, 1, 2)]);
        assert_eq!(triple_set_similarity(&g, &g), 1.0);
        let h = graph("b", &[3, 4], &[(0, 5, 1)]);
        assert_eq!(triple_set_similarity(&g, &h), 0.0);
        // {A, B, C} vs {B, C, D} = 2 / 4
        let abc = graph("x", &[0, 1, 2, 3], &[(0, 0, 1), (1, 0, 2), (2, 0, 3)]);
        let bcd = graph("y", &[1, 2, 3, 4], &[(0, 0, 1), (1, 0, 2), (2, 0, 3)]);
        assert_eq!(triple_set_similarity(&abc, &bcd), 0.5);
        let empty = graph("e", &[], &[]);
        assert_eq!(triple_set_similarity(&empty, &empty), 1.0);
        assert_eq!(triple_set_similarity(&empty, &g), 0.0);
    }

    #[test]
    fn walk_examples() {
        let g = graph("a", &[0, 1, 2], &[(0, 0, 1), (1, 1, 2)]);
        assert_eq!(walk_similarity(&g, &g, 2).unwrap(), 1.0);
        let h = graph("b", &[3, 4], &[(0, 5, 1)]);
        assert_eq!(walk_similarity(&g, &h, 3).unwrap(), 0.0);
        assert!(walk_similarity(&g, &h, 0).is_err());
        assert!(walk_similarity(&g, &h, 4).is_err());
    }

    #[test]
    fn walk_matches_brute_force() {
        // Two-edge chains sharing one step.
        let a = graph("a", &[0, 1, 2], &[(0, 0, 1), (1, 1, 2)]);
        let b = graph("b", &[0, 1, 3], &[(0, 0, 1), (1, 2, 2)]);
        for l in 1..=3 {
            let got = walk_similarity(&a, &b, l).unwrap();
            assert!((got - brute_similarity(&a, &b, l)).abs() < 1e-15, "L={l}");
        }
        // L = 1: each graph has 2 walks, one shared -> 1 / 2.
        assert_eq!(walk_similarity(&a, &b, 1).unwrap(), 0.5);
        // L = 2: 3 walks each, one shared -> 1 / 3.
        assert!((walk_similarity(&a, &b, 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn walk_brute_force_random_small_graphs() {
        use rand::Rng;
        let mut r = crate::rng::seeded(77);
        for _ in 0..40 {
            let mut make = |id: &str| {
                let n = r.gen_range(1..=5);
                let cats: Vec<usize> = (0..n).map(|_| r.gen_range(0..3)).collect();
                let m = r.gen_range(0..=6);
                let edges: Vec<(usize, usize, usize)> = (0..m)
                    .filter_map(|_| {
                        let (s, o) = (r.gen_range(0..n), r.gen_range(0..n));
                        (s != o).then(|| (s, r.gen_range(0..2), o))
                    })
                    .collect();
                graph(id, &cats, &edges)
            };
            let (a, b) = (make("a"), make("b"));
            for l in 1..=3 {
                let got = walk_similarity(&a, &b, l).unwrap();
                let wa = brute_walks(&a, l).len();
                let wb = brute_walks(&b, l).len();
                let expect = if wa == 0 || wb == 0 {
                    if wa == wb { 1.0 } else { 0.0 }
                } else {
                    brute_similarity(&a, &b, l)
                };
                assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
                assert_eq!(got, walk_similarity(&b, &a, l).unwrap());
            }
        }
    }

    #[test]
    fn pattern_parse_and_match() {
        let p: TriplePattern = "Person, on, *".parse().unwrap();
        assert_eq!(p.object, None);
        assert_eq!(p.to_string(), "Person,on,*");
        assert!("*,*,*".parse::<TriplePattern>().is_err());
        assert!("a,b".parse::<TriplePattern>().is_err());
        assert!("a,,b".parse::<TriplePattern>().is_err());
        let objs = Dictionary::new(["person", "bike"]).unwrap();
        let preds = Dictionary::new(["on", "has"]).unwrap();
        let r = p.resolve(&objs, &preds).unwrap();
        let g = graph("g", &[0, 1, 0], &[(0, 0, 1), (0, 1, 2), (2, 0, 1)]);
        assert_eq!(r.count(&g), 2);
        assert!("dog,on,*".parse::<TriplePattern>().unwrap().resolve(&objs, &preds).is_err());
    }

    #[test]
    fn ranking() {
        let corpus = vec![
            graph("b.jpg", &[0, 1], &[(0, 0, 1)]),
            graph("a.jpg", &[0, 1], &[(0, 0, 1)]),
            graph("c.jpg", &[0, 1], &[(0, 1, 1)]),
        ];
        let q = Query::Graph(&corpus[2]);
        let res = rank_by_context(&q, &corpus, Method::Jaccard, None).unwrap();
        assert_eq!(res[0], ("c.jpg".to_string(), 1.0));
        assert_eq!(res[1].0, "a.jpg");
        assert_eq!(rank_by_context(&q, &corpus, Method::Walk(2), Some(1)).unwrap().len(), 1);
        assert!(rank_by_context(&q, &[], Method::Jaccard, None).is_err());
        assert!(Method::parse("cosine", 2).is_err());
        assert!(results_csv(&res).starts_with("image_id,score\nc.jpg,1\n"));
    }
}
