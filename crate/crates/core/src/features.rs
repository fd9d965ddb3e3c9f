//! Per-pair feature construction shared by training and inference.

use rayon::prelude::*;

use crate::dataset::{enumerate_pairs, DatasetIndex, Dictionary, ObjectInstance, PairMode};
use crate::error::{Error, Result};
use crate::predsvm::{concat_features, SvmModel};
use crate::scenegraph::PairPrediction;
use crate::semproj::{EmbeddingLayer, MlpModel};
use crate::visfeat::{stub_visual, FeatureStore, MissingPolicy, RelationshipKey};
use crate::wordvec::{concat_pair, EmbeddingTable, OovPolicy};

/// Word vector of every object category, indexed by category id.
#[derive(Debug, Clone)]
pub struct CategoryVectors {
    vectors: Vec<Vec<f64>>,
}

impl CategoryVectors {
    pub fn build(table: &EmbeddingTable, objects: &Dictionary, policy: OovPolicy) -> Result<Self> {
        let vectors = objects
            .names()
            .iter()
            .map(|n| table.lookup_with(n, policy))
            .collect::<Result<_>>()?;
        Ok(CategoryVectors { vectors })
    }

    pub fn from_vectors(vectors: Vec<Vec<f64>>) -> Self {
        CategoryVectors { vectors }
    }

    pub fn get(&self, category: usize) -> Result<&[f64]> {
        self.vectors.get(category).map(Vec::as_slice).ok_or(Error::OutOfBounds {
            what: "object category",
            index: category,
            size: self.vectors.len(),
        })
    }

    /// Subject vector followed by object vector.
    pub fn pair_input(&self, subject: usize, object: usize) -> Result<Vec<f64>> {
        concat_pair(self.get(subject)?, self.get(object)?)
    }
}

/// Semantic network inputs and predicate labels for every gold relationship.
pub fn semantic_samples(index: &DatasetIndex, vectors: &CategoryVectors) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    let mut xs = Vec::with_capacity(index.num_relationships());
    let mut ys = Vec::with_capacity(index.num_relationships());
    for ann in index.images.values() {
        for r in &ann.relationships {
            let s = ann.objects[r.subject].category_id;
            let o = ann.objects[r.object].category_id;
            xs.push(vectors.pair_input(s, o)?);
            ys.push(r.predicate_id);
        }
    }
    Ok((xs, ys))
}

/// Where visual features come from.
#[derive(Debug, Clone, Copy)]
pub enum VisualSource<'a> {
    /// Semantic-only ablation.
    None,
    Store(&'a FeatureStore, MissingPolicy),
    Stub { dim: usize, seed: u64 },
}

/// Builds the classifier input for a subject/object pair.
pub struct PairFeaturizer<'a> {
    pub vectors: &'a CategoryVectors,
    pub semantic: &'a MlpModel,
    pub layer: EmbeddingLayer,
    pub visual: VisualSource<'a>,
}

impl PairFeaturizer<'_> {
    pub fn dim(&self) -> usize {
        let v = match self.visual {
            VisualSource::None => 0,
            VisualSource::Store(s, _) => s.dim(),
            VisualSource::Stub { dim, .. } => dim,
        };
        self.semantic.embedding_dim(self.layer) + v
    }

    /// `Ok(None)` when the pair is skipped (missing visual feature under the
    /// skip policy, or a self-relationship when visual features are on).
    pub fn feature(&self, image_id: &str, subject: &ObjectInstance, object: &ObjectInstance) -> Result<Option<Vec<f64>>> {
        let input = self.vectors.pair_input(subject.category_id, object.category_id)?;
        let semantic = self.semantic.semantic_embedding(&input, self.layer)?;
        let visual = match self.visual {
            VisualSource::None => None,
            _ if subject.instance_id == object.instance_id => return Ok(None),
            VisualSource::Store(store, policy) => {
                let key = RelationshipKey::new(image_id, subject.instance_id, object.instance_id)?;
                match store.resolve(&key, policy)? {
                    Some(v) => Some(v),
                    None => return Ok(None),
                }
            }
            VisualSource::Stub { dim, seed } => {
                let key = RelationshipKey::new(image_id, subject.instance_id, object.instance_id)?;
                Some(stub_visual(&key, dim, seed))
            }
        };
        concat_features(Some(&semantic), visual.as_deref()).map(Some)
    }

    /// Classifier samples for every gold relationship in `index`; skipped
    /// pairs are dropped and counted.
    pub fn gold_samples(&self, index: &DatasetIndex) -> Result<(Vec<Vec<f64>>, Vec<usize>, usize)> {
        let jobs: Vec<(&str, &ObjectInstance, &ObjectInstance, usize)> = index
            .images
            .iter()
            .flat_map(|(name, ann)| {
                ann.relationships
                    .iter()
                    .map(move |r| (name.as_str(), &ann.objects[r.subject], &ann.objects[r.object], r.predicate_id))
            })
            .collect();
        let feats: Vec<Option<Vec<f64>>> = jobs
            .par_iter()
            .map(|(img, s, o, _)| self.feature(img, s, o))
            .collect::<Result<_>>()?;
        let mut xs = Vec::with_capacity(feats.len());
        let mut ys = Vec::with_capacity(feats.len());
        let mut skipped = 0;
        for (f, job) in feats.into_iter().zip(&jobs) {
            match f {
                Some(f) => {
                    xs.push(f);
                    ys.push(job.3);
                }
                None => skipped += 1,
            }
        }
        Ok((xs, ys, skipped))
    }

    /// Top-`k` predicates for every ordered pair of `instances`.
    pub fn predict_pairs(
        &self,
        svm: &SvmModel,
        image_id: &str,
        instances: &[ObjectInstance],
        k: usize,
    ) -> Result<Vec<PairPrediction>> {
        let pairs = enumerate_pairs(instances, PairMode::Ordered);
        let out: Vec<Option<PairPrediction>> = pairs
            .par_iter()
            .map(|&(s, o)| {
                let (subj, obj) = (&instances[s], &instances[o]);
                Ok(match self.feature(image_id, subj, obj)? {
                    Some(f) => Some(PairPrediction {
                        subject: subj.instance_id,
                        object: obj.instance_id,
                        ranked: svm.top_k(&f, k)?,
                    }),
                    None => None,
                })
            })
            .collect::<Result<_>>()?;
        Ok(out.into_iter().flatten().collect())
    }
}
