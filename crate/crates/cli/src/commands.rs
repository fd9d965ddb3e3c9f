use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::{info, warn};

use relgraph::dataset::{self, DatasetIndex, Dictionary, ObjectInstance, Split, SplitManifest};
use relgraph::evalmetrics::{self, Detection, GoldBox, MetricReport};
use relgraph::features::{semantic_samples, CategoryVectors, PairFeaturizer, VisualSource};
use relgraph::io::{read_to_string, write_atomic};
use relgraph::predsvm::{self, SvmConfig, SvmModel};
use relgraph::retrieval::{self, Method, Query, TriplePattern};
use relgraph::scenegraph::{self, SceneGraph};
use relgraph::semproj::{self, Activation, EmbeddingLayer, MlpModel, TrainConfig};
use relgraph::visfeat::{FeatureStore, MissingPolicy};
use relgraph::wordvec::{self, EmbeddingTable, OovPolicy};

use crate::{
    ActivationArg, Command, DataArgs, FeatureOptions, GraphFormat, LayerArg, MethodArg, MissingArg, ObjectSource,
    OovArg, ReportFormat, SplitArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Stats { data, out } => stats(&data, &out),
        Command::Split {
            data,
            test_annotations,
            seed,
            out,
        } => split(&data, test_annotations.as_deref(), seed, &out),
        Command::TrainSemantic {
            data,
            split,
            vectors,
            epochs,
            seed,
            hidden,
            lr,
            batch_size,
            activation,
            no_early_stopping,
            oov,
            out,
            loss_csv,
        } => {
            let config = TrainConfig {
                learning_rate: lr,
                epochs,
                batch_size,
                seed,
                early_stopping: !no_early_stopping,
                hidden_width: hidden,
                activation: match activation {
                    ActivationArg::Relu => Activation::Relu,
                    ActivationArg::Tanh => Activation::Tanh,
                },
            };
            let loss_csv = loss_csv.unwrap_or_else(|| with_suffix(&out, ".loss.csv"));
            train_semantic(&data, &split, &vectors, oov_policy(oov), &config, &out, &loss_csv)
        }
        Command::TrainSvm {
            data,
            split,
            features,
            epochs,
            seed,
            lambda,
            out,
        } => {
            let config = SvmConfig {
                lambda,
                epochs,
                seed,
                ..SvmConfig::default()
            };
            let index = load_index(&data)?;
            let parts = resolve_split(&index, &split)?;
            let models = Models::load(&index, &features.vectors, &features.semantic_model, &features.common)?;
            let featurizer = models.featurizer(&features.common)?;
            let (xs, ys, skipped) = featurizer.gold_samples(&parts.train)?;
            if skipped > 0 {
                warn!("{skipped} training pair(s) skipped");
            }
            info!("training SVM on {} samples of dimension {}", xs.len(), featurizer.dim());
            let model = predsvm::train_svm(&xs, &ys, index.predicates.len(), &config)?;
            let acc = xs.iter().zip(&ys).filter(|(x, y)| model.predict(x).ok() == Some(**y)).count() as f64
                / xs.len() as f64;
            info!("training accuracy {acc:.4}");
            model.save(&out)?;
            Ok(())
        }
        Command::Predict {
            data,
            objects,
            features,
            svm_model,
            k,
            out,
        } => {
            let index = load_index(&data)?;
            let images = object_sets(&index, &objects)?;
            let models = Models::load(&index, &features.vectors, &features.semantic_model, &features.common)?;
            let featurizer = models.featurizer(&features.common)?;
            let svm = SvmModel::load(&svm_model)?;
            let mut csv = String::from("image_id,subject_id,subject,object_id,object,rank,predicate_id,predicate,probability\n");
            for (image, instances) in &images {
                for p in featurizer.predict_pairs(&svm, image, instances, k)? {
                    let cat = |id: usize| -> Result<&str> {
                        let inst = instances.iter().find(|i| i.instance_id == id).expect("pair of listed instances");
                        Ok(index.objects.name_checked(inst.category_id, "object category")?)
                    };
                    for (rank, (pred, prob)) in p.ranked.iter().enumerate() {
                        let _ = writeln!(
                            csv,
                            "{},{},{},{},{},{},{},{},{}",
                            csv_field(image),
                            p.subject,
                            csv_field(cat(p.subject)?),
                            p.object,
                            csv_field(cat(p.object)?),
                            rank + 1,
                            pred,
                            csv_field(index.predicates.name_checked(*pred, "predicate")?),
                            prob
                        );
                    }
                }
            }
            emit(out.as_deref(), csv.as_bytes())
        }
        Command::Graph {
            data,
            objects,
            gold,
            features,
            svm_model,
            k,
            min_prob,
            format,
            out,
        } => {
            let index = load_index(&data)?;
            let images = object_sets(&index, &objects)?;
            let predictor = if gold {
                if objects.detections.is_some() {
                    bail!("--gold uses the annotated objects; drop --detections");
                }
                None
            } else {
                let vectors = features.vectors.as_ref().context("--vectors is required without --gold")?;
                let sem = features.semantic_model.as_ref().context("--semantic-model is required without --gold")?;
                let svm = svm_model.as_ref().context("--svm-model is required without --gold")?;
                Some((Models::load(&index, vectors, sem, &features.common)?, SvmModel::load(svm)?))
            };
            let featurizer = match &predictor {
                Some((m, _)) => Some(m.featurizer(&features.common)?),
                None => None,
            };
            let mut graphs = Vec::new();
            for (image, instances) in &images {
                let preds = match (&featurizer, &predictor) {
                    (Some(f), Some((_, svm))) => f.predict_pairs(svm, image, instances, k.min(svm.classes()))?,
                    _ => scenegraph::gold_predictions(&index.images[image]),
                };
                graphs.push(scenegraph::assemble(image, instances, &preds, k, min_prob)?);
            }
            let render = |g: &SceneGraph| -> Result<String> {
                Ok(match format {
                    GraphFormat::Dot => g.to_dot(&index.objects, &index.predicates)?,
                    GraphFormat::Json => g.to_json(),
                })
            };
            if objects.image_id.is_some() {
                emit(out.as_deref(), render(&graphs[0])?.as_bytes())
            } else {
                let dir = out.context("--out DIR is required when graphing every image")?;
                std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
                let ext = if format == GraphFormat::Dot { "dot" } else { "json" };
                for g in &graphs {
                    write_atomic(&dir.join(format!("{}.{ext}", g.image_id)), render(g)?.as_bytes())?;
                }
                index.export_dictionaries(&dir)?;
                info!("wrote {} graphs to {}", graphs.len(), dir.display());
                Ok(())
            }
        }
        Command::Query {
            pattern,
            graph,
            corpus,
            method,
            walk_length,
            limit,
            objects,
            predicates,
            out,
        } => {
            let graphs = load_corpus(&corpus)?;
            let method = match method {
                MethodArg::Jaccard => Method::Jaccard,
                MethodArg::Walk => Method::Walk(walk_length),
            };
            let query_graph;
            let query = match (pattern, graph) {
                (Some(p), _) => {
                    let objects = Dictionary::load(&objects.unwrap_or_else(|| corpus.join("objects.json")))?;
                    let predicates = Dictionary::load(&predicates.unwrap_or_else(|| corpus.join("predicates.json")))?;
                    let pattern: TriplePattern = p.parse()?;
                    Query::Pattern(pattern.resolve(&objects, &predicates)?)
                }
                (None, Some(path)) => {
                    query_graph = SceneGraph::from_json(&read_to_string(&path)?)
                        .with_context(|| format!("query graph {}", path.display()))?;
                    Query::Graph(&query_graph)
                }
                (None, None) => bail!("one of --pattern or --graph is required"),
            };
            let ranked = retrieval::rank_by_context(&query, &graphs, method, limit)?;
            emit(out.as_deref(), retrieval::results_csv(&ranked).as_bytes())
        }
        Command::Eval {
            gold,
            objects,
            predicates,
            pred,
            metric,
            iou,
            format,
            out,
        } => {
            let data = DataArgs {
                annotations: gold,
                objects,
                predicates,
            };
            let index = load_index(&data)?;
            let report = evaluate(&index, &pred, &metric, iou)?;
            let text = match format {
                ReportFormat::Table => report.to_table(),
                ReportFormat::Json => report.to_json() + "\n",
            };
            emit(out.as_deref(), text.as_bytes())
        }
        Command::EmbedCache { data, vectors, oov, out } => {
            let (objects, predicates) = load_dictionaries(&data)?;
            let names: Vec<&str> = objects.names().iter().chain(predicates.names()).map(String::as_str).collect();
            let table = load_vectors(&vectors, &names)?;
            let cache = table.cache(names.iter().copied(), oov_policy(oov))?;
            write_atomic(&out, wordvec::cache_to_json(&cache).as_bytes())?;
            Ok(())
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => Ok(write_atomic(p, bytes)?),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(bytes)?;
            Ok(())
        }
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn oov_policy(o: OovArg) -> OovPolicy {
    match o {
        OovArg::Error => OovPolicy::Error,
        OovArg::Zero => OovPolicy::Zero,
    }
}

fn load_dictionaries(data: &DataArgs) -> Result<(Dictionary, Dictionary)> {
    let dir = data.annotations.parent().unwrap_or(Path::new("."));
    let objects = data.objects.clone().unwrap_or_else(|| dir.join("objects.json"));
    let predicates = data.predicates.clone().unwrap_or_else(|| dir.join("predicates.json"));
    Ok((
        Dictionary::load(&objects).with_context(|| format!("object dictionary {}", objects.display()))?,
        Dictionary::load(&predicates).with_context(|| format!("predicate dictionary {}", predicates.display()))?,
    ))
}

fn load_index(data: &DataArgs) -> Result<DatasetIndex> {
    let (objects, predicates) = load_dictionaries(data)?;
    let index = DatasetIndex::load_annotations_file(&data.annotations, objects, predicates)?;
    info!(
        "{}: {} images, {} relationships",
        data.annotations.display(),
        index.num_images(),
        index.num_relationships()
    );
    Ok(index)
}

fn stats(data: &DataArgs, out: &Path) -> Result<()> {
    let index = load_index(data)?;
    let stats = dataset::image_stats(&index);
    write_atomic(out, stats.to_csv().as_bytes())?;
    print!("{}", stats.summary());
    Ok(())
}

fn split(data: &DataArgs, test: Option<&Path>, seed: u64, out: &Path) -> Result<()> {
    let index = load_index(data)?;
    let parts = match test {
        Some(t) => {
            let test_data = DataArgs {
                annotations: t.to_path_buf(),
                ..data.clone()
            };
            dataset::split_with_test(&index, &load_index(&test_data)?, seed)?
        }
        None => dataset::split(&index, seed)?,
    };
    let manifest = parts.manifest(seed);
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, ids) in [("train", &manifest.train), ("val", &manifest.val), ("test", &manifest.test)] {
        let json = serde_json::to_string_pretty(ids)?;
        write_atomic(&out.join(format!("{name}.json")), json.as_bytes())?;
    }
    write_atomic(&out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    println!(
        "train {}  val {}  test {}",
        manifest.train.len(),
        manifest.val.len(),
        manifest.test.len()
    );
    Ok(())
}

fn resolve_split(index: &DatasetIndex, args: &SplitArgs) -> Result<Split> {
    match &args.split {
        Some(path) => {
            let manifest: SplitManifest = serde_json::from_str(&read_to_string(path)?)
                .with_context(|| format!("split manifest {}", path.display()))?;
            Ok(manifest.apply(index))
        }
        None => Ok(dataset::split(index, args.split_seed)?),
    }
}

/// Loads only the vectors needed for `names`, matching tokens case-insensitively.
fn load_vectors(path: &Path, names: &[&str]) -> Result<EmbeddingTable> {
    let mut tokens: BTreeSet<String> = BTreeSet::new();
    for n in names {
        tokens.insert(n.to_lowercase());
        tokens.extend(n.split_whitespace().map(str::to_lowercase));
    }
    let table = wordvec::load_file(path, |w| tokens.contains(&w.to_lowercase()))?;
    info!("{}: {} vectors of dimension {}", path.display(), table.len(), table.dim());
    Ok(table)
}

fn category_vectors(index: &DatasetIndex, path: &Path, oov: OovPolicy) -> Result<CategoryVectors> {
    let names: Vec<&str> = index.objects.names().iter().map(String::as_str).collect();
    let table = load_vectors(path, &names)?;
    Ok(CategoryVectors::build(&table, &index.objects, oov)?)
}

fn train_semantic(
    data: &DataArgs,
    split: &SplitArgs,
    vectors: &Path,
    oov: OovPolicy,
    config: &TrainConfig,
    out: &Path,
    loss_csv: &Path,
) -> Result<()> {
    let index = load_index(data)?;
    let parts = resolve_split(&index, split)?;
    let vecs = category_vectors(&index, vectors, oov)?;
    let (xs, ys) = semantic_samples(&parts.train, &vecs)?;
    let (vx, vy) = semantic_samples(&parts.val, &vecs)?;
    info!("training semantic network on {} samples, validating on {}", xs.len(), vx.len());
    let report = semproj::train(&xs, &ys, &vx, &vy, index.predicates.len(), config)?;
    info!(
        "best epoch {} (validation loss {:.4}), train accuracy {:.4}, validation accuracy {:.4}",
        report.best_epoch,
        report.val_loss[report.best_epoch - 1],
        report.model.accuracy(&xs, &ys),
        report.model.accuracy(&vx, &vy)
    );
    report.model.save(out)?;
    write_atomic(loss_csv, report.loss_csv().as_bytes())?;
    Ok(())
}

struct Models {
    vectors: CategoryVectors,
    semantic: MlpModel,
    store: Option<FeatureStore>,
}

impl Models {
    fn load(index: &DatasetIndex, vectors: &Path, semantic: &Path, opts: &FeatureOptions) -> Result<Self> {
        let semantic = MlpModel::load(semantic)?;
        if semantic.classes() != index.predicates.len() {
            bail!(
                "semantic model has {} classes but the predicate dictionary has {}",
                semantic.classes(),
                index.predicates.len()
            );
        }
        let store = match &opts.mode.features {
            Some(p) => Some(FeatureStore::load(p)?),
            None => None,
        };
        Ok(Models {
            vectors: category_vectors(index, vectors, oov_policy(opts.oov))?,
            semantic,
            store,
        })
    }

    fn featurizer(&self, opts: &FeatureOptions) -> Result<PairFeaturizer<'_>> {
        let visual = if let Some(store) = &self.store {
            let policy = match opts.missing {
                MissingArg::Error => MissingPolicy::Error,
                MissingArg::Skip => MissingPolicy::Skip,
                MissingArg::Stub => MissingPolicy::Stub { seed: opts.visual_seed },
            };
            VisualSource::Store(store, policy)
        } else if opts.mode.stub_visual {
            if opts.stub_dim == 0 {
                bail!("--stub-dim must be positive");
            }
            VisualSource::Stub {
                dim: opts.stub_dim,
                seed: opts.visual_seed,
            }
        } else {
            VisualSource::None
        };
        Ok(PairFeaturizer {
            vectors: &self.vectors,
            semantic: &self.semantic,
            layer: match opts.layer {
                LayerArg::Logits => EmbeddingLayer::Logits,
                LayerArg::Hidden => EmbeddingLayer::Hidden,
            },
            visual,
        })
    }
}

/// Object instances per image: gold objects or detections, optionally one image.
fn object_sets(index: &DatasetIndex, source: &ObjectSource) -> Result<BTreeMap<String, Vec<ObjectInstance>>> {
    let mut all = match &source.detections {
        Some(path) => dataset::load_detections(&read_to_string(path)?, &index.objects)?,
        None => index
            .images
            .iter()
            .map(|(k, a)| (k.clone(), a.objects.clone()))
            .collect(),
    };
    if let Some(id) = &source.image_id {
        let objs = all.remove(id).ok_or_else(|| anyhow!("image '{id}' not found"))?;
        if source.detections.is_none() && !index.images.contains_key(id) {
            bail!("image '{id}' not found");
        }
        all = BTreeMap::from([(id.clone(), objs)]);
    }
    Ok(all)
}

fn load_corpus(dir: &Path) -> Result<Vec<SceneGraph>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading corpus {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .filter(|p| !matches!(p.file_name().and_then(|n| n.to_str()), Some("objects.json" | "predicates.json")))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| Ok(SceneGraph::from_json(&read_to_string(p)?).with_context(|| format!("{}", p.display()))?))
        .collect()
}

/// Ranked predicate ids per `(image, subject, object)` from a `predict` CSV.
fn read_predictions(path: &Path) -> Result<HashMap<(String, usize, usize), Vec<usize>>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| anyhow!("{}: missing column '{name}'", path.display()))
    };
    let (ci, cs, co, cr, cp) = (col("image_id")?, col("subject_id")?, col("object_id")?, col("rank")?, col("predicate_id")?);
    let mut rows: HashMap<(String, usize, usize), Vec<(usize, usize)>> = HashMap::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let num = |c: usize| -> Result<usize> {
            rec[c]
                .parse()
                .with_context(|| format!("{} row {}: bad integer '{}'", path.display(), line + 1, &rec[c]))
        };
        rows.entry((rec[ci].to_string(), num(cs)?, num(co)?))
            .or_default()
            .push((num(cr)?, num(cp)?));
    }
    Ok(rows
        .into_iter()
        .map(|(k, mut v)| {
            v.sort();
            (k, v.into_iter().map(|(_, p)| p).collect())
        })
        .collect())
}

fn evaluate(index: &DatasetIndex, pred: &Path, metric: &str, iou: f64) -> Result<MetricReport> {
    if metric == "map" {
        let detections = dataset::load_detections(&read_to_string(pred)?, &index.objects)?;
        let dets: BTreeMap<String, Vec<Detection>> = detections
            .into_iter()
            .map(|(k, v)| {
                let d = v
                    .into_iter()
                    .map(|o| Detection {
                        bbox: o.bbox,
                        category: o.category_id,
                        score: o.score,
                    })
                    .collect();
                (k, d)
            })
            .collect();
        let gold: BTreeMap<String, Vec<GoldBox>> = index
            .images
            .iter()
            .map(|(k, a)| {
                let g = a
                    .objects
                    .iter()
                    .map(|o| GoldBox {
                        bbox: o.bbox,
                        category: o.category_id,
                    })
                    .collect();
                (k.clone(), g)
            })
            .collect();
        let r = evalmetrics::mean_average_precision(&dets, &gold, iou)?;
        let per_class = r
            .per_class
            .iter()
            .map(|(c, ap)| Ok((index.objects.name_checked(*c, "object category")?.to_string(), *ap)))
            .collect::<Result<_>>()?;
        return Ok(MetricReport {
            metric: "map".into(),
            value: r.map,
            samples: gold.values().map(Vec::len).sum(),
            per_class: Some(per_class),
            warning: r.warning,
        });
    }
    let k = match metric {
        "accuracy" => None,
        m => match m.strip_prefix("recall@").map(str::parse::<usize>) {
            Some(Ok(k)) if k > 0 => Some(k),
            _ => bail!("unknown metric '{metric}' (accuracy, recall@K, map)"),
        },
    };
    let predictions = read_predictions(pred)?;
    let mut ranked = Vec::new();
    let mut gold = Vec::new();
    let mut missing = 0;
    for (image, ann) in &index.images {
        for r in &ann.relationships {
            let list = predictions.get(&(image.clone(), r.subject, r.object));
            if list.is_none() {
                missing += 1;
            }
            ranked.push(list.cloned().unwrap_or_default());
            gold.push(r.predicate_id);
        }
    }
    let warning = (missing > 0).then(|| format!("{missing} gold pair(s) without predictions scored as misses"));
    if let Some(w) = &warning {
        warn!("{w}");
    }
    let value = match k {
        None => {
            let top: Vec<usize> = ranked.iter().map(|l| l.first().copied().unwrap_or(usize::MAX)).collect();
            evalmetrics::predicate_accuracy(&top, &gold)?
        }
        Some(k) => {
            for l in &mut ranked {
                l.resize(l.len().max(k), usize::MAX);
            }
            evalmetrics::recall_at_k(&ranked, &gold, k)?
        }
    };
    Ok(MetricReport {
        metric: metric.to_string(),
        value,
        samples: gold.len(),
        per_class: None,
        warning,
    })
}
