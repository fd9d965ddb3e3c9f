use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const OBJECTS: [&str; 6] = ["person", "bike", "table", "cup", "traffic light", "dog"];
const PREDICATES: [&str; 4] = ["on", "next to", "has", "under"];

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_relgraph"));
    c.env("NO_COLOR", "1").env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn cart_scene() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/cart_scene/annotations.json")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Tiny deterministic LCG so the fixture does not depend on a crate.
struct Lcg(u64);

impl Lcg {
    fn next(&mut self) -> u64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        self.0 >> 33
    }

    fn below(&mut self, n: u64) -> u64 {
        self.next() % n
    }
}

/// 60 images whose predicate is a function of the subject/object categories,
/// plus an 8-dim text word-vector file.
fn synthetic(dir: &Path) -> PathBuf {
    let mut r = Lcg(7);
    let mut images = serde_json::Map::new();
    for i in 0..60 {
        let n = 3 + r.below(3) as usize;
        let objs: Vec<(usize, [u64; 4])> = (0..n)
            .map(|k| {
                let y = 10 * k as u64 + r.below(5);
                let x = 20 * k as u64 + r.below(5);
                (r.below(6) as usize, [y, y + 30, x, x + 40])
            })
            .collect();
        let mut rels = Vec::new();
        for a in 0..n {
            let b = (a + 1) % n;
            let (sa, sb) = (objs[a].0, objs[b].0);
            let pred = (sa + 2 * sb) % 4;
            rels.push(serde_json::json!({
                "predicate": pred,
                "subject": {"category": sa, "bbox": objs[a].1},
                "object": {"category": sb, "bbox": objs[b].1},
            }));
        }
        images.insert(format!("img{i:03}.jpg"), serde_json::Value::Array(rels));
    }
    let ann = dir.join("annotations.json");
    fs::write(&ann, serde_json::to_string(&images).unwrap()).unwrap();
    fs::write(dir.join("objects.json"), serde_json::to_string(&OBJECTS).unwrap()).unwrap();
    fs::write(dir.join("predicates.json"), serde_json::to_string(&PREDICATES).unwrap()).unwrap();

    let words = ["person", "bike", "table", "cup", "traffic", "light", "dog", "on", "next", "to", "has", "under", "zebra"];
    let mut text = format!("{} 8\n", words.len());
    for w in words {
        text.push_str(w);
        for _ in 0..8 {
            text.push_str(&format!(" {:.4}", r.below(2000) as f64 / 1000.0 - 1.0));
        }
        text.push('\n');
    }
    fs::write(dir.join("vectors.txt"), text).unwrap();
    ann
}

#[test]
fn unknown_flag_exits_2() {
    let out = run(&["stats", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn runtime_error_exits_1() {
    let out = run(&["stats", "--annotations", "/nonexistent/a.json", "--out", "/tmp/x.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn gold_graph_of_cart_scene_has_seven_edges() {
    let dot = ok(&["graph", "--annotations", s(&cart_scene()), "--image-id", "cart_scene.jpg", "--gold"]);
    assert_eq!(dot.matches(" -> ").count(), 7);
    for needle in ["wheel#", "\"under (1.0000)\"", "\"on top (1.0000)\"", "\"has (1.0000)\""] {
        assert!(dot.contains(needle), "{needle} missing from\n{dot}");
    }
    let json = ok(&["graph", "--annotations", s(&cart_scene()), "--image-id", "cart_scene.jpg", "--gold", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["edges"].as_array().unwrap().len(), 7);
    assert_eq!(v["nodes"].as_array().unwrap().len(), 8);
}

#[test]
fn stats_and_split() {
    let dir = tempfile::tempdir().unwrap();
    let ann = synthetic(dir.path());
    let csv = dir.path().join("stats.csv");
    ok(&["stats", "--annotations", s(&ann), "--out", s(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("image_id,objects,relationships\n"));
    assert_eq!(text.lines().count(), 61);

    let out = dir.path().join("split");
    ok(&["split", "--annotations", s(&ann), "--seed", "4", "--out", s(&out)]);
    let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    let sizes: Vec<usize> = ["train", "val", "test"].iter().map(|k| m[k].as_array().unwrap().len()).collect();
    assert_eq!(sizes.iter().sum::<usize>(), 60);
    assert!(out.join("train.json").exists() && out.join("test.json").exists());
    let again = dir.path().join("split2");
    ok(&["split", "--annotations", s(&ann), "--seed", "4", "--out", s(&again)]);
    assert_eq!(fs::read(out.join("manifest.json")).unwrap(), fs::read(again.join("manifest.json")).unwrap());
}

#[test]
fn full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ann = synthetic(d);
    let vectors = d.join("vectors.txt");
    let sem = d.join("sem.spj");
    let common = ["--annotations", s(&ann), "--vectors", s(&vectors)];

    ok(&[&["train-semantic"], &common[..], &["--epochs", "60", "--hidden", "16", "--seed", "1", "--lr", "0.2", "--out", s(&sem)]].concat());
    let losses = fs::read_to_string(d.join("sem.spj.loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 61);

    let svm = d.join("model.svm");
    let feat = ["--semantic-model", s(&sem)];
    ok(&[&["train-svm"], &common[..], &feat[..], &["--semantic-only", "--epochs", "30", "--seed", "2", "--out", s(&svm)]].concat());

    // 3 rows per ordered pair with the default k
    let table = ok(&[&["predict"], &common[..], &feat[..], &["--svm-model", s(&svm), "--image-id", "img000.jpg"]].concat());
    let rows = table.lines().count() - 1;
    assert_eq!(rows % 3, 0);
    let pairs = rows / 3;
    assert!([6, 12, 20].contains(&pairs), "{pairs} pairs");

    let preds = d.join("preds.csv");
    ok(&[&["predict"], &common[..], &feat[..], &["--svm-model", s(&svm), "--out", s(&preds)]].concat());
    let acc = ok(&["eval", "--gold", s(&ann), "--pred", s(&preds), "--metric", "accuracy", "--format", "json"]);
    let v: serde_json::Value = serde_json::from_str(&acc).unwrap();
    assert!(v["value"].as_f64().unwrap() >= 0.9, "{acc}");
    let r3 = ok(&["eval", "--gold", s(&ann), "--pred", s(&preds), "--metric", "recall@3", "--format", "json"]);
    let r3: serde_json::Value = serde_json::from_str(&r3).unwrap();
    assert!(r3["value"].as_f64().unwrap() >= v["value"].as_f64().unwrap());

    // determinism
    let svm2 = d.join("model2.svm");
    ok(&[&["train-svm"], &common[..], &feat[..], &["--semantic-only", "--epochs", "30", "--seed", "2", "--out", s(&svm2)]].concat());
    assert_eq!(fs::read(&svm).unwrap(), fs::read(&svm2).unwrap());

    // stub visual features
    let stub = d.join("stub.svm");
    let stub_flags = ["--stub-visual", "--stub-dim", "16"];
    ok(&[&["train-svm"], &common[..], &feat[..], &stub_flags[..], &["--epochs", "5", "--out", s(&stub)]].concat());
    let t = ok(&[&["predict"], &common[..], &feat[..], &stub_flags[..], &["--svm-model", s(&stub), "--image-id", "img001.jpg", "--k", "2"]].concat());
    assert_eq!((t.lines().count() - 1) % 2, 0);
    let mismatch = run(&[&["predict"], &common[..], &feat[..], &["--svm-model", s(&stub), "--image-id", "img001.jpg"]].concat());
    assert_eq!(mismatch.status.code(), Some(1));

    // predicted graph
    let dot = ok(&[&["graph"], &common[..], &feat[..], &["--svm-model", s(&svm), "--image-id", "img002.jpg", "--k", "1"]].concat());
    assert!(dot.starts_with("digraph"));

    // corpus and retrieval
    let corpus = d.join("corpus");
    ok(&["graph", "--annotations", s(&ann), "--gold", "--format", "json", "--out", s(&corpus)]);
    assert!(corpus.join("img005.jpg.json").exists() && corpus.join("objects.json").exists());
    let q = ok(&["query", "--graph", s(&corpus.join("img005.jpg.json")), "--corpus", s(&corpus), "--method", "walk", "--limit", "3"]);
    let lines: Vec<&str> = q.lines().collect();
    assert_eq!(lines[0], "image_id,score");
    assert_eq!(lines[1], "img005.jpg,1");
    assert_eq!(lines.len(), 4);
    let q = ok(&["query", "--pattern", "person,*,*", "--corpus", s(&corpus), "--method", "jaccard"]);
    assert_eq!(q.lines().count(), 61);
    assert_eq!(run(&["query", "--pattern", "unicorn,*,*", "--corpus", s(&corpus)]).status.code(), Some(1));

    let cache = d.join("cache.json");
    ok(&["embed-cache", "--annotations", s(&ann), "--vectors", s(&vectors), "--out", s(&cache)]);
    let c: serde_json::Value = serde_json::from_str(&fs::read_to_string(&cache).unwrap()).unwrap();
    assert_eq!(c["traffic light"].as_array().unwrap().len(), 8);
}

#[test]
fn map_on_gold_detections() {
    let dir = tempfile::tempdir().unwrap();
    let ann = cart_scene();
    let gold: serde_json::Value = serde_json::from_str(&fs::read_to_string(&ann).unwrap()).unwrap();
    let objects: Vec<String> = serde_json::from_str(&fs::read_to_string(ann.with_file_name("objects.json")).unwrap()).unwrap();
    let mut dets = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for rel in gold["cart_scene.jpg"].as_array().unwrap() {
        for role in ["subject", "object"] {
            let o = &rel[role];
            let b: Vec<f64> = o["bbox"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
            if seen.insert(format!("{o}")) {
                let name = &objects[o["category"].as_u64().unwrap() as usize];
                dets.push(serde_json::json!({"category": name, "bbox": [b[2], b[0], b[3], b[1]], "score": 0.9}));
            }
        }
    }
    let path = dir.path().join("dets.json");
    fs::write(&path, serde_json::json!({"cart_scene.jpg": dets}).to_string()).unwrap();
    let out = ok(&["eval", "--gold", s(&ann), "--pred", s(&path), "--metric", "map"]);
    assert!(out.contains("1.000000"), "{out}");
}
