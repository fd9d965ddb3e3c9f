//! `relgraph` command-line tool.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, ColorChoice, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "relgraph", version, about = "Visual relationship scene graphs: training, inference, retrieval and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Per-image object and relationship counts as CSV.
    Stats {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Seeded train/val/test partition, written as manifests.
    Split {
        #[command(flatten)]
        data: DataArgs,
        /// Separate test annotations (VRD layout); test images all go to test.
        #[arg(long)]
        test_annotations: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the semantic projection network on word vectors.
    TrainSemantic {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        split: SplitArgs,
        #[arg(long)]
        vectors: PathBuf,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 300)]
        hidden: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, value_enum, default_value_t = ActivationArg::Relu)]
        activation: ActivationArg,
        /// Keep the last epoch instead of the best validation checkpoint.
        #[arg(long)]
        no_early_stopping: bool,
        #[arg(long, value_enum, default_value_t = OovArg::Error)]
        oov: OovArg,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV; defaults to `<out>.loss.csv`.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Train the one-vs-rest predicate SVM.
    TrainSvm {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        split: SplitArgs,
        #[command(flatten)]
        features: FeatureArgs,
        #[arg(long, default_value_t = 100)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        lambda: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-k predicate table for every ordered object pair.
    Predict {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        objects: ObjectSource,
        #[command(flatten)]
        features: FeatureArgs,
        #[arg(long)]
        svm_model: PathBuf,
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// CSV output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scene graph for one image, or for every image into a directory.
    Graph {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        objects: ObjectSource,
        /// Use the gold predicates instead of a trained model.
        #[arg(long)]
        gold: bool,
        #[command(flatten)]
        features: OptFeatureArgs,
        #[arg(long)]
        svm_model: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0.0)]
        min_prob: f64,
        #[arg(long, value_enum, default_value_t = GraphFormat::Dot)]
        format: GraphFormat,
        /// Output file (single image, stdout when absent) or directory (all images).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank a corpus of scene graphs against a pattern or a query graph.
    Query {
        #[arg(long, conflicts_with = "graph", required_unless_present = "graph")]
        pattern: Option<String>,
        /// Query scene graph (JSON).
        #[arg(long)]
        graph: Option<PathBuf>,
        /// Directory of scene graph JSON files.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, value_enum, default_value_t = MethodArg::Jaccard)]
        method: MethodArg,
        #[arg(long, default_value_t = 2)]
        walk_length: usize,
        #[arg(long)]
        limit: Option<usize>,
        /// Object dictionary for patterns; defaults to `<corpus>/objects.json`.
        #[arg(long)]
        objects: Option<PathBuf>,
        #[arg(long)]
        predicates: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate predictions against gold annotations.
    Eval {
        /// Gold annotation file.
        #[arg(long)]
        gold: PathBuf,
        #[arg(long)]
        objects: Option<PathBuf>,
        #[arg(long)]
        predicates: Option<PathBuf>,
        /// Prediction CSV (accuracy, recall@k) or detections JSON (map).
        #[arg(long)]
        pred: PathBuf,
        /// accuracy, recall@K (e.g. recall@3) or map
        #[arg(long)]
        metric: String,
        #[arg(long, default_value_t = 0.5)]
        iou: f64,
        #[arg(long, value_enum, default_value_t = ReportFormat::Table)]
        format: ReportFormat,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Word vectors of every dictionary name as JSON.
    EmbedCache {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        vectors: PathBuf,
        #[arg(long, value_enum, default_value_t = OovArg::Error)]
        oov: OovArg,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Annotation file and its dictionaries.
#[derive(Args, Debug, Clone)]
struct DataArgs {
    #[arg(long)]
    annotations: PathBuf,
    /// Defaults to `objects.json` beside the annotation file.
    #[arg(long)]
    objects: Option<PathBuf>,
    /// Defaults to `predicates.json` beside the annotation file.
    #[arg(long)]
    predicates: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct SplitArgs {
    /// `manifest.json` written by `split`; otherwise the annotations are split here.
    #[arg(long)]
    split: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args, Debug, Clone)]
struct ObjectSource {
    /// Restrict to one image.
    #[arg(long)]
    image_id: Option<String>,
    /// Detections JSON to use instead of the gold objects.
    #[arg(long)]
    detections: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
#[group(id = "visual", multiple = false)]
struct VisualMode {
    /// RFV1 visual feature file.
    #[arg(long)]
    features: Option<PathBuf>,
    /// Deterministic pseudo-random visual features.
    #[arg(long)]
    stub_visual: bool,
    /// Semantic features only (the default).
    #[arg(long)]
    semantic_only: bool,
}

#[derive(Args, Debug, Clone)]
struct FeatureArgs {
    #[arg(long)]
    vectors: PathBuf,
    #[arg(long)]
    semantic_model: PathBuf,
    #[command(flatten)]
    common: FeatureOptions,
}

#[derive(Args, Debug, Clone)]
struct OptFeatureArgs {
    #[arg(long)]
    vectors: Option<PathBuf>,
    #[arg(long)]
    semantic_model: Option<PathBuf>,
    #[command(flatten)]
    common: FeatureOptions,
}

#[derive(Args, Debug, Clone)]
struct FeatureOptions {
    #[command(flatten)]
    mode: VisualMode,
    #[arg(long, value_enum, default_value_t = LayerArg::Logits)]
    layer: LayerArg,
    #[arg(long, default_value_t = 4096)]
    stub_dim: usize,
    /// Seed of the stub visual provider.
    #[arg(long, default_value_t = 0)]
    visual_seed: u64,
    /// Pairs absent from the feature file.
    #[arg(long, value_enum, default_value_t = MissingArg::Error)]
    missing: MissingArg,
    #[arg(long, value_enum, default_value_t = OovArg::Error)]
    oov: OovArg,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ActivationArg {
    Relu,
    Tanh,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum OovArg {
    Error,
    Zero,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum LayerArg {
    Logits,
    Hidden,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MissingArg {
    Error,
    Skip,
    Stub,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum GraphFormat {
    Dot,
    Json,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum MethodArg {
    Jaccard,
    Walk,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ReportFormat {
    Table,
    Json,
}

fn main() -> ExitCode {
    let no_color = std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty());
    let mut logger = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    if no_color {
        logger.write_style(env_logger::WriteStyle::Never);
    }
    logger.format_timestamp(None).init();

    let mut command = Cli::command();
    if no_color {
        command = command.color(ColorChoice::Never);
    }
    let cli = match command.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
