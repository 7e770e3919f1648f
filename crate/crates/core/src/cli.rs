//! The `arbo` command-line front end.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::embeddings::{build_vocab, load_glove, EmbeddingMatrix};
use crate::error::{Error, Result};
use crate::model::{
    checkpoint_precision, count_parameters, infer, init_params, read_checkpoint, save_checkpoint, AttentionNorm,
    Checkpoint, FlatTree, ModelConfig, Variant,
};
use crate::scalar::{Precision, Scalar};
use crate::synth::{random_tree, word_list};
use crate::training::{evaluate, flatten, gradient_check, train, TrainConfig, GRADCHECK_TOLERANCE};
use crate::treebank::{load_split, parse_tree, Corpus, Split, Task};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const CHECKPOINT_FILE: &str = "checkpoint.arbo";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOG_FILE: &str = "train.log";

/// Reference configuration and totals of the published parameter table.
pub const REFERENCE_DIM: usize = 300;
pub const REFERENCE_VOCAB: usize = 21_702;
pub const REFERENCE_CLASSES: usize = 5;
pub const REFERENCE_TOTALS: [(Variant, bool, usize); 4] = [
    (Variant::TreeGru, false, 7_323_005),
    (Variant::TreeGru, true, 7_413_605),
    (Variant::TreeBiGru, false, 8_135_405),
    (Variant::TreeBiGru, true, 8_317_810),
];

#[derive(Debug, Parser)]
#[command(name = "arbo", version, about = "Tree-structured GRU sentiment classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, manifest and log to --out.
    Train(TrainArgs),
    /// Report root and node accuracy of a checkpoint on a treebank file.
    Eval(EvalArgs),
    /// Predict the root label of every tree in a file.
    Predict(PredictArgs),
    /// Compare analytic gradients with finite differences.
    Gradcheck(GradcheckArgs),
    /// Print the itemized parameter count.
    Params(ParamsArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Treegru,
    Treebigru,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Treegru => Variant::TreeGru,
            VariantArg::Treebigru => Variant::TreeBiGru,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    Softmax,
    Linear,
}

impl From<NormArg> for AttentionNorm {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::Softmax => AttentionNorm::Softmax,
            NormArg::Linear => AttentionNorm::Linear,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Fine,
    Binary,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Fine => Task::Fine,
            TaskArg::Binary => Task::Binary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PrecisionArg {
    F32,
    F64,
}

impl From<PrecisionArg> for Precision {
    fn from(p: PrecisionArg) -> Self {
        match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory containing train.txt, dev.txt and optionally test.txt.
    #[arg(long)]
    pub data: PathBuf,
    /// GloVe text file; random embeddings are used when omitted.
    #[arg(long)]
    pub glove: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "treebigru")]
    pub variant: VariantArg,
    /// Pool all node states with structural attention.
    #[arg(long)]
    pub attention: bool,
    #[arg(long, value_enum, default_value = "softmax")]
    pub attention_norm: NormArg,
    #[arg(long, value_enum, default_value = "fine")]
    pub task: TaskArg,
    /// Hidden and embedding width.
    #[arg(long, default_value_t = 300, value_parser = clap::value_parser!(u64).range(1..))]
    pub dim: u64,
    /// AdaGrad learning rate.
    #[arg(long, default_value_t = 0.01)]
    pub lr: f64,
    /// Sentences per minibatch.
    #[arg(long, default_value_t = 25, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch: u64,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    /// L2 strength.
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    /// Dropout rate on leaf inputs and classifier inputs.
    #[arg(long, default_value_t = 0.5)]
    pub dropout: f64,
    /// Development evaluations per epoch.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(1..))]
    pub evals_per_epoch: u64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: PrecisionArg,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Treebank file to evaluate on.
    #[arg(long)]
    pub input: PathBuf,
    /// Expected task; must match the checkpoint when given.
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Treebank-format lines; labels may be dummies.
    #[arg(long)]
    pub input: PathBuf,
    /// Print the attention weight of every node.
    #[arg(long)]
    pub show_attention: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Variant to check; every variant with and without attention when omitted.
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long)]
    pub attention: bool,
    #[arg(long, value_enum, default_value = "softmax")]
    pub attention_norm: NormArg,
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(1..))]
    pub dim: u64,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(2..))]
    pub classes: u64,
    /// Number of random trees per variant.
    #[arg(long, default_value_t = 5)]
    pub trees: usize,
    /// Maximum nodes per random tree.
    #[arg(long, default_value_t = 9, value_parser = clap::value_parser!(u64).range(1..))]
    pub max_nodes: u64,
    /// L2 strength included in the objective.
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Variant to audit; all four configurations when omitted.
    #[arg(long, value_enum)]
    pub variant: Option<VariantArg>,
    #[arg(long)]
    pub attention: bool,
    #[arg(long, default_value_t = REFERENCE_DIM as u64, value_parser = clap::value_parser!(u64).range(1..))]
    pub dim: u64,
    /// Vocabulary size including the unknown-word row.
    #[arg(long, default_value_t = REFERENCE_VOCAB as u64, value_parser = clap::value_parser!(u64).range(1..))]
    pub vocab: u64,
    #[arg(long, default_value_t = REFERENCE_CLASSES as u64, value_parser = clap::value_parser!(u64).range(2..))]
    pub classes: u64,
    /// Maximum children per node.
    #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u64).range(1..))]
    pub arity: u64,
}

/// Parses `args` and runs the command, returning the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let mut out = io::stdout().lock();
    let result = match cli.command {
        Command::Train(a) => run_train(&a, &mut out),
        Command::Eval(a) => run_eval(&a, &mut out),
        Command::Predict(a) => run_predict(&a, &mut out),
        Command::Gradcheck(a) => run_gradcheck(&a, &mut out),
        Command::Params(a) => run_params(&a, &mut out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } => EXIT_FAILURE,
        _ => EXIT_USAGE,
    }
}

fn write_err(e: io::Error) -> Error {
    Error::io(Path::new("<stdout>"), e)
}

fn set_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(Error::Config("--threads must be at least 1".into()));
        }
        // A pool may already exist when run() is called twice in one process.
        if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
            log::debug!("global thread pool already initialized");
        }
    }
    Ok(())
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::io(
            path,
            io::Error::new(io::ErrorKind::NotFound, "file not found"),
        ))
    }
}

pub fn run_train(args: &TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let config = TrainConfig {
        variant: args.variant.into(),
        attention: args.attention,
        attention_norm: args.attention_norm.into(),
        task: args.task.into(),
        dim: args.dim as usize,
        lr: args.lr,
        batch: args.batch as usize,
        l2: args.l2,
        dropout: args.dropout,
        epochs: args.epochs,
        evals_per_epoch: args.evals_per_epoch as usize,
        seed: args.seed,
        threads: args.threads,
        precision: args.precision.into(),
        data: Some(args.data.clone()),
        glove: args.glove.clone(),
        out: Some(args.out.clone()),
    };
    config.validate()?;
    require_file(&args.data.join(Split::Train.file_name()))?;
    require_file(&args.data.join(Split::Dev.file_name()))?;
    if let Some(g) = &args.glove {
        require_file(g)?;
    }
    set_threads(args.threads)?;
    match config.precision {
        Precision::F32 => train_typed::<f32>(&config, out),
        Precision::F64 => train_typed::<f64>(&config, out),
    }
}

fn train_typed<T: Scalar>(config: &TrainConfig, out: &mut dyn Write) -> Result<i32> {
    let data = config.data.as_deref().expect("data path");
    let dir = config.out.as_deref().expect("output path");
    let train_set = load_split(data, Split::Train, config.task)?;
    let dev_set = load_split(data, Split::Dev, config.task)?;
    let test_path = data.join(Split::Test.file_name());
    let test_set = if test_path.is_file() {
        Some(load_split(data, Split::Test, config.task)?)
    } else {
        None
    };
    for c in [&train_set, &dev_set] {
        if c.is_empty() {
            return Err(Error::Corpus(format!("{} split is empty", c.split_name)));
        }
    }

    let all = Corpus::new(
        train_set
            .trees
            .iter()
            .chain(&dev_set.trees)
            .chain(test_set.iter().flat_map(|c| &c.trees))
            .cloned()
            .collect(),
        "all",
        config.task,
    );
    let vocab = build_vocab(&all)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let embeddings: EmbeddingMatrix<T> = match &config.glove {
        Some(path) => load_glove(path, &vocab, config.dim, &mut rng)?,
        None => {
            log::warn!("no --glove given; embeddings are randomly initialized");
            EmbeddingMatrix::random(vocab.len(), config.dim, &mut rng)
        }
    };
    let coverage = embeddings.coverage();
    log::info!(
        "train/dev/test = {}/{}/{} sentences, vocabulary {}, coverage {coverage:.4}",
        train_set.len(),
        dev_set.len(),
        test_set.as_ref().map_or(0, |c| c.len()),
        vocab.len()
    );

    let model = ModelConfig {
        attention_norm: config.attention_norm,
        ..ModelConfig::new(
            config.variant,
            config.attention,
            config.dim,
            vocab.len(),
            config.task.class_count(),
        )
    };
    let params = init_params(model, Some(&embeddings), &mut rng)?;
    let train_trees = flatten(&train_set, &vocab);
    let dev_trees = flatten(&dev_set, &vocab);

    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let log_path = dir.join(LOG_FILE);
    let mut log_file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    writeln!(log_file, "epoch\tstep\ttrain_loss\tdev_root_acc\twall_seconds").map_err(|e| Error::io(&log_path, e))?;
    let mut log_error = None;
    let outcome = train(config, &train_trees, &dev_trees, params, &mut |entry| {
        log::info!("{entry}");
        if let Err(e) = writeln!(log_file, "{entry}") {
            log_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = log_error {
        return Err(Error::io(&log_path, e));
    }
    if !outcome.best.is_finite() {
        return Err(Error::NonFinite {
            what: "parameter",
            name: "best checkpoint".into(),
        });
    }

    let dev = evaluate(&outcome.best, &dev_trees, config.task)?;
    let test = match &test_set {
        Some(c) => Some(evaluate(&outcome.best, &flatten(c, &vocab), config.task)?),
        None => None,
    };
    let checkpoint = Checkpoint {
        params: outcome.best,
        vocab,
        task: config.task,
    };
    save_checkpoint(dir.join(CHECKPOINT_FILE), &checkpoint)?;

    let manifest = json!({
        "config": config,
        "model": {
            "label": model.label(),
            "vocab_size": model.vocab_size,
            "classes": model.classes,
            "arity": model.arity,
            "parameters": count_parameters(&model).total(),
        },
        "data": {
            "train": train_set.len(),
            "dev": dev_set.len(),
            "test": test_set.as_ref().map(|c| c.len()),
            "embedding_coverage": coverage,
        },
        "regularization": "L2 per minibatch over weights and the embedding rows used in the batch; biases excluded",
        "selection": "parameters with the best development root accuracy",
        "best_dev_root_accuracy": outcome.best_dev,
        "dev": dev,
        "test": test,
    });
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text + "\n").map_err(|e| Error::io(&manifest_path, e))?;

    writeln!(out, "embedding coverage {coverage:.4}").map_err(write_err)?;
    writeln!(out, "best dev root accuracy {:.4}", outcome.best_dev).map_err(write_err)?;
    if let Some(t) = test {
        writeln!(out, "test root accuracy {:.4}", t.root_accuracy).map_err(write_err)?;
        writeln!(out, "test node accuracy {:.4}", t.node_accuracy).map_err(write_err)?;
    }
    Ok(EXIT_OK)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn run_eval(args: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    require_file(&args.checkpoint)?;
    require_file(&args.input)?;
    set_threads(args.threads)?;
    let bytes = read_bytes(&args.checkpoint)?;
    match checkpoint_precision(&bytes)? {
        Precision::F32 => eval_typed(&read_checkpoint::<f32>(&bytes)?, args, out),
        Precision::F64 => eval_typed(&read_checkpoint::<f64>(&bytes)?, args, out),
    }
}

fn eval_typed<T: Scalar>(ckpt: &Checkpoint<T>, args: &EvalArgs, out: &mut dyn Write) -> Result<i32> {
    if let Some(task) = args.task.map(Task::from) {
        if task != ckpt.task {
            return Err(Error::Config(format!(
                "checkpoint was trained for the {} task ({} classes), not {task} ({} classes)",
                ckpt.task,
                ckpt.params.config.classes,
                task.class_count()
            )));
        }
    }
    let corpus = crate::treebank::load_corpus(&args.input, ckpt.task)?;
    let m = evaluate(&ckpt.params, &flatten(&corpus, &ckpt.vocab), ckpt.task)?;
    writeln!(out, "sentences {}", corpus.len()).map_err(write_err)?;
    writeln!(out, "root_accuracy {:.4}", m.root_accuracy).map_err(write_err)?;
    writeln!(out, "node_accuracy {:.4}", m.node_accuracy).map_err(write_err)?;
    Ok(EXIT_OK)
}

pub fn run_predict(args: &PredictArgs, out: &mut dyn Write) -> Result<i32> {
    require_file(&args.checkpoint)?;
    require_file(&args.input)?;
    let bytes = read_bytes(&args.checkpoint)?;
    match checkpoint_precision(&bytes)? {
        Precision::F32 => predict_typed(&read_checkpoint::<f32>(&bytes)?, args, out),
        Precision::F64 => predict_typed(&read_checkpoint::<f64>(&bytes)?, args, out),
    }
}

fn predict_typed<T: Scalar>(ckpt: &Checkpoint<T>, args: &PredictArgs, out: &mut dyn Write) -> Result<i32> {
    if args.show_attention && !ckpt.params.config.attention {
        return Err(Error::Config(format!(
            "--show-attention needs an attention model; this checkpoint is {}",
            ckpt.params.config.label()
        )));
    }
    let text = fs::read_to_string(&args.input).map_err(|e| Error::io(&args.input, e))?;
    let mut failed = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let tree = match parse_tree(line) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("line {}: {e}", i + 1);
                failed += 1;
                continue;
            }
        };
        let result = infer(&ckpt.params, &FlatTree::new(&tree, &ckpt.vocab))?;
        let dist: Vec<String> = result
            .root_distribution()
            .iter()
            .map(|p| format!("{:.4}", p.as_f64()))
            .collect();
        writeln!(
            out,
            "line {}\tclass {}\t[{}]",
            i + 1,
            result.root_label(),
            dist.join(", ")
        )
        .map_err(write_err)?;
        if args.show_attention {
            let weights = result.attention.as_ref().map(|a| a.weights.as_slice()).unwrap_or(&[]);
            let shown: Vec<String> = weights.iter().map(|w| format!("{:.4}", w.as_f64())).collect();
            let sum: f64 = weights.iter().map(|w| w.as_f64()).sum();
            writeln!(out, "  attention [{}] sum {sum:.4}", shown.join(", ")).map_err(write_err)?;
        }
    }
    if failed > 0 {
        eprintln!("{failed} line(s) could not be parsed");
        Ok(EXIT_FAILURE)
    } else {
        Ok(EXIT_OK)
    }
}

fn all_configurations(variant: Option<VariantArg>, attention: bool) -> Vec<(Variant, bool)> {
    match variant {
        Some(v) => vec![(v.into(), attention)],
        None => vec![
            (Variant::TreeGru, false),
            (Variant::TreeGru, true),
            (Variant::TreeBiGru, false),
            (Variant::TreeBiGru, true),
        ],
    }
}

pub fn run_gradcheck(args: &GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    if !(args.l2 >= 0.0 && args.l2.is_finite()) {
        return Err(Error::Config("--l2 must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let words = word_list(6);
    let trees: Vec<_> = (0..args.trees.max(1))
        .map(|_| random_tree(&mut rng, &words, args.max_nodes as usize, 0.2))
        .map(|t| relabel(t, args.classes as u8))
        .collect();
    let mut code = EXIT_OK;
    for (variant, attention) in all_configurations(args.variant, args.attention) {
        let config = ModelConfig {
            attention_norm: args.attention_norm.into(),
            ..ModelConfig::new(variant, attention, args.dim as usize, 1, args.classes as usize)
        };
        let mut worst = None;
        for (i, tree) in trees.iter().enumerate() {
            let report = gradient_check(config, tree, args.seed.wrapping_add(i as u64), args.l2)?;
            if worst
                .as_ref()
                .is_none_or(|w: &crate::training::GradCheckReport| report.max_rel_err > w.max_rel_err)
            {
                worst = Some(report);
            }
        }
        let w = worst.expect("at least one tree");
        let verdict = if w.max_rel_err < GRADCHECK_TOLERANCE {
            "PASS"
        } else {
            "FAIL"
        };
        if verdict == "FAIL" || !w.max_rel_err.is_finite() {
            code = EXIT_FAILURE;
        }
        writeln!(
            out,
            "{:<20} {verdict} max_rel_err={:.3e} worst={}[{}] analytic={:.6e} numeric={:.6e}",
            config.label(),
            w.max_rel_err,
            w.worst.0,
            w.worst.1,
            w.analytic,
            w.numeric
        )
        .map_err(write_err)?;
    }
    Ok(code)
}

/// Folds fine-grained labels into `classes` so random trees fit the model.
fn relabel(mut tree: crate::treebank::LabeledTree, classes: u8) -> crate::treebank::LabeledTree {
    tree.label %= classes;
    tree.children = tree.children.into_iter().map(|c| relabel(c, classes)).collect();
    tree
}

/// The published total for a configuration, when it matches the reference setup.
pub fn reference_total(config: &ModelConfig) -> Option<usize> {
    if (config.dim, config.vocab_size, config.classes, config.arity)
        != (REFERENCE_DIM, REFERENCE_VOCAB, REFERENCE_CLASSES, 2)
    {
        return None;
    }
    REFERENCE_TOTALS
        .iter()
        .find(|(v, a, _)| *v == config.variant && *a == config.attention)
        .map(|(_, _, n)| *n)
}

pub fn run_params(args: &ParamsArgs, out: &mut dyn Write) -> Result<i32> {
    let configs = all_configurations(args.variant, args.attention);
    for (i, (variant, attention)) in configs.iter().enumerate() {
        let config = ModelConfig {
            arity: args.arity as usize,
            ..ModelConfig::new(
                *variant,
                *attention,
                args.dim as usize,
                args.vocab as usize,
                args.classes as usize,
            )
        };
        config.validate()?;
        let count = count_parameters(&config);
        if i > 0 {
            writeln!(out).map_err(write_err)?;
        }
        writeln!(out, "# {}", config.label()).map_err(write_err)?;
        writeln!(out, "{count}").map_err(write_err)?;
        if let Some(reference) = reference_total(&config) {
            let total = count.total();
            if total == reference {
                writeln!(out, "matches reference total {reference}").map_err(write_err)?;
            } else {
                let d = config.dim;
                let diff = reference as i64 - total as i64;
                writeln!(
                    out,
                    "reference total {reference} differs from computed {total} by {diff} \
                     ({} = 3d^2 with d={d}, remainder {})",
                    3 * d * d,
                    diff - 3 * (d * d) as i64
                )
                .map_err(write_err)?;
                writeln!(
                    out,
                    "the downward pass as specified (U, W and b per gate over d-dimensional \
                     states) has no tensor of that size; the computed total is reported"
                )
                .map_err(write_err)?;
            }
        }
    }
    Ok(EXIT_OK)
}
