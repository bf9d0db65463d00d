//! The pipeline as a single subcommand binary: preprocess, train,
//! decode, score, analyze. Every subcommand reads an optional TOML
//! config file mirroring the model/train key set; flags win over file
//! values. Each output directory receives a `run.json` with the seed and
//! the full config snapshot for provenance (data-format files stay
//! header-free so their grammars round-trip).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::InstanceInfo;
use crate::conll::{read_props, write_props, AnnotatedSentence};
use crate::decode::{decode_corpus, to_conll, DecodeResult, StepMode};
use crate::error::{Error, Result};
use crate::linearize::{apply_unk, instances_from_corpus, Instance, Origin, RepairCounts};
use crate::model::{Model, ModelConfig};
use crate::train::{encode_instances, train, teacher_forced_accuracy, TrainConfig};
use crate::vocab::{init_embeddings, GloveFile, Vocabulary};

#[derive(Parser, Debug)]
#[command(name = "seq2srl", version, about = "Sequence-to-sequence semantic role labeling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Convert a props corpus into linearized source/target files plus
    /// vocabulary, UNK maps, and length accounting.
    Preprocess(PreprocessArgs),
    /// Train a model on a preprocessed directory.
    Train(TrainArgs),
    /// Greedy-decode a preprocessed directory with a checkpoint.
    Decode(DecodeArgs),
    /// Score predicted props against gold props.
    Score(ScoreArgs),
    /// Run the error-analysis suite and emit CSV/SVG reports.
    Analyze(AnalyzeArgs),
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    /// Gold props file.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub output: PathBuf,
    /// Config file (TOML); flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// UNK frequency threshold override.
    #[arg(long)]
    pub threshold: Option<usize>,
    /// GloVe-format embedding file; restricts the vocabulary to covered
    /// words.
    #[arg(long)]
    pub glove: Option<PathBuf>,
    /// Maximum linearized length override (accounting only; training
    /// does the dropping).
    #[arg(long, value_name = "MAX_LEN")]
    pub max_len: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Preprocessed directory (from `preprocess`).
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory for checkpoints and the training report.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run seed override.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Epoch count override.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// GloVe-format embedding file for initialization.
    #[arg(long)]
    pub glove: Option<PathBuf>,
    /// Maximum linearized training length override.
    #[arg(long, value_name = "MAX_LEN")]
    pub max_len: Option<usize>,
    /// Disable the copy mode (the attention-only ablation).
    #[arg(long)]
    pub attention_only: bool,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    /// Preprocessed directory (from `preprocess`).
    #[arg(long)]
    pub input: PathBuf,
    /// Checkpoint to decode with.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Predicted props file.
    #[arg(long)]
    pub input: PathBuf,
    /// Gold props file.
    #[arg(long)]
    pub gold: PathBuf,
    /// Decode sidecar (comparability flags and repair counts).
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Directory for report.json; the table always prints to stdout.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Predicted props file.
    #[arg(long)]
    pub input: PathBuf,
    /// Gold props file.
    #[arg(long)]
    pub gold: PathBuf,
    /// Decode sidecar (comparability flags).
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    /// Output directory for the CSV/SVG reports.
    #[arg(long)]
    pub output: PathBuf,
}

/// TOML config file: `[model]` and `[train]` tables mirroring the two
/// config structs key for key.
#[derive(Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct FileConfig {
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
}

pub fn load_config(path: Option<&Path>) -> Result<(ModelConfig, TrainConfig)> {
    match path {
        None => Ok((ModelConfig::default(), TrainConfig::default())),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let file: FileConfig = toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            Ok((
                file.model.unwrap_or_default(),
                file.train.unwrap_or_default(),
            ))
        }
    }
}

#[derive(serde::Serialize)]
struct RunStamp<'a> {
    command: &'a str,
    seed: u64,
    model: &'a ModelConfig,
    train: &'a TrainConfig,
}

fn write_run_stamp(
    dir: &Path,
    command: &str,
    seed: u64,
    model: &ModelConfig,
    train: &TrainConfig,
) -> Result<()> {
    let stamp = RunStamp {
        command,
        seed,
        model,
        train,
    };
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&stamp)?)
        .map_err(|e| Error::io(&path, e))
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "{what} not found at {}; run the upstream subcommand first or fix the path",
            path.display()
        )));
    }
    Ok(())
}

// ── preprocess ──────────────────────────────────────────────────────

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct InstanceMeta {
    pub origin: Origin,
    pub unk_map: Vec<(usize, String)>,
    pub source_len: usize,
    pub target_len: usize,
}

#[derive(Debug, serde::Serialize)]
pub struct PreprocessSummary {
    pub sentences: usize,
    pub instances: usize,
    pub vocabulary_words: usize,
    pub label_tokens: usize,
    pub instances_with_unk: usize,
    pub glove_covered: Option<usize>,
    /// Instances longer than max_seq_len, which training will omit.
    pub overlong_sequences: usize,
}

pub fn run_preprocess(args: &PreprocessArgs) -> Result<PreprocessSummary> {
    require_exists(&args.input, "props input")?;
    let (model_cfg, mut train_cfg) = load_config(args.config.as_deref())?;
    if let Some(t) = args.threshold {
        train_cfg.unk_threshold = t;
    }
    if let Some(m) = args.max_len {
        train_cfg.max_seq_len = m;
    }

    let text = std::fs::read_to_string(&args.input).map_err(|e| Error::io(&args.input, e))?;
    let corpus = read_props(&text)?;
    for (i, s) in corpus.iter().enumerate() {
        s.validate_gold()
            .map_err(|e| Error::Contract(format!("sentence {}: {e}", i + 1)))?;
    }
    let raw = instances_from_corpus(&corpus)?;

    let glove = args
        .glove
        .as_deref()
        .map(GloveFile::read)
        .transpose()?;
    let coverage = glove.as_ref().map(|g| g.coverage_set());
    let vocab = Vocabulary::build(&raw, train_cfg.unk_threshold, coverage.as_ref());
    let instances: Vec<Instance> = raw.iter().map(|i| apply_unk(i, &vocab)).collect();

    std::fs::create_dir_all(&args.output).map_err(|e| Error::io(&args.output, e))?;
    let write = |name: &str, content: String| -> Result<()> {
        let path = args.output.join(name);
        std::fs::write(&path, content).map_err(|e| Error::io(&path, e))
    };

    let mut src = String::new();
    let mut tgt = String::new();
    let mut meta = Vec::with_capacity(instances.len());
    for inst in &instances {
        src.push_str(&inst.source.join(" "));
        src.push('\n');
        tgt.push_str(&inst.target.join(" "));
        tgt.push('\n');
        meta.push(InstanceMeta {
            origin: inst.origin,
            unk_map: inst.unk_map.clone(),
            source_len: inst.source.len(),
            target_len: inst.target.len(),
        });
    }
    write("source.txt", src)?;
    write("target.txt", tgt)?;
    write("meta.json", serde_json::to_string_pretty(&meta)?)?;
    write("vocab.json", vocab.to_json()?)?;
    write("gold.props", write_props(&corpus)?)?;
    write_run_stamp(&args.output, "preprocess", train_cfg.seed, &model_cfg, &train_cfg)?;

    let (with_unk, _) = crate::train::unk_statistics(&instances);
    Ok(PreprocessSummary {
        sentences: corpus.len(),
        instances: instances.len(),
        vocabulary_words: vocab.v_size(),
        label_tokens: vocab.l_size(),
        instances_with_unk: with_unk,
        glove_covered: glove.as_ref().map(|g| g.vectors.len()),
        overlong_sequences: instances
            .iter()
            .filter(|i| i.target.len() > train_cfg.max_seq_len)
            .count(),
    })
}

/// Read back what `preprocess` wrote.
pub fn load_preprocessed(dir: &Path) -> Result<(Vec<Instance>, Vocabulary, Vec<AnnotatedSentence>)> {
    for name in ["source.txt", "target.txt", "meta.json", "vocab.json", "gold.props"] {
        require_exists(&dir.join(name), name)?;
    }
    let read = |name: &str| -> Result<String> {
        let p = dir.join(name);
        std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
    };
    let sources = read("source.txt")?;
    let targets = read("target.txt")?;
    let meta: Vec<InstanceMeta> = serde_json::from_str(&read("meta.json")?)?;
    let vocab = Vocabulary::from_json(&read("vocab.json")?)?;
    let corpus = read_props(&read("gold.props")?)?;

    let src_lines: Vec<&str> = sources.lines().collect();
    let tgt_lines: Vec<&str> = targets.lines().collect();
    if src_lines.len() != tgt_lines.len() || src_lines.len() != meta.len() {
        return Err(Error::Contract(format!(
            "preprocessed files disagree: {} sources, {} targets, {} meta entries",
            src_lines.len(),
            tgt_lines.len(),
            meta.len()
        )));
    }
    let instances = src_lines
        .iter()
        .zip(&tgt_lines)
        .zip(&meta)
        .map(|((s, t), m)| Instance {
            source: s.split_whitespace().map(str::to_string).collect(),
            target: t.split_whitespace().map(str::to_string).collect(),
            unk_map: m.unk_map.clone(),
            origin: m.origin,
        })
        .collect();
    Ok((instances, vocab, corpus))
}

// ── train ───────────────────────────────────────────────────────────

pub fn run_train(args: &TrainArgs) -> Result<crate::train::TrainReport> {
    let (mut model_cfg, mut train_cfg) = load_config(args.config.as_deref())?;
    if let Some(s) = args.seed {
        train_cfg.seed = s;
    }
    if let Some(e) = args.epochs {
        train_cfg.epochs = e;
    }
    if let Some(m) = args.max_len {
        train_cfg.max_seq_len = m;
    }
    if args.attention_only {
        model_cfg.use_copy = false;
    }
    model_cfg.validate()?;
    train_cfg.validate()?;

    let (instances, vocab, _) = load_preprocessed(&args.input)?;
    let glove = args.glove.as_deref().map(GloveFile::read).transpose()?;

    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let (table, covered) = init_embeddings(&vocab, model_cfg.embed_dim, glove.as_ref(), &mut rng)?;
    if glove.is_some() {
        println!(
            "embedding coverage: {covered}/{} vocabulary words",
            vocab.v_size()
        );
    }
    let mut model = Model::new(
        model_cfg.clone(),
        vocab.v_size(),
        vocab.l_size(),
        table,
        train_cfg.seed,
    );

    std::fs::create_dir_all(&args.output).map_err(|e| Error::io(&args.output, e))?;
    write_run_stamp(&args.output, "train", train_cfg.seed, &model_cfg, &train_cfg)?;

    let report = train(
        &mut model,
        &instances,
        &vocab,
        &train_cfg,
        Some(&args.output),
        |e| println!("epoch {:>3}  loss {:.6}  {:.1}s", e.epoch, e.mean_loss, e.seconds),
    )?;
    if report.dropped_sequences > 0 {
        println!(
            "omitted {} / {} sequences over {} tokens",
            report.dropped_sequences,
            instances.len(),
            train_cfg.max_seq_len
        );
    }

    // Timing stays on stdout; the JSON report is bit-reproducible.
    #[derive(serde::Serialize)]
    struct PersistedReport<'a> {
        mean_loss_per_epoch: Vec<f64>,
        dropped_sequences: usize,
        trained_instances: usize,
        seed: u64,
        model: &'a ModelConfig,
        train: &'a TrainConfig,
    }
    let persisted = PersistedReport {
        mean_loss_per_epoch: report.epochs.iter().map(|e| e.mean_loss).collect(),
        dropped_sequences: report.dropped_sequences,
        trained_instances: report.trained_instances,
        seed: train_cfg.seed,
        model: &model_cfg,
        train: &train_cfg,
    };
    let path = args.output.join("train_report.json");
    std::fs::write(&path, serde_json::to_string_pretty(&persisted)?)
        .map_err(|e| Error::io(&path, e))?;
    Ok(report)
}

// ── decode ──────────────────────────────────────────────────────────

#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct SidecarEntry {
    pub origin: Origin,
    pub comparable: bool,
    pub repairs: RepairCounts,
    pub truncated: bool,
    pub modes: Vec<StepMode>,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
pub struct Sidecar {
    pub entries: Vec<SidecarEntry>,
}

pub fn run_decode(args: &DecodeArgs) -> Result<Vec<DecodeResult>> {
    require_exists(&args.checkpoint, "checkpoint")?;
    let (instances, vocab, corpus) = load_preprocessed(&args.input)?;
    let loaded = crate::checkpoint::load(&args.checkpoint, Some(&vocab.hash_hex()))?;
    let model = loaded.model;

    let results = decode_corpus(&model, &vocab, &instances);

    std::fs::create_dir_all(&args.output).map_err(|e| Error::io(&args.output, e))?;
    let mut decoded = String::new();
    for r in &results {
        decoded.push_str(&r.recovered.join(" "));
        decoded.push('\n');
    }
    let path = args.output.join("decoded.txt");
    std::fs::write(&path, decoded).map_err(|e| Error::io(&path, e))?;

    let sidecar = Sidecar {
        entries: results
            .iter()
            .map(|r| SidecarEntry {
                origin: r.origin,
                comparable: r.comparable,
                repairs: r.repairs,
                truncated: r.truncated,
                modes: r.modes.clone(),
            })
            .collect(),
    };
    let path = args.output.join("sidecar.json");
    std::fs::write(&path, serde_json::to_string_pretty(&sidecar)?)
        .map_err(|e| Error::io(&path, e))?;

    let predicted = to_conll(&corpus, &results)?;
    let path = args.output.join("predicted.props");
    std::fs::write(&path, write_props(&predicted)?).map_err(|e| Error::io(&path, e))?;

    let (train_cfg, model_cfg) = (TrainConfig::default(), model.config.clone());
    write_run_stamp(
        &args.output,
        "decode",
        args.seed.unwrap_or(train_cfg.seed),
        &model_cfg,
        &train_cfg,
    )?;
    Ok(results)
}

// ── score ───────────────────────────────────────────────────────────

fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn run_score(args: &ScoreArgs) -> Result<crate::score::ScoreReport> {
    require_exists(&args.input, "predicted props")?;
    require_exists(&args.gold, "gold props")?;
    let predicted = read_props(
        &std::fs::read_to_string(&args.input).map_err(|e| Error::io(&args.input, e))?,
    )?;
    let gold = read_props(
        &std::fs::read_to_string(&args.gold).map_err(|e| Error::io(&args.gold, e))?,
    )?;

    let report = match &args.sidecar {
        Some(p) => {
            let sidecar = read_sidecar(p)?;
            let flags: Vec<bool> = sidecar.entries.iter().map(|e| e.comparable).collect();
            let repairs: Vec<RepairCounts> = sidecar.entries.iter().map(|e| e.repairs).collect();
            crate::score::score_with_flags(&predicted, &gold, Some(&flags), Some(&repairs))?
        }
        None => crate::score::score(&predicted, &gold)?,
    };
    print!("{}", report.table());

    if let Some(dir) = &args.output {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("report.json");
        std::fs::write(&path, serde_json::to_string_pretty(&report)?)
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(report)
}

// ── analyze ─────────────────────────────────────────────────────────

/// Instance records for the curves, from the gold corpus (lengths,
/// predicate positions) plus sidecar comparability.
pub fn instance_infos(gold: &[AnnotatedSentence], sidecar: Option<&Sidecar>) -> Result<Vec<InstanceInfo>> {
    let mut infos = Vec::new();
    let mut idx = 0usize;
    for s in gold {
        for (pi, p) in s.predicates.iter().enumerate() {
            let inst = crate::linearize::linearize(s, pi)?;
            let comparable = match sidecar {
                Some(sc) => {
                    let e = sc.entries.get(idx).ok_or_else(|| {
                        Error::Contract("sidecar shorter than corpus".into())
                    })?;
                    e.comparable
                }
                None => true,
            };
            infos.push(InstanceInfo {
                linearized_len: inst.target.len(),
                sentence_len: s.tokens.len(),
                predicate_index: p.predicate_index,
                comparable,
            });
            idx += 1;
        }
    }
    Ok(infos)
}

pub fn run_analyze(args: &AnalyzeArgs) -> Result<crate::analysis::AnalysisReport> {
    require_exists(&args.input, "predicted props")?;
    require_exists(&args.gold, "gold props")?;
    let predicted = read_props(
        &std::fs::read_to_string(&args.input).map_err(|e| Error::io(&args.input, e))?,
    )?;
    let gold = read_props(
        &std::fs::read_to_string(&args.gold).map_err(|e| Error::io(&args.gold, e))?,
    )?;
    let sidecar = args.sidecar.as_deref().map(read_sidecar).transpose()?;
    let infos = instance_infos(&gold, sidecar.as_ref())?;
    let report = crate::analysis::analyze(&predicted, &gold, &infos)?;
    let written = crate::analysis::write_outputs(&report, &args.output)?;
    println!(
        "wrote {} files to {}",
        written.len(),
        args.output.display()
    );
    Ok(report)
}

/// Convenience used by tests and examples: teacher-forced accuracy of a
/// model over preprocessed instances.
pub fn accuracy_of(model: &Model, vocab: &Vocabulary, instances: &[Instance]) -> f64 {
    let encoded = encode_instances(instances, vocab);
    teacher_forced_accuracy(model, &encoded, vocab)
}

/// Entry point for the binary.
pub fn main() -> std::process::ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Preprocess(a) => run_preprocess(a).map(|s| {
            println!(
                "{} sentences -> {} instances; |V| = {}, |L| = {}; {} with UNK; {} overlong",
                s.sentences,
                s.instances,
                s.vocabulary_words,
                s.label_tokens,
                s.instances_with_unk,
                s.overlong_sequences
            );
        }),
        Command::Train(a) => run_train(a).map(|_| ()),
        Command::Decode(a) => run_decode(a).map(|results| {
            let (same, balanced) = crate::score::reproduction_stats(&results);
            println!(
                "decoded {} instances; same length {:.2}%, balanced brackets {:.2}%",
                results.len(),
                same,
                balanced
            );
        }),
        Command::Score(a) => run_score(a).map(|_| ()),
        Command::Analyze(a) => run_analyze(a).map(|_| ()),
    };
    match outcome {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}
