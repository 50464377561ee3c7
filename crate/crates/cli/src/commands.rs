use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use dmn_core::dataset::{generate_dataset, read_jsonl, write_jsonl, Dataset, Example, Record, Split};
use dmn_core::executor::symbolic_execute;
use dmn_core::layout::{format_tokens, kinds_of, parse_tokens, validate};
use dmn_core::model::{LayoutChoice, Model, Trace};
use dmn_core::questions::tokenize;
use dmn_core::scene::SceneGraph;
use dmn_core::trainer::{self, check_vocabulary, Ablation, EvalReport, EpochReport, Tally};
use dmn_core::Answer;
use serde::Serialize;

use crate::config::RunConfig;
use crate::manifest::{sha256_hex, Manifest};
use crate::Common;

#[derive(Debug)]
pub struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        self.code
    }

    fn usage(message: impl Into<String>) -> CliError {
        CliError {
            code: 1,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<dmn_core::Error> for CliError {
    fn from(e: dmn_core::Error) -> CliError {
        use dmn_autodiff::TensorError as T;
        use dmn_core::Error as E;
        let code = match e {
            E::Tensor(T::Checkpoint(_) | T::Io(_) | T::UnknownParam(_)) => 1,
            E::Invariant(_) | E::Module { .. } | E::Tensor(_) => 2,
            _ => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

/// Attaches the offending path to an IO error.
fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::usage(format!("{}: {e}", path.display()))
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> CliError {
        CliError::usage(format!("csv: {e}"))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> CliError {
        CliError::usage(format!("json: {e}"))
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        None => Ok(RunConfig::default()),
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_at(path))?;
            RunConfig::parse_text(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_at(dir))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_at(path))
}

fn split_file(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{split}.jsonl"))
}

fn display(paths: &[PathBuf]) -> Vec<String> {
    paths.iter().map(|p| p.display().to_string()).collect()
}

pub fn gen_data(common: &Common, out: &Path) -> Result<()> {
    let mut config = load_config(common)?;
    if let Some(seed) = common.seed {
        config.data_seed = seed;
    }
    let ds = generate_dataset(&config.dataset, config.data_seed)?;
    create_dir(out)?;
    let mut files = Vec::new();
    let mut contents = Vec::new();
    for split in Split::ALL {
        let mut buf = Vec::new();
        write_jsonl(&mut buf, ds.split(split))?;
        let path = split_file(out, split);
        write_file(&path, &buf)?;
        files.push(path);
        contents.push(buf);
    }
    let mut m = Manifest::new("gen-data");
    m.seed = Some(config.data_seed);
    m.config = config.entries();
    m.dataset_sha256 = Some(sha256_hex(&contents.iter().map(Vec::as_slice).collect::<Vec<_>>()));
    m.outputs = display(&files);
    m.write(out).map_err(io_at(out))?;
    println!(
        "wrote {} train, {} val, {} test questions to {}",
        ds.train.len(),
        ds.val.len(),
        ds.test.len(),
        out.display()
    );
    Ok(())
}

/// Reads all three split files and hashes their bytes.
fn read_dataset(dir: &Path) -> Result<(Dataset, String)> {
    let mut contents = Vec::new();
    let mut records: Vec<Record> = Vec::new();
    for split in Split::ALL {
        let path = split_file(dir, split);
        let bytes = fs::read(&path).map_err(io_at(&path))?;
        let recs = read_jsonl(bytes.as_slice()).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        if let Some(r) = recs.iter().find(|r| r.split != split) {
            return Err(CliError::usage(format!(
                "{}: record for scene {} is tagged {}",
                path.display(),
                r.scene_id,
                r.split
            )));
        }
        records.extend(recs);
        contents.push(bytes);
    }
    let hash = sha256_hex(&contents.iter().map(Vec::as_slice).collect::<Vec<_>>());
    Ok((Dataset::from_records(records)?, hash))
}

#[derive(Serialize)]
struct EpochRow<'a> {
    epoch: usize,
    phase: &'a str,
    train_loss: f64,
    val_accuracy: f64,
    val_exist: Option<f64>,
    val_count: Option<f64>,
    val_yes_no: Option<f64>,
    val_compare: Option<f64>,
    val_layout_exact_match: f64,
}

impl<'a> From<&'a EpochReport> for EpochRow<'a> {
    fn from(e: &'a EpochReport) -> Self {
        EpochRow {
            epoch: e.epoch,
            phase: &e.phase,
            train_loss: e.train_loss,
            val_accuracy: e.val_accuracy,
            val_exist: e.val_exist,
            val_count: e.val_count,
            val_yes_no: e.val_yes_no,
            val_compare: e.val_compare,
            val_layout_exact_match: e.val_layout_exact_match,
        }
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    ablation: Ablation,
    best_epoch: usize,
    best_val_accuracy: f64,
    discarded_rollouts: usize,
    epochs: Vec<EpochRow<'a>>,
}

pub fn train(common: &Common, data: &Path, out: &Path, ablation: Option<Ablation>) -> Result<()> {
    let mut config = load_config(common)?;
    if let Some(seed) = common.seed {
        config.train.seed = seed;
    }
    if let Some(a) = ablation {
        config.train.ablation = a;
    }
    config.train.validate()?;
    let (ds, hash) = read_dataset(data)?;
    if let Some(first) = ds.train.first() {
        config.model.grid_size = first.record.scene.grid_size;
        config.dataset.scene.grid_size = first.record.scene.grid_size;
    }
    create_dir(out)?;
    let ablation = config.train.ablation;
    let outcome = trainer::train(&config.train, &config.model, &ds, |e| {
        eprintln!(
            "epoch {:>3} {:<9} loss {:.4}  val acc {:.3}  layout match {:.3}  ({:.1}s)",
            e.epoch, e.phase, e.train_loss, e.val_accuracy, e.val_layout_exact_match, e.seconds
        );
    })?;
    let report = &outcome.report;

    let ckpt = out.join(format!("model_{ablation}.ckpt"));
    outcome.model.save(&ckpt)?;
    let csv_path = out.join(format!("report_{ablation}.csv"));
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::usage(format!("{}: {e}", csv_path.display())))?;
    for e in &report.epochs {
        w.serialize(EpochRow::from(e))?;
    }
    w.flush().map_err(io_at(&csv_path))?;
    let summary_path = out.join(format!("summary_{ablation}.json"));
    let summary = TrainSummary {
        ablation,
        best_epoch: report.best_epoch,
        best_val_accuracy: report.best_val_accuracy,
        discarded_rollouts: report.discarded_rollouts,
        epochs: report.epochs.iter().map(EpochRow::from).collect(),
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    write_file(&summary_path, text.as_bytes())?;

    let mut m = Manifest::new("train");
    m.seed = Some(config.train.seed);
    m.config = config.entries();
    m.dataset_sha256 = Some(hash);
    m.inputs = display(&Split::ALL.map(|s| split_file(data, s)));
    m.outputs = display(&[ckpt.clone(), csv_path, summary_path]);
    m.write(out).map_err(io_at(out))?;
    println!(
        "{ablation}: best val accuracy {:.3} at epoch {}; checkpoint {}",
        report.best_val_accuracy,
        report.best_epoch,
        ckpt.display()
    );
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    pub data: PathBuf,
    pub split: Split,
    pub out: PathBuf,
    pub beam: usize,
    pub expert_layouts: bool,
    pub trace: bool,
    pub threads: Option<usize>,
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    index: usize,
    scene_id: u64,
    expected: Answer,
    correct: bool,
    expert_layout: String,
    #[serde(flatten)]
    trace: &'a Trace,
}

/// Scores `examples` and returns traces in input order.
fn score_shard(model: &Model, examples: &[Example], choice_beam: Option<usize>) -> Result<(EvalReport, Vec<Trace>)> {
    let mut report = EvalReport::default();
    let mut traces = Vec::with_capacity(examples.len());
    for ex in examples {
        let expert = kinds_of(&ex.layout);
        let choice = match choice_beam {
            Some(b) => LayoutChoice::Beam(b),
            None => LayoutChoice::Given(&expert),
        };
        let trace = model.infer(&ex.record.scene, ex.question(), choice)?;
        let layout_match = trace.layout.iter().map(String::as_str).eq(expert.iter().map(|k| k.name()));
        report.record(ex.category(), trace.answer, ex.answer(), layout_match);
        traces.push(trace);
    }
    Ok((report, traces))
}

fn rate(t: &Tally) -> String {
    t.accuracy().map(|a| format!("{a:.4}")).unwrap_or_default()
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    if args.beam == 0 {
        return Err(CliError::usage("--beam must be at least 1"));
    }
    let model = Model::load(&args.checkpoint)?;
    let (ds, hash) = read_dataset(&args.data)?;
    let examples = ds.split(args.split);
    check_vocabulary(&model.vocab, examples)?;
    let beam = (!args.expert_layouts).then_some(args.beam);
    let threads = args
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let shard = examples.len().div_ceil(threads).max(1);
    let shards: Vec<Result<(EvalReport, Vec<Trace>)>> = std::thread::scope(|s| {
        let handles: Vec<_> = examples
            .chunks(shard)
            .map(|chunk| s.spawn(|| score_shard(&model, chunk, beam)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation worker panicked"))
            .collect()
    });
    let mut report = EvalReport::default();
    let mut traces = Vec::with_capacity(examples.len());
    for r in shards {
        let (part, t) = r?;
        report.merge(&part);
        traces.extend(t);
    }

    create_dir(&args.out)?;
    let layouts = match beam {
        None => "expert".to_string(),
        Some(b) => format!("beam{b}"),
    };
    let csv_path = args.out.join(format!("eval_{}.csv", args.split));
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::usage(format!("{}: {e}", csv_path.display())))?;
    w.write_record([
        "split",
        "layouts",
        "questions",
        "overall",
        "exist",
        "count",
        "yes_no",
        "compare",
        "layout_exact_match",
    ])?;
    w.write_record([
        args.split.to_string(),
        layouts.clone(),
        report.overall.total.to_string(),
        rate(&report.overall),
        rate(&report.exist),
        rate(&report.count),
        rate(&report.yes_no),
        rate(&report.compare),
        rate(&report.layout_exact),
    ])?;
    w.flush().map_err(io_at(&csv_path))?;
    let mut outputs = vec![csv_path];

    if args.trace {
        let path = args.out.join("traces.jsonl");
        let mut buf = Vec::new();
        for (i, (ex, t)) in examples.iter().zip(&traces).enumerate() {
            let rec = TraceRecord {
                index: i,
                scene_id: ex.record.scene_id,
                expected: ex.answer(),
                correct: t.answer == ex.answer(),
                expert_layout: ex.record.layout.clone(),
                trace: t,
            };
            serde_json::to_writer(&mut buf, &rec)?;
            buf.push(b'\n');
        }
        write_file(&path, &buf)?;
        outputs.push(path);
    }

    let mut m = Manifest::new("eval");
    m.config.insert("split".into(), args.split.to_string());
    m.config.insert("layouts".into(), layouts.clone());
    m.dataset_sha256 = Some(hash);
    m.inputs = display(&[args.checkpoint.clone(), split_file(&args.data, args.split)]);
    m.outputs = display(&outputs);
    m.write(&args.out).map_err(io_at(&args.out))?;

    println!("split {} ({layouts}), {} questions", args.split, report.overall.total);
    for (name, t) in [
        ("overall", &report.overall),
        ("exist", &report.exist),
        ("count", &report.count),
        ("yes_no", &report.yes_no),
        ("compare", &report.compare),
        ("layout_exact_match", &report.layout_exact),
    ] {
        println!("  {name:<20} {:>8}  ({}/{})", rate(t), t.correct, t.total);
    }
    Ok(())
}

/// Reads a dataset record or a bare scene graph.
fn read_scene(path: &Path) -> Result<SceneGraph> {
    let text = fs::read_to_string(path).map_err(io_at(path))?;
    let first_line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    let scene = serde_json::from_str::<Record>(&text)
        .map(|r| r.scene)
        .or_else(|_| serde_json::from_str::<SceneGraph>(&text))
        .or_else(|_| serde_json::from_str::<Record>(first_line).map(|r| r.scene))
        .map_err(|e| CliError::usage(format!("{}: not a dataset record or scene: {e}", path.display())))?;
    scene
        .validate()
        .map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    Ok(scene)
}

pub fn infer(
    checkpoint: &Path,
    scene_path: &Path,
    question: &str,
    beam: usize,
    trace: bool,
    out: Option<&Path>,
) -> Result<()> {
    if beam == 0 {
        return Err(CliError::usage("--beam must be at least 1"));
    }
    let model = Model::load(checkpoint)?;
    let scene = read_scene(scene_path)?;
    let words = tokenize(&question.replace(['?', ',', '.'], " "));
    if words.is_empty() {
        return Err(CliError::usage("empty question"));
    }
    let t = model.infer(&scene, &words, LayoutChoice::Beam(beam))?;
    if !t.unknown_words.is_empty() {
        eprintln!("warning: unknown words read as {}: {}", dmn_core::policy::UNK, t.unknown_words.join(", "));
    }
    println!("layout: {}", t.layout.join(" "));
    println!("answer: {}", t.answer);
    if let Some(dir) = out {
        create_dir(dir)?;
        let path = dir.join("traces.jsonl");
        let mut line = serde_json::to_vec(&t)?;
        line.push(b'\n');
        write_file(&path, &line)?;
        let mut m = Manifest::new("infer");
        m.config.insert("question".into(), question.to_string());
        m.config.insert("beam".into(), beam.to_string());
        m.inputs = display(&[checkpoint.to_path_buf(), scene_path.to_path_buf()]);
        m.outputs = display(&[path]);
        m.write(dir).map_err(io_at(dir))?;
    } else if trace {
        let stdout = std::io::stdout();
        let mut lock = stdout.lock();
        serde_json::to_writer(&mut lock, &t)?;
        writeln!(lock).map_err(|e| CliError::usage(e.to_string()))?;
    }
    Ok(())
}

pub fn layout_validate(text: &str) -> Result<()> {
    let tokens = parse_tokens(text)?;
    let report = validate(&tokens);
    for (i, (tok, depth)) in tokens.iter().zip(&report.depths).enumerate() {
        println!("{:>3}  {:<28} depth {depth}", i + 1, tok.to_string());
    }
    if report.is_valid() {
        println!("valid: {}", format_tokens(&tokens));
        Ok(())
    } else {
        Err(CliError::usage(report.to_string()))
    }
}

pub fn layout_exec(text: &str, scene_path: &Path) -> Result<()> {
    let tokens = parse_tokens(text)?;
    let scene = read_scene(scene_path)?;
    println!("{}", symbolic_execute(&tokens, &scene)?);
    Ok(())
}
