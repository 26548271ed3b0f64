//! `clipcil`: generate synthetic embeddings, run class-incremental experiments,
//! evaluate adapter checkpoints and inspect container files.
//!
//! Exit codes: 0 success, 1 runtime or I/O failure, 2 usage or validation error.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use clipcil::adapters::{self, CHECKPOINT_MAGIC};
use clipcil::embedding::{
    split_tasks, Dataset, EmbeddingSet, Manifest, Split, EMBEDDING_MAGIC,
};
use clipcil::objective::{LogitConfig, TextHead};
use clipcil::scenario::{
    self, evaluate, AdapterClassifier, Method, RunOutcome, ScenarioConfig, CSV_HEADER,
};
use clipcil::synth::{self, SynthConfig};
use rayon::prelude::*;
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "clipcil", version, about = "Class-incremental learning over frozen embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (images.cem, text.cem, manifest.json).
    Gen(GenArgs),
    /// Run an experiment config over one or more seeds.
    Run(RunArgs),
    /// Evaluate an adapter checkpoint on a manifest's test split.
    Eval(EvalArgs),
    /// Print the header of a CEM1 embedding file or CADP checkpoint.
    Inspect {
        path: PathBuf,
    },
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 50)]
    per_class: usize,
    #[arg(long, default_value_t = 0.0)]
    delta: f64,
    #[arg(long, default_value_t = 0.05)]
    sigma: f64,
    /// Give every task its own rotation.
    #[arg(long)]
    per_task_distortion: bool,
    #[arg(long, default_value_t = 5)]
    tasks: usize,
    /// b0 (equal tasks) or b50 (half the classes first).
    #[arg(long, default_value = "b0", value_parser = parse_split)]
    split: Split,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "synth")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated seeds; overrides the config's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Output directory; overrides the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write each seed's final adapter as adapter_seed<N>.cadp.
    #[arg(long)]
    save_adapters: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = clipcil::objective::DEFAULT_LOGIT_SCALE)]
    logit_scale: f64,
    /// Use raw dot products instead of scaled cosine similarity.
    #[arg(long)]
    no_normalize: bool,
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s.to_ascii_lowercase().as_str() {
        "b0" => Ok(Split::B0),
        "b50" => Ok(Split::B50),
        _ => Err(format!("unknown split {s:?}; expected b0 or b50")),
    }
}

/// Experiment file for `run`. Relative paths resolve against the file's directory.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunFile {
    manifest: PathBuf,
    scenario: ScenarioConfig,
    #[serde(default = "default_seeds")]
    seeds: Vec<u64>,
    #[serde(default)]
    output_dir: Option<PathBuf>,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

/// Failure classified by exit code.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type Outcome<T> = Result<T, Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

/// Library errors split by cause: bad inputs from the user versus failures while doing the work.
fn classify(e: clipcil::Error) -> Failure {
    match e {
        clipcil::Error::Config(_) => usage(e),
        _ => runtime(e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Inspect { path } => cmd_inspect(&path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn cmd_gen(a: GenArgs) -> Outcome<()> {
    let cfg = SynthConfig {
        dim: a.dim,
        classes: a.classes,
        per_class: a.per_class,
        sigma: a.sigma,
        delta: a.delta,
        per_task_distortion: a.per_task_distortion,
        num_tasks: a.tasks,
        split: a.split,
        seed: a.seed,
    };
    let data = synth::generate(&cfg).map_err(classify)?;
    data.write_to(&a.out).map_err(runtime)?;
    println!(
        "wrote {} image and {} text embeddings (M={}, K={}) to {}",
        data.images.len(),
        data.text.len(),
        cfg.dim,
        cfg.classes,
        a.out.display()
    );
    for name in ["images.cem", "text.cem", "manifest.json"] {
        println!("  {}", a.out.join(name).display());
    }
    Ok(())
}

fn load_run_file(path: &Path) -> Outcome<RunFile> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(runtime)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let mut file: RunFile = serde_path_to_error::deserialize(de)
        .map_err(|e| usage(anyhow!("{}: at `{}`: {}", path.display(), e.path(), e.inner())))?;
    let base = path.parent().unwrap_or(Path::new(""));
    file.manifest = base.join(&file.manifest);
    file.output_dir = file.output_dir.map(|d| base.join(d));
    file.scenario
        .validate()
        .map_err(|e| usage(anyhow!("{}: scenario: {e}", path.display())))?;
    Ok(file)
}

fn cmd_run(a: RunArgs) -> Outcome<()> {
    let file = load_run_file(&a.config)?;
    let seeds = a.seeds.unwrap_or(file.seeds);
    if seeds.is_empty() {
        return Err(usage(anyhow!("no seeds given")));
    }
    let mut unique = seeds.clone();
    unique.sort_unstable();
    unique.dedup();
    if unique.len() != seeds.len() {
        return Err(usage(anyhow!("duplicate seeds in {seeds:?}")));
    }
    let out_dir = a
        .out
        .or(file.output_dir)
        .unwrap_or_else(|| PathBuf::from("results"));

    let manifest = Manifest::load(&file.manifest)
        .map_err(|e| match e {
            clipcil::Error::Json(_) | clipcil::Error::Config(_) => usage(e),
            _ => runtime(e),
        })?;
    let data = Dataset::load(&manifest).map_err(classify)?;
    let cfg = &file.scenario;

    let outcomes: Vec<RunOutcome> = seeds
        .par_iter()
        .map(|&seed| scenario::run_on(&data, &manifest, cfg, seed))
        .collect::<Result<_, _>>()
        .map_err(classify)?;

    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))
        .map_err(runtime)?;
    let mut curves = format!("{CSV_HEADER}\n");
    for o in &outcomes {
        let seed = o.result.seed;
        let json = o.result.to_json().map_err(runtime)?;
        write_atomic(&out_dir.join(format!("seed_{seed}.json")), json.as_bytes())?;
        for row in o.result.csv_rows() {
            curves.push_str(&row);
            curves.push('\n');
        }
        if a.save_adapters {
            let bytes = match &o.adapter {
                Some(p) => adapters::checkpoint_bytes(p).map_err(runtime)?,
                None => return Err(usage(anyhow!("{:?} has no adapter to save", cfg.method))),
            };
            write_atomic(&out_dir.join(format!("adapter_seed{seed}.cadp")), &bytes)?;
        }
    }
    write_atomic(&out_dir.join("curves.csv"), curves.as_bytes())?;

    let results: Vec<_> = outcomes.iter().map(|o| o.result.clone()).collect();
    let agg = scenario::aggregate(&results).map_err(runtime)?;
    let method = method_name(cfg.method);
    let mut summary = String::from("method,n,seeds,avg_mean,avg_std,last_mean,last_std\n");
    let seed_list: Vec<String> = agg.seeds.iter().map(u64::to_string).collect();
    writeln!(
        summary,
        "{method},{},{},{},{},{},{}",
        agg.n,
        seed_list.join(" "),
        agg.avg_mean,
        agg.avg_std,
        agg.last_mean,
        agg.last_std
    )
    .expect("writing to a String");
    write_atomic(&out_dir.join("aggregate.csv"), summary.as_bytes())?;

    println!("{:<20} {:>3}  {:>14}  {:>14}", "method", "n", "Avg", "Last");
    println!(
        "{:<20} {:>3}  {:>14}  {:>14}",
        method,
        agg.n,
        format!("{:.2} ± {:.2}", 100.0 * agg.avg_mean, 100.0 * agg.avg_std),
        format!("{:.2} ± {:.2}", 100.0 * agg.last_mean, 100.0 * agg.last_std),
    );
    println!("results in {}", out_dir.display());
    Ok(())
}

fn method_name(m: Method) -> String {
    serde_json::to_value(m)
        .ok()
        .and_then(|v| v.as_str().map(str::to_owned))
        .unwrap_or_else(|| format!("{m:?}"))
}

/// Writes through a temporary file in the same directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> Outcome<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let write = || -> anyhow::Result<()> {
        let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
        tmp.write_all(bytes)?;
        tmp.as_file().sync_all()?;
        tmp.persist(path)?;
        Ok(())
    };
    write()
        .with_context(|| format!("writing {}", path.display()))
        .map_err(runtime)
}

fn cmd_eval(a: EvalArgs) -> Outcome<()> {
    let logits = LogitConfig {
        normalize: !a.no_normalize,
        logit_scale: a.logit_scale,
    };
    logits.validate().map_err(classify)?;
    let params = adapters::load_checkpoint(&a.checkpoint).map_err(runtime)?;
    let manifest = Manifest::load(&a.manifest).map_err(classify)?;
    let data = Dataset::load(&manifest).map_err(classify)?;
    if params.dim() != data.dim() {
        return Err(usage(anyhow!(
            "checkpoint dim {} does not match embedding dim {}",
            params.dim(),
            data.dim()
        )));
    }
    let tasks = split_tasks(&manifest, data.num_classes()).map_err(classify)?;
    let order: Vec<usize> = tasks.concat();
    let text = data.text.text_matrix().map_err(runtime)?;
    let rows: Vec<&[f64]> = order.iter().map(|&c| text.row(c)).collect();
    let head = TextHead::new(
        &clipcil::linalg::DenseMatrix::from_rows(&rows).map_err(runtime)?,
        logits,
    )
    .map_err(runtime)?;
    let model = AdapterClassifier { params: &params, head: &head };

    let mut position = vec![0; data.num_classes()];
    for (i, &c) in order.iter().enumerate() {
        position[c] = i;
    }
    let (mut correct, mut total) = (0, 0);
    println!("{} adapter, M={}", adapter_label(&params), params.dim());
    for (t, classes) in tasks.iter().enumerate() {
        let samples: Vec<_> = data
            .test
            .filter_classes(classes)
            .into_iter()
            .map(|r| (position[r.class_index], &r.vector))
            .collect();
        let report = evaluate(&model, &samples).map_err(runtime)?;
        println!("task {:>2}: {:6.2}% of {}", t + 1, 100.0 * report.accuracy(), report.total);
        correct += report.correct;
        total += report.total;
    }
    println!("overall: {:6.2}% of {total}", 100.0 * correct as f64 / total.max(1) as f64);
    Ok(())
}

fn adapter_label(p: &adapters::AdapterParams) -> String {
    match p.kind() {
        adapters::AdapterKind::SelfAttention => format!("self_attention ({:?})", p.attention_mode()).to_lowercase(),
        k => format!("{k:?}").to_lowercase(),
    }
}

/// Appends a formatted line to a `String` buffer.
macro_rules! line {
    ($buf:expr, $($arg:tt)*) => {
        writeln!($buf, $($arg)*).expect("writing to a String")
    };
}

/// Prints a report; a closed pipe (`clipcil inspect f | head`) is not an error.
fn emit(text: &str) {
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = stdout.write_all(text.as_bytes()).and_then(|()| stdout.flush()) {
        if e.kind() != std::io::ErrorKind::BrokenPipe {
            eprintln!("error: writing to stdout: {e}");
        }
    }
}

fn cmd_inspect(path: &Path) -> Outcome<()> {
    let bytes = std::fs::read(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(runtime)?;
    let located = |e: clipcil::Error| runtime(anyhow!("{}: {e}", path.display()));
    let mut out = String::new();
    if bytes.starts_with(EMBEDDING_MAGIC) {
        let set = EmbeddingSet::from_bytes(&bytes).map_err(located)?;
        line!(out, "{}", path.display());
        line!(out, "  magic    CEM1");
        line!(out, "  version  {}", clipcil::embedding::EMBEDDING_VERSION);
        line!(out, "  M        {}", set.dim());
        line!(out, "  K        {}", set.num_classes());
        line!(out, "  N        {}", set.len());
        let mut counts = vec![0usize; set.num_classes()];
        for r in set.records() {
            counts[r.class_index] += 1;
        }
        line!(out, "  classes");
        for (i, (name, n)) in set.class_names().iter().zip(&counts).enumerate() {
            line!(out, "    {i:>4}  {name:<24} {n} records");
        }
    } else if bytes.starts_with(CHECKPOINT_MAGIC) {
        let p = adapters::checkpoint_from_bytes(&bytes).map_err(located)?;
        line!(out, "{}", path.display());
        line!(out, "  magic    CADP");
        line!(out, "  version  {}", adapters::CHECKPOINT_VERSION);
        line!(out, "  kind     {}", adapter_label(&p));
        line!(out, "  M        {}", p.dim());
        line!(out, "  params   {}", p.param_count());
    } else {
        let head: String = bytes.iter().take(4).map(|b| format!("{b:02x}")).collect();
        return Err(runtime(anyhow!(
            "{}: format error at byte 0: unrecognized magic 0x{head}; expected CEM1 or CADP",
            path.display()
        )));
    }
    emit(&out);
    Ok(())
}
