use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use realism::benchmark::{aggregate_benchmark, render_table, TableFormat};
use realism::config::RunConfig;
use realism::pipeline::{load_manifest, run_eval, EvalOptions};
use realism::plan::{plan_attribute_eval, plan_relation_eval};
use realism::ranking::{export_splits, RankManifest, RankMode};
use realism::schema::{
    build_schema_from_annotations, build_schema_from_description, load_query, load_schema, store_schema,
    AnnotationTable, CategoryHint, DEFAULT_COMMONALITY_THRESHOLD,
};
use realism::scoring::{read_scorecards, write_scorecards, ScoreCard, Task};
use realism::stats::{
    correlation_report, ground_truth_scores, read_annotations, render_correlation_csv, render_correlation_table,
};
use realism::style::{StyleClient, StyleSource, StyleTable};
use realism::vqa::{register_backend, register_text_llm, AnswerCache, ImageData, VqaGateway};

/// Exit status when more images failed than the configured fraction allows.
const EXIT_TOO_MANY_FAILURES: u8 = 2;

#[derive(Parser)]
#[command(name = "realism", version, about = "Realism evaluation for text-to-image outputs")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Key-value config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set parallelism=2`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
    /// Override a backend key, e.g. `--backend kind=fixture`.
    #[arg(long = "backend", value_name = "KEY=VALUE", global = true)]
    backend: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate every image in a manifest and write scorecards.
    Eval(EvalArgs),
    /// Rank scorecards per class into high, low and random splits.
    Rank(RankArgs),
    /// Correlate harness scores with human annotations.
    Correlate(CorrelateArgs),
    /// Per-model benchmark table.
    Benchmark(BenchmarkArgs),
    /// Attach style scores to scorecards.
    Style(StyleArgs),
    /// Materialize ranked splits as directories with captions.
    Export(ExportArgs),
    /// Build attribute schemas.
    #[command(subcommand)]
    Schema(SchemaCommand),
    /// Print the question plan for a class or query.
    Plan(PlanArgs),
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_parser = parse_task)]
    task: Task,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    schema_dir: Option<PathBuf>,
    #[arg(long)]
    cache: Option<PathBuf>,
    /// Questions in flight per image.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Images evaluated concurrently.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long, conflicts_with = "style_csv")]
    style_endpoint: Option<String>,
    #[arg(long)]
    style_csv: Option<PathBuf>,
    /// Largest tolerated fraction of failed images.
    #[arg(long)]
    failure_fraction: Option<f64>,
    /// Scorecard CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-image transcripts as JSON lines.
    #[arg(long)]
    transcripts: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    AttributeOnly,
    Combined,
}

impl From<ModeArg> for RankMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::AttributeOnly => RankMode::AttributeOnly,
            ModeArg::Combined => RankMode::Combined,
        }
    }
}

#[derive(Args)]
struct RankArgs {
    /// Scorecard CSV files.
    #[arg(long, required = true, num_args = 1..)]
    scores: Vec<PathBuf>,
    #[arg(long, default_value_t = 5)]
    k: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "combined")]
    mode: ModeArg,
    #[arg(long)]
    dataset_id: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreField {
    /// `s_att` or normalized `s_rel`.
    Dimension,
    Combined,
}

#[derive(Args)]
struct CorrelateArgs {
    /// `[METHOD@]DATASET=SCORES.csv,ANNOTATIONS.csv`, repeatable.
    #[arg(long = "input", required = true)]
    inputs: Vec<String>,
    /// Method label for inputs without one.
    #[arg(long, default_value = "REAL")]
    method: String,
    #[arg(long, value_enum, default_value = "dimension")]
    score: ScoreField,
    /// Images sampled per dataset.
    #[arg(long, default_value_t = 100)]
    sample_size: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_format, default_value = "text")]
    format: TableFormat,
}

#[derive(Args)]
struct BenchmarkArgs {
    #[arg(long, required = true, num_args = 1..)]
    scores: Vec<PathBuf>,
    #[arg(long, value_parser = parse_format, default_value = "text")]
    format: TableFormat,
}

#[derive(Args)]
struct StyleArgs {
    /// Scoring service base URL.
    #[arg(long, conflicts_with = "csv", required_unless_present = "csv")]
    endpoint: Option<String>,
    /// Precomputed `image_ref,p_photo` CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    scores: PathBuf,
    /// Image manifest; needed with --endpoint to locate files.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    /// Split manifest written by `rank`.
    #[arg(long)]
    splits: PathBuf,
    /// Image manifest mapping refs to files.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Schema directory for class display names.
    #[arg(long)]
    schema_dir: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Copy files instead of symlinking.
    #[arg(long)]
    copy: bool,
}

#[derive(Subcommand)]
enum SchemaCommand {
    /// Keep annotation columns common to the class.
    FromAnnotations {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        class_id: String,
        #[arg(long)]
        class_name: String,
        #[arg(long, default_value = "other")]
        category: CategoryHint,
        #[arg(long, default_value_t = DEFAULT_COMMONALITY_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Summarize a free-text description with the configured text model.
    FromDescription {
        #[arg(long)]
        class_name: String,
        /// File holding the description.
        #[arg(long)]
        text: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long, value_parser = parse_task)]
    task: Task,
    #[arg(long)]
    schema_dir: Option<PathBuf>,
    /// Class id or query id.
    #[arg(long)]
    target: String,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse()
}

fn parse_format(s: &str) -> Result<TableFormat, String> {
    s.parse()
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    for kv in &g.sets {
        let (k, v) = kv.split_once('=').ok_or_else(|| anyhow!("--set expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim())?;
    }
    for kv in &g.backend {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| anyhow!("--backend expects KEY=VALUE, got {kv:?}"))?;
        cfg.set(&format!("backend.{}", k.trim()), v.trim())?;
    }
    Ok(cfg)
}

fn env_var(k: &str) -> Option<String> {
    std::env::var(k).ok()
}

fn emit(out: Option<&Path>, bytes: &[u8]) -> Result<()> {
    match out {
        Some(p) => fs::write(p, bytes).with_context(|| format!("writing {}", p.display())),
        None => std::io::stdout().write_all(bytes).context("writing stdout"),
    }
}

fn read_cards(paths: &[PathBuf]) -> Result<Vec<ScoreCard>> {
    let mut cards = Vec::new();
    for p in paths {
        let f = fs::File::open(p).with_context(|| format!("opening {}", p.display()))?;
        cards.extend(read_scorecards(f).with_context(|| format!("reading {}", p.display()))?);
    }
    Ok(cards)
}

fn cards_csv(cards: &[ScoreCard]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_scorecards(&mut buf, cards)?;
    Ok(buf)
}

fn cmd_eval(mut cfg: RunConfig, a: EvalArgs) -> Result<ExitCode> {
    if let Some(v) = a.manifest {
        cfg.manifest = Some(v);
    }
    if let Some(v) = a.schema_dir {
        cfg.schema_dir = Some(v);
    }
    if let Some(v) = a.cache {
        cfg.cache = Some(v);
    }
    if let Some(v) = a.parallelism {
        cfg.set("parallelism", &v.to_string())?;
    }
    if let Some(v) = a.workers {
        cfg.set("workers", &v.to_string())?;
    }
    if let Some(v) = a.failure_fraction {
        cfg.set("failure_fraction", &v.to_string())?;
    }
    // a style flag replaces whatever source the file named
    if let Some(v) = a.style_endpoint {
        cfg.style_endpoint = Some(v);
        cfg.style_csv = None;
    }
    if let Some(v) = a.style_csv {
        cfg.style_csv = Some(v);
        cfg.style_endpoint = None;
    }

    let manifest_path = cfg.manifest.clone().ok_or_else(|| anyhow!("no image manifest configured"))?;
    let entries = load_manifest(&manifest_path)?;
    let schema_dir = cfg.schema_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    let backend = register_backend(&cfg.backend_config()?, &env_var)?;
    let mut gateway = VqaGateway::new(backend);
    if let Some(p) = &cfg.cache {
        let cache = AnswerCache::open(p).with_context(|| format!("opening cache {}", p.display()))?;
        if cache.skipped_lines() > 0 {
            eprintln!("cache: skipped {} unreadable line(s)", cache.skipped_lines());
        }
        gateway = gateway.with_cache(Arc::new(cache));
    }
    let style = cfg.style_source(false)?;
    let opts = EvalOptions {
        task: a.task,
        parallelism: cfg.parallelism,
        workers: cfg.workers,
    };
    let report = run_eval(&entries, &schema_dir, &gateway, style.as_deref(), &opts);

    emit(a.out.as_deref(), &cards_csv(&report.cards())?)?;
    if let Some(p) = &a.transcripts {
        let f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        report.write_transcripts(std::io::BufWriter::new(f))?;
    }
    eprintln!(
        "evaluated {} image(s), {} failed, {} backend call(s)",
        report.results.len(),
        report.failures(),
        gateway.backend_calls()
    );
    if report.exceeds(cfg.failure_fraction) {
        eprintln!(
            "failure fraction {:.4} exceeds {:.4}",
            report.failure_fraction(),
            cfg.failure_fraction
        );
        return Ok(ExitCode::from(EXIT_TOO_MANY_FAILURES));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_rank(cfg: RunConfig, a: RankArgs) -> Result<ExitCode> {
    let cards = read_cards(&a.scores)?;
    let dataset = a.dataset_id.or(cfg.dataset_id).unwrap_or_else(|| "dataset".into());
    let manifest = RankManifest::build(&dataset, &cards, a.mode.into(), a.k, a.seed.unwrap_or(cfg.seed))?;
    for c in &manifest.classes {
        for f in &c.flags {
            eprintln!("{}: {f}", c.class_id);
        }
    }
    emit(a.out.as_deref(), manifest.to_text().as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

struct CorrelateInput {
    method: String,
    dataset: String,
    scores: PathBuf,
    annotations: PathBuf,
}

fn parse_input(s: &str, default_method: &str) -> Result<CorrelateInput> {
    let (label, files) = s
        .split_once('=')
        .ok_or_else(|| anyhow!("--input expects [METHOD@]DATASET=SCORES,ANNOTATIONS, got {s:?}"))?;
    let (method, dataset) = label.split_once('@').unwrap_or((default_method, label));
    let (scores, annotations) = files
        .split_once(',')
        .ok_or_else(|| anyhow!("--input needs two comma-separated files, got {files:?}"))?;
    Ok(CorrelateInput {
        method: method.to_string(),
        dataset: dataset.to_string(),
        scores: scores.into(),
        annotations: annotations.into(),
    })
}

fn cmd_correlate(cfg: RunConfig, a: CorrelateArgs) -> Result<ExitCode> {
    let seed = a.seed.unwrap_or(cfg.seed);
    let mut rows = Vec::new();
    for raw in &a.inputs {
        let input = parse_input(raw, &a.method)?;
        let harness: BTreeMap<String, f64> = read_cards(std::slice::from_ref(&input.scores))?
            .into_iter()
            .filter_map(|c| {
                let v = match a.score {
                    ScoreField::Dimension => c.dimension_score(),
                    ScoreField::Combined => c.combined,
                };
                v.map(|v| (c.image_ref, v))
            })
            .collect();
        let f = fs::File::open(&input.annotations)
            .with_context(|| format!("opening {}", input.annotations.display()))?;
        let truth = ground_truth_scores(&read_annotations(f)?)?;
        let row = correlation_report(&input.method, &input.dataset, &harness, &truth, Some(a.sample_size), seed)
            .with_context(|| format!("correlating {raw}"))?;
        if row.unmatched != (0, 0) {
            eprintln!(
                "{}: {} scored image(s) without annotations, {} annotated image(s) without scores",
                input.dataset, row.unmatched.0, row.unmatched.1
            );
        }
        rows.push(row);
    }
    let text = match a.format {
        TableFormat::Csv => render_correlation_csv(&rows),
        TableFormat::Text => render_correlation_table(&rows),
    };
    emit(None, text.as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_benchmark(a: BenchmarkArgs) -> Result<ExitCode> {
    let cards = read_cards(&a.scores)?;
    let table = aggregate_benchmark(&cards)?;
    emit(None, render_table(&table, a.format).as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

fn manifest_paths(path: &Path) -> Result<HashMap<String, PathBuf>> {
    Ok(load_manifest(path)?.into_iter().map(|e| (e.image_ref, e.path)).collect())
}

fn cmd_style(cfg: RunConfig, a: StyleArgs) -> Result<ExitCode> {
    let source: Box<dyn StyleSource> = match (&a.endpoint, &a.csv) {
        (Some(url), None) => Box::new(StyleClient::new(url, std::time::Duration::from_secs(a.timeout_secs))),
        (None, Some(p)) => Box::new(StyleTable::load(p)?),
        _ => bail!("pass exactly one of --endpoint and --csv"),
    };
    let paths = match a.manifest.as_deref().or(cfg.manifest.as_deref()) {
        Some(m) => manifest_paths(m)?,
        None if a.endpoint.is_some() => bail!("--endpoint needs --manifest to locate images"),
        None => HashMap::new(),
    };
    let mut out = Vec::new();
    let mut failed = 0usize;
    for mut card in read_cards(std::slice::from_ref(&a.scores))? {
        let image = match (a.endpoint.is_some(), paths.get(&card.image_ref)) {
            (false, _) => Ok(ImageData::from_bytes(Vec::new())),
            (true, Some(p)) => ImageData::load(p).map_err(|e| format!("{}: {e}", p.display())),
            (true, None) => Err("image not in manifest".to_string()),
        };
        let p = image.and_then(|img| source.p_photo(&card.image_ref, &img).map_err(|e| e.to_string()));
        card = match p {
            Ok(p) => card.with_style(p)?,
            Err(e) => {
                failed += 1;
                card.flags.push(format!("error:style: {}", e.replace(';', " ")));
                card
            }
        };
        out.push(card);
    }
    if failed > 0 {
        eprintln!("{failed} image(s) without a style score");
    }
    emit(a.out.as_deref(), &cards_csv(&out)?)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_export(cfg: RunConfig, a: ExportArgs) -> Result<ExitCode> {
    let text = fs::read_to_string(&a.splits).with_context(|| format!("reading {}", a.splits.display()))?;
    let manifest = RankManifest::parse(&text)?;
    let images = a
        .manifest
        .or(cfg.manifest)
        .ok_or_else(|| anyhow!("no image manifest configured"))?;
    let paths = manifest_paths(&images)?;
    let mut names = HashMap::new();
    if let Some(dir) = a.schema_dir.or(cfg.schema_dir) {
        for c in &manifest.classes {
            if let Ok(s) = load_schema(&dir, &c.class_id) {
                names.insert(c.class_id.clone(), s.class_name().to_string());
            }
        }
    }
    let n = export_splits(&manifest, &paths, &names, &a.out, a.copy)?;
    eprintln!("exported {n} image(s) to {}", a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_schema(cfg: RunConfig, c: SchemaCommand) -> Result<ExitCode> {
    let (schema, out_dir) = match c {
        SchemaCommand::FromAnnotations {
            table,
            class_id,
            class_name,
            category,
            threshold,
            out_dir,
        } => {
            let f = fs::File::open(&table).with_context(|| format!("opening {}", table.display()))?;
            let t = AnnotationTable::from_csv(f)?;
            (build_schema_from_annotations(&class_id, &class_name, category, &t, threshold)?, out_dir)
        }
        SchemaCommand::FromDescription {
            class_name,
            text,
            out_dir,
        } => {
            let llm = register_text_llm(&cfg.backend_config()?, &env_var)?;
            let desc = fs::read_to_string(&text).with_context(|| format!("reading {}", text.display()))?;
            (build_schema_from_description(&class_name, &desc, llm.as_ref())?, out_dir)
        }
    };
    let path = store_schema(&out_dir, &schema)?;
    eprintln!("{} part(s) written to {}", schema.len(), path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_plan(cfg: RunConfig, a: PlanArgs) -> Result<ExitCode> {
    let dir = a.schema_dir.or(cfg.schema_dir).unwrap_or_else(|| PathBuf::from("."));
    let plan = match a.task {
        Task::Attribute => plan_attribute_eval(&load_schema(&dir, &a.target)?),
        Task::Relation => plan_relation_eval(&load_query(&dir, &a.target)?),
    };
    emit(None, plan.to_text().as_bytes())?;
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Eval(a) => cmd_eval(cfg, a),
        Command::Rank(a) => cmd_rank(cfg, a),
        Command::Correlate(a) => cmd_correlate(cfg, a),
        Command::Benchmark(a) => cmd_benchmark(a),
        Command::Style(a) => cmd_style(cfg, a),
        Command::Export(a) => cmd_export(cfg, a),
        Command::Schema(c) => cmd_schema(cfg, c),
        Command::Plan(a) => cmd_plan(cfg, a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
