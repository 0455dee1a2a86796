//! End-to-end evaluation over an image manifest.
//!
//! Manifest lines are `image_ref \t path \t class_or_query_id \t model_id`.
//! Blank lines and lines starting with `#` are ignored.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::Serialize;
use thiserror::Error;

use crate::exec::{execute_plan, Transcript};
use crate::plan::{plan_attribute_eval, plan_relation_eval, QuestionPlan};
use crate::schema::{load_query, load_schema};
use crate::scoring::{build_outcome, ScoreCard, Task};
use crate::style::StyleSource;
use crate::vqa::{ImageData, VqaGateway};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_ref: String,
    pub path: PathBuf,
    pub target_id: String,
    pub model_id: String,
}

/// Parses a manifest. `base` anchors relative image paths.
pub fn parse_manifest(text: &str, base: Option<&Path>) -> Result<Vec<ManifestEntry>, PipelineError> {
    let mut out = Vec::new();
    let mut seen = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| PipelineError::Manifest { line: i + 1, msg };
        let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
        if cols.len() != 4 || cols.iter().any(|c| c.is_empty()) {
            return Err(err(format!("expected 4 non-empty tab-separated fields, got {}", cols.len())));
        }
        if let Some(prev) = seen.insert(cols[0].to_string(), i + 1) {
            return Err(err(format!("image_ref {} already used on line {prev}", cols[0])));
        }
        let mut path = PathBuf::from(cols[1]);
        if let (Some(base), true) = (base, path.is_relative()) {
            path = base.join(path);
        }
        out.push(ManifestEntry {
            image_ref: cols[0].to_string(),
            path,
            target_id: cols[2].to_string(),
            model_id: cols[3].to_string(),
        });
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|e| PipelineError::Io(path.to_path_buf(), e))?;
    parse_manifest(&text, path.parent())
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub task: Task,
    pub parallelism: usize,
    pub workers: usize,
}

/// Outcome for one manifest entry. Failed images still carry a card whose
/// flags say what went wrong.
#[derive(Debug, Clone)]
pub struct ImageResult {
    pub card: ScoreCard,
    pub transcript: Option<Transcript>,
    pub failed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub results: Vec<ImageResult>,
}

impl EvalReport {
    pub fn cards(&self) -> Vec<ScoreCard> {
        self.results.iter().map(|r| r.card.clone()).collect()
    }

    pub fn failures(&self) -> usize {
        self.results.iter().filter(|r| r.failed).count()
    }

    pub fn failure_fraction(&self) -> f64 {
        if self.results.is_empty() {
            0.0
        } else {
            self.failures() as f64 / self.results.len() as f64
        }
    }

    /// Strictly more failures than `threshold` allows.
    pub fn exceeds(&self, threshold: f64) -> bool {
        self.failure_fraction() > threshold
    }

    /// One JSON object per evaluated image, in manifest order.
    pub fn write_transcripts<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        #[derive(Serialize)]
        struct Line<'a> {
            image_ref: &'a str,
            transcript: &'a Transcript,
        }
        for r in &self.results {
            if let Some(t) = &r.transcript {
                serde_json::to_writer(
                    &mut out,
                    &Line {
                        image_ref: &r.card.image_ref,
                        transcript: t,
                    },
                )?;
                out.write_all(b"\n")?;
            }
        }
        Ok(())
    }
}

fn flag(kind: &str, msg: impl std::fmt::Display) -> String {
    let msg: String = msg.to_string().chars().map(|c| if c == ';' || c.is_control() { ' ' } else { c }).collect();
    format!("error:{kind}: {msg}")
}

fn compile_plan(task: Task, schema_dir: &Path, target_id: &str) -> Result<QuestionPlan, String> {
    match task {
        Task::Attribute => load_schema(schema_dir, target_id)
            .map(|s| plan_attribute_eval(&s))
            .map_err(|e| e.to_string()),
        Task::Relation => load_query(schema_dir, target_id)
            .map(|q| plan_relation_eval(&q))
            .map_err(|e| e.to_string()),
    }
}

fn evaluate(
    entry: &ManifestEntry,
    plan: &Result<QuestionPlan, String>,
    gateway: &VqaGateway,
    style: Option<&dyn StyleSource>,
    opts: &EvalOptions,
) -> ImageResult {
    let mut card = ScoreCard::empty(&entry.image_ref, opts.task, &entry.target_id, &entry.model_id);
    let fail = |mut card: ScoreCard, f: String, transcript: Option<Transcript>| {
        card.flags.push(f);
        ImageResult {
            card,
            transcript,
            failed: true,
        }
    };
    let plan = match plan {
        Ok(p) => p,
        Err(e) => return fail(card, flag("target", e), None),
    };
    let image = match ImageData::load(&entry.path) {
        Ok(i) => i,
        Err(e) => return fail(card, flag("image", format!("{}: {e}", entry.path.display())), None),
    };
    let transcript = match execute_plan(gateway, &image, plan, opts.parallelism) {
        Ok(t) => t,
        Err(e) => return fail(card, flag("vqa", e), None),
    };
    let scored = build_outcome(&transcript, plan).and_then(|o| card.clone().from_outcome(&o, plan));
    card = match scored {
        Ok(c) => c,
        Err(e) => return fail(card, flag("score", e), Some(transcript)),
    };
    card.flags
        .extend(transcript.flagged().map(|e| format!("unparseable:{}", e.question_id)));
    if let Some(style) = style {
        match style.p_photo(&entry.image_ref, &image).map_err(|e| e.to_string()) {
            Ok(p) => match card.clone().with_style(p) {
                Ok(c) => card = c,
                Err(e) => card.flags.push(flag("style", e)),
            },
            Err(e) => card.flags.push(flag("style", e)),
        }
    }
    ImageResult {
        card,
        transcript: Some(transcript),
        failed: false,
    }
}

/// Evaluates every manifest entry. Per-image problems become flagged
/// results; output order follows the manifest regardless of `workers`.
pub fn run_eval(
    entries: &[ManifestEntry],
    schema_dir: &Path,
    gateway: &VqaGateway,
    style: Option<&dyn StyleSource>,
    opts: &EvalOptions,
) -> EvalReport {
    let mut plans: BTreeMap<&str, Result<QuestionPlan, String>> = BTreeMap::new();
    for e in entries {
        plans
            .entry(&e.target_id)
            .or_insert_with(|| compile_plan(opts.task, schema_dir, &e.target_id));
    }
    let slots: Vec<Mutex<Option<ImageResult>>> = entries.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(entry) = entries.get(i) else { break };
        let r = evaluate(entry, &plans[entry.target_id.as_str()], gateway, style, opts);
        *slots[i].lock().expect("result slot poisoned") = Some(r);
    };
    let workers = opts.workers.clamp(1, entries.len().max(1));
    if workers == 1 {
        work();
    } else {
        thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(work);
            }
        });
    }
    EvalReport {
        results: slots
            .into_iter()
            .map(|m| m.into_inner().expect("result slot poisoned").expect("every slot filled"))
            .collect(),
    }
}
