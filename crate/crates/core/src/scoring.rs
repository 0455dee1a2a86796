//! Attribute and relation realism scores.
//!
//! Attribute task, over `N` schema parts with visibility `V_i` and
//! description match `M_i`:
//!
//! ```text
//! C = Σ V_i        R = Σ V_i·M_i        S_att = R / C  (0 when C = 0)
//! ```
//!
//! Relation task, over `N` entities (visibility `V_i`, realism `M_i`) and the
//! `T` queried triplets (`R_ij`):
//!
//! ```text
//! S_rel = Σ (V_i + M_i) + Σ R_ij      normalized by 2N + T
//! ```
//!
//! Either score is zero when the existence check (attributes) or any entity
//! visibility check (relations) fails.

use std::collections::HashMap;
use std::fmt;
use std::io::{Read, Write};

use thiserror::Error;

use crate::exec::Transcript;
use crate::plan::{PlanTarget, QuestionKind, QuestionPlan};

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("inconsistent outcome: {0}")]
    Inconsistent(String),
    #[error("missing answer for issued question {0:?}")]
    MissingAnswer(String),
    #[error("answer for question {0:?} that was never issued")]
    NeverIssued(String),
    #[error("value {value} for {what} is outside [0, 1]")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("scorecard csv: {0}")]
    Csv(String),
}

/// Visibility and (when visible) match result of one schema part.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PartCheck {
    pub visible: bool,
    /// `None` when the match question was skipped.
    pub matched: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeOutcome {
    pub existence: bool,
    /// Empty when `existence` is false.
    pub parts: Vec<PartCheck>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntityCheck {
    pub visible: bool,
    pub realistic: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationOutcome {
    pub entities: Vec<Option<EntityCheck>>,
    pub relations: Vec<Option<bool>>,
    pub any_missing: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttributeScore {
    pub confidence: u32,
    pub realism: u32,
    pub s_att: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelationScore {
    pub raw: u32,
    pub normalized: f64,
}

/// `(C, R, S_att)` for an attribute outcome over `n` parts.
pub fn score_attributes(outcome: &AttributeOutcome, n: usize) -> Result<AttributeScore, ScoreError> {
    if !outcome.existence {
        return Ok(AttributeScore {
            confidence: 0,
            realism: 0,
            s_att: 0.0,
        });
    }
    if outcome.parts.len() != n {
        return Err(ScoreError::Inconsistent(format!(
            "{} part results for a schema of {n} parts",
            outcome.parts.len()
        )));
    }
    let (mut c, mut r) = (0u32, 0u32);
    for (i, p) in outcome.parts.iter().enumerate() {
        match (p.visible, p.matched) {
            (true, Some(m)) => {
                c += 1;
                r += u32::from(m);
            }
            (true, None) => return Err(ScoreError::Inconsistent(format!("part {i} visible but match unanswered"))),
            (false, Some(_)) => return Err(ScoreError::Inconsistent(format!("part {i} has a match result but is not visible"))),
            (false, None) => {}
        }
    }
    let s_att = if c > 0 { r as f64 / c as f64 } else { 0.0 };
    Ok(AttributeScore {
        confidence: c,
        realism: r,
        s_att,
    })
}

/// Raw and normalized relation score for `n` entities and `t` triplets.
pub fn score_relations(outcome: &RelationOutcome, n: usize, t: usize) -> Result<RelationScore, ScoreError> {
    if outcome.entities.len() != n || outcome.relations.len() != t {
        return Err(ScoreError::Inconsistent(format!(
            "outcome has {} entities / {} relations, expected {n} / {t}",
            outcome.entities.len(),
            outcome.relations.len()
        )));
    }
    let missing = outcome.entities.iter().any(|e| matches!(e, Some(EntityCheck { visible: false, .. })));
    if missing != outcome.any_missing {
        return Err(ScoreError::Inconsistent("any_missing disagrees with entity visibility".into()));
    }
    if missing {
        return Ok(RelationScore {
            raw: 0,
            normalized: 0.0,
        });
    }
    let mut raw = 0u32;
    for (i, e) in outcome.entities.iter().enumerate() {
        match e {
            Some(EntityCheck {
                visible: true,
                realistic: Some(m),
            }) => raw += 1 + u32::from(*m),
            _ => return Err(ScoreError::Inconsistent(format!("entity {i} is incompletely answered"))),
        }
    }
    for (j, r) in outcome.relations.iter().enumerate() {
        match r {
            Some(r) => raw += u32::from(*r),
            None => return Err(ScoreError::Inconsistent(format!("relation {j} unanswered"))),
        }
    }
    let max = (2 * n + t) as f64;
    Ok(RelationScore {
        raw,
        normalized: raw as f64 / max,
    })
}

fn check_unit(what: &'static str, value: f64) -> Result<f64, ScoreError> {
    if (0.0..=1.0).contains(&value) {
        Ok(value)
    } else {
        Err(ScoreError::OutOfRange { what, value })
    }
}

/// Dimension score times style score.
pub fn combine(dimension_score: f64, s_sty: f64) -> Result<f64, ScoreError> {
    Ok(check_unit("dimension score", dimension_score)? * check_unit("style score", s_sty)?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outcome {
    Attributes(AttributeOutcome),
    Relations(RelationOutcome),
}

/// Maps a transcript onto the outcome structure of its plan.
///
/// Replays the plan's gating against the recorded answers: every question
/// the plan would issue must be answered, and nothing else may be.
pub fn build_outcome(transcript: &Transcript, plan: &QuestionPlan) -> Result<Outcome, ScoreError> {
    let answers: HashMap<String, bool> = transcript.answers();
    let mut replay: HashMap<String, bool> = HashMap::new();
    loop {
        let next = plan
            .next_questions(&replay)
            .map_err(|e| ScoreError::Inconsistent(e.to_string()))?;
        if next.is_empty() {
            break;
        }
        for q in next {
            let a = *answers.get(&q.id).ok_or_else(|| ScoreError::MissingAnswer(q.id.clone()))?;
            replay.insert(q.id.clone(), a);
        }
    }
    if let Some(extra) = transcript.entries.iter().find(|e| !replay.contains_key(&e.question_id)) {
        return Err(ScoreError::NeverIssued(extra.question_id.clone()));
    }

    let answer_of = |kind: QuestionKind, index: usize| {
        plan.questions()
            .iter()
            .find(|q| q.kind == kind && q.index == index)
            .and_then(|q| replay.get(&q.id).copied())
    };
    match &plan.target {
        PlanTarget::Attributes { parts, .. } => {
            let existence = answer_of(QuestionKind::Existence, 0) == Some(true);
            let parts = if existence {
                (0..*parts)
                    .map(|i| PartCheck {
                        visible: answer_of(QuestionKind::Visibility, i) == Some(true),
                        matched: answer_of(QuestionKind::Match, i),
                    })
                    .collect()
            } else {
                Vec::new()
            };
            Ok(Outcome::Attributes(AttributeOutcome { existence, parts }))
        }
        PlanTarget::Relations { entities, triplets, .. } => {
            let entities: Vec<Option<EntityCheck>> = (0..*entities)
                .map(|i| {
                    answer_of(QuestionKind::EntityVisibility, i).map(|visible| EntityCheck {
                        visible,
                        realistic: answer_of(QuestionKind::EntityRealism, i),
                    })
                })
                .collect();
            let any_missing = entities.iter().any(|e| matches!(e, Some(EntityCheck { visible: false, .. })));
            let relations = (0..*triplets).map(|t| answer_of(QuestionKind::Relation, t)).collect();
            Ok(Outcome::Relations(RelationOutcome {
                entities,
                relations,
                any_missing,
            }))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    Attribute,
    Relation,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Attribute => "attribute",
            Task::Relation => "relation",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "attribute" | "attributes" => Ok(Task::Attribute),
            "relation" | "relations" => Ok(Task::Relation),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

/// Scores for one image. Fields that do not apply to the task, or that
/// could not be computed, are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreCard {
    pub image_ref: String,
    pub task: Task,
    pub confidence: Option<u32>,
    pub realism: Option<u32>,
    pub s_att: Option<f64>,
    pub s_rel_raw: Option<u32>,
    pub s_rel_norm: Option<f64>,
    pub s_sty: Option<f64>,
    pub combined: Option<f64>,
    pub flags: Vec<String>,
    /// Class (attribute task) or query (relation task) the image belongs to.
    pub group_id: String,
    /// Generator model that produced the image.
    pub model_id: String,
}

impl ScoreCard {
    pub fn empty(image_ref: impl Into<String>, task: Task, group_id: impl Into<String>, model_id: impl Into<String>) -> Self {
        ScoreCard {
            image_ref: image_ref.into(),
            task,
            confidence: None,
            realism: None,
            s_att: None,
            s_rel_raw: None,
            s_rel_norm: None,
            s_sty: None,
            combined: None,
            flags: Vec::new(),
            group_id: group_id.into(),
            model_id: model_id.into(),
        }
    }

    /// `S_att` or normalized `S_rel`, whichever the task produces.
    pub fn dimension_score(&self) -> Option<f64> {
        match self.task {
            Task::Attribute => self.s_att,
            Task::Relation => self.s_rel_norm,
        }
    }

    pub fn from_outcome(mut self, outcome: &Outcome, plan: &QuestionPlan) -> Result<Self, ScoreError> {
        match (outcome, &plan.target) {
            (Outcome::Attributes(o), PlanTarget::Attributes { parts, .. }) => {
                let s = score_attributes(o, *parts)?;
                self.confidence = Some(s.confidence);
                self.realism = Some(s.realism);
                self.s_att = Some(s.s_att);
            }
            (Outcome::Relations(o), PlanTarget::Relations { entities, triplets, .. }) => {
                let s = score_relations(o, *entities, *triplets)?;
                self.s_rel_raw = Some(s.raw);
                self.s_rel_norm = Some(s.normalized);
            }
            _ => return Err(ScoreError::Inconsistent("outcome does not match plan target".into())),
        }
        self.recombine()?;
        Ok(self)
    }

    /// Sets the style score and recomputes `combined`.
    pub fn with_style(mut self, s_sty: f64) -> Result<Self, ScoreError> {
        self.s_sty = Some(check_unit("style score", s_sty)?);
        self.recombine()?;
        Ok(self)
    }

    fn recombine(&mut self) -> Result<(), ScoreError> {
        self.combined = match (self.dimension_score(), self.s_sty) {
            (Some(d), Some(s)) => Some(combine(d, s)?),
            _ => None,
        };
        Ok(())
    }

    pub fn is_scored(&self) -> bool {
        self.dimension_score().is_some()
    }
}

/// Header of scorecard CSV files.
pub const SCORECARD_HEADER: [&str; 12] = [
    "image_ref",
    "task",
    "C",
    "R",
    "s_att",
    "s_rel_raw",
    "s_rel_norm",
    "s_sty",
    "combined",
    "flags",
    "group_id",
    "model_id",
];

fn fmt_f(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn fmt_u(v: Option<u32>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes scorecards as CSV. Fractions are printed with 6 decimals.
pub fn write_scorecards<W: Write>(out: W, cards: &[ScoreCard]) -> Result<(), ScoreError> {
    let err = |e: csv::Error| ScoreError::Csv(e.to_string());
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SCORECARD_HEADER).map_err(err)?;
    for c in cards {
        w.write_record([
            c.image_ref.clone(),
            c.task.to_string(),
            fmt_u(c.confidence),
            fmt_u(c.realism),
            fmt_f(c.s_att),
            fmt_u(c.s_rel_raw),
            fmt_f(c.s_rel_norm),
            fmt_f(c.s_sty),
            fmt_f(c.combined),
            c.flags.join(";"),
            c.group_id.clone(),
            c.model_id.clone(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| ScoreError::Csv(e.to_string()))
}

/// Reads scorecard CSV written by [`write_scorecards`]. The trailing
/// `group_id` and `model_id` columns are optional.
pub fn read_scorecards<R: Read>(input: R) -> Result<Vec<ScoreCard>, ScoreError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let headers = rdr.headers().map_err(|e| ScoreError::Csv(e.to_string()))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let required = ["image_ref", "task", "C", "R", "s_att", "s_rel_raw", "s_rel_norm", "s_sty", "combined", "flags"];
    let mut idx = HashMap::new();
    for name in required {
        idx.insert(name, col(name).ok_or_else(|| ScoreError::Csv(format!("missing column {name}")))?);
    }
    let group_col = col("group_id");
    let model_col = col("model_id");
    let mut cards = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| ScoreError::Csv(e.to_string()))?;
        let line = n + 2;
        let get = |name: &str| rec.get(idx[name]).unwrap_or("").trim();
        let opt_f = |name: &str| -> Result<Option<f64>, ScoreError> {
            let s = get(name);
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<f64>()
                .map(Some)
                .map_err(|_| ScoreError::Csv(format!("line {line}: bad {name} {s:?}")))
        };
        let opt_u = |name: &str| -> Result<Option<u32>, ScoreError> {
            let s = get(name);
            if s.is_empty() {
                return Ok(None);
            }
            s.parse::<u32>()
                .map(Some)
                .map_err(|_| ScoreError::Csv(format!("line {line}: bad {name} {s:?}")))
        };
        let task: Task = get("task").parse().map_err(|e| ScoreError::Csv(format!("line {line}: {e}")))?;
        let flags = get("flags");
        cards.push(ScoreCard {
            image_ref: get("image_ref").to_string(),
            task,
            confidence: opt_u("C")?,
            realism: opt_u("R")?,
            s_att: opt_f("s_att")?,
            s_rel_raw: opt_u("s_rel_raw")?,
            s_rel_norm: opt_f("s_rel_norm")?,
            s_sty: opt_f("s_sty")?,
            combined: opt_f("combined")?,
            flags: if flags.is_empty() {
                Vec::new()
            } else {
                flags.split(';').map(str::to_string).collect()
            },
            group_id: group_col.and_then(|c| rec.get(c)).unwrap_or("").to_string(),
            model_id: model_col.and_then(|c| rec.get(c)).unwrap_or("").to_string(),
        });
    }
    Ok(cards)
}
