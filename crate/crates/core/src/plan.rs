//! Question plans: the dependency-ordered yes/no questions asked about one
//! image, and the gating rules that decide which of them are asked.
//!
//! A question is *ready* once every question it depends on was answered yes.
//! A no on a dependency skips it. A no on any question gated
//! [`Gate::ZeroAllIfNo`] ends the plan.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::schema::{AttributeSchema, CategoryHint, RelationQuery};

#[derive(Debug, Error, PartialEq)]
pub enum PlanError {
    #[error("answer for unknown question {0:?}")]
    UnknownQuestion(String),
    #[error("plan line {line}: {msg}")]
    Malformed { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuestionKind {
    Existence,
    Visibility,
    Match,
    EntityVisibility,
    EntityRealism,
    Relation,
}

impl QuestionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            QuestionKind::Existence => "existence",
            QuestionKind::Visibility => "visibility",
            QuestionKind::Match => "match",
            QuestionKind::EntityVisibility => "entity_visibility",
            QuestionKind::EntityRealism => "entity_realism",
            QuestionKind::Relation => "relation",
        }
    }
}

impl FromStr for QuestionKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "existence" => QuestionKind::Existence,
            "visibility" => QuestionKind::Visibility,
            "match" => QuestionKind::Match,
            "entity_visibility" => QuestionKind::EntityVisibility,
            "entity_realism" => QuestionKind::EntityRealism,
            "relation" => QuestionKind::Relation,
            other => return Err(format!("unknown question kind {other:?}")),
        })
    }
}

impl fmt::Display for QuestionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What a "no" answer to a question does to the rest of the plan.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Gate {
    /// Dependents are skipped.
    SkipIfNo,
    /// The whole plan ends and the image scores zero.
    ZeroAllIfNo,
    None,
}

impl Gate {
    pub fn as_str(self) -> &'static str {
        match self {
            Gate::SkipIfNo => "skip_if_no",
            Gate::ZeroAllIfNo => "zero_all_if_no",
            Gate::None => "none",
        }
    }
}

impl FromStr for Gate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "skip_if_no" => Gate::SkipIfNo,
            "zero_all_if_no" => Gate::ZeroAllIfNo,
            "none" => Gate::None,
            other => return Err(format!("unknown gate {other:?}")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Question {
    pub id: String,
    pub prompt: String,
    pub kind: QuestionKind,
    /// Part, entity or triplet index the question is about; 0 for existence.
    pub index: usize,
    pub depends_on: Vec<String>,
    pub gate: Gate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PlanTarget {
    Attributes { class_id: String, parts: usize },
    Relations { query_id: String, entities: usize, triplets: usize },
}

impl PlanTarget {
    pub fn id(&self) -> &str {
        match self {
            PlanTarget::Attributes { class_id, .. } => class_id,
            PlanTarget::Relations { query_id, .. } => query_id,
        }
    }
}

/// Immutable, topologically ordered list of questions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuestionPlan {
    pub plan_id: String,
    pub target: PlanTarget,
    questions: Vec<Question>,
    index: HashMap<String, usize>,
}

/// Existence prompt for a category.
pub fn existence_prompt(category: CategoryHint) -> String {
    let noun = match category {
        CategoryHint::Animal => "animal",
        CategoryHint::Plant => "plant",
        CategoryHint::Fungus => "fungus",
        CategoryHint::Other => "animal or plant",
    };
    format!("Is there a realistic {noun} in the image?")
}

pub fn visibility_prompt(part: &str) -> String {
    format!("Can you see the {part}?")
}

pub fn match_prompt(part: &str, description: &str) -> String {
    format!("Is the {part} {description}?")
}

pub fn entity_visibility_prompt(entity: &str) -> String {
    format!("Can you see a {entity}?")
}

pub fn entity_realism_prompt(entity: &str) -> String {
    format!("Is the {entity} realistic and natural?")
}

pub fn relation_prompt(subject: &str, predicate: &str, object: &str) -> String {
    format!("Can you see the {subject} {predicate} the {object}?")
}

/// Deterministic question id from target id, kind and index.
pub fn question_id(target: &str, kind: QuestionKind, index: usize) -> String {
    match kind {
        QuestionKind::Existence => format!("{target}/existence"),
        _ => format!("{target}/{}/{index}", kind.as_str()),
    }
}

impl QuestionPlan {
    fn from_questions(plan_id: String, target: PlanTarget, questions: Vec<Question>) -> Self {
        let index = questions
            .iter()
            .enumerate()
            .map(|(i, q)| (q.id.clone(), i))
            .collect();
        QuestionPlan {
            plan_id,
            target,
            questions,
            index,
        }
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn get(&self, id: &str) -> Option<&Question> {
        self.index.get(id).map(|&i| &self.questions[i])
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    /// One line per question: `id \t kind \t depends_on \t gate \t prompt`,
    /// with `depends_on` comma-joined or `-`.
    pub fn to_text(&self) -> String {
        let mut out = format!("# plan: {}\n", self.plan_id);
        for q in &self.questions {
            let deps = if q.depends_on.is_empty() {
                "-".to_string()
            } else {
                q.depends_on.join(",")
            };
            out.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", q.id, q.kind, deps, q.gate.as_str(), q.prompt));
        }
        out
    }

    /// Questions to ask next given the answers so far.
    ///
    /// Returns every unanswered question whose dependencies were all answered
    /// yes. Returns nothing once a zero-all gate has fired.
    pub fn next_questions(&self, answers: &HashMap<String, bool>) -> Result<Vec<&Question>, PlanError> {
        if let Some(unknown) = answers.keys().find(|id| !self.index.contains_key(*id)) {
            return Err(PlanError::UnknownQuestion(unknown.clone()));
        }
        if self.terminated(answers) {
            return Ok(Vec::new());
        }
        Ok(self
            .questions
            .iter()
            .filter(|q| !answers.contains_key(&q.id))
            .filter(|q| q.depends_on.iter().all(|d| answers.get(d) == Some(&true)))
            .collect())
    }

    /// True when a zero-all gate was answered no.
    pub fn terminated(&self, answers: &HashMap<String, bool>) -> bool {
        self.questions
            .iter()
            .any(|q| q.gate == Gate::ZeroAllIfNo && answers.get(&q.id) == Some(&false))
    }
}

/// Existence check, then a visibility and a gated match question per part.
pub fn plan_attribute_eval(schema: &AttributeSchema) -> QuestionPlan {
    let target = schema.class_id();
    let existence_id = question_id(target, QuestionKind::Existence, 0);
    let mut questions = vec![Question {
        id: existence_id.clone(),
        prompt: existence_prompt(schema.category()),
        kind: QuestionKind::Existence,
        index: 0,
        depends_on: Vec::new(),
        gate: Gate::ZeroAllIfNo,
    }];
    for (i, part) in schema.parts().iter().enumerate() {
        let vis_id = question_id(target, QuestionKind::Visibility, i);
        questions.push(Question {
            id: vis_id.clone(),
            prompt: visibility_prompt(part.part_name()),
            kind: QuestionKind::Visibility,
            index: i,
            depends_on: vec![existence_id.clone()],
            gate: Gate::SkipIfNo,
        });
        questions.push(Question {
            id: question_id(target, QuestionKind::Match, i),
            prompt: match_prompt(part.part_name(), part.description()),
            kind: QuestionKind::Match,
            index: i,
            depends_on: vec![vis_id],
            gate: Gate::None,
        });
    }
    QuestionPlan::from_questions(
        format!("attributes:{target}"),
        PlanTarget::Attributes {
            class_id: target.to_string(),
            parts: schema.len(),
        },
        questions,
    )
}

/// Visibility and realism per entity, then one question per triplet that
/// depends on both endpoint visibilities.
pub fn plan_relation_eval(query: &RelationQuery) -> QuestionPlan {
    let target = query.query_id();
    let mut questions = Vec::new();
    let vis_ids: Vec<String> = (0..query.entities().len())
        .map(|i| question_id(target, QuestionKind::EntityVisibility, i))
        .collect();
    for (i, e) in query.entities().iter().enumerate() {
        questions.push(Question {
            id: vis_ids[i].clone(),
            prompt: entity_visibility_prompt(e),
            kind: QuestionKind::EntityVisibility,
            index: i,
            depends_on: Vec::new(),
            gate: Gate::ZeroAllIfNo,
        });
    }
    for (i, e) in query.entities().iter().enumerate() {
        questions.push(Question {
            id: question_id(target, QuestionKind::EntityRealism, i),
            prompt: entity_realism_prompt(e),
            kind: QuestionKind::EntityRealism,
            index: i,
            depends_on: vec![vis_ids[i].clone()],
            gate: Gate::None,
        });
    }
    for (t, trip) in query.triplets().iter().enumerate() {
        let ents = query.entities();
        questions.push(Question {
            id: question_id(target, QuestionKind::Relation, t),
            prompt: relation_prompt(&ents[trip.subject], &trip.predicate, &ents[trip.object]),
            kind: QuestionKind::Relation,
            index: t,
            depends_on: vec![vis_ids[trip.subject].clone(), vis_ids[trip.object].clone()],
            gate: Gate::None,
        });
    }
    QuestionPlan::from_questions(
        format!("relations:{target}"),
        PlanTarget::Relations {
            query_id: target.to_string(),
            entities: query.entities().len(),
            triplets: query.triplets().len(),
        },
        questions,
    )
}

/// Parses the question lines of [`QuestionPlan::to_text`]. The target sizes
/// are recovered from the question kinds.
pub fn parse_plan_text(text: &str) -> Result<QuestionPlan, PlanError> {
    let mut plan_id = None;
    let mut questions = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let malformed = |msg: String| PlanError::Malformed { line: i + 1, msg };
        if let Some(id) = line.strip_prefix("# plan: ") {
            plan_id = Some(id.trim().to_string());
            continue;
        }
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.splitn(5, '\t').collect();
        let [id, kind, deps, gate, prompt] = cols[..] else {
            return Err(malformed("expected 5 tab-separated fields".into()));
        };
        let depends_on: Vec<String> = if deps == "-" {
            Vec::new()
        } else {
            deps.split(',').map(str::to_string).collect()
        };
        if let Some(d) = depends_on.iter().find(|d| !seen.contains(*d)) {
            return Err(malformed(format!("dependency {d:?} is not an earlier question")));
        }
        if !seen.insert(id.to_string()) {
            return Err(malformed(format!("duplicate question id {id:?}")));
        }
        let kind: QuestionKind = kind.parse().map_err(malformed)?;
        let index = id.rsplit('/').next().and_then(|s| s.parse().ok()).unwrap_or(0);
        questions.push(Question {
            id: id.to_string(),
            prompt: prompt.to_string(),
            kind,
            index,
            depends_on,
            gate: gate.parse().map_err(malformed)?,
        });
    }
    let plan_id = plan_id.unwrap_or_default();
    let count = |k| questions.iter().filter(|q: &&Question| q.kind == k).count();
    let target_id = plan_id.split_once(':').map(|(_, t)| t.to_string()).unwrap_or_default();
    let target = if count(QuestionKind::Existence) > 0 {
        PlanTarget::Attributes {
            class_id: target_id,
            parts: count(QuestionKind::Visibility),
        }
    } else {
        PlanTarget::Relations {
            query_id: target_id,
            entities: count(QuestionKind::EntityVisibility),
            triplets: count(QuestionKind::Relation),
        }
    };
    Ok(QuestionPlan::from_questions(plan_id, target, questions))
}
