//! Attribute schemas and relation queries.
//!
//! An [`AttributeSchema`] lists the `(part, description)` pairs that drive the
//! attribute questions for one class. A [`RelationQuery`] lists entities and
//! subject/predicate/object triplets that drive the relation questions.
//!
//! Both have a line-oriented text form:
//!
//! ```text
//! class_id: ring_tailed_lemur
//! class_name: ring-tailed lemur
//! category: animal
//! part: tail | desc: long and ringed
//! part: eyes | desc: orange
//! ```
//!
//! ```text
//! query_id: person_carrying_bed
//! entities: person, bed
//! triplet: 0 | carrying | 1
//! ```

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

/// File extension for schema documents stored in a schema directory.
pub const SCHEMA_EXT: &str = "schema";
/// File extension for relation query documents.
pub const QUERY_EXT: &str = "query";

#[derive(Debug, Error, PartialEq)]
pub enum SchemaError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: duplicate part name {name:?}")]
    DuplicatePart { line: usize, name: String },
    #[error("schema {class_id:?} has no parts")]
    EmptyParts { class_id: String },
    #[error("missing header field {0:?}")]
    MissingHeader(&'static str),
    #[error("invalid relation query: {0}")]
    InvalidQuery(String),
    #[error("invalid annotation table: {0}")]
    InvalidTable(String),
    #[error("commonality threshold must be in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error("no annotation column reaches the commonality threshold {threshold} for class {class_id:?}")]
    NoCommonColumns { class_id: String, threshold: f64 },
    #[error("description text is empty")]
    EmptyDescription,
    #[error("language model output could not be parsed as a schema after a reformat retry: {0}")]
    Unparseable(Box<SchemaError>),
    #[error("language model backend failed: {0}")]
    Llm(String),
    #[error("io error on {path}: {msg}")]
    Io { path: PathBuf, msg: String },
}

/// Coarse category of a class, used to phrase the existence check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CategoryHint {
    Animal,
    Plant,
    Fungus,
    Other,
}

impl CategoryHint {
    pub fn as_str(self) -> &'static str {
        match self {
            CategoryHint::Animal => "animal",
            CategoryHint::Plant => "plant",
            CategoryHint::Fungus => "fungus",
            CategoryHint::Other => "other",
        }
    }
}

impl fmt::Display for CategoryHint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CategoryHint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "animal" => Ok(CategoryHint::Animal),
            "plant" => Ok(CategoryHint::Plant),
            "fungus" | "fungi" => Ok(CategoryHint::Fungus),
            "other" => Ok(CategoryHint::Other),
            other => Err(format!("unknown category {other:?}")),
        }
    }
}

/// One `(part, description)` pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributePart {
    part_name: String,
    description: String,
}

impl AttributePart {
    pub fn new(part_name: impl Into<String>, description: impl Into<String>) -> Result<Self, String> {
        let part_name = part_name.into().trim().to_string();
        let description = description.into().trim().to_string();
        if part_name.is_empty() {
            return Err("part name is empty".into());
        }
        if description.is_empty() {
            return Err(format!("description of part {part_name:?} is empty"));
        }
        for s in [&part_name, &description] {
            if s.contains('\n') || s.contains('|') {
                return Err(format!("{s:?} contains a line break or '|'"));
            }
        }
        Ok(AttributePart { part_name, description })
    }

    pub fn part_name(&self) -> &str {
        &self.part_name
    }

    pub fn description(&self) -> &str {
        &self.description
    }
}

/// The attribute schema of one class. Always has at least one part and
/// pairwise distinct part names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeSchema {
    class_id: String,
    class_name: String,
    category: CategoryHint,
    parts: Vec<AttributePart>,
}

impl AttributeSchema {
    pub fn new(
        class_id: impl Into<String>,
        class_name: impl Into<String>,
        category: CategoryHint,
        parts: Vec<AttributePart>,
    ) -> Result<Self, SchemaError> {
        let class_id = class_id.into().trim().to_string();
        let class_name = class_name.into().trim().to_string();
        if class_id.is_empty() {
            return Err(SchemaError::MissingHeader("class_id"));
        }
        if class_name.is_empty() {
            return Err(SchemaError::MissingHeader("class_name"));
        }
        if parts.is_empty() {
            return Err(SchemaError::EmptyParts { class_id });
        }
        let mut seen = HashSet::new();
        for (i, p) in parts.iter().enumerate() {
            if !seen.insert(p.part_name.as_str()) {
                return Err(SchemaError::DuplicatePart {
                    line: i + 1,
                    name: p.part_name.clone(),
                });
            }
        }
        Ok(AttributeSchema {
            class_id,
            class_name,
            category,
            parts,
        })
    }

    pub fn class_id(&self) -> &str {
        &self.class_id
    }

    pub fn class_name(&self) -> &str {
        &self.class_name
    }

    pub fn category(&self) -> CategoryHint {
        self.category
    }

    pub fn parts(&self) -> &[AttributePart] {
        &self.parts
    }

    /// Number of attributes, `N`.
    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    /// Renders the schema document. `parse_schema` of the output yields `self`.
    pub fn to_document(&self) -> String {
        let mut out = format!(
            "class_id: {}\nclass_name: {}\ncategory: {}\n",
            self.class_id, self.class_name, self.category
        );
        for p in &self.parts {
            out.push_str(&format!("part: {} | desc: {}\n", p.part_name, p.description));
        }
        out
    }
}

fn split_key(line: &str) -> Option<(&str, &str)> {
    let (k, v) = line.split_once(':')?;
    Some((k.trim(), v.trim()))
}

/// Parses a schema document.
pub fn parse_schema(text: &str) -> Result<AttributeSchema, SchemaError> {
    let mut class_id = None;
    let mut class_name = None;
    let mut category = None;
    let mut parts: Vec<AttributePart> = Vec::new();
    let mut names: HashSet<String> = HashSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |msg: String| SchemaError::Malformed { line: line_no, msg };
        let (key, value) = split_key(line).ok_or_else(|| malformed(format!("expected `key: value`, got {line:?}")))?;
        match key {
            "class_id" => class_id = Some(value.to_string()),
            "class_name" => class_name = Some(value.to_string()),
            "category" => category = Some(value.parse::<CategoryHint>().map_err(malformed)?),
            "part" => {
                let (name, rest) = value
                    .split_once('|')
                    .ok_or_else(|| malformed("part line lacks `| desc:`".into()))?;
                let (dk, desc) =
                    split_key(rest).ok_or_else(|| malformed("part line lacks `desc:`".into()))?;
                if dk != "desc" {
                    return Err(malformed(format!("expected `desc:`, got {dk:?}")));
                }
                let part = AttributePart::new(name, desc).map_err(malformed)?;
                if !names.insert(part.part_name.clone()) {
                    return Err(SchemaError::DuplicatePart {
                        line: line_no,
                        name: part.part_name,
                    });
                }
                parts.push(part);
            }
            other => return Err(malformed(format!("unknown key {other:?}"))),
        }
    }

    let class_id = class_id.ok_or(SchemaError::MissingHeader("class_id"))?;
    let class_name = class_name.ok_or(SchemaError::MissingHeader("class_name"))?;
    let category = category.ok_or(SchemaError::MissingHeader("category"))?;
    AttributeSchema::new(class_id, class_name, category, parts)
}

/// Parses schema bytes (UTF-8).
pub fn parse_schema_file(bytes: &[u8]) -> Result<AttributeSchema, SchemaError> {
    let text = std::str::from_utf8(bytes).map_err(|e| SchemaError::Malformed {
        line: 0,
        msg: format!("not UTF-8: {e}"),
    })?;
    parse_schema(text)
}

/// Subject/predicate/object over entity indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triplet {
    pub subject: usize,
    pub predicate: String,
    pub object: usize,
}

/// Entities plus the relation triplets between them.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationQuery {
    query_id: String,
    entities: Vec<String>,
    triplets: Vec<Triplet>,
}

impl RelationQuery {
    pub fn new(
        query_id: impl Into<String>,
        entities: Vec<String>,
        triplets: Vec<Triplet>,
    ) -> Result<Self, SchemaError> {
        let query_id = query_id.into().trim().to_string();
        let bad = |m: String| Err(SchemaError::InvalidQuery(m));
        if query_id.is_empty() {
            return bad("query id is empty".into());
        }
        let entities: Vec<String> = entities.into_iter().map(|e| e.trim().to_string()).collect();
        if entities.is_empty() {
            return bad("no entities".into());
        }
        if let Some(e) = entities.iter().find(|e| e.is_empty() || e.contains(',') || e.contains('\n')) {
            return bad(format!("invalid entity name {e:?}"));
        }
        if triplets.is_empty() {
            return bad("no triplets".into());
        }
        for t in &triplets {
            if t.subject >= entities.len() || t.object >= entities.len() {
                return bad(format!(
                    "triplet ({}, {:?}, {}) index out of range for {} entities",
                    t.subject,
                    t.predicate,
                    t.object,
                    entities.len()
                ));
            }
            if t.subject == t.object {
                return bad(format!("triplet subject and object are both entity {}", t.subject));
            }
            let p = t.predicate.trim();
            if p.is_empty() || p.contains('|') || p.contains('\n') {
                return bad(format!("invalid predicate {:?}", t.predicate));
            }
        }
        let triplets = triplets
            .into_iter()
            .map(|t| Triplet {
                predicate: t.predicate.trim().to_string(),
                ..t
            })
            .collect();
        Ok(RelationQuery {
            query_id,
            entities,
            triplets,
        })
    }

    pub fn query_id(&self) -> &str {
        &self.query_id
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn to_document(&self) -> String {
        let mut out = format!("query_id: {}\nentities: {}\n", self.query_id, self.entities.join(", "));
        for t in &self.triplets {
            out.push_str(&format!("triplet: {} | {} | {}\n", t.subject, t.predicate, t.object));
        }
        out
    }
}

/// Parses a relation query document. `default_id` is used when the document
/// has no `query_id:` line (typically the file stem).
pub fn parse_relation_query(text: &str, default_id: Option<&str>) -> Result<RelationQuery, SchemaError> {
    let mut query_id = default_id.map(str::to_string);
    let mut entities = None;
    let mut triplets = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let malformed = |msg: String| SchemaError::Malformed { line: line_no, msg };
        let (key, value) = split_key(line).ok_or_else(|| malformed(format!("expected `key: value`, got {line:?}")))?;
        match key {
            "query_id" => query_id = Some(value.to_string()),
            "entities" => {
                entities = Some(value.split(',').map(|e| e.trim().to_string()).collect::<Vec<_>>());
            }
            "triplet" => {
                let fields: Vec<&str> = value.split('|').map(str::trim).collect();
                let [s, p, o] = fields[..] else {
                    return Err(malformed("triplet needs `<i> | <predicate> | <j>`".into()));
                };
                let index = |f: &str| {
                    f.parse::<usize>()
                        .map_err(|_| malformed(format!("bad entity index {f:?}")))
                };
                triplets.push(Triplet {
                    subject: index(s)?,
                    predicate: p.to_string(),
                    object: index(o)?,
                });
            }
            other => return Err(malformed(format!("unknown key {other:?}"))),
        }
    }
    let query_id = query_id.ok_or(SchemaError::MissingHeader("query_id"))?;
    let entities = entities.ok_or(SchemaError::MissingHeader("entities"))?;
    RelationQuery::new(query_id, entities, triplets)
}

fn io_err(path: &Path, e: std::io::Error) -> SchemaError {
    SchemaError::Io {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Path of the schema document for `class_id` inside `dir`.
pub fn schema_path(dir: &Path, class_id: &str) -> PathBuf {
    dir.join(format!("{class_id}.{SCHEMA_EXT}"))
}

/// Path of the relation query document for `query_id` inside `dir`.
pub fn query_path(dir: &Path, query_id: &str) -> PathBuf {
    dir.join(format!("{query_id}.{QUERY_EXT}"))
}

pub fn load_schema(dir: &Path, class_id: &str) -> Result<AttributeSchema, SchemaError> {
    let path = schema_path(dir, class_id);
    let bytes = fs::read(&path).map_err(|e| io_err(&path, e))?;
    parse_schema_file(&bytes)
}

pub fn load_query(dir: &Path, query_id: &str) -> Result<RelationQuery, SchemaError> {
    let path = query_path(dir, query_id);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    parse_relation_query(&text, Some(query_id))
}

/// Writes the schema to `dir/<class_id>.schema`, returning the path.
pub fn store_schema(dir: &Path, schema: &AttributeSchema) -> Result<PathBuf, SchemaError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = schema_path(dir, schema.class_id());
    fs::write(&path, schema.to_document()).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

/// A text-completion backend used to extract schemas from prose.
pub trait TextLlm: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, String>;
}

/// Instruction appended on the single reformat retry.
pub const REFORMAT_INSTRUCTION: &str = "Emit only the schema document, with no other text.";

/// Builds the extraction prompt sent to the language model.
pub fn extraction_prompt(class_id: &str, class_name: &str, description_text: &str) -> String {
    format!(
        "Extract the major visible parts of the {class_name} and summarize the appearance of each \
part from the description below. Respond with a schema document in exactly this format:\n\
class_id: {class_id}\n\
class_name: {class_name}\n\
category: <animal|plant|fungus|other>\n\
part: <part name> | desc: <short appearance description>\n\
(one `part:` line per part, each part name unique)\n\n\
Description:\n{description_text}\n"
    )
}

fn strip_fences(text: &str) -> String {
    text.lines()
        .filter(|l| !l.trim_start().starts_with("```"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Lowercase, `_`-separated identifier derived from a display name.
pub fn slugify(name: &str) -> String {
    let mut out = String::new();
    for c in name.trim().chars() {
        if c.is_alphanumeric() {
            out.extend(c.to_lowercase());
        } else if !out.ends_with('_') && !out.is_empty() {
            out.push('_');
        }
    }
    while out.ends_with('_') {
        out.pop();
    }
    out
}

/// Asks `llm` to summarize `description_text` into a schema for `class_name`.
///
/// The class id is the slug of `class_name`; the identity headers in the
/// model's reply are overwritten with the requested ones.
pub fn build_schema_from_description(
    class_name: &str,
    description_text: &str,
    llm: &dyn TextLlm,
) -> Result<AttributeSchema, SchemaError> {
    if description_text.trim().is_empty() {
        return Err(SchemaError::EmptyDescription);
    }
    let class_id = slugify(class_name);
    let prompt = extraction_prompt(&class_id, class_name, description_text);

    let attempt = |prompt: &str| -> Result<Result<AttributeSchema, SchemaError>, SchemaError> {
        let reply = llm.complete(prompt).map_err(SchemaError::Llm)?;
        Ok(parse_schema(&strip_fences(&reply)))
    };

    let parsed = match attempt(&prompt)? {
        Ok(s) => s,
        Err(_) => {
            let retry = format!("{prompt}\n{REFORMAT_INSTRUCTION}");
            attempt(&retry)?.map_err(|e| SchemaError::Unparseable(Box::new(e)))?
        }
    };
    AttributeSchema::new(class_id, class_name, parsed.category(), parsed.parts().to_vec())
}

/// Per-image binary attribute annotations.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationTable {
    columns: Vec<String>,
    image_ids: Vec<String>,
    rows: Vec<Vec<bool>>,
}

impl AnnotationTable {
    pub fn new(columns: Vec<String>, image_ids: Vec<String>, rows: Vec<Vec<bool>>) -> Result<Self, SchemaError> {
        let mut seen = HashSet::new();
        for c in &columns {
            if !seen.insert(c.as_str()) {
                return Err(SchemaError::InvalidTable(format!("duplicate column {c:?}")));
            }
        }
        if image_ids.len() != rows.len() {
            return Err(SchemaError::InvalidTable("image id count differs from row count".into()));
        }
        if let Some((i, _)) = rows.iter().enumerate().find(|(_, r)| r.len() != columns.len()) {
            return Err(SchemaError::InvalidTable(format!("row {i} has the wrong number of cells")));
        }
        Ok(AnnotationTable {
            columns,
            image_ids,
            rows,
        })
    }

    /// Reads CSV with an `image_id` first column followed by named 0/1 columns.
    pub fn from_csv(reader: impl std::io::Read) -> Result<Self, SchemaError> {
        let bad = |m: String| SchemaError::InvalidTable(m);
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(|e| bad(e.to_string()))?.clone();
        let mut it = headers.iter();
        if it.next() != Some("image_id") {
            return Err(bad("first column must be `image_id`".into()));
        }
        let columns: Vec<String> = it.map(str::to_string).collect();
        let mut image_ids = Vec::new();
        let mut rows = Vec::new();
        for (r, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let mut cells = rec.iter();
            image_ids.push(cells.next().unwrap_or_default().to_string());
            let row = cells
                .enumerate()
                .map(|(c, v)| match v {
                    "0" => Ok(false),
                    "1" => Ok(true),
                    other => Err(bad(format!("row {}, column {}: cell {other:?} is not 0/1", r + 1, c + 1))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(row);
        }
        AnnotationTable::new(columns, image_ids, rows)
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<bool>] {
        &self.rows
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    /// Fraction of rows with the column set.
    pub fn column_mean(&self, col: usize) -> f64 {
        let hits = self.rows.iter().filter(|r| r[col]).count();
        hits as f64 / self.rows.len() as f64
    }
}

/// Splits an annotation column name into `(part, description)`.
///
/// `has_wing_color::blue` becomes `("wing color", "blue")`. Names without a
/// `::` separator become `(name, "present")`.
pub fn split_column_name(column: &str) -> (String, String) {
    let clean = |s: &str| s.replace('_', " ").split_whitespace().collect::<Vec<_>>().join(" ");
    match column.split_once("::") {
        Some((part, attr)) => {
            let part = part.strip_prefix("has_").unwrap_or(part);
            (clean(part), clean(attr))
        }
        None => (clean(column.strip_prefix("has_").unwrap_or(column)), "present".to_string()),
    }
}

/// Default commonality threshold: a column must be set on every image.
pub const DEFAULT_COMMONALITY_THRESHOLD: f64 = 1.0;

/// Collects the columns set on at least `commonality_threshold` of the
/// class's images into a schema. Several passing columns that map to the same
/// part are merged into one part whose description joins theirs with "and".
pub fn build_schema_from_annotations(
    class_id: &str,
    class_name: &str,
    category: CategoryHint,
    table: &AnnotationTable,
    commonality_threshold: f64,
) -> Result<AttributeSchema, SchemaError> {
    if !(commonality_threshold > 0.0 && commonality_threshold <= 1.0) {
        return Err(SchemaError::BadThreshold(commonality_threshold));
    }
    if table.rows.is_empty() {
        return Err(SchemaError::InvalidTable("table has no rows".into()));
    }
    let mut parts: Vec<(String, Vec<String>)> = Vec::new();
    for (c, column) in table.columns.iter().enumerate() {
        if table.column_mean(c) < commonality_threshold {
            continue;
        }
        let (part, desc) = split_column_name(column);
        if part.is_empty() || desc.is_empty() {
            continue;
        }
        match parts.iter_mut().find(|(p, _)| *p == part) {
            Some((_, descs)) => descs.push(desc),
            None => parts.push((part, vec![desc])),
        }
    }
    if parts.is_empty() {
        return Err(SchemaError::NoCommonColumns {
            class_id: class_id.to_string(),
            threshold: commonality_threshold,
        });
    }
    let parts = parts
        .into_iter()
        .map(|(p, d)| {
            // dedup while keeping column order
            let mut seen = BTreeSet::new();
            let d: Vec<String> = d.into_iter().filter(|x| seen.insert(x.clone())).collect();
            AttributePart::new(p, d.join(" and ")).map_err(SchemaError::InvalidTable)
        })
        .collect::<Result<Vec<_>, _>>()?;
    AttributeSchema::new(class_id, class_name, category, parts)
}
