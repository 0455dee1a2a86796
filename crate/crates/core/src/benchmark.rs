//! Per-model realism benchmark.
//!
//! ```
//! use realism::benchmark::ModelBenchmark;
//!
//! let b = ModelBenchmark::from_dimensions("dall-e-3", Some(0.5475), Some(0.7827), Some(0.2430));
//! assert!((b.average.unwrap() - 0.5244).abs() < 5e-5);
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::scoring::{ScoreCard, Task};

#[derive(Debug, Error, PartialEq)]
pub enum BenchmarkError {
    #[error("model {0:?} has no scored images in any dimension")]
    EmptyGroup(String),
    #[error("no scorecards")]
    NoScorecards,
    #[error("benchmark csv: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBenchmark {
    pub model_id: String,
    pub attribute: Option<f64>,
    pub relationship: Option<f64>,
    pub style: Option<f64>,
    /// Mean of the dimensions that are present.
    pub average: Option<f64>,
    pub flags: Vec<String>,
}

impl ModelBenchmark {
    pub fn from_dimensions(
        model_id: impl Into<String>,
        attribute: Option<f64>,
        relationship: Option<f64>,
        style: Option<f64>,
    ) -> Self {
        let mut flags = Vec::new();
        for (name, v) in [("attribute", attribute), ("relationship", relationship), ("style", style)] {
            if v.is_none() {
                flags.push(format!("absent:{name}"));
            }
        }
        let present: Vec<f64> = [attribute, relationship, style].into_iter().flatten().collect();
        let average = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
        Self {
            model_id: model_id.into(),
            attribute,
            relationship,
            style,
            average,
            flags,
        }
    }

    fn dims(&self) -> [Option<f64>; 4] {
        [self.attribute, self.relationship, self.style, self.average]
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Groups scorecards by model and averages each dimension over the images
/// that carry it. Attribute and relationship means use only cards of the
/// matching task.
pub fn aggregate_benchmark(cards: &[ScoreCard]) -> Result<Vec<ModelBenchmark>, BenchmarkError> {
    if cards.is_empty() {
        return Err(BenchmarkError::NoScorecards);
    }
    let mut groups: BTreeMap<&str, Vec<&ScoreCard>> = BTreeMap::new();
    for c in cards {
        groups.entry(&c.model_id).or_default().push(c);
    }
    groups
        .into_iter()
        .map(|(model, cs)| {
            // sorted summation keeps the result independent of card order
            let sorted = |f: &dyn Fn(&ScoreCard) -> Option<f64>| {
                let mut v: Vec<f64> = cs.iter().filter_map(|c| f(c)).collect();
                v.sort_by(f64::total_cmp);
                mean(v.into_iter())
            };
            let att = sorted(&|c| c.s_att.filter(|_| c.task == Task::Attribute));
            let rel = sorted(&|c| c.s_rel_norm.filter(|_| c.task == Task::Relation));
            let sty = sorted(&|c| c.s_sty);
            if att.is_none() && rel.is_none() && sty.is_none() {
                return Err(BenchmarkError::EmptyGroup(model.to_string()));
            }
            Ok(ModelBenchmark::from_dimensions(model, att, rel, sty))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Text,
}

impl std::str::FromStr for TableFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(Self::Csv),
            "text" => Ok(Self::Text),
            other => Err(format!("unknown table format {other:?}")),
        }
    }
}

const COLUMNS: [&str; 4] = ["attribute", "relationship", "style", "average"];

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn sorted(benchmarks: &[ModelBenchmark]) -> Vec<&ModelBenchmark> {
    let mut rows: Vec<&ModelBenchmark> = benchmarks.iter().collect();
    rows.sort_by(|a, b| {
        let key = |m: &ModelBenchmark| m.average.unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a)).then_with(|| a.model_id.cmp(&b.model_id))
    });
    rows
}

/// Renders models by descending average. Absent dimensions print as `-`.
pub fn render_table(benchmarks: &[ModelBenchmark], format: TableFormat) -> String {
    let rows = sorted(benchmarks);
    let mut out = String::new();
    match format {
        TableFormat::Csv => {
            out.push_str("model_id,attribute,relationship,style,average,flags\n");
            for m in rows {
                let cells: Vec<String> = m.dims().into_iter().map(cell).collect();
                let _ = writeln!(out, "{},{},{}", m.model_id, cells.join(","), m.flags.join(";"));
            }
        }
        TableFormat::Text => {
            let w = rows.iter().map(|m| m.model_id.len()).chain([5]).max().unwrap_or(5);
            let _ = write!(out, "{:<w$}", "Model");
            for c in COLUMNS {
                let _ = write!(out, "  {c:>12}");
            }
            out.push('\n');
            for m in rows {
                let _ = write!(out, "{:<w$}", m.model_id);
                for v in m.dims() {
                    let _ = write!(out, "  {:>12}", cell(v));
                }
                out.push('\n');
            }
        }
    }
    out
}

/// Reads back the CSV rendering. Values carry the 4-decimal rounding.
pub fn parse_benchmark_csv(text: &str) -> Result<Vec<ModelBenchmark>, BenchmarkError> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| BenchmarkError::Parse(e.to_string()))?;
        let num = |i: usize| -> Result<Option<f64>, BenchmarkError> {
            match rec.get(i) {
                Some("-") => Ok(None),
                Some(s) => s.parse().map(Some).map_err(|_| BenchmarkError::Parse(format!("bad number {s:?}"))),
                None => Err(BenchmarkError::Parse("short row".into())),
            }
        };
        out.push(ModelBenchmark {
            model_id: rec[0].to_string(),
            attribute: num(1)?,
            relationship: num(2)?,
            style: num(3)?,
            average: num(4)?,
            flags: rec.get(5).filter(|s| !s.is_empty()).map(|s| s.split(';').map(String::from).collect()).unwrap_or_default(),
        });
    }
    Ok(out)
}
