//! Human-annotation aggregation and rank correlation.
//!
//! Spearman's rho is the Pearson correlation of average ranks. Kendall's tau
//! is the tie-corrected tau-b,
//!
//! ```text
//! tau_b = (n_c - n_d) / sqrt((n0 - n1) (n0 - n2))
//! ```
//!
//! with `n0 = n(n-1)/2` and `n1`, `n2` the tied pairs within each vector.
//! Both are `None` when a vector is constant.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;

use thiserror::Error;

use crate::ranking::SplitMix64;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("expected 3 worker labels, got {0}")]
    LabelCount(usize),
    #[error("no annotations for image")]
    EmptyAnnotations,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 observations, got {0}")]
    TooShort(usize),
    #[error("non-finite value at position {0}")]
    NonFinite(usize),
    #[error("harness and ground-truth image sets are disjoint")]
    Disjoint,
    #[error("annotation csv: {0}")]
    Csv(String),
}

/// True iff at least two of the three labels are true.
pub fn majority_vote(labels: &[bool]) -> Result<bool, StatsError> {
    if labels.len() != 3 {
        return Err(StatsError::LabelCount(labels.len()));
    }
    Ok(labels.iter().filter(|&&l| l).count() >= 2)
}

/// Three worker labels for one question about one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HumanAnnotation {
    pub image_ref: String,
    pub question_id: String,
    pub labels: [bool; 3],
}

/// Fraction of questions whose majority label is positive.
pub fn ground_truth_score(annotations: &[HumanAnnotation]) -> Result<f64, StatsError> {
    if annotations.is_empty() {
        return Err(StatsError::EmptyAnnotations);
    }
    let mut positive = 0usize;
    for a in annotations {
        positive += usize::from(majority_vote(&a.labels)?);
    }
    Ok(positive as f64 / annotations.len() as f64)
}

/// Ground-truth score of every annotated image.
pub fn ground_truth_scores(annotations: &[HumanAnnotation]) -> Result<BTreeMap<String, f64>, StatsError> {
    let mut by_image: BTreeMap<&str, Vec<HumanAnnotation>> = BTreeMap::new();
    for a in annotations {
        by_image.entry(&a.image_ref).or_default().push(a.clone());
    }
    by_image
        .into_iter()
        .map(|(k, v)| Ok((k.to_string(), ground_truth_score(&v)?)))
        .collect()
}

fn parse_label(s: &str) -> Option<bool> {
    match s.trim().to_ascii_lowercase().as_str() {
        "yes" | "y" | "1" | "true" => Some(true),
        "no" | "n" | "0" | "false" => Some(false),
        _ => None,
    }
}

/// Reads `image_ref,question_id,worker1,worker2,worker3` CSV with yes/no cells.
pub fn read_annotations<R: Read>(input: R) -> Result<Vec<HumanAnnotation>, StatsError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut out = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| StatsError::Csv(e.to_string()))?;
        if rec.len() != 5 {
            return Err(StatsError::LabelCount(rec.len().saturating_sub(2)));
        }
        let mut labels = [false; 3];
        for (w, label) in labels.iter_mut().enumerate() {
            *label = parse_label(&rec[2 + w])
                .ok_or_else(|| StatsError::Csv(format!("line {}: bad label {:?}", n + 2, &rec[2 + w])))?;
        }
        out.push(HumanAnnotation {
            image_ref: rec[0].to_string(),
            question_id: rec[1].to_string(),
            labels,
        });
    }
    Ok(out)
}

fn validate(x: &[f64], y: &[f64]) -> Result<(), StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(StatsError::TooShort(x.len()));
    }
    if let Some(i) = x.iter().chain(y).position(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite(i % x.len()));
    }
    Ok(())
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    // + 0.0 folds -0.0 into 0.0 so the two tie
    order.sort_by(|&a, &b| (values[a] + 0.0).total_cmp(&(values[b] + 0.0)));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho with average ranks for ties.
pub fn spearman_rho(x: &[f64], y: &[f64]) -> Result<Option<f64>, StatsError> {
    validate(x, y)?;
    Ok(pearson(&average_ranks(x), &average_ranks(y)))
}

fn tied_pairs<T: PartialEq>(sorted: &[T]) -> u64 {
    let mut total = 0u64;
    let mut run = 1u64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            total += run * (run - 1) / 2;
            run = 1;
        }
    }
    total + run * (run - 1) / 2
}

/// Sorts `v` ascending, returning the number of strict inversions.
fn merge_count(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_count(&mut v[..mid], &mut buf[..mid]) + merge_count(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[i] <= v[j] {
            buf[k] = v[i];
            i += 1;
        } else {
            buf[k] = v[j];
            swaps += (mid - i) as u64;
            j += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    let k = k + mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    swaps
}

/// Kendall's tau-b in O(n log n) (Knight's algorithm).
pub fn kendall_tau(x: &[f64], y: &[f64]) -> Result<Option<f64>, StatsError> {
    validate(x, y)?;
    let n = x.len() as u64;
    let mut pairs: Vec<(f64, f64)> = x.iter().zip(y).map(|(a, b)| (a + 0.0, b + 0.0)).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let n1 = tied_pairs(&xs);
    let n3 = tied_pairs(&pairs);

    let mut ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let mut buf = vec![0.0; ys.len()];
    let discordant = merge_count(&mut ys, &mut buf);
    let n2 = tied_pairs(&ys);

    let n0 = n * (n - 1) / 2;
    if n0 == n1 || n0 == n2 {
        return Ok(None);
    }
    let diff = n0 as i128 - n1 as i128 - n2 as i128 + n3 as i128 - 2 * discordant as i128;
    let denom = ((n0 - n1) as f64 * (n0 - n2) as f64).sqrt();
    Ok(Some((diff as f64 / denom).clamp(-1.0, 1.0)))
}

/// Correlation of one method's scores with ground truth on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationRow {
    pub method: String,
    pub dataset: String,
    pub n: usize,
    pub rho: Option<f64>,
    pub tau: Option<f64>,
    /// Harness images without ground truth, and vice versa.
    pub unmatched: (usize, usize),
}

/// Joins scores on image ref and computes both statistics. When more than
/// `sample_size` images match, a seeded sample of that size is used.
pub fn correlation_report(
    method: &str,
    dataset: &str,
    harness: &BTreeMap<String, f64>,
    truth: &BTreeMap<String, f64>,
    sample_size: Option<usize>,
    seed: u64,
) -> Result<CorrelationRow, StatsError> {
    let common: Vec<&String> = harness.keys().filter(|k| truth.contains_key(*k)).collect();
    if common.is_empty() {
        return Err(StatsError::Disjoint);
    }
    let chosen: Vec<&String> = match sample_size {
        Some(s) if s < common.len() => {
            let mut idx = SplitMix64::new(seed).sample_indices(common.len(), s);
            idx.sort_unstable();
            idx.into_iter().map(|i| common[i]).collect()
        }
        _ => common.clone(),
    };
    let x: Vec<f64> = chosen.iter().map(|k| harness[*k]).collect();
    let y: Vec<f64> = chosen.iter().map(|k| truth[*k]).collect();
    Ok(CorrelationRow {
        method: method.to_string(),
        dataset: dataset.to_string(),
        n: chosen.len(),
        rho: spearman_rho(&x, &y)?,
        tau: kendall_tau(&x, &y)?,
        unmatched: (harness.len() - common.len(), truth.len() - common.len()),
    })
}

fn fmt_coef(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}"))
}

/// CSV with one line per (method, dataset).
pub fn render_correlation_csv(rows: &[CorrelationRow]) -> String {
    let mut out = String::from("method,dataset,n,spearman_rho,kendall_tau\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.method, r.dataset, r.n, fmt_coef(r.rho), fmt_coef(r.tau));
    }
    out
}

/// Aligned text table: one line per method, a rho/tau column pair per
/// dataset. Methods and datasets keep first-appearance order.
pub fn render_correlation_table(rows: &[CorrelationRow]) -> String {
    let mut methods: Vec<&str> = Vec::new();
    let mut datasets: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
        if !datasets.contains(&r.dataset.as_str()) {
            datasets.push(&r.dataset);
        }
    }
    let cell = 9;
    let mw = methods.iter().map(|m| m.len()).chain([6]).max().unwrap_or(6);
    let dw = datasets.iter().map(|d| d.len()).max().unwrap_or(0).max(2 * cell + 1);
    let mut out = format!("{:<mw$}", "Method");
    for d in &datasets {
        let _ = write!(out, " | {d:<dw$}");
    }
    out = out.trim_end().to_string();
    out.push('\n');
    let _ = write!(out, "{:<mw$}", "");
    for _ in &datasets {
        let _ = write!(out, " | {:<cell$} {:<w$}", "rho", "tau", w = dw - cell - 1);
    }
    out = out.trim_end().to_string();
    out.push('\n');
    for m in &methods {
        let mut line = format!("{m:<mw$}");
        for d in &datasets {
            let r = rows.iter().find(|r| r.method == *m && r.dataset == *d);
            let (rho, tau) = r.map_or(("-".to_string(), "-".to_string()), |r| (fmt_coef(r.rho), fmt_coef(r.tau)));
            let _ = write!(line, " | {rho:<cell$} {tau:<w$}", w = dw - cell - 1);
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}
