//! Ranking candidate pools and materializing high/low/random splits.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::scoring::ScoreCard;

#[derive(Debug, Error, PartialEq)]
pub enum RankError {
    #[error("empty pool for class {0:?}")]
    EmptyPool(String),
    #[error("scorecards from several classes in one pool: {0:?} and {1:?}")]
    MixedClasses(String, String),
    #[error("k must be at least 1")]
    ZeroK,
    #[error("non-finite score for image {0:?}")]
    NonFinite(String),
    #[error("manifest line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("io error on {path}: {msg}")]
    Io { path: PathBuf, msg: String },
}

/// Name of the generator recorded in manifest headers.
pub const GENERATOR_NAME: &str = "splitmix64";

/// SplitMix64 (Steele, Lea and Flood), bit-exact:
///
/// ```text
/// state += 0x9E3779B97F4A7C15
/// z = state
/// z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
/// z = (z ^ (z >> 27)) * 0x94D049BB133111EB
/// return z ^ (z >> 31)
/// ```
///
/// All arithmetic wraps modulo 2^64.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform-ish index in `0..n` as `next_u64() % n`.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// `k` distinct indices from `0..n` by partial Fisher-Yates:
    /// for `i` in `0..k`, swap position `i` with `i + below(n - i)`.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let k = k.min(n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }
}

/// 64-bit FNV-1a of a string.
pub fn fnv1a64(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Per-class generator seed: `seed ^ fnv1a64(class_id)`.
pub fn class_seed(seed: u64, class_id: &str) -> u64 {
    seed ^ fnv1a64(class_id)
}

/// Which score orders the pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankMode {
    /// The task's dimension score alone (`S_att` or normalized `S_rel`).
    AttributeOnly,
    /// Dimension score times style score.
    Combined,
}

impl RankMode {
    pub fn as_str(self) -> &'static str {
        match self {
            RankMode::AttributeOnly => "attribute_only",
            RankMode::Combined => "combined",
        }
    }

    pub fn key(self, card: &ScoreCard) -> Option<f64> {
        match self {
            RankMode::AttributeOnly => card.dimension_score(),
            RankMode::Combined => card.combined,
        }
    }
}

impl fmt::Display for RankMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RankMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "attribute_only" => Ok(RankMode::AttributeOnly),
            "combined" => Ok(RankMode::Combined),
            other => Err(format!("unknown rank mode {other:?}")),
        }
    }
}

/// Descending by score, ties by ascending image ref.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedPool {
    pub class_id: String,
    pub members: Vec<(String, f64)>,
}

impl RankedPool {
    pub fn from_scores(class_id: impl Into<String>, scores: Vec<(String, f64)>) -> Result<Self, RankError> {
        let class_id = class_id.into();
        if scores.is_empty() {
            return Err(RankError::EmptyPool(class_id));
        }
        if let Some((r, _)) = scores.iter().find(|(_, s)| !s.is_finite()) {
            return Err(RankError::NonFinite(r.clone()));
        }
        let mut members = scores;
        members.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(RankedPool { class_id, members })
    }
}

/// Ranks one class's scorecards. Cards without a key for `mode` (failed
/// images, or no style score in combined mode) are left out.
pub fn rank_pool(cards: &[ScoreCard], mode: RankMode) -> Result<RankedPool, RankError> {
    let class_id = cards.first().map(|c| c.group_id.clone()).unwrap_or_default();
    if let Some(other) = cards.iter().find(|c| c.group_id != class_id) {
        return Err(RankError::MixedClasses(class_id, other.group_id.clone()));
    }
    let scores = cards
        .iter()
        .filter_map(|c| mode.key(c).map(|k| (c.image_ref.clone(), k)))
        .collect();
    RankedPool::from_scores(class_id, scores)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassSplits {
    pub class_id: String,
    pub high: Vec<(String, f64)>,
    pub low: Vec<(String, f64)>,
    pub random: Vec<(String, f64)>,
    pub flags: Vec<String>,
}

/// Top `k`, bottom `k`, and `k` seeded draws without replacement from the
/// whole pool (the random split may overlap the other two).
pub fn make_splits(pool: &RankedPool, k: usize, seed: u64) -> Result<ClassSplits, RankError> {
    if k == 0 {
        return Err(RankError::ZeroK);
    }
    let n = pool.members.len();
    if n == 0 {
        return Err(RankError::EmptyPool(pool.class_id.clone()));
    }
    let take = k.min(n);
    let high = pool.members[..take].to_vec();
    let low = pool.members[n - take..].to_vec();
    let mut rng = SplitMix64::new(class_seed(seed, &pool.class_id));
    let random = rng
        .sample_indices(n, take)
        .into_iter()
        .map(|i| pool.members[i].clone())
        .collect();
    let mut flags = Vec::new();
    if n < k {
        flags.push(format!("pool of {n} is smaller than k={k}; splits truncated"));
    }
    if n < 2 * k {
        flags.push(format!("pool of {n} is smaller than 2k={}; high and low overlap", 2 * k));
    }
    Ok(ClassSplits {
        class_id: pool.class_id.clone(),
        high,
        low,
        random,
        flags,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankManifest {
    pub dataset_id: String,
    pub k: usize,
    pub seed: u64,
    pub mode: RankMode,
    pub classes: Vec<ClassSplits>,
}

impl RankManifest {
    /// Groups scorecards by class, ranks, and splits each class. Classes
    /// are emitted in ascending id order.
    pub fn build(
        dataset_id: &str,
        cards: &[ScoreCard],
        mode: RankMode,
        k: usize,
        seed: u64,
    ) -> Result<Self, RankError> {
        let mut groups: BTreeMap<&str, Vec<ScoreCard>> = BTreeMap::new();
        for c in cards {
            groups.entry(&c.group_id).or_default().push(c.clone());
        }
        let classes = groups
            .values()
            .map(|g| make_splits(&rank_pool(g, mode)?, k, seed))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(RankManifest {
            dataset_id: dataset_id.to_string(),
            k,
            seed,
            mode,
            classes,
        })
    }

    pub fn is_flagged(&self) -> bool {
        self.classes.iter().any(|c| !c.flags.is_empty())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# dataset_id: {}\n# k: {}\n# seed: {}\n# mode: {}\n# generator: {GENERATOR_NAME}\n",
            self.dataset_id, self.k, self.seed, self.mode
        );
        for c in &self.classes {
            for f in &c.flags {
                out.push_str(&format!("# flag: {}: {f}\n", c.class_id));
            }
        }
        for c in &self.classes {
            for (split, members) in [("high", &c.high), ("low", &c.low), ("random", &c.random)] {
                for (r, s) in members {
                    out.push_str(&format!("{}\t{split}\t{r}\t{s:.6}\n", c.class_id));
                }
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, RankError> {
        let mut header: HashMap<&str, &str> = HashMap::new();
        let mut flags: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut classes: Vec<ClassSplits> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let malformed = |msg: String| RankError::Malformed { line: i + 1, msg };
            if let Some(h) = line.strip_prefix("# ") {
                let (k, v) = h.split_once(": ").ok_or_else(|| malformed("bad header".into()))?;
                if k == "flag" {
                    let (c, f) = v.split_once(": ").ok_or_else(|| malformed("bad flag".into()))?;
                    flags.entry(c.to_string()).or_default().push(f.to_string());
                } else {
                    header.insert(k, v);
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [class, split, image, score] = cols[..] else {
                return Err(malformed("expected 4 tab-separated fields".into()));
            };
            let score: f64 = score.parse().map_err(|_| malformed(format!("bad score {score:?}")))?;
            if classes.last().map(|c| c.class_id.as_str()) != Some(class) {
                classes.push(ClassSplits {
                    class_id: class.to_string(),
                    high: Vec::new(),
                    low: Vec::new(),
                    random: Vec::new(),
                    flags: Vec::new(),
                });
            }
            let c = classes.last_mut().expect("pushed above");
            let entry = (image.to_string(), score);
            match split {
                "high" => c.high.push(entry),
                "low" => c.low.push(entry),
                "random" => c.random.push(entry),
                other => return Err(malformed(format!("unknown split {other:?}"))),
            }
        }
        for c in &mut classes {
            c.flags = flags.remove(&c.class_id).unwrap_or_default();
        }
        let need = |k: &str| {
            header.get(k).copied().ok_or(RankError::Malformed {
                line: 0,
                msg: format!("missing header {k}"),
            })
        };
        let bad = |k: &str| RankError::Malformed {
            line: 0,
            msg: format!("bad header {k}"),
        };
        Ok(RankManifest {
            dataset_id: need("dataset_id")?.to_string(),
            k: need("k")?.parse().map_err(|_| bad("k"))?,
            seed: need("seed")?.parse().map_err(|_| bad("seed"))?,
            mode: need("mode")?.parse().map_err(|_| bad("mode"))?,
            classes,
        })
    }
}

/// Caption attached to each exported image.
pub fn caption(class_name: &str) -> String {
    format!("a photo of a {class_name}")
}

/// Materializes each split as `out_dir/<split>/` holding one link (or copy)
/// per image plus `captions.tsv` lines `image_ref<TAB>a photo of a {CLASS}`.
///
/// `paths` maps image refs to files; `class_names` maps class ids to display
/// names (the class id is used when absent).
pub fn export_splits(
    manifest: &RankManifest,
    paths: &HashMap<String, PathBuf>,
    class_names: &HashMap<String, String>,
    out_dir: &Path,
    copy: bool,
) -> Result<usize, RankError> {
    let io = |p: &Path, e: std::io::Error| RankError::Io {
        path: p.to_path_buf(),
        msg: e.to_string(),
    };
    let mut written = 0;
    for split in ["high", "low", "random"] {
        let dir = out_dir.join(split);
        fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        let mut captions = String::new();
        for c in &manifest.classes {
            let members = match split {
                "high" => &c.high,
                "low" => &c.low,
                _ => &c.random,
            };
            let name = class_names.get(&c.class_id).unwrap_or(&c.class_id);
            for (image_ref, _) in members {
                let src = paths.get(image_ref).ok_or_else(|| RankError::Io {
                    path: PathBuf::from(image_ref),
                    msg: "image not in manifest".into(),
                })?;
                let file_name = match src.extension() {
                    Some(ext) => format!("{image_ref}.{}", ext.to_string_lossy()),
                    None => image_ref.clone(),
                };
                let dst = dir.join(&file_name);
                if dst.exists() || dst.is_symlink() {
                    fs::remove_file(&dst).map_err(|e| io(&dst, e))?;
                }
                link_or_copy(src, &dst, copy).map_err(|e| io(&dst, e))?;
                captions.push_str(&format!("{image_ref}\t{}\n", caption(name)));
                written += 1;
            }
        }
        let cap = dir.join("captions.tsv");
        fs::write(&cap, captions).map_err(|e| io(&cap, e))?;
    }
    Ok(written)
}

fn link_or_copy(src: &Path, dst: &Path, copy: bool) -> std::io::Result<()> {
    #[cfg(unix)]
    if !copy {
        let src = fs::canonicalize(src)?;
        return std::os::unix::fs::symlink(src, dst);
    }
    let _ = copy;
    fs::copy(src, dst).map(|_| ())
}
