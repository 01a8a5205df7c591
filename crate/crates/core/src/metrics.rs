//! Completion metrics: next-identifier match, identifier-sequence match,
//! prefix match, compilation rate, plus score@k aggregation and identifier
//! complexity buckets.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::javalex::{self, JavaToken};
use crate::vocab::Vocabulary;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum MetricError {
    #[error("k = {k} outside 1..={n}")]
    KOutOfRange { k: usize, n: usize },
    #[error("binomial coefficient overflow for n = {0}")]
    Overflow(usize),
}

/// 1 when the first Java tokens of both texts agree in kind and text.
pub fn nim(ground_truth: &str, generated: &str) -> u8 {
    match (javalex::lex(ground_truth).first(), javalex::lex(generated).first()) {
        (Some(a), Some(b)) if a.same_as(b) => 1,
        _ => 0,
    }
}

fn common_prefix_len<T>(a: &[T], b: &[T], eq: impl Fn(&T, &T) -> bool) -> usize {
    a.iter().zip(b).take_while(|(x, y)| eq(x, y)).count()
}

/// Longest common prefix of the identifier sequences, over the ground-truth
/// count. Both texts should already be cut at the method close.
pub fn ism(ground_truth: &str, generated: &str) -> f64 {
    let g = javalex::identifiers(ground_truth);
    if g.is_empty() {
        return 1.0;
    }
    let h = javalex::identifiers(generated);
    common_prefix_len(&g, &h, |a, b| a == b) as f64 / g.len() as f64
}

/// Like [`ism`] over full token streams.
pub fn pm(ground_truth: &str, generated: &str) -> f64 {
    let g = javalex::lex(ground_truth);
    if g.is_empty() {
        return 1.0;
    }
    let h = javalex::lex(generated);
    common_prefix_len(&g, &h, JavaToken::same_as) as f64 / g.len() as f64
}

/// Exact binomial coefficient.
pub fn binomial(n: usize, k: usize) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) is divisible by (i + 1) at every step.
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// Correctly rounded sum of finite floats (Shewchuk partials, as in `math.fsum`).
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    let Some(mut k) = partials.len().checked_sub(1) else {
        return 0.0;
    };
    let mut hi = partials[k];
    let mut lo = 0.0;
    while k > 0 {
        let x = hi;
        let y = partials[k - 1];
        k -= 1;
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // Round half-even across the remaining partials.
    if k > 0 && ((lo < 0.0 && partials[k - 1] < 0.0) || (lo > 0.0 && partials[k - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Expected maximum over a uniformly random k-subset of the n trial scores.
/// For 0/1 scores this is pass@k.
pub fn score_at_k(scores: &[f64], k: usize) -> Result<f64, MetricError> {
    let n = scores.len();
    if k == 0 || k > n {
        return Err(MetricError::KOutOfRange { k, n });
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let total = binomial(n, k).ok_or(MetricError::Overflow(n))? as f64;
    let mut terms = Vec::with_capacity(n - k + 1);
    for (i, &s) in sorted.iter().enumerate().take(n - k + 1) {
        let weight = binomial(n - i - 1, k - 1).ok_or(MetricError::Overflow(n))?;
        terms.push(weight as f64 * s);
    }
    Ok(exact_sum(terms) / total)
}

/// Subtoken counter used for identifier complexity.
pub trait SubwordTokenizer: Sync {
    fn count_subtokens(&self, text: &str) -> usize;
}

impl SubwordTokenizer for Vocabulary {
    fn count_subtokens(&self, text: &str) -> usize {
        // Uncoverable bytes count one each.
        let mut count = 0;
        let mut rest = text;
        while !rest.is_empty() {
            match self.tokenize_greedy(rest) {
                Ok(ids) => return count + ids.len(),
                Err(crate::vocab::VocabError::Uncoverable { offset, .. }) => {
                    count += self.tokenize_greedy(&rest[..offset]).map_or(offset, |v| v.len()) + 1;
                    let mut next = offset + 1;
                    while !rest.is_char_boundary(next) {
                        next += 1;
                    }
                    rest = &rest[next..];
                }
                Err(_) => return count + rest.len(),
            }
        }
        count
    }
}

/// Mean subtoken count of `name` across `tokenizers`.
pub fn identifier_complexity(name: &str, tokenizers: &[&dyn SubwordTokenizer]) -> f64 {
    if tokenizers.is_empty() {
        return 0.0;
    }
    let total: usize = tokenizers.iter().map(|t| t.count_subtokens(name)).sum();
    total as f64 / tokenizers.len() as f64
}

/// Half-open complexity range `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityBucket {
    pub lo: f64,
    pub hi: f64,
}

impl ComplexityBucket {
    pub fn label(&self) -> String {
        format!("[{}, {})", self.lo, self.hi)
    }

    pub fn contains(&self, c: f64) -> bool {
        self.lo <= c && c < self.hi
    }
}

pub const COMPLEXITY_BUCKETS: [ComplexityBucket; 4] = [
    ComplexityBucket { lo: 1.0, hi: 2.0 },
    ComplexityBucket { lo: 2.0, hi: 3.0 },
    ComplexityBucket { lo: 3.0, hi: 4.0 },
    ComplexityBucket { lo: 4.0, hi: 18.0 },
];

pub fn bucket_of(complexity: f64) -> Option<ComplexityBucket> {
    COMPLEXITY_BUCKETS.iter().copied().find(|b| b.contains(complexity))
}

/// Per-trial metric values for one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialScores {
    pub case_id: String,
    pub cr: Vec<Option<u8>>,
    pub nim: Vec<u8>,
    pub ism: Vec<f64>,
    pub pm: Vec<f64>,
    /// Complexity of the first ground-truth identifier.
    #[serde(default)]
    pub complexity: Option<f64>,
}

/// Metric name → k → mean score@k over cases.
pub type MetricTable = BTreeMap<String, BTreeMap<usize, f64>>;

pub const METRICS: [&str; 4] = ["CR", "NIM", "ISM", "PM"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketReport {
    pub bucket: String,
    pub cases: usize,
    /// k → NIM score@k; empty when the bucket has no cases.
    pub nim: BTreeMap<usize, f64>,
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| exact_sum(values.iter().copied()) / values.len() as f64)
}

fn as_f64(v: &[u8]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Mean score@k per metric. CR only covers cases where every trial was built.
pub fn aggregate(cases: &[TrialScores], ks: &[usize]) -> Result<MetricTable, MetricError> {
    let mut table = MetricTable::new();
    for &k in ks {
        let mut per_metric: HashMap<&str, Vec<f64>> = HashMap::new();
        for c in cases {
            per_metric.entry("NIM").or_default().push(score_at_k(&as_f64(&c.nim), k)?);
            per_metric.entry("ISM").or_default().push(score_at_k(&c.ism, k)?);
            per_metric.entry("PM").or_default().push(score_at_k(&c.pm, k)?);
            if !c.cr.is_empty() && c.cr.iter().all(Option::is_some) {
                let cr: Vec<f64> = c.cr.iter().map(|v| v.unwrap() as f64).collect();
                per_metric.entry("CR").or_default().push(score_at_k(&cr, k)?);
            }
        }
        for name in METRICS {
            if let Some(m) = per_metric.get(name).and_then(|v| mean(v)) {
                table.entry(name.to_string()).or_default().insert(k, m);
            }
        }
    }
    Ok(table)
}

/// NIM score@k per complexity bucket; all four buckets are always present.
pub fn nim_by_complexity(cases: &[TrialScores], ks: &[usize]) -> Result<Vec<BucketReport>, MetricError> {
    COMPLEXITY_BUCKETS
        .iter()
        .map(|b| {
            let members: Vec<&TrialScores> = cases
                .iter()
                .filter(|c| c.complexity.is_some_and(|x| b.contains(x)))
                .collect();
            let mut nim = BTreeMap::new();
            if !members.is_empty() {
                for &k in ks {
                    let vals = members
                        .iter()
                        .map(|c| score_at_k(&as_f64(&c.nim), k))
                        .collect::<Result<Vec<_>, _>>()?;
                    nim.insert(k, mean(&vals).unwrap());
                }
            }
            Ok(BucketReport {
                bucket: b.label(),
                cases: members.len(),
                nim,
            })
        })
        .collect()
}

/// External build used for the compilation-rate metric.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildCommand {
    /// Shell command run in the workspace root.
    pub command: String,
    pub timeout_s: u64,
}

impl Default for BuildCommand {
    fn default() -> Self {
        Self {
            command: String::new(),
            timeout_s: 600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrOutcome {
    pub value: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

impl CrOutcome {
    fn absent(reason: impl Into<String>) -> Self {
        Self {
            value: None,
            reason: Some(reason.into()),
        }
    }
}

fn workspace_lock(root: &Path) -> Arc<Mutex<()>> {
    static LOCKS: OnceLock<Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>> = OnceLock::new();
    let key = root.canonicalize().unwrap_or_else(|_| root.to_path_buf());
    LOCKS
        .get_or_init(Default::default)
        .lock()
        .unwrap()
        .entry(key)
        .or_default()
        .clone()
}

/// Splices `body` over the ground-truth span of `file`, runs the build, and
/// restores the file. `value` is `None` when no build could run.
pub fn cr(
    workspace_root: &Path,
    file: &str,
    prefix: &str,
    body: &str,
    suffix: &str,
    build: Option<&BuildCommand>,
) -> CrOutcome {
    let Some(build) = build.filter(|b| !b.command.trim().is_empty()) else {
        return CrOutcome::absent("no build command");
    };
    if !workspace_root.is_dir() {
        return CrOutcome::absent(format!("workspace {} not present", workspace_root.display()));
    }
    let lock = workspace_lock(workspace_root);
    let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
    let path = workspace_root.join(file);
    let original = match std::fs::read(&path) {
        Ok(bytes) => bytes,
        Err(e) => return CrOutcome::absent(format!("reading {}: {e}", path.display())),
    };
    let spliced = format!("{prefix}{body}{suffix}");
    if let Err(e) = std::fs::write(&path, spliced) {
        return CrOutcome::absent(format!("writing {}: {e}", path.display()));
    }
    let outcome = run_build(workspace_root, build);
    if let Err(e) = std::fs::write(&path, &original) {
        log::error!("failed to restore {}: {e}", path.display());
    }
    outcome
}

fn run_build(root: &Path, build: &BuildCommand) -> CrOutcome {
    let child = Command::new("sh")
        .arg("-c")
        .arg(&build.command)
        .current_dir(root)
        .stdin(Stdio::null())
        .stdout(Stdio::null())
        .stderr(Stdio::null())
        .spawn();
    let mut child = match child {
        Ok(c) => c,
        Err(e) => return CrOutcome::absent(format!("spawning build: {e}")),
    };
    match child.wait_timeout(Duration::from_secs(build.timeout_s)) {
        Ok(Some(status)) => CrOutcome {
            value: Some(status.success() as u8),
            reason: None,
        },
        Ok(None) => {
            let _ = child.kill();
            let _ = child.wait();
            CrOutcome {
                value: Some(0),
                reason: Some(format!("build timed out after {} s", build.timeout_s)),
            }
        }
        Err(e) => CrOutcome::absent(format!("waiting for build: {e}")),
    }
}
