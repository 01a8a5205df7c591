//! Test cases, evaluation runs, and reports.
//!
//! A run generates `n` trials per case, appends one JSON line per trial to a
//! records file, and computes the report from that file alone. Existing lines
//! with the same config hash are skipped on resume.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decode::{generate, trial_seed, Decoder, GenerationRecord, SamplerConfig, StopReason, DEFAULT_SCHEDULE};
use crate::javalex;
use crate::lm::{BackendConfig, LmError, PromptInputs, PromptPlan};
use crate::metrics::{self, BucketReport, BuildCommand, MetricError, MetricTable, SubwordTokenizer, TrialScores};
use crate::monitor::{pre_trigger, MonitorConfig, TriggerContext};
use crate::par::{self, Execution};
use crate::suggest::{ProviderConfig, SuggestError};
use crate::vocab::{DelimiterSet, VocabError, Vocabulary};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid dataset:\n{}", .0.join("\n"))]
    Dataset(Vec<String>),
    #[error("config: {0}")]
    Config(String),
    #[error("no records")]
    NoRecords,
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Suggest(#[from] SuggestError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A completion task anchored at a dereference inside a method.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub case_id: String,
    #[serde(default = "default_root")]
    pub workspace_root: PathBuf,
    /// Path of the source file relative to `workspace_root`.
    pub file: String,
    /// File text up to and including the triggering `.`.
    pub prefix: String,
    /// File text after the method's closing brace.
    #[serde(default)]
    pub suffix: String,
    /// From just after the `.` through the method's closing brace.
    pub ground_truth: String,
    pub dot_offset: usize,
    /// Braces open at the `.`, counting the method body itself.
    pub open_depth: usize,
    #[serde(default)]
    pub class_expr_type_files: Vec<String>,
}

fn default_root() -> PathBuf {
    PathBuf::from(".")
}

impl TestCase {
    pub fn validate(&self) -> Result<(), String> {
        if !self.prefix.ends_with('.') {
            return Err("prefix does not end with '.'".into());
        }
        if self.dot_offset + 1 != self.prefix.len() {
            return Err(format!(
                "dot_offset {} does not point at the final '.' of the prefix (expected {})",
                self.dot_offset,
                self.prefix.len() - 1
            ));
        }
        if self.open_depth == 0 {
            return Err("open_depth must be at least 1".into());
        }
        if javalex::method_close_offset(&self.ground_truth, self.open_depth).is_none() {
            return Err(format!("ground_truth never closes {} open braces", self.open_depth));
        }
        Ok(())
    }

    /// Concatenated type-definition files, in listed order.
    pub fn aux_text(&self) -> std::io::Result<String> {
        let mut out = String::new();
        for f in &self.class_expr_type_files {
            out.push_str(&std::fs::read_to_string(self.workspace_root.join(f))?);
        }
        Ok(out)
    }

    pub fn prompt_inputs<'a>(&'a self, aux: Option<&'a str>) -> PromptInputs<'a> {
        PromptInputs {
            prefix: &self.prefix,
            suffix: Some(&self.suffix),
            aux,
        }
    }

    /// Ground truth cut at the method close.
    pub fn ground_truth_body(&self) -> &str {
        javalex::truncate_at_method_close(&self.ground_truth, self.open_depth)
    }
}

/// Parses a JSON-lines dataset, reporting every bad line.
pub fn parse_dataset(text: &str) -> Result<Vec<TestCase>, HarnessError> {
    let mut cases = Vec::new();
    let mut problems = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TestCase>(line) {
            Err(e) => problems.push(format!("line {lineno}: {e}")),
            Ok(case) => {
                if let Err(e) = case.validate() {
                    problems.push(format!("line {lineno}: {}: {e}", case.case_id));
                } else if !seen.insert(case.case_id.clone()) {
                    problems.push(format!("line {lineno}: duplicate case_id {}", case.case_id));
                } else {
                    cases.push(case);
                }
            }
        }
    }
    if problems.is_empty() {
        Ok(cases)
    } else {
        Err(HarnessError::Dataset(problems))
    }
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<TestCase>, HarnessError> {
    let path = path.as_ref();
    let mut cases = parse_dataset(&std::fs::read_to_string(path)?)?;
    // Relative workspace roots are relative to the dataset file.
    if let Some(dir) = path.parent() {
        for c in cases.iter_mut() {
            if c.workspace_root.is_relative() {
                c.workspace_root = dir.join(&c.workspace_root);
            }
        }
    }
    Ok(cases)
}

/// Up to `max_dots` evenly spaced picks out of `count`: `floor(i * count / max_dots)`.
pub fn uniform_indices(count: usize, max_dots: usize) -> Vec<usize> {
    if count <= max_dots {
        return (0..count).collect();
    }
    let picks: BTreeSet<usize> = (0..max_dots).map(|i| i * count / max_dots).collect();
    picks.into_iter().collect()
}

/// One test case per selected dereference inside the method whose body opens
/// at byte `body_open` of `source`.
pub fn derive_cases(
    source: &str,
    body_open: usize,
    file: &str,
    workspace_root: &Path,
    max_dots: usize,
) -> Vec<TestCase> {
    if max_dots == 0 || source.as_bytes().get(body_open) != Some(&b'{') {
        return Vec::new();
    }
    let Some(rel_close) = javalex::method_close_offset(&source[body_open + 1..], 1) else {
        return Vec::new();
    };
    let close = body_open + 1 + rel_close;
    let toks = javalex::lex(source);
    let mut dots = Vec::new();
    let mut depth = 0usize;
    for (i, t) in toks.iter().enumerate() {
        if t.offset < body_open || t.offset >= close {
            continue;
        }
        if t.is_punct("{") {
            depth += 1;
        } else if t.is_punct("}") {
            depth = depth.saturating_sub(1);
        } else if javalex::is_dereference_dot(&toks, i)
            && pre_trigger(&TriggerContext::at_end(&source[..=t.offset]))
        {
            dots.push((t.offset, depth));
        }
    }
    uniform_indices(dots.len(), max_dots)
        .into_iter()
        .map(|i| {
            let (d, open_depth) = dots[i];
            TestCase {
                case_id: format!("{file}@{d}"),
                workspace_root: workspace_root.to_path_buf(),
                file: file.to_string(),
                prefix: source[..=d].to_string(),
                suffix: source[close..].to_string(),
                ground_truth: source[d + 1..close].to_string(),
                dot_offset: d,
                open_depth,
                class_expr_type_files: Vec::new(),
            }
        })
        .collect()
}

fn opens_body(toks: &[javalex::JavaToken], brace: usize) -> bool {
    let mut i = brace;
    // Skip a throws clause: `throws A, b.C`.
    while i > 0 {
        let t = &toks[i - 1];
        if t.kind == javalex::TokenKind::Identifier || t.is_op(".") || t.is_punct(",") {
            i -= 1;
        } else {
            break;
        }
    }
    if i < brace && i > 0 && toks[i - 1].text == "throws" {
        i -= 1;
    } else {
        i = brace;
    }
    i > 0 && toks[i - 1].is_punct(")")
}

/// The test case for the dereference whose `.` sits at byte `dot_offset`.
/// The method is the outermost enclosing block opened right after a
/// parameter list.
pub fn case_at_offset(source: &str, dot_offset: usize, file: &str, workspace_root: &Path) -> Result<TestCase, String> {
    let toks = javalex::lex(source);
    let Some(dot) = toks.iter().position(|t| t.offset == dot_offset && t.is_op(".")) else {
        return Err(format!("no '.' token at offset {dot_offset}"));
    };
    if !pre_trigger(&TriggerContext::at_end(&source[..=dot_offset])) {
        return Err(format!("the '.' at offset {dot_offset} is not a dereference"));
    }
    let mut stack: Vec<usize> = Vec::new();
    for (i, t) in toks[..dot].iter().enumerate() {
        if t.is_punct("{") {
            stack.push(i);
        } else if t.is_punct("}") {
            stack.pop();
        }
    }
    let Some(level) = stack.iter().position(|&b| opens_body(&toks, b)) else {
        return Err(format!("offset {dot_offset} is not inside a method body"));
    };
    let open_depth = stack.len() - level;
    let tail = &source[dot_offset + 1..];
    let Some(close) = javalex::method_close_offset(tail, open_depth) else {
        return Err("the enclosing method never closes".into());
    };
    Ok(TestCase {
        case_id: format!("{file}@{dot_offset}"),
        workspace_root: workspace_root.to_path_buf(),
        file: file.to_string(),
        prefix: source[..=dot_offset].to_string(),
        suffix: tail[close..].to_string(),
        ground_truth: tail[..close].to_string(),
        dot_offset,
        open_depth,
        class_expr_type_files: Vec::new(),
    })
}

/// Sampling settings shared by every trial; temperature comes from the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerDefaults {
    pub top_p: f64,
    pub mask_penalty: f64,
}

impl Default for SamplerDefaults {
    fn default() -> Self {
        let d = SamplerConfig::default();
        Self {
            top_p: d.top_p,
            mask_penalty: d.mask_penalty,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub label: Option<String>,
    pub plan: PromptPlan,
    pub backend: BackendConfig,
    pub provider: ProviderConfig,
    pub sampler: SamplerDefaults,
    pub schedule: Vec<f64>,
    pub n_trials: usize,
    pub k_max: usize,
    pub monitor_enabled: bool,
    pub monitor: MonitorConfig,
    pub seed: u64,
    /// 0 uses every core.
    pub workers: usize,
    pub parallel: bool,
    pub build: Option<BuildCommand>,
    /// Vocabularies used for identifier complexity; defaults to the model's.
    pub complexity_vocabs: Vec<PathBuf>,
    pub record_timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            label: None,
            plan: PromptPlan::default(),
            backend: BackendConfig::default(),
            provider: ProviderConfig::default(),
            sampler: SamplerDefaults::default(),
            schedule: DEFAULT_SCHEDULE.to_vec(),
            n_trials: DEFAULT_SCHEDULE.len(),
            k_max: DEFAULT_SCHEDULE.len(),
            monitor_enabled: true,
            monitor: MonitorConfig::default(),
            seed: 0,
            workers: 0,
            parallel: true,
            build: None,
            complexity_vocabs: Vec::new(),
            record_timing: true,
        }
    }
}

#[derive(Serialize)]
struct HashedFields<'a> {
    plan: &'a PromptPlan,
    backend: &'a BackendConfig,
    provider_kind: crate::suggest::ProviderKind,
    provider_fixture: &'a Option<PathBuf>,
    provider_launch: &'a [String],
    provider_root: &'a Option<PathBuf>,
    sampler: &'a SamplerDefaults,
    schedule: &'a [f64],
    monitor_enabled: bool,
    monitor: &'a MonitorConfig,
    seed: u64,
    build: &'a Option<BuildCommand>,
    complexity_vocabs: &'a [PathBuf],
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.schedule.is_empty() {
            return Err(HarnessError::Config("schedule is empty".into()));
        }
        if self.n_trials != self.schedule.len() {
            return Err(HarnessError::Config(format!(
                "n_trials {} differs from schedule length {}",
                self.n_trials,
                self.schedule.len()
            )));
        }
        if self.k_max == 0 || self.k_max > self.n_trials {
            return Err(HarnessError::Config(format!("k_max {} outside 1..={}", self.k_max, self.n_trials)));
        }
        if let Some(t) = self.schedule.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return Err(HarnessError::Config(format!("temperature {t} must be positive")));
        }
        SamplerConfig {
            top_p: self.sampler.top_p,
            mask_penalty: self.sampler.mask_penalty,
            ..SamplerConfig::default()
        }
        .validate()
        .map_err(HarnessError::Config)?;
        self.plan.validate()?;
        Ok(())
    }

    /// Stable hash over every field that changes generated output or scores.
    pub fn config_hash(&self) -> String {
        let fields = HashedFields {
            plan: &self.plan,
            backend: &self.backend,
            provider_kind: self.provider.kind,
            provider_fixture: &self.provider.fixture,
            provider_launch: &self.provider.server_launch,
            provider_root: &self.provider.workspace_root,
            sampler: &self.sampler,
            schedule: &self.schedule,
            monitor_enabled: self.monitor_enabled,
            monitor: &self.monitor,
            seed: self.seed,
            build: &self.build,
            complexity_vocabs: &self.complexity_vocabs,
        };
        let bytes = serde_json::to_vec(&fields).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Makes relative paths relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.backend.vocab);
        if let Some(p) = self.backend.mock_table.as_mut() {
            fix(p);
        }
        if let Some(p) = self.provider.fixture.as_mut() {
            fix(p);
        }
        if let Some(p) = self.provider.workspace_root.as_mut() {
            fix(p);
        }
        self.complexity_vocabs.iter_mut().for_each(fix);
    }

    pub fn execution(&self) -> Execution {
        if self.parallel {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| {
            format!(
                "{}{}",
                self.plan.strategy.name(),
                if self.monitor_enabled { "-MGD" } else { "" }
            )
        })
    }
}

/// Scores for one trial, as stored on each record line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialScore {
    pub cr: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cr_reason: Option<String>,
    pub nim: u8,
    pub ism: f64,
    pub pm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordLine {
    pub config_hash: String,
    pub config_label: String,
    #[serde(default)]
    pub monitor_enabled: bool,
    pub record: GenerationRecord,
    pub scores: TrialScore,
    #[serde(default)]
    pub complexity: Option<f64>,
}

/// Scores one generation against its case.
pub fn score_record(case: &TestCase, record: &GenerationRecord, build: Option<&BuildCommand>) -> TrialScore {
    let failed = matches!(record.stop_reason, StopReason::Abandoned | StopReason::Error);
    let has_build = build.is_some_and(|b| !b.command.trim().is_empty());
    if failed {
        return TrialScore {
            cr: has_build.then_some(0),
            cr_reason: has_build.then(|| format!("generation {:?}", record.stop_reason)),
            nim: 0,
            ism: 0.0,
            pm: 0.0,
        };
    }
    let gt = case.ground_truth_body();
    let generated = javalex::truncate_at_method_close(&record.text, case.open_depth);
    let cr = metrics::cr(&case.workspace_root, &case.file, &case.prefix, generated, &case.suffix, build);
    TrialScore {
        cr: cr.value,
        cr_reason: cr.reason.filter(|_| has_build),
        nim: metrics::nim(gt, generated),
        ism: metrics::ism(gt, generated),
        pm: metrics::pm(gt, generated),
    }
}

/// Where a run keeps its records.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: PathBuf,
    pub resume: bool,
}

/// Reads record lines, dropping a torn final line left by an interrupted write.
pub fn read_records(path: &Path) -> Result<Vec<RecordLine>, HarnessError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(e.into()),
    };
    let lines: Vec<String> = BufReader::new(file).lines().collect::<Result<_, _>>()?;
    let mut out = Vec::with_capacity(lines.len());
    let last = lines.len().saturating_sub(1);
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(rec) => out.push(rec),
            Err(_) if i == last => log::warn!("dropping torn final record line in {}", path.display()),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

/// Rewrites the records file with only complete lines, so appends start clean.
fn compact_records(path: &Path, lines: &[RecordLine]) -> Result<(), HarnessError> {
    let mut w = BufWriter::new(File::create(path)?);
    for l in lines {
        serde_json::to_writer(&mut w, l)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every missing (case, trial) for `config` and reports over the records file.
pub fn run(config: &RunConfig, dataset: &[TestCase], out: &RunOutput) -> Result<Report, HarnessError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(HarnessError::Config("dataset is empty".into()));
    }
    let vocab = Arc::new(Vocabulary::load(&config.backend.vocab)?);
    let model = config.backend.build_with_vocab(vocab.clone(), config.plan.total_context)?;
    let provider = if config.monitor_enabled {
        Some(config.provider.build()?)
    } else {
        None
    };
    let complexity_vocabs: Vec<Arc<Vocabulary>> = if config.complexity_vocabs.is_empty() {
        vec![vocab.clone()]
    } else {
        config
            .complexity_vocabs
            .iter()
            .map(|p| Vocabulary::load(p).map(Arc::new))
            .collect::<Result<_, _>>()?
    };
    let tokenizers: Vec<&dyn SubwordTokenizer> = complexity_vocabs.iter().map(|v| v.as_ref() as &dyn SubwordTokenizer).collect();
    let delims = DelimiterSet::java();
    let hash = config.config_hash();
    let label = config.label();

    let existing = if out.resume { read_records(&out.records)? } else { Vec::new() };
    compact_records(&out.records, &existing)?;
    let done: HashSet<(String, usize)> = existing
        .iter()
        .filter(|l| l.config_hash == hash)
        .map(|l| (l.record.case_id.clone(), l.record.trial_index))
        .collect();

    let writer = Mutex::new(BufWriter::new(OpenOptions::new().append(true).open(&out.records)?));
    let decoder = Decoder {
        plan: &config.plan,
        model: model.as_ref(),
        provider: provider.as_deref(),
        monitor_enabled: config.monitor_enabled,
        monitor: config.monitor,
        delims: &delims,
        record_timing: config.record_timing,
        mask_exec: Execution::Sequential,
    };
    let exec = config.execution();

    let written: Vec<Result<(), HarnessError>> = par::with_workers(config.workers, || {
        par::map_slice(dataset, exec, |case| {
            let todo: Vec<usize> = (0..config.n_trials)
                .filter(|&i| !done.contains(&(case.case_id.clone(), i)))
                .collect();
            if todo.is_empty() {
                return Ok(());
            }
            let complexity = javalex::identifiers(case.ground_truth_body())
                .first()
                .map(|id| metrics::identifier_complexity(id, &tokenizers));
            let lines = par::map_slice(&todo, exec, |&i| {
                let cfg = SamplerConfig {
                    top_p: config.sampler.top_p,
                    mask_penalty: config.sampler.mask_penalty,
                    temperature: config.schedule[i],
                    seed: trial_seed(config.seed, &case.case_id, i),
                };
                let record = generate(case, &decoder, &cfg, i);
                let scores = score_record(case, &record, config.build.as_ref());
                RecordLine {
                    config_hash: hash.clone(),
                    config_label: label.clone(),
                    monitor_enabled: config.monitor_enabled,
                    record,
                    scores,
                    complexity,
                }
            });
            let mut w = writer.lock().unwrap();
            for line in &lines {
                serde_json::to_writer(&mut *w, line)?;
                w.write_all(b"\n")?;
            }
            w.flush()?;
            Ok(())
        })
    });
    for r in written {
        r?;
    }
    drop(writer);

    let lines = read_records(&out.records)?;
    let ks: Vec<usize> = (1..=config.k_max).collect();
    report_from_records(&lines, Some(&ks))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigReport {
    pub config_hash: String,
    pub label: String,
    pub monitor_enabled: bool,
    pub n_trials: usize,
    pub cases: usize,
    pub records: usize,
    pub metrics: MetricTable,
    pub nim_by_complexity: Vec<BucketReport>,
    pub stop_reasons: BTreeMap<String, usize>,
    pub mean_wall_time_ms: f64,
    pub per_case: Vec<TrialScores>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub mean_ms_with_monitor: f64,
    pub mean_ms_without_monitor: f64,
    /// Absent when the monitor-off mean is zero (timing disabled).
    pub slowdown: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub configs: Vec<ConfigReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timing: Option<TimingReport>,
}

fn stop_name(s: StopReason) -> String {
    serde_json::to_value(s).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

/// Aggregates record lines. `ks` defaults to `1..=n`; any k above the trial
/// count of a config is an error.
pub fn report_from_records(lines: &[RecordLine], ks: Option<&[usize]>) -> Result<Report, HarnessError> {
    if lines.is_empty() {
        return Err(HarnessError::NoRecords);
    }
    // hash → case → trial → line (first wins).
    let mut grouped: BTreeMap<&str, BTreeMap<&str, BTreeMap<usize, &RecordLine>>> = BTreeMap::new();
    for l in lines {
        grouped
            .entry(&l.config_hash)
            .or_default()
            .entry(&l.record.case_id)
            .or_default()
            .entry(l.record.trial_index)
            .or_insert(l);
    }
    let mut configs = Vec::new();
    for (hash, cases) in grouped {
        let n = cases.values().map(|t| t.len()).min().unwrap_or(0);
        let first = cases.values().next().and_then(|t| t.values().next()).unwrap();
        let per_case: Vec<TrialScores> = cases
            .iter()
            .map(|(case_id, trials)| {
                let ls: Vec<&RecordLine> = trials.values().take(n).copied().collect();
                TrialScores {
                    case_id: case_id.to_string(),
                    cr: ls.iter().map(|l| l.scores.cr).collect(),
                    nim: ls.iter().map(|l| l.scores.nim).collect(),
                    ism: ls.iter().map(|l| l.scores.ism).collect(),
                    pm: ls.iter().map(|l| l.scores.pm).collect(),
                    complexity: ls.first().and_then(|l| l.complexity),
                }
            })
            .collect();
        let default_ks: Vec<usize> = (1..=n).collect();
        let ks = ks.unwrap_or(&default_ks);
        if let Some(&k) = ks.iter().find(|&&k| k == 0 || k > n) {
            return Err(MetricError::KOutOfRange { k, n }.into());
        }
        let all: Vec<&RecordLine> = cases.values().flat_map(|t| t.values().copied()).collect();
        let mut stop_reasons = BTreeMap::new();
        for l in &all {
            *stop_reasons.entry(stop_name(l.record.stop_reason)).or_insert(0) += 1;
        }
        configs.push(ConfigReport {
            config_hash: hash.to_string(),
            label: first.config_label.clone(),
            monitor_enabled: first.monitor_enabled,
            n_trials: n,
            cases: per_case.len(),
            records: all.len(),
            metrics: metrics::aggregate(&per_case, ks)?,
            nim_by_complexity: metrics::nim_by_complexity(&per_case, ks)?,
            stop_reasons,
            mean_wall_time_ms: metrics::exact_sum(all.iter().map(|l| l.record.wall_time_ms)) / all.len() as f64,
            per_case,
        });
    }
    configs.sort_by(|a, b| (&a.label, &a.config_hash).cmp(&(&b.label, &b.config_hash)));

    let weighted = |on: bool| {
        let sel: Vec<&ConfigReport> = configs.iter().filter(|c| c.monitor_enabled == on).collect();
        let count: usize = sel.iter().map(|c| c.records).sum();
        (count > 0).then(|| metrics::exact_sum(sel.iter().map(|c| c.mean_wall_time_ms * c.records as f64)) / count as f64)
    };
    let timing = match (weighted(true), weighted(false)) {
        (Some(on), Some(off)) => Some(TimingReport {
            mean_ms_with_monitor: on,
            mean_ms_without_monitor: off,
            slowdown: (off > 0.0).then(|| on / off),
        }),
        _ => None,
    };
    Ok(Report { configs, timing })
}

impl Report {
    /// One row per config with score@k for each metric, in percent.
    pub fn to_csv(&self, k: usize) -> String {
        let mut out = format!("config,CR@{k},NIM@{k},ISM@{k},PM@{k}\n");
        for c in &self.configs {
            let cell = |m: &str| {
                c.metrics
                    .get(m)
                    .and_then(|t| t.get(&k))
                    .map_or(String::new(), |v| format!("{:.2}", v * 100.0))
            };
            out.push_str(&format!("{},{},{},{},{}\n", c.label, cell("CR"), cell("NIM"), cell("ISM"), cell("PM")));
        }
        out
    }
}
