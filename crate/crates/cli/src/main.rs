use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mgd_core::decode::{generate, trial_seed, Decoder, SamplerConfig, StopReason};
use mgd_core::harness::{self, HarnessError, RunConfig, RunOutput, TestCase};
use mgd_core::javalex;
use mgd_core::metrics::MetricError;
use mgd_core::monitor::{MonitorError, MonitorState};
use mgd_core::vocab::{maskgen, AdmitRule, DelimiterSet, SuggestionSet, Vocabulary};

#[derive(Parser)]
#[command(name = "mgd", version, about = "Monitor-guided decoding for code completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Complete one case and print the generated continuation.
    Complete(CompleteArgs),
    /// Run every case of a dataset and write records plus a report.
    Eval(EvalArgs),
    /// Recompute score@k aggregates from a records file.
    Score(ScoreArgs),
    /// Derive test cases from the dereferences inside one method.
    Derive(DeriveArgs),
    /// Show the residuals and the allowed tokens for a suggestion set.
    MaskDebug(MaskDebugArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct Overrides {
    /// Run config (TOML, or JSON when the extension is .json).
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    monitor: Option<Switch>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct CompleteArgs {
    #[command(flatten)]
    common: Overrides,
    /// Dataset file (JSON lines) holding the case.
    #[arg(long, conflicts_with_all = ["workspace", "file", "offset"])]
    case: Option<PathBuf>,
    /// Which case of --case to run; required when it holds more than one.
    #[arg(long, requires = "case")]
    case_id: Option<String>,
    #[arg(long, requires_all = ["file", "offset"])]
    workspace: Option<PathBuf>,
    /// Source file relative to --workspace.
    #[arg(long, requires = "workspace")]
    file: Option<String>,
    /// Byte offset of the triggering '.'.
    #[arg(long, requires = "workspace")]
    offset: Option<usize>,
    /// Trial index; selects the temperature from the schedule.
    #[arg(long, default_value_t = 0)]
    trial: usize,
    /// Write the generation record here as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Overrides,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Keep existing records and run only the missing trials.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    workers: Option<usize>,
    /// Also write report.csv with score@k for this k.
    #[arg(long)]
    csv_k: Option<usize>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    records: PathBuf,
    /// Comma-separated k values; defaults to 1..=n.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    /// Print the full report as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct DeriveArgs {
    #[arg(long)]
    workspace: PathBuf,
    #[arg(long)]
    file: String,
    /// Name of the method whose body is scanned.
    #[arg(long)]
    method: String,
    #[arg(long, default_value_t = 10)]
    max_dots: usize,
    /// Output dataset (JSON lines); stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MaskDebugArgs {
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    suggestions: Vec<String>,
    /// Text already sampled since the trigger.
    #[arg(long, default_value = "")]
    consumed: String,
}

/// Failure that maps to exit code 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn load_config(o: &Overrides) -> Result<RunConfig> {
    let text = std::fs::read_to_string(&o.config).with_context(|| format!("reading {}", o.config.display()))?;
    let mut cfg: RunConfig = if o.config.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", o.config.display()))?
    } else {
        toml::from_str(&text).with_context(|| format!("parsing {}", o.config.display()))?
    };
    cfg.resolve_paths(o.config.parent().unwrap_or(Path::new(".")));
    if let Some(m) = o.monitor {
        cfg.monitor_enabled = matches!(m, Switch::On);
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve_case(a: &CompleteArgs) -> Result<TestCase> {
    if let Some(path) = &a.case {
        let cases = harness::load_dataset(path)?;
        return match &a.case_id {
            Some(id) => cases
                .into_iter()
                .find(|c| &c.case_id == id)
                .with_context(|| format!("no case {id} in {}", path.display())),
            None if cases.len() == 1 => Ok(cases.into_iter().next().unwrap()),
            None => Err(Usage(format!("{} holds {} cases; pick one with --case-id", path.display(), cases.len())).into()),
        };
    }
    let (Some(root), Some(file), Some(offset)) = (&a.workspace, &a.file, a.offset) else {
        return Err(Usage("give --case, or --workspace with --file and --offset".into()).into());
    };
    let source = std::fs::read_to_string(root.join(file)).with_context(|| format!("reading {file}"))?;
    harness::case_at_offset(&source, offset, file, root).map_err(anyhow::Error::msg)
}

fn complete(a: CompleteArgs) -> Result<ExitCode> {
    let cfg = load_config(&a.common)?;
    let case = resolve_case(&a)?;
    if a.trial >= cfg.schedule.len() {
        return Err(Usage(format!("--trial {} outside the {}-entry schedule", a.trial, cfg.schedule.len())).into());
    }
    let vocab = Arc::new(Vocabulary::load(&cfg.backend.vocab)?);
    let model = cfg.backend.build_with_vocab(vocab, cfg.plan.total_context)?;
    let provider = if cfg.monitor_enabled { Some(cfg.provider.build()?) } else { None };
    let delims = DelimiterSet::java();
    let mut decoder = Decoder::new(&cfg.plan, model.as_ref(), &delims);
    if let Some(p) = provider.as_deref() {
        decoder = decoder.with_monitor(p, cfg.monitor);
    }
    decoder.record_timing = cfg.record_timing;
    decoder.mask_exec = cfg.execution();
    let sampler = SamplerConfig {
        top_p: cfg.sampler.top_p,
        mask_penalty: cfg.sampler.mask_penalty,
        temperature: cfg.schedule[a.trial],
        seed: trial_seed(cfg.seed, &case.case_id, a.trial),
    };
    let record = generate(&case, &decoder, &sampler, a.trial);
    println!("{}", javalex::truncate_at_method_close(&record.text, case.open_depth));
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string_pretty(&record)? + "\n")
            .with_context(|| format!("writing {}", out.display()))?;
    }
    if record.stop_reason == StopReason::Error {
        eprintln!("stop_reason: error: {}", record.error.as_deref().unwrap_or("unknown"));
        return Ok(ExitCode::from(1));
    }
    eprintln!("stop_reason: {}", serde_json::to_value(record.stop_reason)?.as_str().unwrap_or(""));
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let mut cfg = load_config(&a.common)?;
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    if let Some(k) = a.csv_k {
        if k == 0 || k > cfg.n_trials {
            return Err(Usage(format!("--csv-k {k} outside 1..={}", cfg.n_trials)).into());
        }
    }
    let dataset = harness::load_dataset(&a.dataset)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let out = RunOutput {
        records: a.out_dir.join("records.jsonl"),
        resume: a.resume,
    };
    let report = harness::run(&cfg, &dataset, &out)?;
    let report_path = a.out_dir.join("report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n")?;
    println!("{}", out.records.display());
    println!("{}", report_path.display());
    if let Some(k) = a.csv_k {
        let csv_path = a.out_dir.join("report.csv");
        std::fs::write(&csv_path, report.to_csv(k))?;
        println!("{}", csv_path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn score(a: ScoreArgs) -> Result<ExitCode> {
    let lines = harness::read_records(&a.records)?;
    let ks = (!a.k.is_empty()).then_some(a.k.as_slice());
    let report = match harness::report_from_records(&lines, ks) {
        Err(HarnessError::Metric(e @ MetricError::KOutOfRange { .. })) => return Err(Usage(e.to_string()).into()),
        r => r?,
    };
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
        return Ok(ExitCode::SUCCESS);
    }
    for c in &report.configs {
        println!("{} [{}] cases={} n={}", c.label, c.config_hash, c.cases, c.n_trials);
        for (metric, by_k) in &c.metrics {
            for (k, v) in by_k {
                println!("  {metric}@{k}\t{:.2}", v * 100.0);
            }
        }
    }
    if let Some(t) = &report.timing {
        let slowdown = t.slowdown.map_or("n/a".to_string(), |s| format!("{s:.2}x"));
        println!(
            "mean ms/generation: monitor on {:.1}, off {:.1}, slowdown {slowdown}",
            t.mean_ms_with_monitor, t.mean_ms_without_monitor
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn derive(a: DeriveArgs) -> Result<ExitCode> {
    let source = std::fs::read_to_string(a.workspace.join(&a.file)).with_context(|| format!("reading {}", a.file))?;
    let Some(body) = javalex::find_method_body(&source, &a.method) else {
        bail!("no body for method {} in {}", a.method, a.file);
    };
    let cases = harness::derive_cases(&source, body, &a.file, &a.workspace, a.max_dots);
    let mut text = String::new();
    for c in &cases {
        text.push_str(&serde_json::to_string(c)?);
        text.push('\n');
    }
    match &a.out {
        Some(p) => {
            std::fs::write(p, text)?;
            println!("{} cases written to {}", cases.len(), p.display());
        }
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn show(s: &str) -> String {
    if s.is_empty() {
        "ε".into()
    } else {
        format!("{s:?}")
    }
}

fn mask_debug(a: MaskDebugArgs) -> Result<ExitCode> {
    let vocab = Vocabulary::load(&a.vocab)?;
    let delims = DelimiterSet::java();
    let set: SuggestionSet = a.suggestions.iter().map(|s| s.trim().to_string()).collect();
    let mut state = MonitorState::Active(set);
    if !a.consumed.is_empty() {
        state = match state.update(&a.consumed, &delims) {
            Err(MonitorError::MaskViolation { token }) => {
                bail!("mask violation: {token:?} does not extend any suggestion")
            }
            r => r?,
        };
    }
    let MonitorState::Active(residuals) = &state else {
        println!("state: wait (a delimiter was consumed)");
        return Ok(ExitCode::SUCCESS);
    };
    println!("residuals: {}", residuals.iter().map(show).collect::<Vec<_>>().join(", "));
    let mask = maskgen(residuals, &vocab, &delims)?;
    println!("allowed: {} of {} tokens (digest {})", mask.count_ones(), vocab.len(), mask.digest());
    for id in mask.allowed() {
        let tok = vocab.token(id).unwrap_or_default();
        let rule = match residuals.admits(tok, &delims) {
            Some(AdmitRule::Prefix) => "prefix",
            Some(AdmitRule::Terminated) => "terminated",
            None => "?",
        };
        println!("  {id:>6}  {:<24} {rule}", format!("{tok:?}"));
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("MGD_LOG")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Complete(a) => complete(a),
        Command::Eval(a) => eval(a),
        Command::Score(a) => score(a),
        Command::Derive(a) => derive(a),
        Command::MaskDebug(a) => mask_debug(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<Usage>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
