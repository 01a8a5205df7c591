//! The decoding loop: model logits, optional monitor mask, nucleus sampling.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::harness::TestCase;
use crate::javalex;
use crate::lm::{build_prompt, LanguageModel, LmError, LogitVector, PromptPlan};
use crate::monitor::{Monitor, MonitorConfig, MonitorEvent, StepOutcome, TriggerContext};
use crate::par::{self, Execution};
use crate::suggest::{SuggestError, SuggestionProvider, SuggestionQuery};
use crate::vocab::{DelimiterSet, Mask, SuggestionSet, TokenId};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("logits and mask lengths differ ({logits} vs {mask})")]
    LengthMismatch { logits: usize, mask: usize },
    #[error("empty mask")]
    EmptyMask,
    #[error("empty support")]
    EmptySupport,
}

/// Nucleus sampling parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub top_p: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Masked logits are set to `-mask_penalty`.
    pub mask_penalty: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            top_p: 0.95,
            temperature: 1.0,
            seed: 0,
            mask_penalty: f64::MAX,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(format!("top_p {} must lie in (0, 1]", self.top_p));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(format!("temperature {} must be positive", self.temperature));
        }
        if !(self.mask_penalty > 0.0) {
            return Err("mask_penalty must be positive".into());
        }
        Ok(())
    }
}

/// Sets every masked-out logit to `-penalty`.
pub fn apply_mask(logits: &LogitVector, mask: &Mask, penalty: f64) -> Result<LogitVector, DecodeError> {
    if logits.len() != mask.len() {
        return Err(DecodeError::LengthMismatch {
            logits: logits.len(),
            mask: mask.len(),
        });
    }
    if mask.count_ones() == 0 {
        return Err(DecodeError::EmptyMask);
    }
    Ok(LogitVector(
        logits
            .0
            .iter()
            .enumerate()
            .map(|(i, &v)| if mask.get(i as TokenId) { v } else { -penalty })
            .collect(),
    ))
}

// Cumulative mass within this of top_p counts as reaching it.
const TOP_P_SLACK: f64 = 1e-12;

/// The renormalized nucleus as `(token, probability)`, most likely first.
/// Entries at `f64::MIN` (or -inf) have no mass.
pub fn nucleus(logits: &LogitVector, top_p: f64, temperature: f64) -> Result<Vec<(TokenId, f64)>, DecodeError> {
    let live = |v: f64| v > f64::MIN && v.is_finite();
    let max = logits
        .0
        .iter()
        .copied()
        .filter(|&v| live(v))
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(DecodeError::EmptySupport);
    }
    let mut probs: Vec<(TokenId, f64)> = logits
        .0
        .iter()
        .enumerate()
        .filter(|&(_, &v)| live(v))
        .map(|(i, &v)| (i as TokenId, ((v - max) / temperature).exp()))
        .filter(|&(_, p)| p > 0.0)
        .collect();
    let total: f64 = probs.iter().map(|p| p.1).sum();
    for p in probs.iter_mut() {
        p.1 /= total;
    }
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut cum = 0.0;
    let mut keep = probs.len();
    for (i, &(_, p)) in probs.iter().enumerate() {
        cum += p;
        if cum >= top_p - TOP_P_SLACK {
            keep = i + 1;
            break;
        }
    }
    probs.truncate(keep);
    let mass: f64 = probs.iter().map(|p| p.1).sum();
    for p in probs.iter_mut() {
        p.1 /= mass;
    }
    Ok(probs)
}

/// Draws one token from the nucleus of `softmax(logits / temperature)`.
pub fn nucleus_sample(logits: &LogitVector, cfg: &SamplerConfig, rng: &mut impl Rng) -> Result<TokenId, DecodeError> {
    let support = nucleus(logits, cfg.top_p, cfg.temperature)?;
    let u: f64 = rng.random::<f64>();
    let mut cum = 0.0;
    for &(id, p) in &support {
        cum += p;
        if u < cum {
            return Ok(id);
        }
    }
    Ok(support.last().expect("non-empty support").0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MethodClose,
    Budget,
    Abandoned,
    Eos,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub case_id: String,
    pub trial_index: usize,
    pub temperature: f64,
    pub seed: u64,
    pub monitor_enabled: bool,
    pub token_ids: Vec<TokenId>,
    pub text: String,
    pub events: Vec<MonitorEvent>,
    pub stop_reason: StopReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub wall_time_ms: f64,
}

/// Everything a generation needs besides the test case and sampler settings.
#[derive(Clone, Copy)]
pub struct Decoder<'a> {
    pub plan: &'a PromptPlan,
    pub model: &'a dyn LanguageModel,
    pub provider: Option<&'a dyn SuggestionProvider>,
    pub monitor_enabled: bool,
    pub monitor: MonitorConfig,
    pub delims: &'a DelimiterSet,
    pub record_timing: bool,
    /// Execution for mask generation inside one generation.
    pub mask_exec: Execution,
}

impl<'a> Decoder<'a> {
    pub fn new(plan: &'a PromptPlan, model: &'a dyn LanguageModel, delims: &'a DelimiterSet) -> Self {
        Self {
            plan,
            model,
            provider: None,
            monitor_enabled: false,
            monitor: MonitorConfig::default(),
            delims,
            record_timing: true,
            mask_exec: Execution::Sequential,
        }
    }

    pub fn with_monitor(mut self, provider: &'a dyn SuggestionProvider, config: MonitorConfig) -> Self {
        self.provider = Some(provider);
        self.monitor_enabled = true;
        self.monitor = config;
        self
    }
}

/// Asks the provider about the document with the generation spliced in.
struct SplicedDocument<'a> {
    provider: &'a dyn SuggestionProvider,
    file: &'a str,
    suffix: &'a str,
}

impl crate::monitor::TriggerAnalysis for SplicedDocument<'_> {
    fn analyze(&self, ctx: &TriggerContext<'_>) -> Result<SuggestionSet, SuggestError> {
        let mut content = ctx.frontier().to_string();
        content.push_str(self.suffix);
        self.provider.open_document(self.file, &content)?;
        let q = SuggestionQuery::at_dot(self.file, content, ctx.cursor - 1)?;
        self.provider.query(&q)
    }
}

enum Failure {
    Lm(LmError),
    Decode(DecodeError),
    Monitor(crate::monitor::MonitorError),
    Other(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Lm(e) => write!(f, "{e}"),
            Failure::Decode(e) => write!(f, "{e}"),
            Failure::Monitor(e) => write!(f, "{e}"),
            Failure::Other(e) => write!(f, "{e}"),
        }
    }
}

/// Generates one completion for `case`. Failures end up in the record.
pub fn generate(case: &TestCase, decoder: &Decoder<'_>, cfg: &SamplerConfig, trial_index: usize) -> GenerationRecord {
    let started = Instant::now();
    let mut record = GenerationRecord {
        case_id: case.case_id.clone(),
        trial_index,
        temperature: cfg.temperature,
        seed: cfg.seed,
        monitor_enabled: decoder.monitor_enabled,
        token_ids: Vec::new(),
        text: String::new(),
        events: Vec::new(),
        stop_reason: StopReason::Budget,
        error: None,
        wall_time_ms: 0.0,
    };
    if let Err(e) = decode_into(case, decoder, cfg, &mut record) {
        record.stop_reason = StopReason::Error;
        record.error = Some(e.to_string());
    }
    if decoder.record_timing {
        record.wall_time_ms = started.elapsed().as_secs_f64() * 1e3;
    }
    record
}

fn decode_into(case: &TestCase, d: &Decoder<'_>, cfg: &SamplerConfig, rec: &mut GenerationRecord) -> Result<(), Failure> {
    cfg.validate().map_err(Failure::Other)?;
    let vocab = d.model.vocab();
    let aux = if d.plan.strategy.uses_aux() {
        Some(case.aux_text().map_err(|e| Failure::Other(e.to_string()))?)
    } else {
        None
    };
    let prompt = build_prompt(d.plan, &case.prompt_inputs(aux.as_deref()), d.model).map_err(Failure::Lm)?;
    let mut context = prompt.ids;
    let mut document = case.prefix.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let analysis = d.provider.map(|provider| SplicedDocument {
        provider,
        file: &case.file,
        suffix: &case.suffix,
    });
    let mut monitor = match (&analysis, d.monitor_enabled) {
        (Some(_), true) => Some(Monitor::new(vocab, d.delims, d.monitor).with_execution(d.mask_exec)),
        (None, true) => return Err(Failure::Other("monitor enabled without a suggestion provider".into())),
        _ => None,
    };

    let result = (|| {
        for _ in 0..d.plan.generation_budget {
            let mask = match monitor.as_mut() {
                None => None,
                Some(m) => {
                    let ctx = TriggerContext::at_end(&document);
                    match m.step(&ctx, analysis.as_ref().unwrap()).map_err(Failure::Monitor)? {
                        StepOutcome::Unconstrained => None,
                        StepOutcome::Masked(mask) => Some(mask),
                        StepOutcome::Abort => {
                            rec.stop_reason = StopReason::Abandoned;
                            return Ok(());
                        }
                    }
                }
            };
            let mut logits = d.model.logits(&context, mask.as_ref()).map_err(Failure::Lm)?;
            if let Some(mask) = &mask {
                logits = apply_mask(&logits, mask, cfg.mask_penalty).map_err(Failure::Decode)?;
            }
            let id = nucleus_sample(&logits, cfg, &mut rng).map_err(Failure::Decode)?;
            if Some(id) == vocab.eos() {
                rec.stop_reason = StopReason::Eos;
                return Ok(());
            }
            let text = vocab.token(id).expect("sampled id in range");
            match monitor.as_mut() {
                Some(m) => m.observe(id, text).map_err(Failure::Monitor)?,
                None => rec.events.push(MonitorEvent::Token {
                    id,
                    text: text.to_string(),
                }),
            }
            context.push(id);
            rec.token_ids.push(id);
            rec.text.push_str(text);
            document.push_str(text);
            if javalex::method_close_offset(&rec.text, case.open_depth).is_some() {
                rec.stop_reason = StopReason::MethodClose;
                return Ok(());
            }
        }
        rec.stop_reason = StopReason::Budget;
        Ok(())
    })();
    if let Some(m) = monitor {
        rec.events = m.into_log();
    }
    result
}

/// Stable per-trial seed from the base seed, case id and trial index.
pub fn trial_seed(base_seed: u64, case_id: &str, trial_index: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(base_seed.to_le_bytes());
    h.update((case_id.len() as u64).to_le_bytes());
    h.update(case_id.as_bytes());
    h.update((trial_index as u64).to_le_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[..8].try_into().unwrap())
}

/// 0.2, 0.4, then two each at 0.6 and 0.8.
pub const DEFAULT_SCHEDULE: [f64; 6] = [0.2, 0.4, 0.6, 0.6, 0.8, 0.8];

/// One generation per schedule entry, in schedule order.
pub fn run_trials(
    case: &TestCase,
    decoder: &Decoder<'_>,
    sampler: &SamplerConfig,
    schedule: &[f64],
    exec: Execution,
) -> Vec<GenerationRecord> {
    let trials: Vec<(usize, f64)> = schedule.iter().copied().enumerate().collect();
    par::map_slice(&trials, exec, |&(i, temperature)| {
        let cfg = SamplerConfig {
            temperature,
            seed: trial_seed(sampler.seed, &case.case_id, i),
            ..*sampler
        };
        generate(case, decoder, &cfg, i)
    })
}
