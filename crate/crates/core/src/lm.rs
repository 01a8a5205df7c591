//! Language-model backends and prompt construction.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::vocab::{Mask, TokenId, VocabError, Vocabulary};

#[derive(Debug, thiserror::Error)]
pub enum LmError {
    #[error("context of {len} tokens exceeds the {max}-token window")]
    ContextOverflow { len: usize, max: usize },
    #[error("token id {0} is outside the vocabulary")]
    BadTokenId(TokenId),
    #[error("backend returned {got} logits for a {expected}-token vocabulary")]
    WrongLength { got: usize, expected: usize },
    #[error("backend returned a non-finite logit for token {0}")]
    NonFinite(usize),
    #[error("remote backend: {0}")]
    Remote(String),
    #[error("{strategy} prompt needs {field}")]
    MissingInput { strategy: &'static str, field: &'static str },
    #[error("prompt plan: {0}")]
    Plan(String),
    #[error("mock model: {0}")]
    Mock(String),
    #[error("backend config: {0}")]
    Config(String),
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One finite logit per vocabulary token. Masked entries hold `f64::MIN`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(pub Vec<f64>);

impl LogitVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn validate(&self, vocab_size: usize) -> Result<(), LmError> {
        if self.0.len() != vocab_size {
            return Err(LmError::WrongLength {
                got: self.0.len(),
                expected: vocab_size,
            });
        }
        match self.0.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(LmError::NonFinite(i)),
            None => Ok(()),
        }
    }
}

/// A next-token scorer over a fixed vocabulary.
pub trait LanguageModel: Send + Sync {
    fn vocab(&self) -> &Vocabulary;
    fn max_context(&self) -> usize;
    /// Logits for the token after `ids`. When `allowed` is given the backend may
    /// leave the other entries at `f64::MIN`.
    fn logits(&self, ids: &[TokenId], allowed: Option<&Mask>) -> Result<LogitVector, LmError>;
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, LmError>;
}

fn check_context(ids: &[TokenId], vocab: &Vocabulary, max: usize) -> Result<(), LmError> {
    if ids.len() > max {
        return Err(LmError::ContextOverflow { len: ids.len(), max });
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab.len()) {
        return Err(LmError::BadTokenId(bad));
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockRule {
    /// Applies when the decoded context ends with this text.
    pub suffix: String,
    /// Token text → logit, replacing the base logit for those tokens.
    pub logits: HashMap<String, f64>,
}

/// Mock-model definition file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MockTable {
    pub base_logit: f64,
    /// The longest matching suffix wins; ties go to the earliest rule.
    pub rules: Vec<MockRule>,
    /// Token text → weight. After a context ending in `.`, each listed token
    /// gets `hallucination_bias * weight` added to its logit.
    pub hallucinations: HashMap<String, f64>,
}

/// Deterministic table-driven model: uniform base logits with per-suffix overrides.
pub struct MockBackend {
    vocab: Arc<Vocabulary>,
    max_context: usize,
    base: f64,
    rules: Vec<(String, Vec<(TokenId, f64)>)>,
    hallucinations: Vec<(TokenId, f64)>,
    bias: f64,
}

impl MockBackend {
    pub fn new(vocab: Arc<Vocabulary>, table: &MockTable, hallucination_bias: f64, max_context: usize) -> Result<Self, LmError> {
        if !(hallucination_bias >= 0.0 && hallucination_bias.is_finite()) {
            return Err(LmError::Mock("hallucination_bias must be a finite value >= 0".into()));
        }
        let resolve = |map: &HashMap<String, f64>| -> Result<Vec<(TokenId, f64)>, LmError> {
            let mut out = map
                .iter()
                .map(|(tok, &w)| {
                    if !w.is_finite() {
                        return Err(LmError::Mock(format!("weight for {tok:?} is not finite")));
                    }
                    vocab
                        .id_of(tok)
                        .map(|id| (id, w))
                        .ok_or_else(|| LmError::Mock(format!("token {tok:?} is not in the vocabulary")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            out.sort_by_key(|&(id, _)| id);
            Ok(out)
        };
        let rules = table
            .rules
            .iter()
            .map(|r| Ok((r.suffix.clone(), resolve(&r.logits)?)))
            .collect::<Result<Vec<_>, LmError>>()?;
        Ok(Self {
            hallucinations: resolve(&table.hallucinations)?,
            vocab,
            max_context,
            base: table.base_logit,
            rules,
            bias: hallucination_bias,
        })
    }

    pub fn load(vocab: Arc<Vocabulary>, path: &Path, hallucination_bias: f64, max_context: usize) -> Result<Self, LmError> {
        let table: MockTable = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::new(vocab, &table, hallucination_bias, max_context)
    }
}

impl LanguageModel for MockBackend {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn max_context(&self) -> usize {
        self.max_context
    }

    fn logits(&self, ids: &[TokenId], _allowed: Option<&Mask>) -> Result<LogitVector, LmError> {
        check_context(ids, &self.vocab, self.max_context)?;
        let context = self.vocab.detokenize(ids)?;
        let mut values = vec![self.base; self.vocab.len()];
        let mut best: Option<&(String, Vec<(TokenId, f64)>)> = None;
        for rule in &self.rules {
            if context.ends_with(rule.0.as_str()) && best.is_none_or(|b| rule.0.len() > b.0.len()) {
                best = Some(rule);
            }
        }
        if let Some((_, overrides)) = best {
            for &(id, v) in overrides {
                values[id as usize] = v;
            }
        }
        if self.bias > 0.0 && context.ends_with('.') {
            for &(id, w) in &self.hallucinations {
                values[id as usize] += self.bias * w;
            }
        }
        Ok(LogitVector(values))
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, LmError> {
        Ok(self.vocab.tokenize_greedy(text)?)
    }
}

#[derive(Serialize)]
struct LogitsRequest<'a> {
    tokens: &'a [TokenId],
    #[serde(skip_serializing_if = "Option::is_none")]
    allowed_ids: Option<Vec<TokenId>>,
}

#[derive(Deserialize)]
struct LogitsResponse {
    logits: Option<Vec<f64>>,
    sparse: Option<Vec<(TokenId, f64)>>,
}

#[derive(Serialize)]
struct TokenizeRequest<'a> {
    text: &'a str,
}

#[derive(Deserialize)]
struct TokenizeResponse {
    tokens: Vec<TokenId>,
}

/// Client for a logit server exposing `POST /v1/logits` and `POST /v1/tokenize`.
pub struct RemoteBackend {
    vocab: Arc<Vocabulary>,
    max_context: usize,
    endpoint: String,
    agent: ureq::Agent,
    send_allowed: bool,
}

impl RemoteBackend {
    pub fn new(vocab: Arc<Vocabulary>, endpoint: &str, max_context: usize, timeout: Duration, send_allowed: bool) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(true)
            .build()
            .into();
        Self {
            vocab,
            max_context,
            endpoint: endpoint.trim_end_matches('/').to_string(),
            agent,
            send_allowed,
        }
    }

    fn post<Req: Serialize, Resp: serde::de::DeserializeOwned>(&self, path: &str, body: &Req) -> Result<Resp, LmError> {
        let url = format!("{}{}", self.endpoint, path);
        let mut resp = self
            .agent
            .post(&url)
            .send_json(body)
            .map_err(|e| LmError::Remote(format!("{url}: {e}")))?;
        resp.body_mut()
            .read_json::<Resp>()
            .map_err(|e| LmError::Remote(format!("{url}: {e}")))
    }
}

impl LanguageModel for RemoteBackend {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn max_context(&self) -> usize {
        self.max_context
    }

    fn logits(&self, ids: &[TokenId], allowed: Option<&Mask>) -> Result<LogitVector, LmError> {
        check_context(ids, &self.vocab, self.max_context)?;
        let allowed_ids = allowed.filter(|_| self.send_allowed).map(|m| m.allowed().collect());
        let resp: LogitsResponse = self.post(
            "/v1/logits",
            &LogitsRequest {
                tokens: ids,
                allowed_ids,
            },
        )?;
        let out = match (resp.logits, resp.sparse) {
            (Some(full), _) => LogitVector(full),
            (None, Some(sparse)) => {
                let mut values = vec![f64::MIN; self.vocab.len()];
                for (id, v) in sparse {
                    *values.get_mut(id as usize).ok_or(LmError::BadTokenId(id))? = v;
                }
                LogitVector(values)
            }
            (None, None) => return Err(LmError::Remote("response has neither `logits` nor `sparse`".into())),
        };
        out.validate(self.vocab.len())?;
        Ok(out)
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, LmError> {
        let resp: TokenizeResponse = self.post("/v1/tokenize", &TokenizeRequest { text })?;
        if let Some(&bad) = resp.tokens.iter().find(|&&id| id as usize >= self.vocab.len()) {
            return Err(LmError::BadTokenId(bad));
        }
        Ok(resp.tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Mock,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Vocabulary file shared by the model and the monitor.
    pub vocab: PathBuf,
    pub endpoint: Option<String>,
    pub mock_table: Option<PathBuf>,
    pub hallucination_bias: f64,
    pub timeout_ms: u64,
    /// Ask the remote server for allowed entries only while a mask is active.
    pub sparse_requests: bool,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            vocab: PathBuf::from("vocab.json"),
            endpoint: None,
            mock_table: None,
            hallucination_bias: 0.0,
            timeout_ms: 60_000,
            sparse_requests: false,
        }
    }
}

impl BackendConfig {
    pub fn build(&self, max_context: usize) -> Result<Arc<dyn LanguageModel>, LmError> {
        let vocab = Arc::new(Vocabulary::load(&self.vocab)?);
        self.build_with_vocab(vocab, max_context)
    }

    pub fn build_with_vocab(&self, vocab: Arc<Vocabulary>, max_context: usize) -> Result<Arc<dyn LanguageModel>, LmError> {
        match self.kind {
            BackendKind::Mock => {
                let table = self
                    .mock_table
                    .as_ref()
                    .ok_or_else(|| LmError::Config("mock backend needs `mock_table`".into()))?;
                Ok(Arc::new(MockBackend::load(vocab, table, self.hallucination_bias, max_context)?))
            }
            BackendKind::Remote => {
                let endpoint = self
                    .endpoint
                    .as_ref()
                    .ok_or_else(|| LmError::Config("remote backend needs `endpoint`".into()))?;
                Ok(Arc::new(RemoteBackend::new(
                    vocab,
                    endpoint,
                    max_context,
                    Duration::from_millis(self.timeout_ms),
                    self.sparse_requests,
                )))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Standard,
    #[serde(rename = "class_expr_types", alias = "classExprTypes")]
    ClassExprTypes,
    Fim,
    #[serde(rename = "fim_class_expr_types", alias = "fim_classExprTypes")]
    FimClassExprTypes,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Standard => "standard",
            Strategy::ClassExprTypes => "classExprTypes",
            Strategy::Fim => "fim",
            Strategy::FimClassExprTypes => "fim_classExprTypes",
        }
    }

    pub fn uses_aux(self) -> bool {
        matches!(self, Strategy::ClassExprTypes | Strategy::FimClassExprTypes)
    }

    pub fn uses_suffix(self) -> bool {
        matches!(self, Strategy::Fim | Strategy::FimClassExprTypes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptPlan {
    pub strategy: Strategy,
    pub total_context: usize,
    pub generation_budget: usize,
    pub aux_fraction: f64,
    /// Defaults to 0.50 for `fim` and 0.40 for `fim_class_expr_types`.
    pub suffix_fraction: Option<f64>,
}

impl Default for PromptPlan {
    fn default() -> Self {
        Self {
            strategy: Strategy::Standard,
            total_context: 2048,
            generation_budget: 512,
            aux_fraction: 0.20,
            suffix_fraction: None,
        }
    }
}

/// `floor(fraction * budget)`, tolerant of representation error in the fraction.
fn quota(fraction: f64, budget: usize) -> usize {
    (fraction * budget as f64 + 1e-9).floor() as usize
}

const FIM_SENTINELS: usize = 3;

impl PromptPlan {
    pub fn with_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn prompt_budget(&self) -> usize {
        self.total_context.saturating_sub(self.generation_budget)
    }

    pub fn suffix_fraction(&self) -> f64 {
        self.suffix_fraction.unwrap_or(match self.strategy {
            Strategy::FimClassExprTypes => 0.40,
            _ => 0.50,
        })
    }

    pub fn aux_quota(&self) -> usize {
        if self.strategy.uses_aux() {
            quota(self.aux_fraction, self.prompt_budget())
        } else {
            0
        }
    }

    pub fn suffix_quota(&self) -> usize {
        if self.strategy.uses_suffix() {
            quota(self.suffix_fraction(), self.prompt_budget())
        } else {
            0
        }
    }

    pub fn validate(&self) -> Result<(), LmError> {
        if self.generation_budget == 0 || self.prompt_budget() == 0 {
            return Err(LmError::Plan(format!(
                "prompt budget {} - {} must be positive",
                self.total_context, self.generation_budget
            )));
        }
        let fractions = [self.aux_fraction, self.suffix_fraction()];
        if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(LmError::Plan("fractions must lie in [0, 1]".into()));
        }
        let used = if self.strategy.uses_aux() { self.aux_fraction } else { 0.0 }
            + if self.strategy.uses_suffix() { self.suffix_fraction() } else { 0.0 };
        if used > 1.0 + 1e-12 {
            return Err(LmError::Plan(format!("fractions for {} sum to {used} > 1", self.strategy.name())));
        }
        if self.strategy.uses_suffix() && self.prompt_budget() < FIM_SENTINELS {
            return Err(LmError::Plan("prompt budget cannot hold the FIM sentinels".into()));
        }
        Ok(())
    }
}

/// Texts a prompt is assembled from.
#[derive(Debug, Clone, Copy, Default)]
pub struct PromptInputs<'a> {
    pub prefix: &'a str,
    pub suffix: Option<&'a str>,
    /// Concatenated type-definition files for class-expression-type prompts.
    pub aux: Option<&'a str>,
}

/// The assembled prompt and how many tokens each segment kept.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BuiltPrompt {
    pub ids: Vec<TokenId>,
    pub aux_tokens: usize,
    pub prefix_tokens: usize,
    pub suffix_tokens: usize,
    pub sentinel_tokens: usize,
}

fn keep_tail(mut ids: Vec<TokenId>, n: usize) -> Vec<TokenId> {
    if ids.len() > n {
        ids.drain(..ids.len() - n);
    }
    ids
}

fn keep_head(mut ids: Vec<TokenId>, n: usize) -> Vec<TokenId> {
    ids.truncate(n);
    ids
}

/// Builds a prompt within `plan.prompt_budget()` tokens. Prefix and auxiliary
/// text lose tokens from the left, the suffix from the right; budget a segment
/// does not use goes to the prefix.
pub fn build_prompt(plan: &PromptPlan, inputs: &PromptInputs<'_>, model: &dyn LanguageModel) -> Result<BuiltPrompt, LmError> {
    plan.validate()?;
    let strategy = plan.strategy.name();
    let budget = plan.prompt_budget();

    let aux = if plan.strategy.uses_aux() {
        let text = inputs.aux.ok_or(LmError::MissingInput {
            strategy,
            field: "class_expr_type_files",
        })?;
        let text = format!("{text}\n");
        keep_tail(model.tokenize(&text)?, plan.aux_quota())
    } else {
        Vec::new()
    };

    let (suffix, sentinels) = if plan.strategy.uses_suffix() {
        let text = inputs.suffix.ok_or(LmError::MissingInput { strategy, field: "suffix" })?;
        let fim = model.vocab().fim().ok_or(LmError::MissingInput {
            strategy,
            field: "FIM sentinel tokens in the vocabulary",
        })?;
        let room = budget - FIM_SENTINELS - aux.len();
        (keep_head(model.tokenize(text)?, plan.suffix_quota().min(room)), Some(fim))
    } else {
        (Vec::new(), None)
    };

    let sentinel_tokens = if sentinels.is_some() { FIM_SENTINELS } else { 0 };
    let prefix_room = budget - sentinel_tokens - aux.len() - suffix.len();
    let prefix = keep_tail(model.tokenize(inputs.prefix)?, prefix_room);

    let mut ids = Vec::with_capacity(budget);
    match sentinels {
        None => {
            ids.extend(&aux);
            ids.extend(&prefix);
        }
        Some(fim) => {
            ids.push(fim.prefix);
            ids.extend(&aux);
            ids.extend(&prefix);
            ids.push(fim.suffix);
            ids.extend(&suffix);
            ids.push(fim.middle);
        }
    }
    debug_assert!(ids.len() <= budget);
    Ok(BuiltPrompt {
        ids,
        aux_tokens: aux.len(),
        prefix_tokens: prefix.len(),
        suffix_tokens: suffix.len(),
        sentinel_tokens,
    })
}
