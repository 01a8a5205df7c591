//! The dereference monitor: watches generated text, asks the static analysis
//! for member names when the text ends in `obj.`, and restricts the next tokens
//! to those names until an identifier has been completed.

use serde::{Deserialize, Serialize};

use crate::javalex;
use crate::suggest::SuggestError;
use crate::vocab::{maskgen_with, DelimiterSet, Mask, SuggestionSet, TokenId, VocabError, Vocabulary};
use crate::par::Execution;

#[derive(Debug, thiserror::Error)]
pub enum MonitorError {
    #[error("mask violation: token {token:?} is neither delimiter-bearing nor a prefix of any residual")]
    MaskViolation { token: String },
    #[error("update called while the monitor is not active")]
    NotActive,
    #[error("suggestion provider failed: {0}")]
    Provider(#[from] SuggestError),
    #[error(transparent)]
    Vocab(#[from] VocabError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "residuals", rename_all = "snake_case")]
pub enum MonitorState {
    Wait,
    Active(SuggestionSet),
    Abandoned,
}

/// What to do when the analysis returns no suggestions at a trigger.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnEmpty {
    #[default]
    Abandon,
    Unconstrained,
}

/// What to do when the provider errors or times out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnProviderError {
    /// Treat as an empty suggestion set.
    #[default]
    Empty,
    Propagate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    pub on_empty: OnEmpty,
    pub on_provider_error: OnProviderError,
}

/// Document text up to the generation frontier.
#[derive(Debug, Clone, Copy)]
pub struct TriggerContext<'a> {
    pub generated_text: &'a str,
    pub cursor: usize,
}

impl<'a> TriggerContext<'a> {
    pub fn at_end(text: &'a str) -> Self {
        Self {
            generated_text: text,
            cursor: text.len(),
        }
    }

    pub fn frontier(&self) -> &'a str {
        &self.generated_text[..self.cursor.min(self.generated_text.len())]
    }
}

/// True when the text before the cursor ends in an object dereference `.`.
pub fn pre_trigger(ctx: &TriggerContext<'_>) -> bool {
    let text = ctx.frontier();
    if !text.ends_with('.') {
        return false;
    }
    let toks = javalex::lex(text);
    match toks.last() {
        Some(last) if last.end() == text.len() => javalex::is_dereference_dot(&toks, toks.len() - 1),
        _ => false,
    }
}

impl MonitorState {
    pub fn on_trigger(result: SuggestionSet, policy: OnEmpty) -> MonitorState {
        if !result.is_empty() {
            MonitorState::Active(result)
        } else {
            match policy {
                OnEmpty::Abandon => MonitorState::Abandoned,
                OnEmpty::Unconstrained => MonitorState::Wait,
            }
        }
    }

    /// Advances an active state past a sampled token.
    pub fn update(&self, token: &str, delims: &DelimiterSet) -> Result<MonitorState, MonitorError> {
        let MonitorState::Active(residuals) = self else {
            return Err(MonitorError::NotActive);
        };
        if delims.any_in(token) {
            return Ok(MonitorState::Wait);
        }
        let next = residuals.strip_prefix(token);
        if next.is_empty() {
            return Err(MonitorError::MaskViolation {
                token: token.to_string(),
            });
        }
        Ok(MonitorState::Active(next))
    }

    pub fn is_active(&self) -> bool {
        matches!(self, MonitorState::Active(_))
    }
}

/// The static analysis as seen by the monitor.
pub trait TriggerAnalysis {
    fn analyze(&self, ctx: &TriggerContext<'_>) -> Result<SuggestionSet, SuggestError>;
}

impl<F> TriggerAnalysis for F
where
    F: Fn(&TriggerContext<'_>) -> Result<SuggestionSet, SuggestError>,
{
    fn analyze(&self, ctx: &TriggerContext<'_>) -> Result<SuggestionSet, SuggestError> {
        self(ctx)
    }
}

/// One entry of a generation's monitor log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum MonitorEvent {
    Trigger {
        offset: usize,
    },
    Suggestions {
        items: Vec<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<String>,
    },
    Mask {
        digest: String,
        allowed: usize,
    },
    Token {
        id: TokenId,
        text: String,
    },
    State {
        state: MonitorState,
    },
}

#[derive(Debug)]
pub enum StepOutcome {
    Unconstrained,
    Masked(Mask),
    Abort,
}

/// A monitor bound to one generation.
pub struct Monitor<'v> {
    vocab: &'v Vocabulary,
    delims: &'v DelimiterSet,
    config: MonitorConfig,
    exec: Execution,
    state: MonitorState,
    log: Vec<MonitorEvent>,
}

impl<'v> Monitor<'v> {
    pub fn new(vocab: &'v Vocabulary, delims: &'v DelimiterSet, config: MonitorConfig) -> Self {
        Self {
            vocab,
            delims,
            config,
            exec: Execution::default(),
            state: MonitorState::Wait,
            log: Vec::new(),
        }
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn state(&self) -> &MonitorState {
        &self.state
    }

    pub fn log(&self) -> &[MonitorEvent] {
        &self.log
    }

    pub fn into_log(self) -> Vec<MonitorEvent> {
        self.log
    }

    fn transition(&mut self, next: MonitorState) {
        if next != self.state {
            self.log.push(MonitorEvent::State { state: next.clone() });
            self.state = next;
        }
    }

    /// Decides how the next token is sampled. At most one provider call.
    pub fn step(
        &mut self,
        ctx: &TriggerContext<'_>,
        analysis: &dyn TriggerAnalysis,
    ) -> Result<StepOutcome, MonitorError> {
        if self.state == MonitorState::Wait && pre_trigger(ctx) {
            self.log.push(MonitorEvent::Trigger { offset: ctx.cursor });
            let found = match analysis.analyze(ctx) {
                Ok(s) => {
                    self.log.push(MonitorEvent::Suggestions {
                        items: s.iter().map(str::to_string).collect(),
                        error: None,
                    });
                    s
                }
                Err(e) => {
                    self.log.push(MonitorEvent::Suggestions {
                        items: Vec::new(),
                        error: Some(e.to_string()),
                    });
                    if self.config.on_provider_error == OnProviderError::Propagate {
                        return Err(e.into());
                    }
                    SuggestionSet::new()
                }
            };
            self.transition(MonitorState::on_trigger(found, self.config.on_empty));
        }
        match &self.state {
            MonitorState::Wait => Ok(StepOutcome::Unconstrained),
            MonitorState::Abandoned => Ok(StepOutcome::Abort),
            MonitorState::Active(residuals) => {
                let mask = maskgen_with(residuals, self.vocab, self.delims, self.exec)?;
                self.log.push(MonitorEvent::Mask {
                    digest: mask.digest(),
                    allowed: mask.count_ones(),
                });
                Ok(StepOutcome::Masked(mask))
            }
        }
    }

    /// Records a sampled token and advances the state.
    pub fn observe(&mut self, id: TokenId, text: &str) -> Result<(), MonitorError> {
        self.log.push(MonitorEvent::Token {
            id,
            text: text.to_string(),
        });
        if self.state.is_active() {
            let next = self.state.update(text, self.delims)?;
            self.transition(next);
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ReplayError {
    #[error("event {index}: logged state {logged:?} but replay gives {replayed:?}")]
    StateMismatch {
        index: usize,
        logged: MonitorState,
        replayed: MonitorState,
    },
    #[error("event {index}: mask digest {logged} but replay gives {replayed}")]
    MaskMismatch {
        index: usize,
        logged: String,
        replayed: String,
    },
    #[error("event {index}: token {id} sampled while masked out")]
    MaskedTokenSampled { index: usize, id: TokenId },
    #[error("event {index}: {message}")]
    Invalid { index: usize, message: String },
}

/// A completed post-trigger identifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmittedIdentifier {
    pub suggestions: SuggestionSet,
    pub identifier: String,
    pub in_set: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySummary {
    pub final_state: MonitorState,
    pub trajectory: Vec<MonitorState>,
    pub identifiers: Vec<EmittedIdentifier>,
    pub masked_tokens: usize,
}

/// Re-derives the state trajectory from a log and checks every logged mask
/// and every token sampled under a mask.
pub fn replay(
    events: &[MonitorEvent],
    vocab: &Vocabulary,
    delims: &DelimiterSet,
    config: MonitorConfig,
) -> Result<ReplaySummary, ReplayError> {
    let mut state = MonitorState::Wait;
    let mut trajectory = vec![state.clone()];
    let mut identifiers = Vec::new();
    let mut current_mask: Option<Mask> = None;
    let mut pending: Option<(SuggestionSet, String)> = None;
    let mut masked_tokens = 0;

    let push_state = |state: &MonitorState, trajectory: &mut Vec<MonitorState>| {
        if trajectory.last() != Some(state) {
            trajectory.push(state.clone());
        }
    };

    for (index, ev) in events.iter().enumerate() {
        match ev {
            MonitorEvent::Trigger { .. } => {
                if state != MonitorState::Wait {
                    return Err(ReplayError::Invalid {
                        index,
                        message: "trigger outside the wait state".into(),
                    });
                }
            }
            MonitorEvent::Suggestions { items, .. } => {
                let set: SuggestionSet = items.iter().map(String::as_str).collect();
                state = MonitorState::on_trigger(set.clone(), config.on_empty);
                if state.is_active() {
                    pending = Some((set, String::new()));
                }
                push_state(&state, &mut trajectory);
            }
            MonitorEvent::Mask { digest, .. } => {
                let MonitorState::Active(residuals) = &state else {
                    return Err(ReplayError::Invalid {
                        index,
                        message: "mask while not active".into(),
                    });
                };
                let mask = maskgen_with(residuals, vocab, delims, Execution::Sequential).map_err(|e| {
                    ReplayError::Invalid {
                        index,
                        message: e.to_string(),
                    }
                })?;
                if &mask.digest() != digest {
                    return Err(ReplayError::MaskMismatch {
                        index,
                        logged: digest.clone(),
                        replayed: mask.digest(),
                    });
                }
                current_mask = Some(mask);
            }
            MonitorEvent::Token { id, text } => {
                if state.is_active() {
                    let mask = current_mask.take().ok_or_else(|| ReplayError::Invalid {
                        index,
                        message: "token sampled while active without a mask".into(),
                    })?;
                    if !mask.get(*id) {
                        return Err(ReplayError::MaskedTokenSampled { index, id: *id });
                    }
                    masked_tokens += 1;
                    if let Some((_, ident)) = pending.as_mut() {
                        let cut = text.bytes().position(|b| delims.contains(b)).unwrap_or(text.len());
                        ident.push_str(&text[..cut]);
                        if cut < text.len() {
                            let (suggestions, identifier) = pending.take().unwrap();
                            identifiers.push(EmittedIdentifier {
                                in_set: suggestions.contains(&identifier),
                                suggestions,
                                identifier,
                            });
                        }
                    }
                    state = state.update(text, delims).map_err(|e| ReplayError::Invalid {
                        index,
                        message: e.to_string(),
                    })?;
                    push_state(&state, &mut trajectory);
                }
            }
            MonitorEvent::State { state: logged } => {
                if logged != &state {
                    return Err(ReplayError::StateMismatch {
                        index,
                        logged: logged.clone(),
                        replayed: state.clone(),
                    });
                }
            }
        }
    }
    Ok(ReplaySummary {
        final_state: state,
        trajectory,
        identifiers,
        masked_tokens,
    })
}
