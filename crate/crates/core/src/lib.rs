//! Monitor-guided decoding for code language models.
//!
//! A [`monitor::Monitor`] watches the text being generated. When it ends in an
//! object dereference (`obj.`), the monitor asks a [`suggest::SuggestionProvider`]
//! which members the receiver's type has, and restricts the following tokens
//! with a [`vocab::Mask`] until one of those names has been written out.
//! [`decode`] runs the sampling loop and [`harness`] evaluates completions with
//! the metrics in [`metrics`].

pub mod decode;
pub mod harness;
pub mod javalex;
pub mod lm;
pub mod metrics;
pub mod monitor;
pub mod par;
pub mod suggest;
pub mod vocab;

pub use decode::{generate, run_trials, Decoder, GenerationRecord, SamplerConfig, StopReason};
pub use harness::{RunConfig, TestCase};
pub use monitor::{Monitor, MonitorState};
pub use par::Execution;
pub use vocab::{maskgen, DelimiterSet, Mask, SuggestionSet, Vocabulary};
