//! Offline evaluation of autocomplete suggestions for the user side of
//! human-chatbot conversations.
//!
//! The pipeline is: [`corpus`] curates conversations and prefix instances,
//! a [`provider`] samples continuations with per-token log-probabilities,
//! [`candgen`] expands and ranks them into suggestions, [`simulator`]
//! replays the suggest/accept loop against the ground-truth turn, and
//! [`metrics`] turns the resulting traces into saved@k, acceptance rate,
//! latency and sweep reports.

pub mod candgen;
pub mod corpus;
pub mod metrics;
pub mod provider;
pub mod simulator;
pub mod steplog;
pub mod text;

pub use candgen::{Candidate, ExpansionPolicy, GenConfig};
pub use corpus::{Conversation, Message, PrefixInstance, Role};
pub use metrics::{EvalReport, SweepResult, TurnScore};
pub use provider::{CompletionProvider, CompletionRequest, ProviderError, SampledCompletion};
pub use simulator::{StepRecord, SuggestionMode, TurnTrace};
