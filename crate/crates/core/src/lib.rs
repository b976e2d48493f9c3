//! Core library for a claim-centric scientific document QA pipeline.
//!
//! The pipeline turns parsed multimodal papers (text, figures, tables,
//! captions) into QA training instances in two stages: atomic QA synthesis on
//! focused context units, then regrounding of each QA pair into its
//! full-document context with a templated evidence-localization prefix.
//! A companion evaluation harness runs models over benchmark items under
//! controlled context-noise settings and scores responses with an LLM judge.

pub mod claims;
pub mod corpus;
pub mod eval;
pub mod export;
pub mod gateway;
pub mod prompts;
pub mod qa;
pub mod reground;

pub use corpus::{ContextUnit, ParsedPaper, Paragraph, Section, StudyGate, Visual, VisualKind};
pub use gateway::{ChatRequest, ChatResponse, Gateway, GatewayError, Message, Role};
pub use qa::{QaKind, QaItem};
pub use reground::{NoiseSetting, PackingBudget, TrainingInstance};
