//! Counterfactual grounding evaluation for vision-language models.
//!
//! Every benchmark item is posed three times: with its real image, with a
//! uniform gray blank, and with an image borrowed from another item of the
//! same benchmark. Comparing the answers (and the visual language used in the
//! rationale) across those conditions shows whether a model's predictions
//! actually depend on what it is shown.
//!
//! The crate is organized by pipeline stage:
//!
//! - [`corpus`]: benchmark loading, stratified sampling, blank/shuffle conditions
//! - [`inference`]: prompt construction, chat-completions client, replay store
//! - [`parsing`]: `<think>`/`<answer>` extraction and answer normalization
//! - [`claims`]: novel visual claim detection against a visual lexicon
//! - [`metrics`]: per-example outcomes and the grounding/hallucination rates
//! - [`stats`]: bootstrap, permutation, paired t, Spearman, Cohen's kappa
//! - [`audit`]: high-risk case queues and the local annotation server
//! - [`report`]: table rendering and JSON/CSV/Markdown export
//! - [`pipeline`]: config validation, run manifest, resumable `run-all`
//! - [`agents`]: scripted responders with known metric values

pub mod agents;
pub mod audit;
pub mod claims;
pub mod corpus;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod parsing;
pub mod pipeline;
pub mod report;
pub mod stats;

pub use claims::{nvc_indicator, NvcResult, VisualLexicon};
pub use corpus::{BenchmarkExample, EvaluationItem, ImageRef};
pub use inference::{Condition, RawResponse};
pub use metrics::{ExampleOutcome, GroundingMetrics, HallucinationMetrics};
