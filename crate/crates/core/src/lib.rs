//! Construction of context-conflicting QA datasets, tracing of reader answers
//! back to generated or retrieved contexts, and the preference metrics
//! computed over them.
//!
//! The crate is organized bottom-up:
//!
//! - [`textnorm`]: answer normalization, exact match, containment, sentences
//! - [`backends`]: readers/generators ([`TextModel`]) and retrievers ([`Retriever`])
//! - [`pipeline`]: context preparation, traceability and conflict labeling, hybrid reads
//! - [`metrics`]: rho proportions, DiffGR, EM, recall, length statistics, reports
//! - [`analysis`]: similarity slices and completeness variants

pub mod analysis;
pub mod backends;
pub mod error;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod textnorm;

pub use analysis::{
    context_similarity, delta_sim, quantile_slices, s_trunc, similarity_matched, slice_report, trunc,
    Aggregation, CompletenessVariants, SimMetric, SimilarityRecord, Slice, SliceReport,
};
pub use backends::{
    BackendKind, BackendSpec, Bm25Index, Bm25Params, Mode, ModelRequest, RetrievedHit, Retriever,
    TextModel,
};
pub use error::{Error, Result};
pub use io::FileHeader;
pub use metrics::{diff_gr, proportions, LengthStats, MetricsReport, Proportions, ReportSubset};
pub use pipeline::{
    Classification, Context, ContextSource, DropReason, HybridRecord, OrderMode, PipelineConfig,
    Prompts, QaExample, Subset, TracedSample, Variant,
};
pub use textnorm::{contains_answer, exact_match, matches_any, normalize_answer, word_count};
