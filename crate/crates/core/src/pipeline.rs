//! Dataset construction and hybrid evaluation.
//!
//! Construction runs in three steps per question: prepare one retrieved and
//! one length-matched generated context, answer the question from each
//! context alone and keep the sample only if each answer is traceable to its
//! context, then label the sample AIG or AIR when exactly one of the two
//! answers is correct. Hybrid evaluation reads both contexts together and
//! records which candidate the reader's answer agrees with.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::hash::Hasher;
use std::str::FromStr;

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{context_fingerprint, Mode, ModelRequest, RetrievedHit, Retriever, TextModel};
use crate::error::{Error, Result};
use crate::textnorm::{contains_answer, exact_match, matches_any, normalize_answer, word_count};

pub const DEFAULT_LENGTH_CANDIDATES: [u32; 3] = [80, 100, 120];
pub const DEFAULT_ABSTENTIONS: [&str; 4] = [
    "unknown",
    "i dont know",
    "not enough information",
    "no answer",
];

/// One line of `questions.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaExample {
    pub id: String,
    pub question: String,
    pub answers: Vec<String>,
}

impl QaExample {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.question.trim().is_empty() {
            return Err(format!("example {:?} has an empty question", self.id));
        }
        if self.answers.is_empty() {
            return Err(format!("example {:?} has no golden answers", self.id));
        }
        Ok(())
    }
}

/// Checks per-example invariants and id uniqueness across a dataset.
pub fn validate_examples(examples: &[QaExample]) -> Result<()> {
    let mut seen = HashSet::new();
    for ex in examples {
        ex.validate().map_err(Error::Validation)?;
        if !seen.insert(ex.id.as_str()) {
            return Err(Error::Validation(format!("duplicate example id {:?}", ex.id)));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextSource {
    Generated,
    Retrieved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Nature,
    Trunc,
    Strunc,
    Retrieved,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Nature => "nature",
            Variant::Trunc => "trunc",
            Variant::Strunc => "strunc",
            Variant::Retrieved => "retrieved",
        }
    }
}

/// A single retrieved or generated passage; one line of `contexts.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Context {
    pub id: String,
    pub source: ContextSource,
    pub backend: String,
    pub title: Option<String>,
    pub text: String,
    pub word_count: usize,
    pub gen_target_words: Option<u32>,
    pub variant: Variant,
}

impl Context {
    pub fn retrieved(example_id: &str, backend: &str, hit: RetrievedHit) -> Self {
        let mut ctx = Self {
            id: example_id.to_owned(),
            source: ContextSource::Retrieved,
            backend: backend.to_owned(),
            title: Some(hit.title),
            text: hit.body,
            word_count: 0,
            gen_target_words: None,
            variant: Variant::Retrieved,
        };
        ctx.word_count = word_count(&ctx.rendered());
        ctx
    }

    pub fn generated(
        example_id: &str,
        backend: &str,
        text: String,
        target: Option<u32>,
        variant: Variant,
    ) -> Self {
        Self {
            id: example_id.to_owned(),
            source: ContextSource::Generated,
            backend: backend.to_owned(),
            title: None,
            word_count: word_count(&text),
            text,
            gen_target_words: target,
            variant,
        }
    }

    /// Text as shown to readers: `Title: {title} Content: {body}` when titled.
    pub fn rendered(&self) -> String {
        match &self.title {
            Some(title) => format!("Title: {title} Content: {}", self.text),
            None => self.text.clone(),
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.text.trim().is_empty() {
            return Err(format!("context for {:?} has empty text", self.id));
        }
        let wc = word_count(&self.rendered());
        if wc != self.word_count {
            return Err(format!(
                "context for {:?} records word_count {} but has {wc}",
                self.id, self.word_count
            ));
        }
        let is_retrieved = self.source == ContextSource::Retrieved;
        if is_retrieved != (self.variant == Variant::Retrieved) {
            return Err(format!(
                "context for {:?}: variant {} inconsistent with source",
                self.id,
                self.variant.as_str()
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Subset {
    #[serde(rename = "AIG")]
    Aig,
    #[serde(rename = "AIR")]
    Air,
    #[serde(rename = "none")]
    None,
}

impl Subset {
    pub fn as_str(self) -> &'static str {
        match self {
            Subset::Aig => "AIG",
            Subset::Air => "AIR",
            Subset::None => "none",
        }
    }

    pub fn is_conflicting(self) -> bool {
        matches!(self, Subset::Aig | Subset::Air)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    AbstainedGen,
    AbstainedRet,
    NotInGen,
    NotInRet,
    Parametric,
}

impl DropReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DropReason::AbstainedGen => "abstained_gen",
            DropReason::AbstainedRet => "abstained_ret",
            DropReason::NotInGen => "not_in_gen",
            DropReason::NotInRet => "not_in_ret",
            DropReason::Parametric => "parametric",
        }
    }
}

/// The traced quintet plus labels; one line of `traced.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TracedSample {
    #[serde(flatten)]
    pub example: QaExample,
    pub retrieved: Context,
    pub generated: Context,
    pub answer_from_retrieved: String,
    pub answer_from_generated: String,
    pub closed_book: Option<String>,
    pub subset: Subset,
    pub dropped: Option<DropReason>,
}

impl TracedSample {
    pub fn id(&self) -> &str {
        &self.example.id
    }

    /// Retained and labeled AIG or AIR.
    pub fn is_conflicting(&self) -> bool {
        self.dropped.is_none() && self.subset.is_conflicting()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderMode {
    Random,
    GeneratedFirst,
    RetrievedFirst,
}

impl OrderMode {
    pub const ALL: [OrderMode; 3] = [
        OrderMode::GeneratedFirst,
        OrderMode::RetrievedFirst,
        OrderMode::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OrderMode::Random => "random",
            OrderMode::GeneratedFirst => "generated_first",
            OrderMode::RetrievedFirst => "retrieved_first",
        }
    }
}

impl fmt::Display for OrderMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OrderMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "random" => Ok(OrderMode::Random),
            "generated_first" => Ok(OrderMode::GeneratedFirst),
            "retrieved_first" => Ok(OrderMode::RetrievedFirst),
            _ => Err(Error::Config(format!("unknown order {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Classification {
    Gen,
    Ret,
    Llm,
    Other,
}

impl Classification {
    pub fn as_str(self) -> &'static str {
        match self {
            Classification::Gen => "gen",
            Classification::Ret => "ret",
            Classification::Llm => "llm",
            Classification::Other => "other",
        }
    }
}

/// A hybrid read; one line of `eval.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HybridRecord {
    pub id: String,
    pub order: OrderMode,
    pub seed: u64,
    pub hybrid_answer: String,
    pub classification: Classification,
    /// The sample carried a closed-book answer, so `llm` is a live bucket.
    #[serde(default)]
    pub llm_tracked: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prompts {
    /// Length-constrained generation; placeholders `{question}` and `{n}`.
    pub generate: String,
    /// Unconstrained generation used for truncation variants.
    pub generate_free: String,
    /// Reading with context; placeholders `{contexts}` and `{question}`.
    pub read: String,
    pub closed_book: String,
}

impl Default for Prompts {
    fn default() -> Self {
        Self {
            generate: "Generate a background context from Wikipedia to answer the given question \
                       {question}. Keep the length of the document around {n} words."
                .into(),
            generate_free: "Generate a background context from Wikipedia to answer the given \
                            question {question}."
                .into(),
            read: "Refer to the context below and answer the following question with just one \
                   entity. context: {contexts} Question: {question} The answer is"
                .into(),
            closed_book: "Answer the following question with just one entity. Question: \
                          {question} The answer is"
                .into(),
        }
    }
}

impl Prompts {
    pub fn generation(&self, question: &str, n: u32) -> String {
        self.generate
            .replace("{question}", question)
            .replace("{n}", &n.to_string())
    }

    pub fn free_generation(&self, question: &str) -> String {
        self.generate_free.replace("{question}", question)
    }

    pub fn reading(&self, contexts: &str, question: &str) -> String {
        self.read
            .replace("{contexts}", contexts)
            .replace("{question}", question)
    }

    pub fn closed_book(&self, question: &str) -> String {
        self.closed_book.replace("{question}", question)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub prompts: Prompts,
    pub abstention_set: Vec<String>,
    pub length_candidates: Vec<u32>,
    pub workers: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            prompts: Prompts::default(),
            abstention_set: DEFAULT_ABSTENTIONS.iter().map(|s| s.to_string()).collect(),
            length_candidates: DEFAULT_LENGTH_CANDIDATES.to_vec(),
            workers: 1,
        }
    }
}

impl PipelineConfig {
    fn abstentions(&self) -> BTreeSet<String> {
        self.abstention_set
            .iter()
            .map(|a| normalize_answer(a))
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Step 1: context preparation
// ---------------------------------------------------------------------------

pub fn prepare_retrieved(retriever: &dyn Retriever, example: &QaExample) -> Result<Context> {
    let hit = retriever.top1(&example.id, &example.question)?;
    Ok(Context::retrieved(&example.id, retriever.name(), hit))
}

/// Generates once per candidate `n` and keeps the output whose word count is
/// closest to `target`, preferring the smaller `n` on ties.
pub fn generate_length_matched(
    generator: &dyn TextModel,
    example: &QaExample,
    target: usize,
    candidates: &[u32],
    prompts: &Prompts,
) -> Result<Context> {
    if candidates.is_empty() {
        return Err(Error::Config("length candidates must be non-empty".into()));
    }
    if target == 0 {
        return Err(Error::Config("length target must be positive".into()));
    }
    let mut best: Option<(usize, u32, String)> = None;
    for &n in candidates {
        let request = ModelRequest {
            question_id: example.id.clone(),
            mode: Mode::Generate,
            prompt: prompts.generation(&example.question, n),
            context_fingerprint: None,
            target_words: Some(n),
        };
        let text = match generator.complete(&request) {
            Ok(text) if !text.trim().is_empty() => text,
            Ok(_) | Err(Error::EmptyResponse { .. }) => continue,
            Err(e) => return Err(e),
        };
        let distance = word_count(&text).abs_diff(target);
        let better = match &best {
            None => true,
            Some((d, m, _)) => (distance, n) < (*d, *m),
        };
        if better {
            best = Some((distance, n, text));
        }
    }
    let (_, n, text) = best.ok_or_else(|| Error::EmptyResponse {
        context: Some(format!("every generation for {:?} was empty", example.id)),
    })?;
    Ok(Context::generated(
        &example.id,
        generator.name(),
        text,
        Some(n),
        Variant::Nature,
    ))
}

/// Generation without a length instruction (input to the truncation variants).
pub fn generate_unconstrained(
    generator: &dyn TextModel,
    example: &QaExample,
    prompts: &Prompts,
) -> Result<String> {
    let request = ModelRequest {
        question_id: example.id.clone(),
        mode: Mode::Generate,
        prompt: prompts.free_generation(&example.question),
        context_fingerprint: None,
        target_words: None,
    };
    let text = generator.complete(&request)?;
    if text.trim().is_empty() {
        return Err(Error::EmptyResponse {
            context: Some(format!("unconstrained generation for {:?}", example.id)),
        });
    }
    Ok(text)
}

/// Retrieved context plus a generated context length-matched to it.
pub fn prepare_example(
    retriever: &dyn Retriever,
    generator: &dyn TextModel,
    example: &QaExample,
    config: &PipelineConfig,
) -> Result<(Context, Context)> {
    let retrieved = prepare_retrieved(retriever, example)?;
    let generated = generate_length_matched(
        generator,
        example,
        retrieved.word_count.max(1),
        &config.length_candidates,
        &config.prompts,
    )?;
    Ok((retrieved, generated))
}

// ---------------------------------------------------------------------------
// Step 2: candidate answers and traceability
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CandidateAnswer {
    Answer(String),
    /// The reader declined; carries the raw response.
    Abstain(String),
}

impl CandidateAnswer {
    pub fn text(&self) -> &str {
        match self {
            CandidateAnswer::Answer(t) | CandidateAnswer::Abstain(t) => t,
        }
    }

    pub fn is_abstain(&self) -> bool {
        matches!(self, CandidateAnswer::Abstain(_))
    }
}

/// Answers `example` from `context` alone. Responses in the abstention set,
/// or that normalize to nothing, count as abstentions.
pub fn candidate_answer(
    reader: &dyn TextModel,
    example: &QaExample,
    context: &Context,
    config: &PipelineConfig,
) -> Result<CandidateAnswer> {
    let rendered = context.rendered();
    if rendered.trim().is_empty() {
        return Err(Error::Validation(format!("empty context for {:?}", example.id)));
    }
    let request = ModelRequest {
        question_id: example.id.clone(),
        mode: Mode::SingleContext,
        prompt: config.prompts.reading(&rendered, &example.question),
        context_fingerprint: Some(context_fingerprint(&rendered)),
        target_words: None,
    };
    let answer = reader.complete(&request)?;
    Ok(classify_candidate(answer, &config.abstentions()))
}

fn classify_candidate(answer: String, abstentions: &BTreeSet<String>) -> CandidateAnswer {
    let normalized = normalize_answer(&answer);
    if normalized.is_empty() || abstentions.contains(&normalized) {
        CandidateAnswer::Abstain(answer)
    } else {
        CandidateAnswer::Answer(answer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Keep,
    Drop(DropReason),
}

/// Keep iff each candidate appears (token-bounded, normalized) in the context
/// it was read from. Checks run in the order abstained_gen, abstained_ret,
/// not_in_gen, not_in_ret.
pub fn traceability_filter(
    retrieved: &Context,
    generated: &Context,
    from_retrieved: &CandidateAnswer,
    from_generated: &CandidateAnswer,
) -> Verdict {
    let (gen, ret) = match (from_generated, from_retrieved) {
        (CandidateAnswer::Abstain(_), _) => return Verdict::Drop(DropReason::AbstainedGen),
        (_, CandidateAnswer::Abstain(_)) => return Verdict::Drop(DropReason::AbstainedRet),
        (CandidateAnswer::Answer(g), CandidateAnswer::Answer(r)) => (g, r),
    };
    if !contains_answer(&generated.rendered(), gen).unwrap_or(false) {
        return Verdict::Drop(DropReason::NotInGen);
    }
    if !contains_answer(&retrieved.rendered(), ret).unwrap_or(false) {
        return Verdict::Drop(DropReason::NotInRet);
    }
    Verdict::Keep
}

// ---------------------------------------------------------------------------
// Step 3: conflict extraction and the parametric-knowledge filter
// ---------------------------------------------------------------------------

pub fn exclusivity_label<S: AsRef<str>>(
    from_generated: &str,
    from_retrieved: &str,
    golds: &[S],
) -> Subset {
    match (
        matches_any(from_generated, golds),
        matches_any(from_retrieved, golds),
    ) {
        (true, false) => Subset::Aig,
        (false, true) => Subset::Air,
        _ => Subset::None,
    }
}

pub fn closed_book(reader: &dyn TextModel, example: &QaExample, prompts: &Prompts) -> Result<String> {
    let request = ModelRequest {
        question_id: example.id.clone(),
        mode: Mode::ClosedBook,
        prompt: prompts.closed_book(&example.question),
        context_fingerprint: None,
        target_words: None,
    };
    reader.complete(&request)
}

/// Keep iff the closed-book, retrieved-context and generated-context answers
/// are pairwise distinct under exact match.
pub fn parametric_filter(closed_book: &str, from_retrieved: &str, from_generated: &str) -> bool {
    !exact_match(closed_book, from_retrieved)
        && !exact_match(from_retrieved, from_generated)
        && !exact_match(closed_book, from_generated)
}

/// Runs steps 2 and 3 for one example. With `parametric`, conflicting samples
/// also get a closed-book answer and are dropped unless all three answers differ.
pub fn trace_example(
    reader: &dyn TextModel,
    example: &QaExample,
    retrieved: Context,
    generated: Context,
    config: &PipelineConfig,
    parametric: bool,
) -> Result<TracedSample> {
    let from_retrieved = candidate_answer(reader, example, &retrieved, config)?;
    let from_generated = candidate_answer(reader, example, &generated, config)?;
    let verdict = traceability_filter(&retrieved, &generated, &from_retrieved, &from_generated);

    let mut sample = TracedSample {
        example: example.clone(),
        retrieved,
        generated,
        answer_from_retrieved: from_retrieved.text().to_owned(),
        answer_from_generated: from_generated.text().to_owned(),
        closed_book: None,
        subset: Subset::None,
        dropped: None,
    };
    if let Verdict::Drop(reason) = verdict {
        sample.dropped = Some(reason);
        return Ok(sample);
    }
    sample.subset = exclusivity_label(
        &sample.answer_from_generated,
        &sample.answer_from_retrieved,
        &example.answers,
    );
    if parametric && sample.subset.is_conflicting() {
        let llm = closed_book(reader, example, &config.prompts)?;
        let keep = parametric_filter(
            &llm,
            &sample.answer_from_retrieved,
            &sample.answer_from_generated,
        );
        sample.closed_book = Some(llm);
        if !keep {
            sample.dropped = Some(DropReason::Parametric);
            sample.subset = Subset::None;
        }
    }
    Ok(sample)
}

// ---------------------------------------------------------------------------
// Hybrid evaluation
// ---------------------------------------------------------------------------

/// Whether the generated context goes first. `Random` draws once per
/// `(seed, example_id)`, independent of the rest of the dataset.
pub fn generated_first(order: OrderMode, seed: u64, example_id: &str) -> bool {
    match order {
        OrderMode::GeneratedFirst => true,
        OrderMode::RetrievedFirst => false,
        OrderMode::Random => {
            let mut h = FnvHasher::default();
            h.write(example_id.as_bytes());
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ h.finish());
            rng.gen_bool(0.5)
        }
    }
}

/// The context block of a hybrid prompt, one rendered context per line.
pub fn hybrid_context_block(sample: &TracedSample, generated_first: bool) -> String {
    let gen = sample.generated.rendered();
    let ret = sample.retrieved.rendered();
    if generated_first {
        format!("{gen}\n{ret}")
    } else {
        format!("{ret}\n{gen}")
    }
}

/// Priority gen → ret → llm → other.
pub fn classify(
    answer: &str,
    from_generated: &str,
    from_retrieved: &str,
    closed_book: Option<&str>,
) -> Classification {
    if exact_match(answer, from_generated) {
        Classification::Gen
    } else if exact_match(answer, from_retrieved) {
        Classification::Ret
    } else if closed_book.is_some_and(|llm| exact_match(answer, llm)) {
        Classification::Llm
    } else {
        Classification::Other
    }
}

pub fn hybrid_answer(
    reader: &dyn TextModel,
    sample: &TracedSample,
    order: OrderMode,
    seed: u64,
    prompts: &Prompts,
) -> Result<HybridRecord> {
    if !sample.is_conflicting() {
        return Err(Error::Validation(format!(
            "hybrid reading needs a conflicting sample, {:?} is {}",
            sample.id(),
            sample.subset.as_str()
        )));
    }
    let block = hybrid_context_block(sample, generated_first(order, seed, sample.id()));
    let request = ModelRequest {
        question_id: sample.id().to_owned(),
        mode: Mode::Hybrid,
        prompt: prompts.reading(&block, &sample.example.question),
        context_fingerprint: Some(context_fingerprint(&block)),
        target_words: None,
    };
    let answer = reader.complete(&request)?;
    let classification = classify(
        &answer,
        &sample.answer_from_generated,
        &sample.answer_from_retrieved,
        sample.closed_book.as_deref(),
    );
    Ok(HybridRecord {
        id: sample.id().to_owned(),
        order,
        seed,
        hybrid_answer: answer,
        classification,
        llm_tracked: sample.closed_book.is_some(),
    })
}

/// Applies `f` to every item on a pool of `workers` threads, preserving input order.
pub fn run_parallel<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

/// Evaluates every conflicting sample; output sorted by id.
pub fn evaluate_samples(
    reader: &dyn TextModel,
    samples: &[TracedSample],
    order: OrderMode,
    seed: u64,
    config: &PipelineConfig,
) -> Result<Vec<HybridRecord>> {
    let conflicting: Vec<&TracedSample> = samples.iter().filter(|s| s.is_conflicting()).collect();
    let mut records = run_parallel(&conflicting, config.workers, |s| {
        hybrid_answer(reader, s, order, seed, &config.prompts)
    })?;
    records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{Script, ScriptEntry, ScriptedModel};

    fn ex(id: &str, q: &str, golds: &[&str]) -> QaExample {
        QaExample {
            id: id.into(),
            question: q.into(),
            answers: golds.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn words(n: usize) -> String {
        (0..n).map(|i| format!("w{i}")).collect::<Vec<_>>().join(" ")
    }

    fn gen_entry(q: &str, n: u32, text: String) -> ScriptEntry {
        ScriptEntry {
            question_id: q.into(),
            mode: Mode::Generate,
            context_fingerprint: None,
            answer: text,
            target_words: Some(n),
        }
    }

    fn reader_entry(q: &str, mode: Mode, ctx: Option<&str>, answer: &str) -> ScriptEntry {
        ScriptEntry {
            question_id: q.into(),
            mode,
            context_fingerprint: ctx.map(context_fingerprint),
            answer: answer.into(),
            target_words: None,
        }
    }

    fn pakistan() -> (QaExample, Context, Context) {
        let e = ex("tqa1", "Which city was the capital of Pakistan before Islamabad?", &["Rawalpindi"]);
        let retrieved = Context::retrieved(
            "tqa1",
            "gold",
            RetrievedHit {
                doc_id: "p1".into(),
                title: "Islamabad".into(),
                body: "The capital was first shifted temporarily to Rawalpindi in the early 60s."
                    .into(),
                score: 1.0,
            },
        );
        let generated = Context::generated(
            "tqa1",
            "gen",
            "Karachi was the first capital of Pakistan before Islamabad was built.".into(),
            Some(100),
            Variant::Nature,
        );
        (e, retrieved, generated)
    }

    #[test]
    fn retrieved_context_rendering() {
        let (_, retrieved, generated) = pakistan();
        assert!(retrieved.rendered().starts_with("Title: Islamabad Content: The capital"));
        assert_eq!(retrieved.word_count, word_count(&retrieved.rendered()));
        assert!(retrieved.validate().is_ok());
        assert!(generated.validate().is_ok());
        let mut bad = generated.clone();
        bad.variant = Variant::Retrieved;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn length_matching_picks_closest() {
        let e = ex("q", "Q?", &["x"]);
        let script = Script::new([
            gen_entry("q", 80, words(90)),
            gen_entry("q", 100, words(104)),
            gen_entry("q", 120, words(121)),
        ])
        .unwrap();
        let g = ScriptedModel::new("gen", script);
        let ctx = generate_length_matched(&g, &e, 107, &[80, 100, 120], &Prompts::default()).unwrap();
        assert_eq!(ctx.word_count, 104);
        assert_eq!(ctx.gen_target_words, Some(100));
        assert_eq!(ctx.variant, Variant::Nature);

        let single = generate_length_matched(&g, &e, 107, &[80], &Prompts::default()).unwrap();
        assert_eq!(single.word_count, 90);
    }

    #[test]
    fn length_matching_tie_prefers_smaller_n() {
        let e = ex("q", "Q?", &["x"]);
        let script = Script::new([gen_entry("q", 120, words(114)), gen_entry("q", 100, words(100))]).unwrap();
        let g = ScriptedModel::new("gen", script);
        let ctx = generate_length_matched(&g, &e, 107, &[120, 100], &Prompts::default()).unwrap();
        assert_eq!(ctx.gen_target_words, Some(100));
    }

    #[test]
    fn length_matching_all_empty() {
        let e = ex("q", "Q?", &["x"]);
        let script = Script::new([gen_entry("q", 80, " ".into())]).unwrap();
        let g = ScriptedModel::new("gen", script);
        assert!(matches!(
            generate_length_matched(&g, &e, 107, &[80], &Prompts::default()),
            Err(Error::EmptyResponse { .. })
        ));
    }

    #[test]
    fn candidate_answers_and_abstention() {
        let (e, retrieved, generated) = pakistan();
        let script = Script::new([
            reader_entry("tqa1", Mode::SingleContext, Some(&retrieved.rendered()), "Rawalpindi"),
            reader_entry("tqa1", Mode::SingleContext, Some(&generated.rendered()), "Unknown"),
        ])
        .unwrap();
        let reader = ScriptedModel::new("reader", script);
        let cfg = PipelineConfig::default();
        assert_eq!(
            candidate_answer(&reader, &e, &retrieved, &cfg).unwrap(),
            CandidateAnswer::Answer("Rawalpindi".into())
        );
        assert!(candidate_answer(&reader, &e, &generated, &cfg).unwrap().is_abstain());
        let cfg = PipelineConfig {
            abstention_set: vec!["I don't know".into()],
            ..Default::default()
        };
        assert!(!candidate_answer(&reader, &e, &generated, &cfg).unwrap().is_abstain());
    }

    #[test]
    fn traceability() {
        let (_, retrieved, generated) = pakistan();
        let ans = |s: &str| CandidateAnswer::Answer(s.into());
        assert_eq!(
            traceability_filter(&retrieved, &generated, &ans("Rawalpindi"), &ans("Karachi")),
            Verdict::Keep
        );
        assert_eq!(
            traceability_filter(&retrieved, &generated, &ans("Rawalpindi"), &ans("Lahore")),
            Verdict::Drop(DropReason::NotInGen)
        );
        assert_eq!(
            traceability_filter(&retrieved, &generated, &ans("Lahore"), &ans("Karachi")),
            Verdict::Drop(DropReason::NotInRet)
        );
        let abstain = CandidateAnswer::Abstain("unknown".into());
        assert_eq!(
            traceability_filter(&retrieved, &generated, &abstain, &abstain),
            Verdict::Drop(DropReason::AbstainedGen)
        );
        assert_eq!(
            traceability_filter(&retrieved, &generated, &abstain, &ans("Karachi")),
            Verdict::Drop(DropReason::AbstainedRet)
        );
    }

    #[test]
    fn exclusivity() {
        assert_eq!(exclusivity_label("Karachi", "Rawalpindi", &["Rawalpindi"]), Subset::Air);
        assert_eq!(exclusivity_label("Paris", "paris", &["Paris"]), Subset::None);
        assert_eq!(exclusivity_label("Paris", "Lyon", &["Paris"]), Subset::Aig);
        assert_eq!(exclusivity_label("Nice", "Lyon", &["Paris"]), Subset::None);
    }

    #[test]
    fn parametric() {
        assert!(parametric_filter("Paris", "Lyon", "Nice"));
        assert!(!parametric_filter("Paris", "Lyon", "the paris"));
        assert!(!parametric_filter("paris", "Lyon", "Paris"));
        assert!(!parametric_filter("Lyon", "lyon", "Nice"));
    }

    #[test]
    fn closed_book_lookup() {
        let e = ex("q1", "Capital of France?", &["Paris"]);
        let reader = ScriptedModel::new(
            "r",
            Script::new([reader_entry("q1", Mode::ClosedBook, None, "Paris")]).unwrap(),
        );
        assert_eq!(closed_book(&reader, &e, &Prompts::default()).unwrap(), "Paris");
        let e2 = ex("q2", "?", &["x"]);
        assert!(matches!(
            closed_book(&reader, &e2, &Prompts::default()),
            Err(Error::ScriptMiss { .. })
        ));
    }

    fn traced_air() -> TracedSample {
        let (e, retrieved, generated) = pakistan();
        TracedSample {
            example: e,
            retrieved,
            generated,
            answer_from_retrieved: "Rawalpindi".into(),
            answer_from_generated: "Karachi".into(),
            closed_book: None,
            subset: Subset::Air,
            dropped: None,
        }
    }

    #[test]
    fn trace_example_end_to_end() {
        let (e, retrieved, generated) = pakistan();
        let script = Script::new([
            reader_entry("tqa1", Mode::SingleContext, Some(&retrieved.rendered()), "Rawalpindi"),
            reader_entry("tqa1", Mode::SingleContext, Some(&generated.rendered()), "Karachi"),
            reader_entry("tqa1", Mode::ClosedBook, None, "karachi"),
        ])
        .unwrap();
        let reader = ScriptedModel::new("reader", script);
        let cfg = PipelineConfig::default();
        let s = trace_example(&reader, &e, retrieved.clone(), generated.clone(), &cfg, false).unwrap();
        assert_eq!(s.subset, Subset::Air);
        assert_eq!(s.dropped, None);
        assert_eq!(s.closed_book, None);

        let s = trace_example(&reader, &e, retrieved, generated, &cfg, true).unwrap();
        assert_eq!(s.dropped, Some(DropReason::Parametric));
        assert_eq!(s.subset, Subset::None);
        assert_eq!(s.closed_book.as_deref(), Some("karachi"));
    }

    #[test]
    fn order_contract() {
        let s = traced_air();
        let block = hybrid_context_block(&s, true);
        let g = block.find("Karachi was").unwrap();
        let r = block.find("Title: Islamabad").unwrap();
        assert!(g < r);
        let block = hybrid_context_block(&s, false);
        assert!(block.find("Title: Islamabad").unwrap() < block.find("Karachi was").unwrap());

        for id in ["a", "b", "tqa1", "zz"] {
            assert_eq!(
                generated_first(OrderMode::Random, 7, id),
                generated_first(OrderMode::Random, 7, id)
            );
        }
        let firsts = (0..200)
            .filter(|i| generated_first(OrderMode::Random, 7, &format!("q{i}")))
            .count();
        assert!((60..140).contains(&firsts), "{firsts}");
    }

    #[test]
    fn hybrid_classification() {
        let s = traced_air();
        for (answer, expected) in [
            ("Karachi", Classification::Gen),
            ("rawalpindi.", Classification::Ret),
            ("Lahore", Classification::Other),
        ] {
            let reader = ScriptedModel::new(
                "r",
                Script::new([reader_entry("tqa1", Mode::Hybrid, None, answer)]).unwrap(),
            );
            let rec = hybrid_answer(&reader, &s, OrderMode::GeneratedFirst, 3, &Prompts::default()).unwrap();
            assert_eq!(rec.classification, expected);
            assert!(!rec.llm_tracked);
        }
        assert_eq!(classify("Lahore", "Karachi", "Rawalpindi", Some("lahore")), Classification::Llm);
        assert_eq!(classify("Karachi", "Karachi", "Karachi", None), Classification::Gen);
    }

    #[test]
    fn hybrid_rejects_non_conflicting() {
        let mut s = traced_air();
        s.subset = Subset::None;
        let reader = ScriptedModel::new("r", Script::default());
        assert!(matches!(
            hybrid_answer(&reader, &s, OrderMode::Random, 0, &Prompts::default()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn prompts_render_verbatim() {
        let p = Prompts::default();
        assert_eq!(
            p.generation("who?", 100),
            "Generate a background context from Wikipedia to answer the given question who?. \
             Keep the length of the document around 100 words."
        );
        assert_eq!(
            p.reading("CTX", "who?"),
            "Refer to the context below and answer the following question with just one entity. \
             context: CTX Question: who? The answer is"
        );
        assert!(!p.closed_book("who?").contains("context:"));
    }

    #[test]
    fn example_validation() {
        assert!(validate_examples(&[ex("a", "q", &["x"]), ex("b", "q", &["y"])]).is_ok());
        assert!(validate_examples(&[ex("a", "q", &["x"]), ex("a", "q", &["y"])]).is_err());
        assert!(validate_examples(&[ex("a", " ", &["x"])]).is_err());
        assert!(validate_examples(&[ex("a", "q", &[])]).is_err());
    }

    #[test]
    fn traced_sample_json_shape() {
        let s = traced_air();
        let v = serde_json::to_value(&s).unwrap();
        for key in [
            "id", "question", "answers", "retrieved", "generated", "answer_from_retrieved",
            "answer_from_generated", "closed_book", "subset", "dropped",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(v["subset"], "AIR");
        assert_eq!(v["retrieved"]["variant"], "retrieved");
        let back: TracedSample = serde_json::from_value(v).unwrap();
        assert_eq!(back, s);
    }
}
