//! Controlled-variable analyses: context–question similarity and the Δsim
//! slices, plus the completeness variants of generated contexts.

use std::collections::{HashMap, HashSet};
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backends::TextModel;
use crate::error::{Error, Result};
use crate::io::{read_jsonl, FileHeader};
use crate::metrics::{diff_gr, Counts, Proportions};
use crate::pipeline::{
    candidate_answer, exclusivity_label, hybrid_answer, traceability_filter, CandidateAnswer,
    Context, HybridRecord, OrderMode, PipelineConfig, TracedSample, Variant, Verdict,
};
use crate::textnorm::{is_punctuation_only, split_sentences, tokens, word_count};

pub const DEFAULT_SLICES: usize = 5;
pub const DEFAULT_MATCH_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMetric {
    Jaccard,
    External,
}

impl FromStr for SimMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jaccard" => Ok(SimMetric::Jaccard),
            "external" => Ok(SimMetric::External),
            _ => Err(Error::Config(format!("unknown similarity metric {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Max,
    Mean,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" => Ok(Aggregation::Max),
            "mean" => Ok(Aggregation::Mean),
            _ => Err(Error::Config(format!("unknown aggregation {s:?}"))),
        }
    }
}

/// |A ∩ B| / |A ∪ B|, with two empty sets counted as identical.
pub fn jaccard(a: &HashSet<String>, b: &HashSet<String>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    inter as f64 / union as f64
}

fn token_set(text: &str) -> HashSet<String> {
    tokens(text).into_iter().collect()
}

/// Sentence-level Jaccard similarity between question and context,
/// aggregated over sentences. Sentences without tokens are skipped.
pub fn context_similarity(question: &str, context: &str, aggregation: Aggregation) -> Result<f64> {
    if context.trim().is_empty() {
        return Err(Error::Validation("similarity needs a non-empty context".into()));
    }
    let q = token_set(question);
    let scores: Vec<f64> = split_sentences(context)
        .iter()
        .map(|s| token_set(&s.text))
        .filter(|s| !s.is_empty())
        .map(|s| jaccard(&q, &s))
        .collect();
    if scores.is_empty() {
        return Ok(0.0);
    }
    Ok(match aggregation {
        Aggregation::Max => scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Aggregation::Mean => scores.iter().sum::<f64>() / scores.len() as f64,
    })
}

/// (sim_gen − sim_ret) / (sim_gen + sim_ret)
pub fn delta_sim(sim_gen: f64, sim_ret: f64) -> Result<f64> {
    let denom = sim_gen + sim_ret;
    if !(denom > 0.0) {
        return Err(Error::UndefinedMetric(format!(
            "delta_sim needs sim_gen + sim_ret > 0 (got {sim_gen} + {sim_ret})"
        )));
    }
    Ok((sim_gen - sim_ret) / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreKey {
    Generated,
    Retrieved,
    Nature,
    Trunc,
    Strunc,
}

impl ScoreKey {
    pub fn for_variant(v: Variant) -> Self {
        match v {
            Variant::Nature => ScoreKey::Nature,
            Variant::Trunc => ScoreKey::Trunc,
            Variant::Strunc => ScoreKey::Strunc,
            Variant::Retrieved => ScoreKey::Retrieved,
        }
    }
}

/// One line of a similarity-scores file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRow {
    pub example_id: String,
    pub key: ScoreKey,
    pub score: f64,
}

/// Externally computed semantic scores keyed by `(example_id, key)`.
#[derive(Debug, Clone, Default)]
pub struct SimilarityScores {
    scores: HashMap<(String, ScoreKey), f64>,
}

impl SimilarityScores {
    pub fn insert(&mut self, example_id: &str, key: ScoreKey, score: f64) -> Result<()> {
        if !(-1.0..=1.0).contains(&score) {
            return Err(Error::Validation(format!(
                "score {score} for ({example_id:?}, {key:?}) outside [-1, 1]"
            )));
        }
        if self.scores.insert((example_id.to_owned(), key), score).is_some() {
            return Err(Error::Validation(format!(
                "duplicate score for ({example_id:?}, {key:?})"
            )));
        }
        Ok(())
    }

    pub fn get(&self, example_id: &str, key: ScoreKey) -> Result<f64> {
        self.scores
            .get(&(example_id.to_owned(), key))
            .copied()
            .ok_or_else(|| Error::MissingScore(format!("({example_id:?}, {key:?})")))
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

pub fn ingest_similarity(path: &Path) -> Result<SimilarityScores> {
    let mut scores = SimilarityScores::default();
    for row in read_jsonl::<ScoreRow>(path)? {
        let r = row.value;
        scores
            .insert(&r.example_id, r.key, r.score)
            .map_err(|e| Error::Validation(format!("{}:{}: {e}", path.display(), row.line)))?;
    }
    Ok(scores)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityRecord {
    pub example_id: String,
    pub sim_gen: f64,
    pub sim_ret: f64,
    pub metric: SimMetric,
    pub aggregation: Aggregation,
    pub delta_sim: f64,
}

/// Similarity of each context of a traced sample to its question.
pub fn similarity_record(
    sample: &TracedSample,
    metric: SimMetric,
    aggregation: Aggregation,
    external: Option<&SimilarityScores>,
) -> Result<SimilarityRecord> {
    let id = sample.id();
    let (sim_gen, sim_ret) = match metric {
        SimMetric::Jaccard => {
            let q = &sample.example.question;
            (
                context_similarity(q, &sample.generated.rendered(), aggregation)?,
                context_similarity(q, &sample.retrieved.rendered(), aggregation)?,
            )
        }
        SimMetric::External => {
            let scores = external
                .ok_or_else(|| Error::MissingScore("external metric without a scores file".into()))?;
            (
                scores.get(id, ScoreKey::Generated)?,
                scores.get(id, ScoreKey::Retrieved)?,
            )
        }
    };
    Ok(SimilarityRecord {
        example_id: id.to_owned(),
        sim_gen,
        sim_ret,
        metric,
        aggregation,
        delta_sim: delta_sim(sim_gen, sim_ret)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub index: usize,
    pub example_ids: Vec<String>,
    pub mean_delta_sim: f64,
}

/// Sorts by `(delta_sim, example_id)` and cuts into `n` contiguous slices whose
/// sizes differ by at most one; the first `len % n` slices get the extra record.
pub fn quantile_slices(records: &[SimilarityRecord], n: usize) -> Result<Vec<Slice>> {
    if n == 0 {
        return Err(Error::Validation("slice count must be at least 1".into()));
    }
    if records.is_empty() || n > records.len() {
        return Err(Error::Validation(format!(
            "cannot cut {} records into {n} slices",
            records.len()
        )));
    }
    let mut sorted: Vec<&SimilarityRecord> = records.iter().collect();
    sorted.sort_by(|a, b| {
        a.delta_sim
            .total_cmp(&b.delta_sim)
            .then_with(|| a.example_id.cmp(&b.example_id))
    });
    let base = sorted.len() / n;
    let extra = sorted.len() % n;
    let mut slices = Vec::with_capacity(n);
    let mut start = 0;
    for index in 0..n {
        let size = base + usize::from(index < extra);
        let chunk = &sorted[start..start + size];
        start += size;
        slices.push(Slice {
            index,
            example_ids: chunk.iter().map(|r| r.example_id.clone()).collect(),
            mean_delta_sim: chunk.iter().map(|r| r.delta_sim).sum::<f64>() / size as f64,
        });
    }
    Ok(slices)
}

/// One row of the slice report CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceReport {
    pub slice_index: usize,
    pub n: usize,
    pub mean_delta_sim: f64,
    pub diff_gr: f64,
}

pub fn slice_report(slices: &[Slice], eval_records: &[HybridRecord]) -> Result<Vec<SliceReport>> {
    let by_id: HashMap<&str, &HybridRecord> =
        eval_records.iter().map(|r| (r.id.as_str(), r)).collect();
    slices
        .iter()
        .map(|slice| {
            let mut members = Vec::with_capacity(slice.example_ids.len());
            for id in &slice.example_ids {
                let r = by_id.get(id.as_str()).ok_or_else(|| {
                    Error::Validation(format!("slice {} example {id:?} has no eval record", slice.index))
                })?;
                members.push(*r);
            }
            let p = Proportions::from_counts(&Counts::from_records(members))?;
            Ok(SliceReport {
                slice_index: slice.index,
                n: slice.example_ids.len(),
                mean_delta_sim: slice.mean_delta_sim,
                diff_gr: diff_gr(p.rho_gen, p.rho_ret)?,
            })
        })
        .collect()
}

pub fn write_slice_csv(path: &Path, header: Option<&FileHeader>, rows: &[SliceReport]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut file = std::fs::File::create(path).map_err(io)?;
    if let Some(h) = header {
        writeln!(file, "{h}").map_err(io)?;
    }
    writeln!(file, "slice_index,n,mean_delta_sim,diff_gr").map_err(io)?;
    for r in rows {
        writeln!(file, "{},{},{},{}", r.slice_index, r.n, r.mean_delta_sim, r.diff_gr).map_err(io)?;
    }
    Ok(())
}

/// Byte ranges of the whitespace-separated tokens that count as words
/// (tokens with at least one non-punctuation character).
fn word_ranges(text: &str) -> Vec<(usize, usize)> {
    let base = text.as_ptr() as usize;
    text.split_whitespace()
        .filter(|t| !is_punctuation_only(t))
        .map(|t| {
            let start = t.as_ptr() as usize - base;
            (start, start + t.len())
        })
        .collect()
}

/// The first `target_words` words, punctuation attached to a word kept with it.
/// Shorter inputs come back unchanged.
pub fn trunc(text: &str, target_words: usize) -> String {
    let words = word_ranges(text);
    if words.len() <= target_words {
        return text.to_owned();
    }
    if target_words == 0 {
        return String::new();
    }
    text[..words[target_words - 1].1].to_owned()
}

/// The longest run of leading whole sentences totalling at most
/// `target_words` words. If even the first sentence is longer, that sentence
/// is returned whole so the result is never empty.
pub fn s_trunc(text: &str, target_words: usize) -> String {
    let spans = split_sentences(text);
    let mut total = 0;
    let mut fitted = 0;
    for span in &spans {
        total += word_count(&span.text);
        if total > target_words {
            break;
        }
        fitted += 1;
    }
    if fitted == spans.len() {
        return text.to_owned();
    }
    let last = &spans[fitted.max(1) - 1];
    text[..last.end].to_owned()
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VariantScores {
    pub nature: Option<f64>,
    pub trunc: Option<f64>,
    pub strunc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompletenessVariants {
    pub nature: Context,
    pub trunc: Context,
    pub strunc: Context,
    pub sim_scores: VariantScores,
}

impl CompletenessVariants {
    /// Builds Trunc. and S-Trunc. from an unconstrained generation, cut to `target_words`.
    pub fn build(nature: Context, unconstrained: &str, target_words: usize) -> Self {
        let mk = |text: String, variant| {
            Context::generated(&nature.id, &nature.backend, text, None, variant)
        };
        let trunc = mk(trunc(unconstrained, target_words), Variant::Trunc);
        let strunc = mk(s_trunc(unconstrained, target_words), Variant::Strunc);
        Self {
            nature,
            trunc,
            strunc,
            sim_scores: VariantScores::default(),
        }
    }

    pub fn contexts(&self) -> [&Context; 3] {
        [&self.nature, &self.strunc, &self.trunc]
    }

    /// Fills `sim_scores` from the configured metric.
    pub fn score(
        &mut self,
        question: &str,
        metric: SimMetric,
        aggregation: Aggregation,
        external: Option<&SimilarityScores>,
    ) -> Result<()> {
        let score = |ctx: &Context| -> Result<f64> {
            match metric {
                SimMetric::Jaccard => context_similarity(question, &ctx.rendered(), aggregation),
                SimMetric::External => external
                    .ok_or_else(|| Error::MissingScore("external metric without a scores file".into()))?
                    .get(&ctx.id, ScoreKey::for_variant(ctx.variant)),
            }
        };
        self.sim_scores = VariantScores {
            nature: Some(score(&self.nature)?),
            trunc: Some(score(&self.trunc)?),
            strunc: Some(score(&self.strunc)?),
        };
        Ok(())
    }
}

/// Keep iff every pairwise score gap among the three variants is below `threshold`.
pub fn similarity_matched(scores: &VariantScores, threshold: f64) -> Result<bool> {
    let get = |v: Option<f64>, name: &str| {
        v.ok_or_else(|| Error::MissingScore(format!("{name} variant score")))
    };
    let values = [
        get(scores.nature, "nature")?,
        get(scores.strunc, "strunc")?,
        get(scores.trunc, "trunc")?,
    ];
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min < threshold)
}

/// Re-runs candidate answering and hybrid reading with `variant` standing in
/// for the generated context. `None` when the variant sample is not traceable
/// or not conflicting.
pub fn evaluate_variant(
    reader: &dyn TextModel,
    base: &TracedSample,
    variant: Context,
    order: OrderMode,
    seed: u64,
    config: &PipelineConfig,
) -> Result<Option<(TracedSample, HybridRecord)>> {
    let from_generated = candidate_answer(reader, &base.example, &variant, config)?;
    let from_retrieved = CandidateAnswer::Answer(base.answer_from_retrieved.clone());
    if let Verdict::Drop(_) = traceability_filter(&base.retrieved, &variant, &from_retrieved, &from_generated) {
        return Ok(None);
    }
    let subset = exclusivity_label(
        from_generated.text(),
        &base.answer_from_retrieved,
        &base.example.answers,
    );
    if !subset.is_conflicting() {
        return Ok(None);
    }
    let sample = TracedSample {
        generated: variant,
        answer_from_generated: from_generated.text().to_owned(),
        closed_book: None,
        subset,
        dropped: None,
        ..base.clone()
    };
    let record = hybrid_answer(reader, &sample, order, seed, &config.prompts)?;
    Ok(Some((sample, record)))
}
