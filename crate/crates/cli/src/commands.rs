use std::collections::HashMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ctxtrace_core::analysis::{
    evaluate_variant, ingest_similarity, similarity_record, write_slice_csv, SimilarityScores,
};
use ctxtrace_core::io::{read_jsonl, write_jsonl};
use ctxtrace_core::metrics::{
    length_stats, read_report_csv, render_markdown, subset_reports, write_report_csv, Counts,
    LENGTH_DISCREPANCY_WARN,
};
use ctxtrace_core::pipeline::{
    evaluate_samples, generate_unconstrained, prepare_example, run_parallel, trace_example,
    validate_examples,
};
use ctxtrace_core::{
    diff_gr, quantile_slices, similarity_matched, slice_report, CompletenessVariants, Context,
    Error, FileHeader, HybridRecord, OrderMode, Proportions, QaExample, SimMetric,
    SimilarityRecord, TracedSample, Variant,
};
use serde::Serialize;

use crate::args::{Analysis, Cli, Command, GlobalArgs};
use crate::config::{build_model, build_retriever, RetrieverKind, RunConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::RunManifest;
use crate::validate::validate_files;

/// Config file, then `--set` overrides, then canonical flags.
pub fn resolve_config(g: &GlobalArgs) -> CliResult<RunConfig> {
    let mut c = RunConfig::load(g.config.as_deref(), &g.overrides)?;
    if let Some(corpus) = &g.corpus {
        match c.retriever.kind {
            RetrieverKind::Bm25 => c.retriever.bm25.corpus_path = Some(corpus.clone()),
            RetrieverKind::Golden | RetrieverKind::Ingest => c.retriever.path = Some(corpus.clone()),
        }
    }
    if let Some(v) = g.order {
        c.order = v;
    }
    if let Some(v) = g.seed {
        c.seed = v;
    }
    if let Some(v) = g.workers {
        c.workers = v;
    }
    if let Some(v) = g.slices {
        c.slice_count = v;
    }
    if let Some(v) = g.sim_metric {
        c.sim_metric = v;
    }
    if let Some(v) = g.aggregation {
        c.aggregation = v;
    }
    if let Some(v) = &g.length_candidates {
        c.length_candidates = v.clone();
    }
    if let Some(v) = g.match_threshold {
        c.match_threshold = v;
    }
    c.validate()?;
    Ok(c)
}

pub fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    if let Command::Validate { files } = &cli.command {
        return cmd_validate(files);
    }
    let config = resolve_config(g)?;
    match &cli.command {
        Command::Prepare => cmd_prepare(&config, required(&g.questions, "--questions")?, out(g)?),
        Command::Trace { contexts } => cmd_trace(
            &config,
            required(&g.questions, "--questions")?,
            contexts,
            out(g)?,
            g.parametric,
        ),
        Command::Evaluate { traced, report } => {
            let out = out(g)?;
            let report = report.clone().unwrap_or_else(|| out.with_file_name("report.csv"));
            cmd_evaluate(&config, traced, out, &report)
        }
        Command::Analyze { analysis } => match analysis {
            Analysis::Sim { traced } => cmd_analyze_sim(&config, traced, out(g)?),
            Analysis::Slices { traced, eval } => cmd_analyze_slices(&config, traced, eval, out(g)?),
            Analysis::Completeness { traced } => cmd_analyze_completeness(&config, traced, out(g)?),
            Analysis::Order { traced } => cmd_analyze_order(&config, traced, out(g)?),
        },
        Command::Report { reports } => cmd_report(&config, reports, g.out.as_deref()),
        Command::Validate { .. } => unreachable!("handled above"),
    }
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> CliResult<&'a Path> {
    v.as_deref()
        .ok_or_else(|| CliError::Usage(format!("this subcommand needs {flag}")))
}

fn out(g: &GlobalArgs) -> CliResult<&Path> {
    required(&g.out, "--out")
}

fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_owned(),
            source: e,
        })?;
    }
    Ok(())
}

fn with_inputs<'a>(config: &'a RunConfig, stage: &[(&'static str, &'a Path)]) -> Vec<(&'static str, &'a Path)> {
    let mut all = stage.to_vec();
    all.extend(config.input_files());
    all
}

pub fn load_questions(path: &Path) -> CliResult<Vec<QaExample>> {
    let rows = read_jsonl::<QaExample>(path)?;
    let examples: Vec<QaExample> = rows.into_iter().map(|r| r.value).collect();
    validate_examples(&examples)?;
    Ok(examples)
}

fn load_rows<T: serde::de::DeserializeOwned>(path: &Path) -> CliResult<Vec<T>> {
    Ok(read_jsonl::<T>(path)?.into_iter().map(|r| r.value).collect())
}

fn write_csv<T: Serialize>(path: &Path, header: &FileHeader, rows: &[T]) -> CliResult<()> {
    let io = |e| Error::Io {
        path: path.to_owned(),
        source: e,
    };
    let mut file = std::fs::File::create(path).map_err(io)?;
    writeln!(file, "{header}").map_err(io)?;
    let mut w = csv::Writer::from_writer(file);
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

#[derive(Serialize)]
struct LengthSummary {
    manifest: String,
    seed: u64,
    n_questions: usize,
    mean_retrieved_wc: f64,
    mean_generated_wc: f64,
    discrepancy: f64,
}

pub fn length_stats_path(contexts_out: &Path) -> PathBuf {
    contexts_out.with_extension("length_stats.json")
}

pub fn cmd_prepare(config: &RunConfig, questions: &Path, out: &Path) -> CliResult<()> {
    let examples = load_questions(questions)?;
    let mut manifest = RunManifest::new("prepare", config, &with_inputs(config, &[("questions", questions)]), None)?;
    let retriever = build_retriever(&config.retriever)?;
    let generator = build_model("generator", &config.generator)?;
    let pipeline = config.pipeline();

    let pairs = run_parallel(&examples, config.workers, |ex| {
        prepare_example(retriever.as_ref(), generator.as_ref(), ex, &pipeline)
    })?;
    let contexts: Vec<Context> = pairs.into_iter().flat_map(|(r, g)| [r, g]).collect();

    ensure_parent(out)?;
    let header = manifest.header();
    write_jsonl(out, Some(&header), &contexts)?;

    let stats = length_stats(&contexts)?;
    let summary = LengthSummary {
        manifest: header.manifest.clone(),
        seed: header.seed,
        n_questions: examples.len(),
        mean_retrieved_wc: stats.mean_retrieved_wc,
        mean_generated_wc: stats.mean_generated_wc,
        discrepancy: stats.discrepancy,
    };
    let stats_path = length_stats_path(out);
    let text = serde_json::to_string_pretty(&summary).expect("plain struct serializes");
    std::fs::write(&stats_path, text + "\n").map_err(|e| Error::Io {
        path: stats_path.clone(),
        source: e,
    })?;
    if stats.exceeds_threshold() {
        eprintln!(
            "warning: length discrepancy {:.4} > {LENGTH_DISCREPANCY_WARN}",
            stats.discrepancy
        );
    }
    log::info!(
        "prepared {} questions; mean words retrieved {:.1}, generated {:.1}",
        examples.len(),
        stats.mean_retrieved_wc,
        stats.mean_generated_wc
    );
    manifest.write_sidecar(out)?;
    Ok(())
}

/// Pairs the retrieved and nature-variant generated context of each question.
fn context_pairs(path: &Path) -> CliResult<HashMap<String, (Option<Context>, Option<Context>)>> {
    let mut pairs: HashMap<String, (Option<Context>, Option<Context>)> = HashMap::new();
    for row in read_jsonl::<Context>(path)? {
        let ctx = row.value;
        let schema = |message: String| Error::Schema {
            path: path.to_owned(),
            line: row.line,
            message,
        };
        ctx.validate().map_err(schema)?;
        let entry = pairs.entry(ctx.id.clone()).or_default();
        let slot = match ctx.variant {
            Variant::Retrieved => &mut entry.0,
            Variant::Nature => &mut entry.1,
            other => {
                return Err(schema(format!("unexpected {} context in a prepare output", other.as_str())).into())
            }
        };
        if slot.is_some() {
            return Err(schema(format!("duplicate {} context for {:?}", ctx.variant.as_str(), ctx.id)).into());
        }
        *slot = Some(ctx);
    }
    Ok(pairs)
}

pub fn cmd_trace(
    config: &RunConfig,
    questions: &Path,
    contexts: &Path,
    out: &Path,
    parametric: bool,
) -> CliResult<()> {
    let examples = load_questions(questions)?;
    let stage = if parametric { "trace --parametric" } else { "trace" };
    let mut manifest = RunManifest::new(
        stage,
        config,
        &with_inputs(config, &[("questions", questions), ("contexts", contexts)]),
        Some(contexts),
    )?;
    let mut pairs = context_pairs(contexts)?;
    let mut work = Vec::with_capacity(examples.len());
    for ex in examples {
        match pairs.remove(&ex.id) {
            Some((Some(r), Some(g))) => work.push((ex, r, g)),
            _ => {
                return Err(Error::Validation(format!(
                    "{}: question {:?} lacks a retrieved or generated context",
                    contexts.display(),
                    ex.id
                ))
                .into())
            }
        }
    }
    let reader = build_model("reader", &config.reader)?;
    let pipeline = config.pipeline();
    let samples = run_parallel(&work, config.workers, |(ex, r, g)| {
        trace_example(reader.as_ref(), ex, r.clone(), g.clone(), &pipeline, parametric)
    })?;

    ensure_parent(out)?;
    write_jsonl(out, Some(&manifest.header()), &samples)?;
    let kept = samples.iter().filter(|s| s.is_conflicting()).count();
    log::info!("traced {} questions; {kept} conflicting samples", samples.len());
    manifest.write_sidecar(out)?;
    Ok(())
}

pub fn cmd_evaluate(config: &RunConfig, traced: &Path, out: &Path, report: &Path) -> CliResult<()> {
    let samples: Vec<TracedSample> = load_rows(traced)?;
    let mut manifest = RunManifest::new("evaluate", config, &with_inputs(config, &[("traced", traced)]), Some(traced))?;
    let reader = build_model("reader", &config.reader)?;
    let records = evaluate_samples(reader.as_ref(), &samples, config.order, config.seed, &config.pipeline())?;
    let reports = subset_reports(&records, &samples)?;

    ensure_parent(out)?;
    ensure_parent(report)?;
    let header = manifest.header();
    write_jsonl(out, Some(&header), &records)?;
    write_report_csv(report, Some(&header), &reports)?;
    manifest.write_sidecar(out)?;
    Ok(())
}

fn conflicting(samples: &[TracedSample]) -> Vec<&TracedSample> {
    samples.iter().filter(|s| s.is_conflicting()).collect()
}

fn external_scores(config: &RunConfig) -> CliResult<Option<SimilarityScores>> {
    if config.sim_metric != SimMetric::External {
        return Ok(None);
    }
    let path = config
        .similarity_scores
        .as_deref()
        .ok_or_else(|| Error::Config("sim_metric external needs similarity_scores".into()))?;
    Ok(Some(ingest_similarity(path)?))
}

fn similarity_records(config: &RunConfig, samples: &[&TracedSample]) -> CliResult<Vec<SimilarityRecord>> {
    let external = external_scores(config)?;
    samples
        .iter()
        .map(|s| similarity_record(s, config.sim_metric, config.aggregation, external.as_ref()))
        .collect::<ctxtrace_core::Result<_>>()
        .map_err(Into::into)
}

pub fn cmd_analyze_sim(config: &RunConfig, traced: &Path, out: &Path) -> CliResult<()> {
    let samples: Vec<TracedSample> = load_rows(traced)?;
    let mut manifest = RunManifest::new("analyze sim", config, &with_inputs(config, &[("traced", traced)]), Some(traced))?;
    let records = similarity_records(config, &conflicting(&samples))?;
    ensure_parent(out)?;
    write_csv(out, &manifest.header(), &records)?;
    manifest.write_sidecar(out)?;
    Ok(())
}

pub fn cmd_analyze_slices(config: &RunConfig, traced: &Path, eval: &Path, out: &Path) -> CliResult<()> {
    let samples: Vec<TracedSample> = load_rows(traced)?;
    let eval_records: Vec<HybridRecord> = load_rows(eval)?;
    let mut manifest = RunManifest::new(
        "analyze slices",
        config,
        &with_inputs(config, &[("traced", traced), ("eval", eval)]),
        Some(eval),
    )?;
    let evaluated: std::collections::HashSet<&str> = eval_records.iter().map(|r| r.id.as_str()).collect();
    let members: Vec<&TracedSample> = conflicting(&samples)
        .into_iter()
        .filter(|s| evaluated.contains(s.id()))
        .collect();
    let records = similarity_records(config, &members)?;
    let slices = quantile_slices(&records, config.slice_count)?;
    let rows = slice_report(&slices, &eval_records)?;
    ensure_parent(out)?;
    write_slice_csv(out, Some(&manifest.header()), &rows)?;
    manifest.write_sidecar(out)?;
    Ok(())
}

/// One row of the order and completeness tables.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct PreferenceRow {
    pub label: String,
    pub n: usize,
    pub rho_gen: Option<f64>,
    pub rho_ret: Option<f64>,
    pub rho_llm: Option<f64>,
    pub others: Option<f64>,
    pub diff_gr: Option<f64>,
}

impl PreferenceRow {
    fn from_records(label: &str, records: &[HybridRecord]) -> Self {
        let p = Proportions::from_counts(&Counts::from_records(records)).ok();
        Self {
            label: label.to_owned(),
            n: records.len(),
            rho_gen: p.map(|p| p.rho_gen),
            rho_ret: p.map(|p| p.rho_ret),
            rho_llm: p.and_then(|p| p.rho_llm),
            others: p.map(|p| p.others),
            diff_gr: p.and_then(|p| diff_gr(p.rho_gen, p.rho_ret).ok()),
        }
    }
}

fn write_preference_csv(path: &Path, header: &FileHeader, first: &str, rows: &[PreferenceRow]) -> CliResult<()> {
    let io = |e| Error::Io {
        path: path.to_owned(),
        source: e,
    };
    let mut file = std::fs::File::create(path).map_err(io)?;
    writeln!(file, "{header}").map_err(io)?;
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(file);
    let csv_err = |e: csv::Error| Error::Validation(format!("{}: {e}", path.display()));
    w.write_record([first, "n", "rho_gen", "rho_ret", "rho_llm", "others", "diff_gr"])
        .map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn cmd_analyze_order(config: &RunConfig, traced: &Path, out: &Path) -> CliResult<()> {
    let samples: Vec<TracedSample> = load_rows(traced)?;
    let mut manifest = RunManifest::new("analyze order", config, &with_inputs(config, &[("traced", traced)]), Some(traced))?;
    let reader = build_model("reader", &config.reader)?;
    let pipeline = config.pipeline();
    let mut rows = Vec::new();
    for order in OrderMode::ALL {
        let records = evaluate_samples(reader.as_ref(), &samples, order, config.seed, &pipeline)?;
        rows.push(PreferenceRow::from_records(order.as_str(), &records));
    }
    ensure_parent(out)?;
    write_preference_csv(out, &manifest.header(), "order", &rows)?;
    manifest.write_sidecar(out)?;
    Ok(())
}

pub fn variants_path(completeness_out: &Path) -> PathBuf {
    completeness_out.with_extension("variants.jsonl")
}

pub fn cmd_analyze_completeness(config: &RunConfig, traced: &Path, out: &Path) -> CliResult<()> {
    let samples: Vec<TracedSample> = load_rows(traced)?;
    let mut manifest = RunManifest::new(
        "analyze completeness",
        config,
        &with_inputs(config, &[("traced", traced)]),
        Some(traced),
    )?;
    let reader = build_model("reader", &config.reader)?;
    let generator = build_model("generator", &config.generator)?;
    let external = external_scores(config)?;
    let pipeline = config.pipeline();
    let base = conflicting(&samples);

    // Per sample: the variants, whether they are similarity-matched, and the
    // hybrid record of each variant that still yields a conflicting sample.
    let results = run_parallel(&base, config.workers, |s| {
        let unconstrained = generate_unconstrained(generator.as_ref(), &s.example, &pipeline.prompts)?;
        let mut variants =
            CompletenessVariants::build(s.generated.clone(), &unconstrained, s.retrieved.word_count);
        variants.score(&s.example.question, config.sim_metric, config.aggregation, external.as_ref())?;
        if !similarity_matched(&variants.sim_scores, config.match_threshold)? {
            return Ok((variants, None));
        }
        let mut records = Vec::with_capacity(3);
        for ctx in variants.contexts() {
            let outcome = evaluate_variant(reader.as_ref(), s, ctx.clone(), config.order, config.seed, &pipeline)?;
            records.push(outcome.map(|(_, r)| r));
        }
        Ok((variants, Some(records)))
    })?;

    let mut per_variant: [Vec<HybridRecord>; 3] = Default::default();
    let mut variant_contexts = Vec::new();
    let mut matched = 0;
    for (variants, records) in results {
        if let Some(records) = records {
            matched += 1;
            for (slot, r) in per_variant.iter_mut().zip(records) {
                slot.extend(r);
            }
        }
        variant_contexts.extend(variants.contexts().into_iter().cloned());
    }
    log::info!("{matched} of {} samples are similarity-matched", base.len());

    let labels = [Variant::Nature, Variant::Strunc, Variant::Trunc];
    let rows: Vec<PreferenceRow> = labels
        .iter()
        .zip(&per_variant)
        .map(|(v, records)| PreferenceRow::from_records(v.as_str(), records))
        .collect();
    ensure_parent(out)?;
    let header = manifest.header();
    write_preference_csv(out, &header, "variant", &rows)?;
    write_jsonl(&variants_path(out), Some(&header), &variant_contexts)?;
    manifest.write_sidecar(out)?;
    Ok(())
}

pub fn cmd_report(config: &RunConfig, reports: &[String], out: Option<&Path>) -> CliResult<()> {
    let mut runs = Vec::new();
    let mut paths = Vec::new();
    for spec in reports {
        let (label, path) = match spec.split_once('=') {
            Some((label, path)) => (label.to_owned(), PathBuf::from(path)),
            None => {
                let path = PathBuf::from(spec);
                let label = path
                    .parent()
                    .and_then(|p| p.file_name())
                    .or_else(|| path.file_stem())
                    .map_or_else(|| spec.clone(), |s| s.to_string_lossy().into_owned());
                (label, path)
            }
        };
        runs.push((label, read_report_csv(&path)?));
        paths.push(path);
    }
    let inputs: Vec<(String, &Path)> = paths
        .iter()
        .enumerate()
        .map(|(i, p)| (format!("report{i}"), p.as_path()))
        .collect();
    let inputs: Vec<(&str, &Path)> = inputs.iter().map(|(r, p)| (r.as_str(), *p)).collect();
    let mut manifest = RunManifest::new("report", config, &inputs, paths.first().map(PathBuf::as_path))?;
    let text = format!("<!-- {} -->\n\n{}", manifest.header(), render_markdown(&runs));
    match out {
        Some(path) => {
            ensure_parent(path)?;
            std::fs::write(path, text).map_err(|e| Error::Io {
                path: path.to_owned(),
                source: e,
            })?;
            manifest.write_sidecar(path)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

pub fn cmd_validate(files: &[PathBuf]) -> CliResult<()> {
    let violations = validate_files(files);
    if violations.is_empty() {
        eprintln!("ok: {} file(s), all invariants hold", files.len());
        return Ok(());
    }
    for v in &violations {
        eprintln!("{v}");
    }
    Err(CliError::Invalid(violations))
}
