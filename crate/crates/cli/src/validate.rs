//! Invariant checks over files already written by the pipeline. Every check
//! is recomputed from the file contents alone; nothing is trusted from the
//! labels being checked.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use ctxtrace_core::io::{read_header, read_jsonl};
use ctxtrace_core::metrics::{read_report_csv, subset_reports, REPORT_COLUMNS};
use ctxtrace_core::pipeline::{classify, exclusivity_label, parametric_filter};
use ctxtrace_core::{
    contains_answer, diff_gr, Context, ContextSource, DropReason, FileHeader, HybridRecord,
    MetricsReport, Subset, TracedSample, Variant,
};
use serde_json::Value;

pub const TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub path: PathBuf,
    /// 1-based line, 0 when the violation concerns the whole file.
    pub line: usize,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}: {}", self.path.display(), self.message)
        } else {
            write!(f, "{}:{}: {}", self.path.display(), self.line, self.message)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FileKind {
    Contexts,
    Traced,
    Eval,
    Report,
    Similarity,
    Slices,
    Order,
    Completeness,
}

impl FileKind {
    fn name(self) -> &'static str {
        match self {
            FileKind::Contexts => "contexts",
            FileKind::Traced => "traced",
            FileKind::Eval => "eval",
            FileKind::Report => "report",
            FileKind::Similarity => "similarity",
            FileKind::Slices => "slices",
            FileKind::Order => "order",
            FileKind::Completeness => "completeness",
        }
    }
}

fn first_data_line(path: &Path) -> std::io::Result<Option<String>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty() && !l.starts_with('#') && !l.starts_with("<!--"))
        .map(str::to_owned))
}

/// Recognizes a pipeline file from its first data line.
pub fn detect_kind(path: &Path) -> Result<FileKind, String> {
    let line = first_data_line(path)
        .map_err(|e| e.to_string())?
        .ok_or_else(|| "no data lines; cannot tell the file type".to_owned())?;
    if line.starts_with('{') {
        let v: Value = serde_json::from_str(&line).map_err(|e| format!("first row: {e}"))?;
        let has = |k: &str| v.get(k).is_some();
        return if has("answer_from_retrieved") {
            Ok(FileKind::Traced)
        } else if has("classification") {
            Ok(FileKind::Eval)
        } else if has("source") && has("variant") {
            Ok(FileKind::Contexts)
        } else {
            Err("unrecognized JSONL rows".into())
        };
    }
    let columns: Vec<&str> = line.split(',').collect();
    match columns.first().copied() {
        _ if columns == REPORT_COLUMNS => Ok(FileKind::Report),
        Some("slice_index") => Ok(FileKind::Slices),
        Some("order") => Ok(FileKind::Order),
        Some("variant") => Ok(FileKind::Completeness),
        Some("example_id") => Ok(FileKind::Similarity),
        _ => Err(format!("unrecognized CSV columns {line:?}")),
    }
}

fn contained(context: &Context, answer: &str) -> bool {
    contains_answer(&context.rendered(), answer).unwrap_or(false)
}

/// Invariants of a single traced sample. Abstention drops are accepted as
/// recorded, since the abstention set is run configuration.
pub fn check_traced_sample(s: &TracedSample) -> Vec<String> {
    let mut errors = Vec::new();
    if let Err(e) = s.example.validate() {
        errors.push(e);
    }
    for (ctx, source) in [
        (&s.retrieved, ContextSource::Retrieved),
        (&s.generated, ContextSource::Generated),
    ] {
        if let Err(e) = ctx.validate() {
            errors.push(e);
        }
        if ctx.source != source {
            errors.push(format!("{:?} context has source {:?}", source, ctx.source));
        }
        if ctx.id != s.example.id {
            errors.push(format!("context id {:?} differs from example id {:?}", ctx.id, s.example.id));
        }
    }

    let in_gen = contained(&s.generated, &s.answer_from_generated);
    let in_ret = contained(&s.retrieved, &s.answer_from_retrieved);
    let label = exclusivity_label(&s.answer_from_generated, &s.answer_from_retrieved, &s.example.answers);

    if s.dropped.is_some() && s.subset != Subset::None {
        errors.push(format!("dropped sample labeled {}", s.subset.as_str()));
    }
    match s.dropped {
        None => {
            if !in_gen {
                errors.push("generated-context answer not contained in the generated context".into());
            }
            if !in_ret {
                errors.push("retrieved-context answer not contained in the retrieved context".into());
            }
            if label != s.subset {
                errors.push(format!(
                    "subset {} but exclusivity gives {}",
                    s.subset.as_str(),
                    label.as_str()
                ));
            }
            if let (Some(llm), true) = (&s.closed_book, s.subset.is_conflicting()) {
                if !parametric_filter(llm, &s.answer_from_retrieved, &s.answer_from_generated) {
                    errors.push("closed-book and candidate answers are not pairwise distinct".into());
                }
            }
        }
        Some(DropReason::NotInGen) => {
            if in_gen {
                errors.push("dropped as not_in_gen but the answer is in the generated context".into());
            }
        }
        Some(DropReason::NotInRet) => {
            if !in_gen {
                errors.push("dropped as not_in_ret but not_in_gen applies first".into());
            }
            if in_ret {
                errors.push("dropped as not_in_ret but the answer is in the retrieved context".into());
            }
        }
        Some(DropReason::Parametric) => {
            if !(in_gen && in_ret && label.is_conflicting()) {
                errors.push("dropped as parametric but the sample is not a traceable conflict".into());
            }
            match &s.closed_book {
                None => errors.push("dropped as parametric without a closed-book answer".into()),
                Some(llm) => {
                    if parametric_filter(llm, &s.answer_from_retrieved, &s.answer_from_generated) {
                        errors.push("dropped as parametric but all three answers differ".into());
                    }
                }
            }
        }
        Some(DropReason::AbstainedGen | DropReason::AbstainedRet) => {}
    }
    errors
}

/// Invariants of a hybrid record against the traced sample it was read from.
pub fn check_eval_record(r: &HybridRecord, sample: &TracedSample) -> Vec<String> {
    let mut errors = Vec::new();
    if !sample.is_conflicting() {
        errors.push(format!("eval record for non-conflicting sample {:?}", r.id));
    }
    let expected = classify(
        &r.hybrid_answer,
        &sample.answer_from_generated,
        &sample.answer_from_retrieved,
        sample.closed_book.as_deref(),
    );
    if expected != r.classification {
        errors.push(format!(
            "classification {} but the answer recounts as {}",
            r.classification.as_str(),
            expected.as_str()
        ));
    }
    if r.llm_tracked != sample.closed_book.is_some() {
        errors.push(format!(
            "llm_tracked={} but the sample {} a closed-book answer",
            r.llm_tracked,
            if sample.closed_book.is_some() { "has" } else { "lacks" }
        ));
    }
    errors
}

/// Internal consistency of one report row.
pub fn check_report_row(r: &MetricsReport) -> Vec<String> {
    let mut errors = Vec::new();
    let sum = r.rho_gen + r.rho_ret + r.rho_llm.unwrap_or(0.0) + r.others;
    if (sum - 1.0).abs() > TOLERANCE {
        errors.push(format!("{}: proportions sum to {sum}", r.subset.as_str()));
    }
    for (name, v) in [("rho_gen", r.rho_gen), ("rho_ret", r.rho_ret), ("others", r.others)]
        .into_iter()
        .chain(r.rho_llm.map(|v| ("rho_llm", v)))
    {
        if !(0.0..=1.0).contains(&v) {
            errors.push(format!("{}: {name} {v} outside [0, 1]", r.subset.as_str()));
        }
    }
    match diff_gr(r.rho_gen, r.rho_ret) {
        Ok(d) if (d - r.diff_gr).abs() <= TOLERANCE => {}
        Ok(d) => errors.push(format!(
            "{}: diff_gr {} but rho_gen/rho_ret give {d}",
            r.subset.as_str(),
            r.diff_gr
        )),
        Err(e) => errors.push(format!("{}: {e}", r.subset.as_str())),
    }
    if !(0.0..=100.0).contains(&r.em_percent) {
        errors.push(format!("{}: em_percent {} outside [0, 100]", r.subset.as_str(), r.em_percent));
    }
    errors
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOLERANCE
}

fn reports_agree(stored: &MetricsReport, recount: &MetricsReport) -> bool {
    stored.subset == recount.subset
        && stored.n_samples == recount.n_samples
        && close(stored.rho_gen, recount.rho_gen)
        && close(stored.rho_ret, recount.rho_ret)
        && match (stored.rho_llm, recount.rho_llm) {
            (Some(a), Some(b)) => close(a, b),
            (None, None) => true,
            _ => false,
        }
        && close(stored.others, recount.others)
        && close(stored.diff_gr, recount.diff_gr)
        && close(stored.em_percent, recount.em_percent)
}

struct Loaded {
    path: PathBuf,
    kind: FileKind,
    header: Option<FileHeader>,
}

#[derive(Default)]
struct Checker {
    violations: Vec<Violation>,
}

impl Checker {
    fn push(&mut self, path: &Path, line: usize, message: impl Into<String>) {
        self.violations.push(Violation {
            path: path.to_owned(),
            line,
            message: message.into(),
        });
    }

    fn rows<T: serde::de::DeserializeOwned>(&mut self, path: &Path) -> Vec<(usize, T)> {
        match read_jsonl::<T>(path) {
            Ok(rows) => rows.into_iter().map(|r| (r.line, r.value)).collect(),
            Err(ctxtrace_core::Error::Schema { line, message, .. }) => {
                self.push(path, line, format!("schema: {message}"));
                Vec::new()
            }
            Err(e) => {
                self.push(path, 0, e.to_string());
                Vec::new()
            }
        }
    }
}

/// Checks every file and the manifest lineage between them. Returns the
/// violations found; an empty list means every invariant holds.
pub fn validate_files(paths: &[PathBuf]) -> Vec<Violation> {
    let mut c = Checker::default();
    let mut loaded = Vec::new();
    for path in paths {
        let kind = match detect_kind(path) {
            Ok(k) => k,
            Err(e) => {
                c.push(path, 0, e);
                continue;
            }
        };
        let header = match read_header(path) {
            Ok(Some(h)) => Some(h),
            Ok(None) => {
                c.push(path, 1, "missing ctxtrace header line");
                None
            }
            Err(e) => {
                c.push(path, 0, e.to_string());
                None
            }
        };
        loaded.push(Loaded {
            path: path.clone(),
            kind,
            header,
        });
    }

    check_lineage(&mut c, &loaded);

    let mut traced: HashMap<String, TracedSample> = HashMap::new();
    let mut have_traced = false;
    for f in loaded.iter().filter(|f| f.kind == FileKind::Traced) {
        have_traced = true;
        let mut seen = HashSet::new();
        for (line, s) in c.rows::<TracedSample>(&f.path) {
            if !seen.insert(s.example.id.clone()) {
                c.push(&f.path, line, format!("duplicate example id {:?}", s.example.id));
            }
            for e in check_traced_sample(&s) {
                c.push(&f.path, line, e);
            }
            traced.insert(s.example.id.clone(), s);
        }
    }

    let mut records: Vec<HybridRecord> = Vec::new();
    let mut have_eval = false;
    for f in loaded.iter().filter(|f| f.kind == FileKind::Eval) {
        have_eval = true;
        let mut seen = HashSet::new();
        for (line, r) in c.rows::<HybridRecord>(&f.path) {
            if !seen.insert(r.id.clone()) {
                c.push(&f.path, line, format!("duplicate eval record {:?}", r.id));
            }
            if let Some(h) = &f.header {
                if h.seed != r.seed {
                    c.push(&f.path, line, format!("record seed {} but header seed {}", r.seed, h.seed));
                }
            }
            if have_traced {
                match traced.get(&r.id) {
                    Some(s) => {
                        for e in check_eval_record(&r, s) {
                            c.push(&f.path, line, e);
                        }
                    }
                    None => c.push(&f.path, line, format!("no traced sample for {:?}", r.id)),
                }
            }
            records.push(r);
        }
        if have_traced {
            let evaluated: HashSet<&str> = records.iter().map(|r| r.id.as_str()).collect();
            let mut missing: Vec<&str> = traced
                .values()
                .filter(|s| s.is_conflicting() && !evaluated.contains(s.id()))
                .map(|s| s.id())
                .collect();
            missing.sort_unstable();
            for id in missing {
                c.push(&f.path, 0, format!("conflicting sample {id:?} has no eval record"));
            }
        }
    }

    for f in loaded.iter().filter(|f| f.kind == FileKind::Contexts) {
        let mut seen = HashSet::new();
        for (line, ctx) in c.rows::<Context>(&f.path) {
            if let Err(e) = ctx.validate() {
                c.push(&f.path, line, e);
            }
            if !seen.insert((ctx.id.clone(), ctx.variant)) {
                c.push(&f.path, line, format!("duplicate {} context for {:?}", ctx.variant.as_str(), ctx.id));
            }
        }
        let ids: HashSet<&String> = seen.iter().map(|(id, _)| id).collect();
        let mut incomplete: Vec<&String> = ids
            .into_iter()
            .filter(|id| {
                !seen.contains(&((*id).clone(), Variant::Retrieved))
                    || !seen.contains(&((*id).clone(), Variant::Nature))
            })
            .collect();
        incomplete.sort();
        for id in incomplete {
            c.push(&f.path, 0, format!("{id:?} lacks a retrieved or generated context"));
        }
    }

    for f in loaded.iter().filter(|f| f.kind == FileKind::Report) {
        let stored = match read_report_csv(&f.path) {
            Ok(r) => r,
            Err(e) => {
                c.push(&f.path, 0, e.to_string());
                continue;
            }
        };
        for r in &stored {
            for e in check_report_row(r) {
                c.push(&f.path, 0, e);
            }
        }
        if have_eval && have_traced {
            let samples: Vec<TracedSample> = traced.values().cloned().collect();
            match subset_reports(&records, &samples) {
                Ok(recount) => {
                    if recount.len() != stored.len() {
                        c.push(
                            &f.path,
                            0,
                            format!("{} report rows but the recount has {}", stored.len(), recount.len()),
                        );
                    }
                    for (s, r) in stored.iter().zip(&recount) {
                        if !reports_agree(s, r) {
                            c.push(
                                &f.path,
                                0,
                                format!("{} row disagrees with the recount {r:?}", s.subset.as_str()),
                            );
                        }
                    }
                }
                Err(e) => c.push(&f.path, 0, format!("recount failed: {e}")),
            }
        }
    }
    c.violations
}

fn check_lineage(c: &mut Checker, files: &[Loaded]) {
    let mut by_kind: HashMap<FileKind, &Loaded> = HashMap::new();
    for f in files {
        let Some(h) = &f.header else { continue };
        match by_kind.get(&f.kind) {
            Some(prev) => {
                let prev_h = prev.header.as_ref().expect("headed files only");
                if prev_h.manifest != h.manifest {
                    c.push(
                        &f.path,
                        1,
                        format!(
                            "mixed manifests: {} file has manifest {} but {} has {}",
                            f.kind.name(),
                            h.manifest,
                            prev.path.display(),
                            prev_h.manifest
                        ),
                    );
                }
            }
            None => {
                by_kind.insert(f.kind, f);
            }
        }
    }

    let seeds: Vec<(&Loaded, u64)> = files
        .iter()
        .filter_map(|f| f.header.as_ref().map(|h| (f, h.seed)))
        .collect();
    if let Some(&(first, seed)) = seeds.first() {
        for &(f, s) in &seeds[1..] {
            if s != seed {
                c.push(
                    &f.path,
                    1,
                    format!("seed {s} differs from seed {seed} of {}", first.path.display()),
                );
            }
        }
    }

    let expect_parent = |c: &mut Checker, child: FileKind, parent: FileKind| {
        let (Some(ch), Some(pa)) = (by_kind.get(&child), by_kind.get(&parent)) else {
            return;
        };
        let (ch_h, pa_h) = (ch.header.as_ref().unwrap(), pa.header.as_ref().unwrap());
        if ch_h.parent.as_deref() != Some(pa_h.manifest.as_str()) {
            c.push(
                &ch.path,
                1,
                format!(
                    "mixed manifests: parent {} is not the manifest {} of {}",
                    ch_h.parent.as_deref().unwrap_or("-"),
                    pa_h.manifest,
                    pa.path.display()
                ),
            );
        }
    };
    expect_parent(c, FileKind::Traced, FileKind::Contexts);
    expect_parent(c, FileKind::Eval, FileKind::Traced);
    expect_parent(c, FileKind::Similarity, FileKind::Traced);
    expect_parent(c, FileKind::Order, FileKind::Traced);
    expect_parent(c, FileKind::Completeness, FileKind::Traced);
    expect_parent(c, FileKind::Slices, FileKind::Eval);

    if let (Some(e), Some(r)) = (by_kind.get(&FileKind::Eval), by_kind.get(&FileKind::Report)) {
        let (eh, rh) = (e.header.as_ref().unwrap(), r.header.as_ref().unwrap());
        if eh.manifest != rh.manifest {
            c.push(&r.path, 1, format!("mixed manifests: report {} but eval {}", rh.manifest, eh.manifest));
        }
    }
}
