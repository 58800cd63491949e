//! Preference metrics over hybrid reads.
//!
//! `rho_gen`, `rho_ret` and `rho_llm` are the fractions of hybrid answers that
//! agree with the generated-context candidate, the retrieved-context candidate
//! and the closed-book answer. DiffGR = (rho_gen − rho_ret)/(rho_gen + rho_ret).
//! Fractions are stored as fractions and only rendered as percentages.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::FileHeader;
use crate::pipeline::{Classification, Context, ContextSource, HybridRecord, QaExample, Subset, TracedSample};
use crate::textnorm::{contains_answer, matches_any};

/// Relative length gap above which a run is flagged.
pub const LENGTH_DISCREPANCY_WARN: f64 = 0.03;

pub const REPORT_COLUMNS: [&str; 8] = [
    "subset", "n", "rho_gen", "rho_ret", "rho_llm", "others", "diff_gr", "em_percent",
];

/// Classification tallies. Merging is associative and commutative.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub gen: usize,
    pub ret: usize,
    pub llm: usize,
    pub other: usize,
    pub llm_tracked: bool,
}

impl Counts {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a HybridRecord>) -> Self {
        records.into_iter().fold(Self::default(), |mut c, r| {
            match r.classification {
                Classification::Gen => c.gen += 1,
                Classification::Ret => c.ret += 1,
                Classification::Llm => c.llm += 1,
                Classification::Other => c.other += 1,
            }
            c.llm_tracked |= r.llm_tracked;
            c
        })
    }

    pub fn merge(self, other: Self) -> Self {
        Self {
            gen: self.gen + other.gen,
            ret: self.ret + other.ret,
            llm: self.llm + other.llm,
            other: self.other + other.other,
            llm_tracked: self.llm_tracked || other.llm_tracked,
        }
    }

    pub fn total(&self) -> usize {
        self.gen + self.ret + self.llm + self.other
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proportions {
    pub rho_gen: f64,
    pub rho_ret: f64,
    /// Present only when closed-book answers were tracked.
    pub rho_llm: Option<f64>,
    pub others: f64,
}

impl Proportions {
    pub fn from_counts(counts: &Counts) -> Result<Self> {
        let n = counts.total();
        if n == 0 {
            return Err(Error::UndefinedMetric("proportions of an empty record set".into()));
        }
        let n = n as f64;
        let frac = |k: usize| k as f64 / n;
        Ok(if counts.llm_tracked {
            Self {
                rho_gen: frac(counts.gen),
                rho_ret: frac(counts.ret),
                rho_llm: Some(frac(counts.llm)),
                others: frac(counts.other),
            }
        } else {
            Self {
                rho_gen: frac(counts.gen),
                rho_ret: frac(counts.ret),
                rho_llm: None,
                others: frac(counts.llm + counts.other),
            }
        })
    }

    pub fn sum(&self) -> f64 {
        self.rho_gen + self.rho_ret + self.rho_llm.unwrap_or(0.0) + self.others
    }
}

pub fn proportions(records: &[HybridRecord]) -> Result<Proportions> {
    Proportions::from_counts(&Counts::from_records(records))
}

/// (rho_gen − rho_ret) / (rho_gen + rho_ret); counts work as well as fractions.
pub fn diff_gr(rho_gen: f64, rho_ret: f64) -> Result<f64> {
    let denom = rho_gen + rho_ret;
    if !(denom > 0.0) {
        return Err(Error::UndefinedMetric(format!(
            "DiffGR needs rho_gen + rho_ret > 0 (got {rho_gen} + {rho_ret})"
        )));
    }
    Ok((rho_gen - rho_ret) / denom)
}

fn sample_index(samples: &[TracedSample]) -> HashMap<&str, &TracedSample> {
    samples.iter().map(|s| (s.id(), s)).collect()
}

/// Percentage of hybrid answers that match a golden answer.
pub fn em_score(records: &[HybridRecord], samples: &[TracedSample]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::UndefinedMetric("EM of an empty record set".into()));
    }
    let index = sample_index(samples);
    let mut correct = 0usize;
    for r in records {
        let sample = index
            .get(r.id.as_str())
            .ok_or_else(|| Error::Validation(format!("no traced sample for eval record {:?}", r.id)))?;
        if matches_any(&r.hybrid_answer, &sample.example.answers) {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / records.len() as f64)
}

/// Fraction of contexts whose rendered text contains some golden answer.
pub fn recall(contexts: &[Context], examples: &[QaExample]) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::UndefinedMetric("recall of an empty context set".into()));
    }
    let golds: HashMap<&str, &QaExample> = examples.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut hits = 0usize;
    for c in contexts {
        let ex = golds
            .get(c.id.as_str())
            .ok_or_else(|| Error::Validation(format!("no example for context {:?}", c.id)))?;
        let rendered = c.rendered();
        if ex
            .answers
            .iter()
            .any(|g| contains_answer(&rendered, g).unwrap_or(false))
        {
            hits += 1;
        }
    }
    Ok(hits as f64 / contexts.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean_retrieved_wc: f64,
    pub mean_generated_wc: f64,
    /// |mean_generated − mean_retrieved| / mean_retrieved
    pub discrepancy: f64,
}

impl LengthStats {
    pub fn from_means(mean_retrieved_wc: f64, mean_generated_wc: f64) -> Result<Self> {
        if !(mean_retrieved_wc > 0.0) {
            return Err(Error::UndefinedMetric(
                "length discrepancy needs a positive mean retrieved length".into(),
            ));
        }
        Ok(Self {
            mean_retrieved_wc,
            mean_generated_wc,
            discrepancy: (mean_generated_wc - mean_retrieved_wc).abs() / mean_retrieved_wc,
        })
    }

    pub fn exceeds_threshold(&self) -> bool {
        self.discrepancy > LENGTH_DISCREPANCY_WARN
    }
}

pub fn length_stats(contexts: &[Context]) -> Result<LengthStats> {
    let mean = |source| {
        let lens: Vec<usize> = contexts
            .iter()
            .filter(|c| c.source == source)
            .map(|c| c.word_count)
            .collect();
        (!lens.is_empty()).then(|| lens.iter().sum::<usize>() as f64 / lens.len() as f64)
    };
    let ret = mean(ContextSource::Retrieved)
        .ok_or_else(|| Error::Validation("length stats need retrieved contexts".into()))?;
    let gen = mean(ContextSource::Generated)
        .ok_or_else(|| Error::Validation("length stats need generated contexts".into()))?;
    LengthStats::from_means(ret, gen)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ReportSubset {
    #[serde(rename = "AIG")]
    Aig,
    #[serde(rename = "AIR")]
    Air,
    #[serde(rename = "ALL")]
    All,
}

impl ReportSubset {
    pub const ALL: [ReportSubset; 3] = [ReportSubset::Aig, ReportSubset::Air, ReportSubset::All];

    pub fn as_str(self) -> &'static str {
        match self {
            ReportSubset::Aig => "AIG",
            ReportSubset::Air => "AIR",
            ReportSubset::All => "ALL",
        }
    }

    pub fn includes(self, subset: Subset) -> bool {
        match self {
            ReportSubset::Aig => subset == Subset::Aig,
            ReportSubset::Air => subset == Subset::Air,
            ReportSubset::All => subset.is_conflicting(),
        }
    }
}

impl FromStr for ReportSubset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "AIG" => Ok(ReportSubset::Aig),
            "AIR" => Ok(ReportSubset::Air),
            "ALL" => Ok(ReportSubset::All),
            _ => Err(Error::Validation(format!("unknown subset {s:?}"))),
        }
    }
}

/// One row of `report.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub subset: ReportSubset,
    pub n_samples: usize,
    pub rho_gen: f64,
    pub rho_ret: f64,
    pub rho_llm: Option<f64>,
    pub others: f64,
    pub diff_gr: f64,
    pub em_percent: f64,
}

impl MetricsReport {
    pub fn from_records(
        subset: ReportSubset,
        records: &[HybridRecord],
        samples: &[TracedSample],
    ) -> Result<Self> {
        let p = proportions(records)?;
        Ok(Self {
            subset,
            n_samples: records.len(),
            rho_gen: p.rho_gen,
            rho_ret: p.rho_ret,
            rho_llm: p.rho_llm,
            others: p.others,
            diff_gr: diff_gr(p.rho_gen, p.rho_ret)?,
            em_percent: em_score(records, samples)?,
        })
    }
}

/// Reports for AIG, AIR and ALL; subsets without records are omitted.
pub fn subset_reports(records: &[HybridRecord], samples: &[TracedSample]) -> Result<Vec<MetricsReport>> {
    let index = sample_index(samples);
    let mut out = Vec::new();
    for subset in ReportSubset::ALL {
        let mut selected = Vec::new();
        for r in records {
            let s = index.get(r.id.as_str()).ok_or_else(|| {
                Error::Validation(format!("no traced sample for eval record {:?}", r.id))
            })?;
            if subset.includes(s.subset) {
                selected.push(r.clone());
            }
        }
        if !selected.is_empty() {
            out.push(MetricsReport::from_records(subset, &selected, samples)?);
        }
    }
    Ok(out)
}

/// Writes `report.csv`. Floats use shortest round-trip formatting, so
/// [`read_report_csv`] recovers them bit for bit.
pub fn write_report_csv(path: &Path, header: Option<&FileHeader>, reports: &[MetricsReport]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut file = std::fs::File::create(path).map_err(io)?;
    if let Some(h) = header {
        writeln!(file, "{h}").map_err(io)?;
    }
    let mut w = csv::Writer::from_writer(file);
    let csv_err = |e: csv::Error| Error::Validation(format!("{}: {e}", path.display()));
    w.write_record(REPORT_COLUMNS).map_err(csv_err)?;
    for r in reports {
        w.write_record([
            r.subset.as_str().to_owned(),
            r.n_samples.to_string(),
            r.rho_gen.to_string(),
            r.rho_ret.to_string(),
            r.rho_llm.map(|v| v.to_string()).unwrap_or_default(),
            r.others.to_string(),
            r.diff_gr.to_string(),
            r.em_percent.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(io)
}

pub fn read_report_csv(path: &Path) -> Result<Vec<MetricsReport>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_path(path)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    let schema = |line: usize, message: String| Error::Schema {
        path: path.to_owned(),
        line,
        message,
    };
    let headers = reader
        .headers()
        .map_err(|e| schema(1, e.to_string()))?
        .clone();
    if headers.iter().ne(REPORT_COLUMNS) {
        return Err(schema(1, format!("expected columns {}", REPORT_COLUMNS.join(","))));
    }
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| schema(0, e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let float = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| schema(line, format!("column {}: {e}", REPORT_COLUMNS[i])))
        };
        out.push(MetricsReport {
            subset: rec[0].parse().map_err(|e: Error| schema(line, e.to_string()))?,
            n_samples: rec[1]
                .parse()
                .map_err(|e| schema(line, format!("column n: {e}")))?,
            rho_gen: float(2)?,
            rho_ret: float(3)?,
            rho_llm: if rec[4].is_empty() { None } else { Some(float(4)?) },
            others: float(5)?,
            diff_gr: float(6)?,
            em_percent: float(7)?,
        });
    }
    Ok(out)
}

/// Markdown tables: EM by subset per run, then the preference breakdown.
pub fn render_markdown(runs: &[(String, Vec<MetricsReport>)]) -> String {
    let mut md = String::new();
    let pct = |v: f64| format!("{:.2}", 100.0 * v);
    let em_cell = |reports: &[MetricsReport], s: ReportSubset| {
        reports
            .iter()
            .find(|r| r.subset == s)
            .map_or("-".to_owned(), |r| format!("{:.2}", r.em_percent))
    };

    md.push_str("### EM by subset\n\n| Run | AIG | AIR | ALL |\n|---|---:|---:|---:|\n");
    for (label, reports) in runs {
        let _ = writeln!(
            md,
            "| {label} | {} | {} | {} |",
            em_cell(reports, ReportSubset::Aig),
            em_cell(reports, ReportSubset::Air),
            em_cell(reports, ReportSubset::All)
        );
    }

    md.push_str(
        "\n### Answer sources\n\n\
         Percentages of hybrid answers. When rho_llm is `-`, closed-book matches are counted in Others.\n\n\
         | Run | Subset | n | rho_gen | rho_ret | rho_llm | Others | DiffGR |\n\
         |---|---|---:|---:|---:|---:|---:|---:|\n",
    );
    for (label, reports) in runs {
        for r in reports {
            let _ = writeln!(
                md,
                "| {label} | {} | {} | {} | {} | {} | {} | {:.4} |",
                r.subset.as_str(),
                r.n_samples,
                pct(r.rho_gen),
                pct(r.rho_ret),
                r.rho_llm.map_or("-".to_owned(), pct),
                pct(r.others),
                r.diff_gr
            );
        }
    }
    md
}
