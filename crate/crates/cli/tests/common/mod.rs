//! Scripted fixture worlds written to disk: questions, a BM25 corpus in which
//! each question has exactly one matching document, and reader/generator
//! scripts keyed by the fingerprints the pipeline will compute.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use clap::Parser;
use ctxtrace_cli::{run, Cli, CliResult};
use ctxtrace_core::backends::{context_fingerprint, Document, Mode, ScriptEntry};
use ctxtrace_core::io::write_jsonl;
use ctxtrace_core::QaExample;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conflict {
    /// The generated context carries the gold answer.
    Aig,
    /// The retrieved context carries the gold answer.
    Air,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Choice {
    Gen,
    Ret,
    Other,
}

#[derive(Debug, Clone)]
pub struct Spec {
    pub conflict: Conflict,
    pub hybrid: Choice,
    /// Closed-book answer; `None` leaves the closed-book mode unscripted.
    pub closed_book: Option<String>,
    /// Replaces the answer read from the generated context alone.
    pub generated_reading: Option<String>,
}

impl Spec {
    pub fn new(conflict: Conflict, hybrid: Choice) -> Self {
        Self {
            conflict,
            hybrid,
            closed_book: None,
            generated_reading: None,
        }
    }
}

pub struct World {
    pub dir: PathBuf,
    pub config: PathBuf,
    pub questions: PathBuf,
}

pub fn question_id(i: usize) -> String {
    format!("q{i:05}")
}

pub fn gen_answer(i: usize, c: Conflict) -> String {
    match c {
        Conflict::Aig => format!("Gold{i}"),
        Conflict::Air => format!("Decoy{i}"),
    }
}

pub fn ret_answer(i: usize, c: Conflict) -> String {
    match c {
        Conflict::Aig => format!("Decoy{i}"),
        Conflict::Air => format!("Gold{i}"),
    }
}

fn retrieved_rendered(doc: &Document) -> String {
    format!("Title: {} Content: {}", doc.title, doc.text)
}

fn filler(prefix: &str, n: usize) -> String {
    (0..n).map(|k| format!("{prefix}{k}")).collect::<Vec<_>>().join(" ")
}

fn entry(qid: &str, mode: Mode, fp: Option<String>, answer: &str, n: Option<u32>) -> ScriptEntry {
    ScriptEntry {
        question_id: qid.to_owned(),
        mode,
        context_fingerprint: fp,
        answer: answer.to_owned(),
        target_words: n,
    }
}

impl World {
    /// Writes one question per spec plus config, corpus and scripts under `dir`.
    pub fn build(dir: &Path, specs: &[Spec], seed: u64) -> World {
        std::fs::create_dir_all(dir).unwrap();
        let mut questions = Vec::new();
        let mut corpus = Vec::new();
        let mut reader = Vec::new();
        let mut generator = Vec::new();
        for (i, spec) in specs.iter().enumerate() {
            let qid = question_id(i);
            let (a_gen, a_ret) = (gen_answer(i, spec.conflict), ret_answer(i, spec.conflict));
            questions.push(QaExample {
                id: qid.clone(),
                question: format!("Which entity is linked to topic{i}?"),
                answers: vec![format!("Gold{i}")],
            });
            let doc = Document {
                doc_id: format!("d{i:05}"),
                title: format!("Topic{i}"),
                text: format!(
                    "Records on topic{i} name {a_ret} as the linked entity. {}.",
                    filler("ret", 40 + i % 7)
                ),
            };
            let generated = format!(
                "Background for topic{i}. Sources agree the linked entity is {a_gen}. {}.",
                filler("gen", 38 + i % 5)
            );
            let reading = spec.generated_reading.clone().unwrap_or_else(|| a_gen.clone());
            let ret_fp = context_fingerprint(&retrieved_rendered(&doc));
            reader.push(entry(&qid, Mode::SingleContext, Some(ret_fp), &a_ret, None));
            reader.push(entry(&qid, Mode::SingleContext, Some(context_fingerprint(&generated)), &reading, None));
            let hybrid = match spec.hybrid {
                Choice::Gen => a_gen.clone(),
                Choice::Ret => a_ret.clone(),
                Choice::Other => format!("Somebody{i}"),
            };
            reader.push(entry(&qid, Mode::Hybrid, None, &hybrid, None));
            if let Some(cb) = &spec.closed_book {
                reader.push(entry(&qid, Mode::ClosedBook, None, cb, None));
            }
            // Variants read from any other generated text fall back to this.
            reader.push(entry(&qid, Mode::SingleContext, None, &a_gen, None));
            for n in [80, 100, 120] {
                generator.push(entry(&qid, Mode::Generate, None, &generated, Some(n)));
            }
            let extra: Vec<String> =
                (0..12).map(|k| format!("Further note {k} on topic{i} follows here.")).collect();
            let unconstrained = format!("{generated} {}", extra.join(" "));
            generator.push(entry(&qid, Mode::Generate, None, &unconstrained, None));
            corpus.push(doc);
        }

        let questions_path = dir.join("questions.jsonl");
        write_jsonl(&questions_path, None, &questions).unwrap();
        write_jsonl(&dir.join("corpus.jsonl"), None, &corpus).unwrap();
        write_jsonl(&dir.join("reader.jsonl"), None, &reader).unwrap();
        write_jsonl(&dir.join("generator.jsonl"), None, &generator).unwrap();
        let config = serde_json::json!({
            "reader": {"kind": "scripted", "script_path": "reader.jsonl"},
            "generator": {"kind": "scripted", "script_path": "generator.jsonl"},
            "retriever": {"kind": "bm25", "bm25": {"corpus_path": "corpus.jsonl"}},
            "seed": seed,
            "workers": 4,
            "slice_count": 3,
        });
        let config_path = dir.join("config.json");
        std::fs::write(&config_path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
        World {
            dir: dir.to_owned(),
            config: config_path,
            questions: questions_path,
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Runs a subcommand with `--config` and `--questions` already supplied.
    pub fn run(&self, args: &[&str]) -> CliResult<()> {
        let mut argv = vec!["ctxtrace".to_owned()];
        argv.extend(args.iter().map(|s| s.to_string()));
        argv.push("--config".into());
        argv.push(self.config.display().to_string());
        argv.push("--questions".into());
        argv.push(self.questions.display().to_string());
        run(Cli::try_parse_from(argv).expect("valid arguments"))
    }

    /// prepare → trace → evaluate with outputs in `out_dir`.
    pub fn run_core_stages(&self, out_dir: &Path, extra: &[&str]) -> CliResult<()> {
        let p = |n: &str| out_dir.join(n).display().to_string();
        let with = |mut v: Vec<String>| {
            v.extend(extra.iter().map(|s| s.to_string()));
            v
        };
        let call = |v: Vec<String>| {
            let refs: Vec<&str> = v.iter().map(String::as_str).collect();
            self.run(&refs)
        };
        call(with(vec!["prepare".into(), "--out".into(), p("contexts.jsonl")]))?;
        call(with(vec![
            "trace".into(),
            "--contexts".into(),
            p("contexts.jsonl"),
            "--out".into(),
            p("traced.jsonl"),
        ]))?;
        call(with(vec![
            "evaluate".into(),
            "--traced".into(),
            p("traced.jsonl"),
            "--out".into(),
            p("eval.jsonl"),
        ]))
    }
}

/// Non-header lines of a pipeline output file.
pub fn data_lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_owned)
        .collect()
}
