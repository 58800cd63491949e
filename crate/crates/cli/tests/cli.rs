mod common;

use std::path::Path;
use std::process::Command;

use common::{data_lines, Choice, Conflict, Spec, World};
use ctxtrace_cli::CliError;
use ctxtrace_core::io::read_jsonl;
use ctxtrace_core::metrics::read_report_csv;
use ctxtrace_core::{Context, DropReason, HybridRecord, ReportSubset, Subset, TracedSample, Variant};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ctxtrace"))
}

fn rows<T: serde::de::DeserializeOwned>(path: &Path) -> Vec<T> {
    read_jsonl::<T>(path).unwrap().into_iter().map(|r| r.value).collect()
}

fn mixed_specs(n: usize) -> Vec<Spec> {
    (0..n)
        .map(|i| {
            let conflict = if i % 2 == 0 { Conflict::Aig } else { Conflict::Air };
            let hybrid = [Choice::Gen, Choice::Gen, Choice::Ret, Choice::Other][i % 4];
            Spec::new(conflict, hybrid)
        })
        .collect()
}

#[test]
fn prepare_is_deterministic_and_length_matched() {
    let tmp = tempfile::tempdir().unwrap();
    let world = World::build(tmp.path(), &mixed_specs(6), 5);
    for name in ["a.jsonl", "b.jsonl"] {
        world
            .run(&["prepare", "--out", world.path(name).to_str().unwrap()])
            .unwrap();
    }
    let a = std::fs::read(world.path("a.jsonl")).unwrap();
    assert_eq!(a, std::fs::read(world.path("b.jsonl")).unwrap());

    let contexts: Vec<Context> = rows(&world.path("a.jsonl"));
    assert_eq!(contexts.len(), 12);
    assert!(contexts.iter().all(|c| c.validate().is_ok()));
    // Every candidate length yields the same scripted text, so the smallest n wins.
    assert!(contexts
        .iter()
        .filter(|c| c.variant == Variant::Nature)
        .all(|c| c.gen_target_words == Some(80)));
    let first = std::fs::read_to_string(world.path("a.jsonl")).unwrap();
    assert!(first.starts_with("# ctxtrace manifest="));
    assert!(first.lines().next().unwrap().ends_with("seed=5"));
    assert!(world.path("a.length_stats.json").exists());
    assert!(world.path("a.jsonl.manifest.json").exists());
}

#[test]
fn trace_labels_and_drop_reasons() {
    let tmp = tempfile::tempdir().unwrap();
    let mut specs = vec![
        Spec::new(Conflict::Aig, Choice::Gen),
        Spec::new(Conflict::Air, Choice::Ret),
        Spec::new(Conflict::Aig, Choice::Gen),
        Spec::new(Conflict::Air, Choice::Gen),
    ];
    specs[2].generated_reading = Some("Nowhere".into());
    specs[3].closed_book = Some("Decoy3".into());
    specs[0].closed_book = Some("Elsewhere".into());
    specs[1].closed_book = Some("Elsewhere".into());
    let world = World::build(tmp.path(), &specs, 1);
    world.run_core_stages(tmp.path(), &["--parametric"]).unwrap();

    let traced: Vec<TracedSample> = rows(&world.path("traced.jsonl"));
    assert_eq!(traced[0].subset, Subset::Aig);
    assert_eq!(traced[0].closed_book.as_deref(), Some("Elsewhere"));
    assert_eq!(traced[1].subset, Subset::Air);
    assert_eq!(traced[2].dropped, Some(DropReason::NotInGen));
    assert_eq!(traced[2].subset, Subset::None);
    // Closed-book agrees with the generated-context answer.
    assert_eq!(traced[3].dropped, Some(DropReason::Parametric));
    assert_eq!(traced[3].subset, Subset::None);
}

#[test]
fn parametric_without_closed_book_script_is_a_backend_error() {
    let tmp = tempfile::tempdir().unwrap();
    let world = World::build(tmp.path(), &[Spec::new(Conflict::Aig, Choice::Gen)], 1);
    let err = world.run_core_stages(tmp.path(), &["--parametric"]).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn degenerate_readers_give_extreme_diff_gr() {
    for (choice, expected) in [(Choice::Gen, 1.0), (Choice::Ret, -1.0)] {
        let tmp = tempfile::tempdir().unwrap();
        let specs: Vec<Spec> = (0..5).map(|_| Spec::new(Conflict::Air, choice)).collect();
        let world = World::build(tmp.path(), &specs, 2);
        world.run_core_stages(tmp.path(), &[]).unwrap();
        let report = read_report_csv(&world.path("report.csv")).unwrap();
        let all = report.iter().find(|r| r.subset == ReportSubset::All).unwrap();
        assert_eq!(all.diff_gr, expected);
        assert_eq!(all.n_samples, 5);
        let rho = if expected > 0.0 { all.rho_gen } else { all.rho_ret };
        assert_eq!(rho, 1.0);
        assert!(report.iter().all(|r| r.subset != ReportSubset::Aig));
    }
}

#[test]
fn mixed_policy_report_matches_independent_recount() {
    let tmp = tempfile::tempdir().unwrap();
    let specs = mixed_specs(40);
    let world = World::build(tmp.path(), &specs, 3);
    world.run_core_stages(tmp.path(), &[]).unwrap();

    let eval: Vec<HybridRecord> = rows(&world.path("eval.jsonl"));
    assert_eq!(eval.len(), 40);
    let gen = specs.iter().filter(|s| s.hybrid == Choice::Gen).count() as f64;
    let ret = specs.iter().filter(|s| s.hybrid == Choice::Ret).count() as f64;
    let report = read_report_csv(&world.path("report.csv")).unwrap();
    let all = report.iter().find(|r| r.subset == ReportSubset::All).unwrap();
    assert!((all.diff_gr - (gen - ret) / (gen + ret)).abs() < 1e-12);
    assert!((all.rho_gen - gen / 40.0).abs() < 1e-12);

    let files: Vec<_> = ["contexts.jsonl", "traced.jsonl", "eval.jsonl", "report.csv"]
        .iter()
        .map(|n| world.path(n))
        .collect();
    let violations = ctxtrace_cli::validate_files(&files);
    assert!(violations.is_empty(), "{violations:?}");
}

#[test]
fn analyze_subcommands() {
    let tmp = tempfile::tempdir().unwrap();
    let world = World::build(tmp.path(), &mixed_specs(12), 4);
    world.run_core_stages(tmp.path(), &[]).unwrap();
    let traced = world.path("traced.jsonl");
    let traced = traced.to_str().unwrap();
    let eval = world.path("eval.jsonl");
    let out = |n: &str| world.path(n).to_str().unwrap().to_owned();

    world.run(&["analyze", "order", "--traced", traced, "--out", &out("order.csv")]).unwrap();
    let order = data_lines(&world.path("order.csv"));
    let labels: Vec<&str> = order[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(order[0], "order,n,rho_gen,rho_ret,rho_llm,others,diff_gr");
    assert_eq!(labels, ["generated_first", "retrieved_first", "random"]);

    world.run(&["analyze", "sim", "--traced", traced, "--out", &out("sim.csv")]).unwrap();
    assert_eq!(data_lines(&world.path("sim.csv")).len(), 13);

    world
        .run(&[
            "analyze",
            "slices",
            "--traced",
            traced,
            "--eval",
            eval.to_str().unwrap(),
            "--slices",
            "1",
            "--out",
            &out("slices.csv"),
        ])
        .unwrap();
    let slice = data_lines(&world.path("slices.csv"));
    let global = read_report_csv(&world.path("report.csv")).unwrap();
    let global = global.iter().find(|r| r.subset == ReportSubset::All).unwrap();
    let diff: f64 = slice[1].rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(diff, global.diff_gr);

    world
        .run(&["analyze", "completeness", "--traced", traced, "--out", &out("completeness.csv")])
        .unwrap();
    let table = data_lines(&world.path("completeness.csv"));
    let labels: Vec<&str> = table[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["nature", "strunc", "trunc"]);
    let traced_rows: Vec<TracedSample> = rows(Path::new(traced));
    let variants: Vec<Context> = rows(&world.path("completeness.variants.jsonl"));
    assert_eq!(variants.iter().filter(|c| c.variant == Variant::Trunc).count(), 12);
    assert!(table[1..].iter().all(|l| l.split(',').nth(1) == Some("12")), "{table:?}");
    for v in variants.iter().filter(|c| c.variant == Variant::Trunc) {
        let base = traced_rows.iter().find(|s| s.id() == v.id).unwrap();
        assert_eq!(v.word_count, base.retrieved.word_count);
    }
}

#[test]
fn report_renders_markdown() {
    let tmp = tempfile::tempdir().unwrap();
    let world = World::build(tmp.path(), &mixed_specs(8), 4);
    world.run_core_stages(tmp.path(), &[]).unwrap();
    let report = world.path("report.csv");
    let md = world.path("report.md");
    world
        .run(&["report", &format!("Scripted={}", report.display()), "--out", md.to_str().unwrap()])
        .unwrap();
    let text = std::fs::read_to_string(md).unwrap();
    assert!(text.starts_with("<!-- # ctxtrace manifest="));
    assert!(text.contains("| Run | AIG | AIR | ALL |"));
    assert!(text.contains("| Scripted | ALL | 8 |"));
}

fn corrupt_line(path: &Path, line_no: usize, from: &str, to: &str) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    assert!(lines[line_no - 1].contains(from), "{}", lines[line_no - 1]);
    lines[line_no - 1] = lines[line_no - 1].replacen(from, to, 1);
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

#[test]
fn validate_binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let world = World::build(tmp.path(), &mixed_specs(6), 9);
    world.run_core_stages(tmp.path(), &[]).unwrap();
    let files = ["contexts.jsonl", "traced.jsonl", "eval.jsonl", "report.csv"].map(|n| world.path(n));

    let ok = bin().arg("validate").args(&files).output().unwrap();
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));

    // Line 2 of traced.jsonl is the first sample, an AIG.
    let traced = world.path("traced.jsonl");
    let pristine = std::fs::read(&traced).unwrap();
    corrupt_line(&traced, 2, r#""subset":"AIG""#, r#""subset":"AIR""#);
    let bad = bin().arg("validate").arg(&traced).output().unwrap();
    assert_eq!(bad.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&bad.stderr);
    assert!(stderr.contains("traced.jsonl:2:"), "{stderr}");
    std::fs::write(&traced, pristine).unwrap();

    let eval = world.path("eval.jsonl");
    corrupt_line(&eval, 2, r#""classification":"gen""#, r#""classification":"other""#);
    let bad = bin().args(["validate"]).arg(&traced).arg(&eval).output().unwrap();
    assert_eq!(bad.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("recounts as gen"));
}

#[test]
fn validate_rejects_mixed_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let a = World::build(&tmp.path().join("a"), &mixed_specs(4), 1);
    let b = World::build(&tmp.path().join("b"), &mixed_specs(5), 1);
    a.run_core_stages(&a.dir, &[]).unwrap();
    b.run_core_stages(&b.dir, &[]).unwrap();
    let violations = ctxtrace_cli::validate_files(&[a.path("traced.jsonl"), b.path("eval.jsonl")]);
    assert!(violations.iter().any(|v| v.message.contains("mixed manifests")), "{violations:?}");
}

#[test]
fn usage_and_io_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let world = World::build(tmp.path(), &mixed_specs(2), 1);

    let no_args = bin().output().unwrap();
    assert_eq!(no_args.status.code(), Some(1));

    let missing_questions = bin()
        .args(["prepare", "--config"])
        .arg(&world.config)
        .args(["--out", "x.jsonl"])
        .output()
        .unwrap();
    assert_eq!(missing_questions.status.code(), Some(1));

    let missing_corpus = bin()
        .args(["prepare", "--config"])
        .arg(&world.config)
        .arg("--questions")
        .arg(&world.questions)
        .args(["--corpus", "/nonexistent/corpus.jsonl", "--out"])
        .arg(tmp.path().join("c.jsonl"))
        .output()
        .unwrap();
    assert_eq!(missing_corpus.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing_corpus.stderr).contains("/nonexistent/corpus.jsonl"));
}

#[test]
fn script_miss_is_a_backend_error() {
    let tmp = tempfile::tempdir().unwrap();
    let world = World::build(tmp.path(), &mixed_specs(2), 1);
    std::fs::write(world.path("generator.jsonl"), "").unwrap();
    let err = world
        .run(&["prepare", "--out", world.path("c.jsonl").to_str().unwrap()])
        .unwrap_err();
    assert!(matches!(err, CliError::Core(ctxtrace_core::Error::ScriptMiss { .. })));
    assert_eq!(err.exit_code(), 2);
}

#[test]
fn length_discrepancy_warning() {
    let tmp = tempfile::tempdir().unwrap();
    let world = World::build(tmp.path(), &mixed_specs(3), 1);
    // Generated contexts are a few words shorter than retrieved ones here.
    let out = bin()
        .args(["prepare", "--config"])
        .arg(&world.config)
        .arg("--questions")
        .arg(&world.questions)
        .arg("--out")
        .arg(world.path("c.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(world.path("c.length_stats.json")).unwrap()).unwrap();
    let d = stats["discrepancy"].as_f64().unwrap();
    assert!(d > 0.03, "{d}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(&format!("length discrepancy {d:.4} > 0.03")), "{stderr}");
}
