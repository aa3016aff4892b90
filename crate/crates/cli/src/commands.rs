use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tagrace_core::corpus::{parse_manifest, run_case, CaseOutcome, Category, Corpus};
use tagrace_core::fuzz::{run_fuzz, FuzzConfig, FuzzSummary};
use tagrace_core::metrics::{compute_metrics, ConfusionCounts, MetricsResult};
use tagrace_core::oracle::{race_check, History, RacyPair, SHADOW_SLOTS};
use tagrace_core::program::{
    enumerate_interleavings, parse_program, random_schedule, validate_trace, Program, Trace, MAX_EVENTS,
};
use tagrace_core::tbri::{run_detector, RaceReport, ReportKind};

use crate::{CasesAction, Cli, Command, Engine, Format, Schedule};

struct Out {
    format: Format,
    quiet: bool,
}

impl Out {
    fn json<T: Serialize>(&self, record: &T) {
        println!("{}", serde_json::to_string(record).expect("output records serialize"));
    }

    fn detail_json<T: Serialize>(&self, record: &T) {
        if self.format == Format::Json && !self.quiet {
            self.json(record);
        }
    }

    fn detail_text(&self, line: impl FnOnce() -> String) {
        if self.format == Format::Text && !self.quiet {
            println!("{}", line());
        }
    }
}

/// Returns whether anything was found (exit status 1).
pub fn dispatch(cli: &Cli) -> Result<bool> {
    let out = Out { format: cli.format, quiet: cli.quiet };
    match &cli.command {
        Command::Run { program, engine, schedule, trace, bounded } => {
            cmd_run(cli, &out, program, *engine, *schedule, trace.as_deref(), *bounded)
        }
        Command::Fuzz { count, max_threads, max_events, max_pointees, max_locks, out: path } => {
            let cfg = FuzzConfig {
                count: *count,
                seed: cli.seed,
                max_threads: *max_threads,
                max_events: *max_events,
                max_pointees: *max_pointees,
                max_locks: *max_locks,
                max_traces: cli.max_traces,
            };
            cmd_fuzz(&out, &cfg, path.as_deref())
        }
        Command::Cases { action, manifest, corpus_dir } => {
            let corpus = Corpus::load(manifest.as_deref(), corpus_dir.as_deref())?;
            match action {
                CasesAction::List => cmd_cases_list(&out, &corpus),
                CasesAction::Run => cmd_cases_run(cli, &out, &corpus),
            }
        }
        Command::Metrics { manifest, reports, executions } => {
            cmd_metrics(&out, manifest.as_deref(), reports, *executions).map(|_| false)
        }
    }
}

#[derive(Serialize)]
struct ReportLine<'a> {
    record: &'static str,
    program: &'a str,
    trace: usize,
    engine: &'static str,
    #[serde(flatten)]
    report: &'a RaceReport,
}

#[derive(Serialize)]
struct PairLine<'a> {
    record: &'static str,
    program: &'a str,
    trace: usize,
    engine: &'static str,
    first_seq: u32,
    second_seq: u32,
    first_tid: u32,
    second_tid: u32,
    pointee: &'a str,
    granule_index: u32,
}

#[derive(Serialize)]
struct RunSummary<'a> {
    record: &'static str,
    program: &'a str,
    traces: usize,
    data_races: usize,
    reader_ilu: usize,
    racy_pairs: usize,
}

fn describe_report(r: &RaceReport) -> String {
    let kind = match r.kind {
        ReportKind::DataRace => "DataRace",
        ReportKind::ReaderIlu => "ReaderILU",
    };
    let prior = serde_json::to_value(r.prior_event_type).expect("event types serialize");
    format!(
        "{kind} at event {}: {}[{}] ref tag {} vs granule tag {}, accessor T{}, prior {} by a thread = {} mod 14",
        r.event_seq,
        r.pointee,
        r.granule_index,
        r.ref_tag,
        r.granule_tag,
        r.accessor_tid.0,
        prior.as_str().unwrap_or("?"),
        r.prior_tid_residue
    )
}

fn load_program(path: &Path) -> Result<Program> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_program(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_run(
    cli: &Cli,
    out: &Out,
    path: &Path,
    engine: Engine,
    schedule: Schedule,
    trace_path: Option<&Path>,
    bounded: bool,
) -> Result<bool> {
    let program = load_program(path)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("program").to_string();
    let traces: Box<dyn Iterator<Item = Trace> + '_> = match (trace_path, schedule) {
        (Some(tp), _) => {
            let text = fs::read_to_string(tp).with_context(|| format!("reading {}", tp.display()))?;
            let trace = Trace::from_json(&text, &program).with_context(|| format!("parsing {}", tp.display()))?;
            validate_trace(&program, &trace).with_context(|| format!("validating {}", tp.display()))?;
            Box::new(std::iter::once(trace))
        }
        (None, Schedule::Enumerate) => Box::new(enumerate_interleavings(&program, cli.max_traces)?),
        (None, Schedule::Seed) => Box::new(std::iter::once(random_schedule(&program, cli.seed)?)),
    };
    let history = if bounded { History::Bounded(SHADOW_SLOTS) } else { History::Exact };
    let tbri = engine != Engine::Hb;
    let hb = engine != Engine::Tbri;
    let mut summary = RunSummary { record: "summary", program: &name, traces: 0, data_races: 0, reader_ilu: 0, racy_pairs: 0 };
    for (i, trace) in traces.enumerate() {
        summary.traces += 1;
        let reports = if tbri { run_detector(&trace, &program)? } else { Vec::new() };
        let pairs: Vec<RacyPair> = if hb { race_check(&trace, history)? } else { Vec::new() };
        if !reports.is_empty() || !pairs.is_empty() {
            out.detail_text(|| format!("trace {i}"));
        }
        for r in &reports {
            match r.kind {
                ReportKind::DataRace => summary.data_races += 1,
                ReportKind::ReaderIlu => summary.reader_ilu += 1,
            }
            out.detail_text(|| format!("  tbri {}", describe_report(r)));
            out.detail_json(&ReportLine { record: "report", program: &name, trace: i, engine: "tbri", report: r });
        }
        for p in &pairs {
            summary.racy_pairs += 1;
            let pointee = &program.pointee(p.granule.pointee).name;
            out.detail_text(|| {
                format!(
                    "  hb racy pair: events {} and {} (T{} and T{}) on {}[{}]",
                    p.first_seq, p.second_seq, p.first_tid.0, p.second_tid.0, pointee, p.granule.index
                )
            });
            out.detail_json(&PairLine {
                record: "racy_pair",
                program: &name,
                trace: i,
                engine: "hb",
                first_seq: p.first_seq,
                second_seq: p.second_seq,
                first_tid: p.first_tid.0,
                second_tid: p.second_tid.0,
                pointee,
                granule_index: p.granule.index,
            });
        }
    }
    match out.format {
        Format::Json => out.json(&summary),
        Format::Text => println!(
            "{}: {} trace(s), {} data race report(s), {} reader ILU report(s), {} racy pair(s)",
            name, summary.traces, summary.data_races, summary.reader_ilu, summary.racy_pairs
        ),
    }
    Ok(summary.data_races > 0 || summary.racy_pairs > 0)
}

#[derive(Serialize)]
struct FuzzLine<'a> {
    record: &'static str,
    seed: u64,
    #[serde(flatten)]
    summary: &'a FuzzSummary,
}

fn cmd_fuzz(out: &Out, cfg: &FuzzConfig, path: Option<&Path>) -> Result<bool> {
    if cfg.max_threads < 2 || cfg.max_events == 0 || cfg.max_pointees == 0 {
        bail!("fuzzing needs at least two threads, one event per thread and one pointee");
    }
    // workers, plus allocation, spawn, join and free plumbing and up to two
    // accesses by main
    let worst = cfg.max_threads * cfg.max_events + 2 * cfg.max_pointees + 2 * cfg.max_threads + 2;
    if worst > MAX_EVENTS {
        bail!("programs of up to {worst} events exceed the enumeration limit of {MAX_EVENTS}");
    }
    let outcome = run_fuzz(cfg)?;
    let s = &outcome.summary;
    if let Some(path) = path {
        if !outcome.counterexamples.is_empty() {
            let text = serde_json::to_string_pretty(&outcome.counterexamples)?;
            fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        }
    }
    match out.format {
        Format::Json => out.json(&FuzzLine { record: "fuzz_summary", seed: cfg.seed, summary: s }),
        Format::Text => {
            println!(
                "programs {}, traces {}, data race reports {}, reader ILU reports {}, confirmed {}, unconfirmed {}",
                s.programs, s.traces, s.reports, s.ilu, s.confirmed, s.unconfirmed
            );
            if s.unconfirmed > 0 {
                match path {
                    Some(p) => println!("{} counterexample(s) written to {}", s.counterexamples, p.display()),
                    None => println!("{} counterexample(s); pass --out to save them", s.counterexamples),
                }
            }
        }
    }
    Ok(s.unconfirmed > 0)
}

#[derive(Serialize)]
struct CaseLine<'a> {
    record: &'static str,
    name: &'a str,
    category: Category,
    race: bool,
    ilu: bool,
    notes: &'a str,
}

fn cmd_cases_list(out: &Out, corpus: &Corpus) -> Result<bool> {
    for c in corpus.cases() {
        match out.format {
            Format::Json => out.json(&CaseLine {
                record: "case",
                name: &c.name,
                category: c.category,
                race: c.expected.race,
                ilu: c.expected.ilu,
                notes: &c.notes,
            }),
            Format::Text => {
                println!("{:<30} {:<7} race={:<5} ilu={}", c.name, c.category.to_string(), c.expected.race, c.expected.ilu)
            }
        }
    }
    Ok(false)
}

#[derive(Serialize)]
struct CaseResultLine<'a> {
    record: &'static str,
    #[serde(flatten)]
    outcome: &'a CaseOutcome,
}

fn cmd_cases_run(cli: &Cli, out: &Out, corpus: &Corpus) -> Result<bool> {
    let mut failed = 0;
    for case in corpus.cases() {
        let outcome = run_case(case, cli.max_traces, |i, reports| {
            for r in reports {
                out.detail_json(&ReportLine { record: "report", program: &case.name, trace: i, engine: "tbri", report: r });
            }
        })?;
        if !outcome.pass {
            failed += 1;
        }
        match out.format {
            Format::Json => out.json(&CaseResultLine { record: "case_result", outcome: &outcome }),
            Format::Text => println!(
                "{} {:<30} expected race={:<5} ilu={:<5} | traces {:>5}, with race {:>5}, with ilu {:>5}, oracle race={}",
                if outcome.pass { "PASS" } else { "FAIL" },
                outcome.name,
                outcome.expected.race,
                outcome.expected.ilu,
                outcome.traces,
                outcome.race_traces,
                outcome.ilu_traces,
                outcome.ground_truth
            ),
        }
    }
    if out.format == Format::Text {
        println!("{}/{} cases pass", corpus.cases().len() - failed, corpus.cases().len());
    }
    Ok(failed > 0)
}

#[derive(Deserialize)]
struct ReportIn {
    #[serde(default)]
    record: Option<String>,
    program: Option<String>,
    #[serde(default)]
    trace: usize,
    #[serde(default)]
    engine: Option<String>,
    kind: Option<ReportKind>,
}

#[derive(Serialize)]
struct MetricsLine {
    record: &'static str,
    #[serde(flatten)]
    counts: ConfusionCounts,
    #[serde(flatten)]
    metrics: MetricsResult,
}

/// Joins manifest labels with observed DataRace reports: a case is a
/// positive when any counted interleaving reported one.
pub fn score(manifest: &str, reports: &str, executions: Option<usize>) -> Result<ConfusionCounts> {
    let entries = parse_manifest(manifest)?;
    let mut observed: BTreeMap<&str, bool> = entries.iter().map(|e| (e.name.as_str(), false)).collect();
    for (n, line) in reports.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: ReportIn = serde_json::from_str(line).with_context(|| format!("reports line {}", n + 1))?;
        if r.record.as_deref().is_some_and(|k| k != "report") || r.engine.as_deref().is_some_and(|e| e != "tbri") {
            continue;
        }
        let Some(program) = r.program else {
            bail!("reports line {}: report without a `program` field", n + 1);
        };
        let Some(seen) = observed.get_mut(program.as_str()) else {
            bail!("reports line {}: case `{program}` is not in the manifest", n + 1);
        };
        if r.kind == Some(ReportKind::DataRace) && executions.is_none_or(|k| r.trace < k) {
            *seen = true;
        }
    }
    let mut counts = ConfusionCounts::default();
    for e in &entries {
        counts.record(e.race, observed[e.name.as_str()]);
    }
    Ok(counts)
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "undefined".to_string(), |v| format!("{v:.4}"))
}

fn cmd_metrics(out: &Out, manifest: Option<&Path>, reports: &PathBuf, executions: Option<usize>) -> Result<()> {
    let manifest = match manifest {
        Some(p) => fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => Corpus::builtin_manifest().to_string(),
    };
    let text = fs::read_to_string(reports).with_context(|| format!("reading {}", reports.display()))?;
    let counts = score(&manifest, &text, executions)?;
    let metrics = compute_metrics(&counts)?;
    match out.format {
        Format::Json => out.json(&MetricsLine { record: "metrics", counts, metrics }),
        Format::Text => {
            println!("tp {} fp {} fn {} tn {}", counts.tp, counts.fp, counts.fn_, counts.tn);
            println!(
                "precision {} recall {} accuracy {} f1 {}",
                fmt_metric(metrics.precision),
                fmt_metric(metrics.recall),
                fmt_metric(metrics.accuracy),
                fmt_metric(metrics.f1)
            );
        }
    }
    Ok(())
}
