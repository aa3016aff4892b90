//! Random program generation and the no-false-positive campaign: every
//! DataRace the detector reports on any interleaving must be on a granule the
//! exact oracle finds racy.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::memory::GranuleId;
use crate::oracle::{racy_granules, OracleError};
use crate::program::{enumerate_interleavings, parse_program, EventRecord, ParseError, ScheduleError};
use crate::tbri::{Detector, DetectorError, RaceReport, ReportKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuzzConfig {
    pub count: usize,
    pub seed: u64,
    /// Worker threads per program, at least two.
    pub max_threads: usize,
    /// Statements per worker thread.
    pub max_events: usize,
    pub max_pointees: usize,
    pub max_locks: usize,
    pub max_traces: usize,
}

impl Default for FuzzConfig {
    fn default() -> Self {
        FuzzConfig { count: 1000, seed: 0, max_threads: 3, max_events: 8, max_pointees: 2, max_locks: 2, max_traces: 10_000 }
    }
}

#[derive(Debug, Error)]
pub enum FuzzError {
    #[error("generated program {index} does not parse: {source}\n{text}")]
    Generated { index: usize, text: String, source: ParseError },
    #[error("program {index}: {source}")]
    Schedule { index: usize, source: ScheduleError },
    #[error("program {index}: {source}")]
    Detector { index: usize, source: DetectorError },
    #[error("program {index}: {source}")]
    Oracle { index: usize, source: OracleError },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuzzSummary {
    pub programs: usize,
    pub traces: usize,
    /// DataRace reports.
    pub reports: usize,
    /// ReaderILU reports; these are not checked against the oracle.
    pub ilu: usize,
    pub confirmed: usize,
    pub unconfirmed: usize,
    pub counterexamples: usize,
}

/// A DataRace report on a granule the oracle proves race-free.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counterexample {
    pub program_index: usize,
    pub trace_index: usize,
    pub program: String,
    pub trace: Vec<EventRecord>,
    pub report: RaceReport,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuzzOutcome {
    pub summary: FuzzSummary,
    pub counterexamples: Vec<Counterexample>,
}

/// Draws one program in DSL text form.
pub fn generate_program(rng: &mut ChaCha8Rng, cfg: &FuzzConfig) -> String {
    let mut out = String::new();
    let pointees: Vec<(String, u64)> = (0..rng.gen_range(1..=cfg.max_pointees.max(1)))
        .map(|i| (format!("P{i}"), if rng.gen_bool(0.5) { 16 } else { 32 }))
        .collect();
    for (name, size) in &pointees {
        out.push_str(&format!("pointee {name} size {size}\n"));
    }
    let locks: Vec<(String, bool)> =
        (0..rng.gen_range(0..=cfg.max_locks)).map(|i| (format!("m{i}"), rng.gen_bool(0.4))).collect();
    for (name, rw) in &locks {
        out.push_str(&format!("lock {name} kind {}\n", if *rw { "rwlock" } else { "mutex" }));
    }
    let access = |rng: &mut ChaCha8Rng| {
        let (p, size) = pointees.choose(rng).expect("at least one pointee");
        let verb = if rng.gen_bool(0.5) { "write" } else { "read" };
        let offset = rng.gen_range(0..(*size / 8)) * 8;
        let mut s = if offset == 0 { format!("{verb} {p}") } else { format!("{verb} {p}+{offset}") };
        if rng.gen_bool(0.3) {
            s.push_str(if rng.gen_bool(0.5) { " via p" } else { " via q" });
        }
        s
    };
    let workers = rng.gen_range(2..=cfg.max_threads.max(2));
    for w in 0..workers {
        let len = rng.gen_range(1..=cfg.max_events.max(1));
        let mut body: Vec<String> = Vec::with_capacity(len);
        let mut held: Vec<usize> = Vec::new();
        while body.len() < len {
            let remaining = len - body.len();
            let release = |held: &mut Vec<usize>, rng: &mut ChaCha8Rng| {
                let i = held.remove(rng.gen_range(0..held.len()));
                format!("release {}", locks[i].0)
            };
            if !held.is_empty() && held.len() >= remaining {
                body.push(release(&mut held, rng));
                continue;
            }
            let free: Vec<usize> = (0..locks.len()).filter(|i| !held.contains(i)).collect();
            match rng.gen_range(0..4) {
                0 if !free.is_empty() && remaining >= held.len() + 2 => {
                    let i = *free.choose(rng).expect("non-empty");
                    held.push(i);
                    let (name, rw) = &locks[i];
                    let mode = match (rw, rng.gen_bool(0.5)) {
                        (true, true) => " read",
                        (true, false) => " write",
                        _ => "",
                    };
                    body.push(format!("acquire {name}{mode}"));
                }
                1 if !held.is_empty() => body.push(release(&mut held, rng)),
                _ => body.push(access(rng)),
            }
        }
        out.push_str(&format!("thread w{w} {{\n"));
        for s in &body {
            out.push_str(&format!("  {s}\n"));
        }
        out.push_str("}\n");
    }
    if rng.gen_bool(0.25) {
        let mut order: Vec<usize> = (0..workers).collect();
        order.shuffle(rng);
        let mut body = Vec::new();
        let mut next = 0;
        let mut running: Vec<usize> = Vec::new();
        while next < order.len() || !running.is_empty() {
            if next < order.len() && (running.is_empty() || rng.gen_bool(0.5)) {
                body.push(format!("spawn w{}", order[next]));
                running.push(order[next]);
                next += 1;
            } else {
                let w = running.remove(rng.gen_range(0..running.len()));
                body.push(format!("join w{w}"));
            }
        }
        for _ in 0..rng.gen_range(0..=2) {
            let at = rng.gen_range(0..=body.len());
            body.insert(at, access(rng));
        }
        out.push_str("thread main {\n");
        for s in &body {
            out.push_str(&format!("  {s}\n"));
        }
        out.push_str("}\n");
    }
    out
}

/// Generates `cfg.count` programs from `cfg.seed`, runs the detector on up
/// to `cfg.max_traces` interleavings of each and checks every DataRace
/// against the oracle's racy granules.
pub fn run_fuzz(cfg: &FuzzConfig) -> Result<FuzzOutcome, FuzzError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut summary = FuzzSummary::default();
    let mut counterexamples = Vec::new();
    for index in 0..cfg.count {
        let text = generate_program(&mut rng, cfg);
        let program = parse_program(&text).map_err(|source| FuzzError::Generated { index, text: text.clone(), source })?;
        let traces = enumerate_interleavings(&program, cfg.max_traces).map_err(|source| FuzzError::Schedule { index, source })?;
        summary.programs += 1;
        let mut racy: Option<BTreeSet<GranuleId>> = None;
        let mut reported = false;
        for (trace_index, trace) in traces.enumerate() {
            summary.traces += 1;
            let mut d = Detector::new(&program);
            d.run(&trace).map_err(|source| FuzzError::Detector { index, source })?;
            for r in d.reports() {
                if r.kind == ReportKind::ReaderIlu {
                    summary.ilu += 1;
                    continue;
                }
                summary.reports += 1;
                if racy.is_none() {
                    racy = Some(racy_granules(&program).map_err(|source| FuzzError::Oracle { index, source })?);
                }
                let g = r.granule(&program).expect("reports name declared pointees");
                if racy.as_ref().is_some_and(|set| set.contains(&g)) {
                    summary.confirmed += 1;
                } else {
                    summary.unconfirmed += 1;
                    if !reported {
                        reported = true;
                        counterexamples.push(Counterexample {
                            program_index: index,
                            trace_index,
                            program: text.clone(),
                            trace: trace.to_records(&program),
                            report: r.clone(),
                        });
                    }
                }
            }
        }
    }
    summary.counterexamples = counterexamples.len();
    Ok(FuzzOutcome { summary, counterexamples })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generated_programs_parse_within_bounds() {
        let cfg = FuzzConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..300 {
            let text = generate_program(&mut rng, &cfg);
            let p = parse_program(&text).unwrap_or_else(|e| panic!("{e}\n{text}"));
            let workers = p.threads.iter().skip(1).count();
            assert!((2..=3).contains(&workers), "{text}");
            assert!(p.threads.iter().skip(1).all(|t| (1..=8).contains(&t.body.len())));
            assert!((1..=2).contains(&p.pointees.len()) && p.locks.len() <= 2);
        }
    }

    #[test]
    fn empty_campaign() {
        let out = run_fuzz(&FuzzConfig { count: 0, ..FuzzConfig::default() }).unwrap();
        assert_eq!(out.summary, FuzzSummary::default());
        assert!(out.counterexamples.is_empty());
    }

    #[test]
    fn small_campaign_is_deterministic_and_clean() {
        let cfg = FuzzConfig { count: 40, seed: 9, max_traces: 500, ..FuzzConfig::default() };
        let a = run_fuzz(&cfg).unwrap();
        assert_eq!(a, run_fuzz(&cfg).unwrap());
        assert_eq!(a.summary.programs, 40);
        assert!(a.summary.reports > 0);
        assert_eq!(a.summary.unconfirmed, 0, "{:#?}", a.counterexamples.first());
        let json = serde_json::to_string(&a.summary).unwrap();
        assert_eq!(serde_json::from_str::<FuzzSummary>(&json).unwrap(), a.summary);
    }
}
