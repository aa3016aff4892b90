//! Built-in labeled programs: the seven reference cases a–g and small
//! programs modeled on common race-benchmark categories.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::oracle::{ground_truth, OracleError};
use crate::program::{enumerate_interleavings, parse_program, ParseError, Program, ScheduleError};
use crate::tbri::{Detector, DetectorError, RaceReport, ReportKind};

macro_rules! embedded {
    ($($name:literal),* $(,)?) => {
        &[$(($name, include_str!(concat!("../corpus/", $name, ".dsl")))),*]
    };
}

const MANIFEST: &str = include_str!("../corpus/manifest.json");

const SOURCES: &[(&str, &str)] = embedded![
    "case_a",
    "case_b",
    "case_c",
    "case_d",
    "case_e",
    "case_f",
    "case_g",
    "ld_antidep_race",
    "ld_private_norace",
    "ld_locked_sum_norace",
    "syn_critical_norace",
    "syn_missing_lock_race",
    "syn_rwlock_norace",
    "syn_wrong_lock_race",
    "syn_nested_locks_norace",
    "eb_join_barrier_norace",
    "eb_missing_barrier_race",
    "eb_read_after_join_norace",
    "sh_disjoint_granules_norace",
    "sh_same_granule_race",
    "ts_private_norace",
    "ts_shared_alias_race",
    "ts_readonly_ilu",
];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("unknown case `{0}`")]
    UnknownCase(String),
    #[error("no source for case `{0}`")]
    MissingSource(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("case `{name}`: {source}")]
    Parse { name: String, source: ParseError },
    #[error("case `{name}`: {source}")]
    Schedule { name: String, source: ScheduleError },
    #[error("case `{name}`: {source}")]
    Detector { name: String, source: DetectorError },
    #[error("case `{name}`: {source}")]
    Oracle { name: String, source: OracleError },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Category {
    Ld,
    Syn,
    Eb,
    Sh,
    Ts,
    CaseA,
    CaseB,
    CaseC,
    CaseD,
    CaseE,
    CaseF,
    CaseG,
}

impl Category {
    /// One of the seven reference cases, judged on every interleaving.
    pub fn is_reference_case(self) -> bool {
        !matches!(self, Category::Ld | Category::Syn | Category::Eb | Category::Sh | Category::Ts)
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("categories serialize");
        f.write_str(s.as_str().expect("categories serialize to strings"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expected {
    pub race: bool,
    pub ilu: bool,
}

/// One line of the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub category: Category,
    pub race: bool,
    pub ilu: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusCase {
    pub name: String,
    pub category: Category,
    pub source: String,
    pub expected: Expected,
    pub notes: String,
}

impl CorpusCase {
    pub fn program(&self) -> Result<Program, CorpusError> {
        parse_program(&self.source).map_err(|source| CorpusError::Parse { name: self.name.clone(), source })
    }
}

/// Leading `#` comment lines, joined.
fn notes_of(source: &str) -> String {
    source
        .lines()
        .map_while(|l| l.trim_start().strip_prefix('#'))
        .map(str::trim)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>, CorpusError> {
    serde_json::from_str(text).map_err(|e| CorpusError::Manifest(e.to_string()))
}

#[derive(Debug, Clone)]
pub struct Corpus {
    cases: Vec<CorpusCase>,
}

impl Corpus {
    pub fn builtin() -> Self {
        Self::from_manifest(MANIFEST, |name| {
            SOURCES.iter().find(|(n, _)| *n == name).map(|(_, s)| s.to_string())
        })
        .expect("built-in corpus is consistent")
    }

    pub fn builtin_manifest() -> &'static str {
        MANIFEST
    }

    pub fn from_manifest(
        manifest: &str,
        source_of: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, CorpusError> {
        let cases = parse_manifest(manifest)?
            .into_iter()
            .map(|e| {
                let source = source_of(&e.name).ok_or_else(|| CorpusError::MissingSource(e.name.clone()))?;
                Ok(CorpusCase {
                    notes: notes_of(&source),
                    name: e.name,
                    category: e.category,
                    source,
                    expected: Expected { race: e.race, ilu: e.ilu },
                })
            })
            .collect::<Result<_, CorpusError>>()?;
        Ok(Corpus { cases })
    }

    /// Loads a manifest, taking sources from `<dir>/<name>.dsl` when a
    /// directory is given and from the built-in corpus otherwise.
    pub fn load(manifest_path: Option<&Path>, dir: Option<&Path>) -> Result<Self, CorpusError> {
        let read = |p: &Path| {
            std::fs::read_to_string(p).map_err(|e| CorpusError::Io { path: p.display().to_string(), message: e.to_string() })
        };
        let manifest = match (manifest_path, dir) {
            (Some(m), _) => read(m)?,
            (None, Some(d)) => read(&d.join("manifest.json"))?,
            (None, None) => MANIFEST.to_string(),
        };
        match dir {
            Some(d) => Self::from_manifest(&manifest, |name| std::fs::read_to_string(d.join(format!("{name}.dsl"))).ok()),
            None => Self::from_manifest(&manifest, |name| {
                SOURCES.iter().find(|(n, _)| *n == name).map(|(_, s)| s.to_string())
            }),
        }
    }

    pub fn cases(&self) -> &[CorpusCase] {
        &self.cases
    }

    pub fn names(&self) -> Vec<String> {
        self.cases.iter().map(|c| c.name.clone()).collect()
    }

    pub fn get(&self, name: &str) -> Result<CorpusCase, CorpusError> {
        self.cases
            .iter()
            .find(|c| c.name == name)
            .cloned()
            .ok_or_else(|| CorpusError::UnknownCase(name.to_string()))
    }
}

/// Names of the built-in cases in manifest order.
pub fn list_cases() -> Vec<String> {
    Corpus::builtin().names()
}

pub fn get_case(name: &str) -> Result<CorpusCase, CorpusError> {
    Corpus::builtin().get(name)
}

/// What the detector and the oracle made of one case.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseOutcome {
    pub name: String,
    pub category: Category,
    pub expected: Expected,
    pub traces: usize,
    /// Interleavings with at least one DataRace report.
    pub race_traces: usize,
    /// Interleavings with at least one ReaderILU report.
    pub ilu_traces: usize,
    pub reports: usize,
    pub ground_truth: bool,
    pub pass: bool,
}

impl CaseOutcome {
    fn judge(&mut self) {
        let any_race = self.race_traces > 0;
        let any_ilu = self.ilu_traces > 0;
        let mut pass = any_race == self.expected.race && any_ilu == self.expected.ilu && self.ground_truth == self.expected.race;
        if self.category.is_reference_case() {
            let every = |n: usize, want: bool| if want { n == self.traces } else { n == 0 };
            pass &= every(self.race_traces, self.expected.race) && every(self.ilu_traces, self.expected.ilu);
            if !self.expected.race && !self.expected.ilu {
                pass &= self.reports == 0;
            }
        }
        self.pass = pass;
    }
}

/// Runs the detector over up to `max_traces` interleavings of `case` and
/// compares the result, and the oracle's ground truth, with its labels.
/// `on_trace` sees every trace index with its reports.
pub fn run_case(
    case: &CorpusCase,
    max_traces: usize,
    mut on_trace: impl FnMut(usize, &[RaceReport]),
) -> Result<CaseOutcome, CorpusError> {
    let program = case.program()?;
    let name = || case.name.clone();
    let traces = enumerate_interleavings(&program, max_traces).map_err(|source| CorpusError::Schedule { name: name(), source })?;
    let mut out = CaseOutcome {
        name: name(),
        category: case.category,
        expected: case.expected,
        traces: 0,
        race_traces: 0,
        ilu_traces: 0,
        reports: 0,
        ground_truth: ground_truth(&program).map_err(|source| CorpusError::Oracle { name: name(), source })?,
        pass: false,
    };
    for (i, trace) in traces.enumerate() {
        let mut d = Detector::new(&program);
        d.run(&trace).map_err(|source| CorpusError::Detector { name: name(), source })?;
        let reports = d.reports();
        out.traces += 1;
        out.reports += reports.len();
        out.race_traces += reports.iter().any(|r| r.kind == ReportKind::DataRace) as usize;
        out.ilu_traces += reports.iter().any(|r| r.kind == ReportKind::ReaderIlu) as usize;
        on_trace(i, reports);
    }
    out.judge();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;

    #[test]
    fn listing_is_complete_and_stable() {
        let names = list_cases();
        for c in ["case_a", "case_b", "case_c", "case_d", "case_e", "case_f", "case_g"] {
            assert!(names.iter().any(|n| n == c), "{c}");
        }
        let corpus = Corpus::builtin();
        let mut per: BTreeMap<Category, usize> = BTreeMap::new();
        for c in corpus.cases() {
            *per.entry(c.category).or_default() += 1;
        }
        for cat in [Category::Ld, Category::Syn, Category::Eb, Category::Sh, Category::Ts] {
            assert!(per.get(&cat).copied().unwrap_or(0) >= 2, "{cat}");
        }
        assert_eq!(names, list_cases());
    }

    #[test]
    fn get_case_labels() {
        assert_eq!(get_case("case_e").unwrap().expected, Expected { race: true, ilu: false });
        assert_eq!(get_case("case_d").unwrap().expected, Expected { race: false, ilu: true });
        assert_eq!(get_case("case_b").unwrap().expected, Expected { race: false, ilu: false });
        assert!(matches!(get_case("nope"), Err(CorpusError::UnknownCase(_))));
        assert!(get_case("case_f").unwrap().notes.starts_with("Missing lock"));
    }

    #[test]
    fn every_source_file_is_embedded_and_listed() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus");
        let mut on_disk: Vec<String> = std::fs::read_dir(&dir)
            .unwrap()
            .filter_map(|e| e.unwrap().file_name().into_string().ok()?.strip_suffix(".dsl").map(String::from))
            .collect();
        on_disk.sort();
        let mut embedded: Vec<String> = SOURCES.iter().map(|(n, _)| n.to_string()).collect();
        embedded.sort();
        assert_eq!(on_disk, embedded);
        let mut listed = list_cases();
        listed.sort();
        assert_eq!(listed, embedded);
        let from_dir = Corpus::load(None, Some(&dir)).unwrap();
        assert_eq!(from_dir.cases(), Corpus::builtin().cases());
    }

    #[test]
    fn every_case_matches_its_labels() {
        for case in Corpus::builtin().cases() {
            let out = run_case(case, usize::MAX, |_, _| {}).unwrap();
            assert!(out.pass, "{out:?}");
        }
    }

    #[test]
    fn corrupted_label_fails() {
        let manifest = MANIFEST.replace(
            r#"{"name": "case_b", "category": "CASE_B", "race": false"#,
            r#"{"name": "case_b", "category": "CASE_B", "race": true"#,
        );
        assert_ne!(manifest, MANIFEST);
        let corpus = Corpus::from_manifest(&manifest, |n| get_case(n).ok().map(|c| c.source)).unwrap();
        let out = run_case(&corpus.get("case_b").unwrap(), usize::MAX, |_, _| {}).unwrap();
        assert!(!out.pass);
    }
}
