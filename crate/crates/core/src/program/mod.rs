//! The concurrency DSL, its parser, and the interleaving machinery.
//!
//! A [`Program`] declares pointees, locks and threads. Each thread is a
//! straight-line list of statements. Without an explicit `main` block the main
//! thread allocates every pointee, spawns all threads, joins them once every
//! child has finished and frees the pointees; those plumbing steps are not
//! scheduling choices. With a `main` block, spawn and join are ordinary
//! statements.

mod parse;
mod schedule;
mod trace;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{AliasId, LockId, ThreadId};
use crate::memory::{AccessKind, GranuleId, PointeeId, Tag, TaggedRef};

pub use parse::parse_program;
pub use schedule::{enumerate_interleavings, random_schedule, Interleavings, Model, ScheduleState};
pub use trace::{validate_trace, Event, EventRecord, EventType, Op, Trace};

/// Upper bound on the number of events a program may produce before
/// enumeration and the exact oracle refuse it.
pub const MAX_EVENTS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("{line}:{col}: syntax error: {message}")]
    Syntax { line: usize, col: usize, message: String },
    #[error("{line}:{col}: undeclared {what} `{name}`")]
    Undeclared { what: &'static str, name: String, line: usize, col: usize },
    #[error("{line}:{col}: duplicate {what} `{name}`")]
    Duplicate { what: &'static str, name: String, line: usize, col: usize },
    #[error("{line}:{col}: offset {offset} out of range for `{pointee}` of size {size}")]
    OffsetOutOfRange { pointee: String, offset: u64, size: u64, line: usize, col: usize },
    #[error("{line}:{col}: pointee `{pointee}` must have a size of at least one byte")]
    InvalidAllocation { pointee: String, line: usize, col: usize },
    #[error("{line}:{col}: thread `{thread}` releases `{lock}` which it does not hold")]
    UnmatchedRelease { thread: String, lock: String, line: usize, col: usize },
    #[error("thread `{thread}` ends while holding `{lock}`")]
    UnmatchedAcquire { thread: String, lock: String },
    #[error("{line}:{col}: thread `{thread}` acquires `{lock}` recursively")]
    RecursiveLock { thread: String, lock: String, line: usize, col: usize },
    #[error("{line}:{col}: mutex `{lock}` cannot be acquired in read mode")]
    ReaderModeOnMutex { lock: String, line: usize, col: usize },
    #[error("{line}:{col}: {message}")]
    ThreadStructure { message: String, line: usize, col: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScheduleError {
    #[error("program has {events} events, more than the limit of {limit}")]
    TooLarge { events: usize, limit: usize },
    #[error("program deadlocks: no schedule runs every thread to completion")]
    Deadlock,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("malformed trace JSON: {0}")]
    Json(String),
    #[error("event {seq}: {message}")]
    Record { seq: u32, message: String },
    #[error("event at position {index} has sequence number {seq}")]
    Sequence { index: usize, seq: u32 },
    #[error("event {seq}: {message}")]
    Mismatch { seq: u32, message: String },
    #[error("trace ends before every thread has finished")]
    Incomplete,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LockKind {
    Mutex,
    RwLock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LockMode {
    Exclusive,
    Reader,
}

impl LockMode {
    /// Two holders conflict unless both hold in reader mode.
    pub fn conflicts_with(self, other: LockMode) -> bool {
        self == LockMode::Exclusive || other == LockMode::Exclusive
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointeeDecl {
    pub name: String,
    pub size: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LockDecl {
    pub name: String,
    pub kind: LockKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stmt {
    Acquire { lock: LockId, mode: LockMode },
    Release { lock: LockId },
    Access { kind: AccessKind, pointee: PointeeId, offset: u64, alias: AliasId },
    Spawn(ThreadId),
    Join(ThreadId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThreadDecl {
    pub name: String,
    pub body: Vec<Stmt>,
}

/// A validated program. `threads` is indexed by [`ThreadId`]; entry 0 is main.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Program {
    pub pointees: Vec<PointeeDecl>,
    pub locks: Vec<LockDecl>,
    pub aliases: Vec<String>,
    pub threads: Vec<ThreadDecl>,
    /// True when the source declared a `main` block.
    pub explicit_main: bool,
}

impl Program {
    pub fn thread_count(&self) -> usize {
        self.threads.len()
    }

    pub fn pointee(&self, id: PointeeId) -> &PointeeDecl {
        &self.pointees[id.0 as usize]
    }

    pub fn lock(&self, id: LockId) -> &LockDecl {
        &self.locks[id.0 as usize]
    }

    pub fn alias_name(&self, id: AliasId) -> &str {
        &self.aliases[id.0 as usize]
    }

    pub fn thread_name(&self, id: ThreadId) -> &str {
        &self.threads[id.index()].name
    }

    pub fn pointee_by_name(&self, name: &str) -> Option<PointeeId> {
        self.pointees.iter().position(|p| p.name == name).map(|i| PointeeId(i as u32))
    }

    pub fn lock_by_name(&self, name: &str) -> Option<LockId> {
        self.locks.iter().position(|l| l.name == name).map(|i| LockId(i as u32))
    }

    pub fn alias_by_name(&self, name: &str) -> Option<AliasId> {
        self.aliases.iter().position(|a| a == name).map(|i| AliasId(i as u32))
    }

    pub fn thread_by_name(&self, name: &str) -> Option<ThreadId> {
        self.threads.iter().position(|t| t.name == name).map(|i| ThreadId(i as u32))
    }

    /// Number of granules of the padded pointee.
    pub fn granule_count(&self, id: PointeeId) -> u32 {
        crate::memory::pad_pointee(self.pointee(id).size)
            .map(|padded| (padded / crate::memory::GRANULE_SIZE) as u32)
            .unwrap_or(0)
    }

    pub fn granules(&self) -> impl Iterator<Item = GranuleId> + '_ {
        (0..self.pointees.len() as u32).flat_map(move |p| {
            let p = PointeeId(p);
            (0..self.granule_count(p)).map(move |i| GranuleId::new(p, i))
        })
    }
}

/// One thread-private reference per (alias, thread) pair that the program
/// uses, targeting the first granule the thread touches through it.
pub fn instantiate_aliases(program: &Program) -> BTreeMap<(AliasId, ThreadId), TaggedRef> {
    let mut refs = BTreeMap::new();
    for (tid, thread) in program.threads.iter().enumerate() {
        let tid = ThreadId(tid as u32);
        for stmt in &thread.body {
            if let Stmt::Access { pointee, offset, alias, .. } = *stmt {
                refs.entry((alias, tid)).or_insert(TaggedRef {
                    ref_id: alias,
                    owner: tid,
                    target: GranuleId::at_offset(pointee, offset),
                    tag: Tag::UNTAGGED,
                });
            }
        }
    }
    refs
}

impl fmt::Display for LockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LockKind::Mutex => "mutex",
            LockKind::RwLock => "rwlock",
        })
    }
}

impl fmt::Display for LockMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LockMode::Exclusive => "exclusive",
            LockMode::Reader => "reader",
        })
    }
}

/// Prints the program back in DSL syntax; `parse_program` accepts the output.
impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.pointees {
            writeln!(f, "pointee {} size {}", p.name, p.size)?;
        }
        for l in &self.locks {
            writeln!(f, "lock {} kind {}", l.name, l.kind)?;
        }
        let first = if self.explicit_main { 0 } else { 1 };
        for thread in &self.threads[first..] {
            writeln!(f, "thread {} {{", thread.name)?;
            for stmt in &thread.body {
                f.write_str("  ")?;
                match *stmt {
                    Stmt::Acquire { lock, mode } => {
                        let l = self.lock(lock);
                        write!(f, "acquire {}", l.name)?;
                        if l.kind == LockKind::RwLock {
                            f.write_str(if mode == LockMode::Reader { " read" } else { " write" })?;
                        }
                    }
                    Stmt::Release { lock } => write!(f, "release {}", self.lock(lock).name)?,
                    Stmt::Access { kind, pointee, offset, alias } => {
                        let p = &self.pointee(pointee).name;
                        let verb = if kind.is_write() { "write" } else { "read" };
                        write!(f, "{verb} {p}")?;
                        if offset != 0 {
                            write!(f, "+{offset}")?;
                        }
                        let alias = self.alias_name(alias);
                        if alias != p {
                            write!(f, " via {alias}")?;
                        }
                    }
                    Stmt::Spawn(t) => write!(f, "spawn {}", self.thread_name(t))?,
                    Stmt::Join(t) => write!(f, "join {}", self.thread_name(t))?,
                }
                writeln!(f)?;
            }
            writeln!(f, "}}")?;
        }
        Ok(())
    }
}
