//! Exact race oracle: vector-clock happens-before plus locksets over the full
//! access history of a trace, and whole-program ground truth.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{LockId, ThreadId};
use crate::lockset::{protected_by_common_lock, Lockset};
use crate::memory::{AccessKind, GranuleId};
use crate::program::{LockMode, Model, Op, Program, ScheduleState, Trace, MAX_EVENTS};

/// Access records kept per granule in bounded mode.
pub const SHADOW_SLOTS: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum OracleError {
    #[error("{events} events exceed the oracle limit of {limit}")]
    TooLarge { events: usize, limit: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct VectorClock(pub Vec<u32>);

impl VectorClock {
    pub fn new(threads: usize) -> Self {
        VectorClock(vec![0; threads])
    }

    pub fn get(&self, t: ThreadId) -> u32 {
        self.0.get(t.index()).copied().unwrap_or(0)
    }

    pub fn tick(&mut self, t: ThreadId) {
        self.0[t.index()] += 1;
    }

    /// Component-wise `<=`; missing components count as zero.
    pub fn leq(&self, other: &VectorClock) -> bool {
        self.0.iter().enumerate().all(|(i, &v)| v <= other.0.get(i).copied().unwrap_or(0))
    }

    pub fn join_in(&mut self, other: &VectorClock) {
        if self.0.len() < other.0.len() {
            self.0.resize(other.0.len(), 0);
        }
        for (a, &b) in self.0.iter_mut().zip(&other.0) {
            *a = (*a).max(b);
        }
    }
}

/// Component-wise maximum.
pub fn vc_join(a: &VectorClock, b: &VectorClock) -> VectorClock {
    let mut out = a.clone();
    out.join_in(b);
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccessRecord {
    pub kind: AccessKind,
    pub tid: ThreadId,
    pub granule: GranuleId,
    pub clock: VectorClock,
    pub lockset: Lockset,
    pub seq: u32,
}

/// `x` happens before `y` (`x` earlier in the trace).
pub fn hb_precedes(x: &AccessRecord, y: &AccessRecord) -> bool {
    x.tid == y.tid || x.clock.leq(&y.clock)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RacyPair {
    pub first_seq: u32,
    pub second_seq: u32,
    pub first_tid: ThreadId,
    pub second_tid: ThreadId,
    pub granule: GranuleId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum History {
    /// Every access is kept.
    Exact,
    /// At most this many accesses per granule, oldest evicted first.
    Bounded(usize),
}

/// Replays `trace`, folding release/acquire, spawn and join edges into
/// per-thread vector clocks, and returns every memory access with its clock
/// and lockset.
pub fn access_records(trace: &Trace) -> Vec<AccessRecord> {
    let threads = trace.events.iter().map(|e| e.tid.index() + 1).max().unwrap_or(0);
    let threads = trace
        .events
        .iter()
        .filter_map(|e| match e.op {
            Op::Spawn(c) | Op::Join(c) => Some(c.index() + 1),
            _ => None,
        })
        .fold(threads, usize::max);
    let mut clocks: Vec<VectorClock> = (0..threads)
        .map(|t| {
            let mut c = VectorClock::new(threads);
            c.0[t] = 1;
            c
        })
        .collect();
    let mut held: Vec<Lockset> = vec![Lockset::new(); threads];
    // Releases in any mode order later exclusive acquires; only exclusive
    // releases order later reader acquires.
    let mut released_any: BTreeMap<LockId, VectorClock> = BTreeMap::new();
    let mut released_excl: BTreeMap<LockId, VectorClock> = BTreeMap::new();
    let mut out = Vec::new();
    for e in &trace.events {
        let t = e.tid.index();
        match e.op {
            Op::Acquire { lock, mode } => {
                let source = if mode == LockMode::Exclusive { &released_any } else { &released_excl };
                if let Some(c) = source.get(&lock) {
                    clocks[t].join_in(c);
                }
                held[t].insert(lock, mode);
            }
            Op::Release { lock, mode } => {
                released_any.entry(lock).or_default().join_in(&clocks[t]);
                if mode == LockMode::Exclusive {
                    released_excl.entry(lock).or_default().join_in(&clocks[t]);
                }
                held[t].remove(&lock);
            }
            Op::Spawn(c) => {
                let parent = clocks[t].clone();
                clocks[c.index()].join_in(&parent);
            }
            Op::Join(c) => {
                let child = clocks[c.index()].clone();
                clocks[t].join_in(&child);
            }
            Op::Access { kind, .. } => out.push(AccessRecord {
                kind,
                tid: e.tid,
                granule: e.op.granule().expect("accesses have a granule"),
                clock: clocks[t].clone(),
                lockset: held[t].clone(),
                seq: e.seq,
            }),
            Op::Alloc(_) | Op::Free(_) => {}
        }
        clocks[t].tick(e.tid);
    }
    out
}

fn conflicting(x: &AccessRecord, y: &AccessRecord) -> bool {
    (x.kind.is_write() || y.kind.is_write()) && !hb_precedes(x, y) && !protected_by_common_lock(&x.lockset, &y.lockset)
}

/// Every pair of accesses to one granule that are unordered by
/// happens-before, not protected by a common lock, and include a write.
pub fn exact_race_check(trace: &Trace) -> Result<Vec<RacyPair>, OracleError> {
    race_check(trace, History::Exact)
}

/// Like [`exact_race_check`], but in bounded mode an access is only compared
/// against the accesses still held in its granule's history.
pub fn race_check(trace: &Trace, history: History) -> Result<Vec<RacyPair>, OracleError> {
    if trace.len() > MAX_EVENTS {
        return Err(OracleError::TooLarge { events: trace.len(), limit: MAX_EVENTS });
    }
    let mut slots: BTreeMap<GranuleId, VecDeque<AccessRecord>> = BTreeMap::new();
    let mut pairs = Vec::new();
    for y in access_records(trace) {
        let cell = slots.entry(y.granule).or_default();
        for x in cell.iter() {
            if conflicting(x, &y) {
                pairs.push(RacyPair {
                    first_seq: x.seq,
                    second_seq: y.seq,
                    first_tid: x.tid,
                    second_tid: y.tid,
                    granule: y.granule,
                });
            }
        }
        cell.push_back(y);
        if let History::Bounded(n) = history {
            while cell.len() > n {
                cell.pop_front();
            }
        }
    }
    pairs.sort();
    Ok(pairs)
}

/// Granules on which some complete interleaving of `program` has a racy
/// pair.
///
/// Computed over reachable scheduler states instead of traces: a granule is
/// racy exactly when some reachable state that can still run to completion
/// has two threads whose next statements both access it, one of them a
/// write. Such a state yields a trace where the two accesses are adjacent
/// and therefore unordered; conversely the events ordered before either
/// access of a racy pair form a reachable state where both are next.
pub fn racy_granules(program: &Program) -> Result<BTreeSet<GranuleId>, OracleError> {
    let model = Model::new(program);
    let events = model.total_events();
    if events > MAX_EVENTS {
        return Err(OracleError::TooLarge { events, limit: MAX_EVENTS });
    }
    let mut racy = BTreeSet::new();
    let init = ScheduleState::initial(&model);
    if !model.can_finish(&init) {
        return Ok(racy);
    }
    let mut seen: HashSet<ScheduleState> = HashSet::from([init.clone()]);
    let mut stack = vec![init];
    while let Some(s) = stack.pop() {
        let runnable = model.runnable(&s);
        let poised: Vec<(AccessKind, GranuleId)> = runnable
            .iter()
            .filter_map(|&t| match model.next_op(&s, t)? {
                op @ Op::Access { kind, .. } => Some((kind, op.granule()?)),
                _ => None,
            })
            .collect();
        for (i, (ka, ga)) in poised.iter().enumerate() {
            for (kb, gb) in &poised[i + 1..] {
                if ga == gb && (ka.is_write() || kb.is_write()) {
                    racy.insert(*ga);
                }
            }
        }
        for t in runnable {
            let mut n = s.clone();
            n.step(t);
            if !seen.contains(&n) && model.can_finish(&n) {
                seen.insert(n.clone());
                stack.push(n);
            }
        }
    }
    Ok(racy)
}

/// True when some complete interleaving of `program` contains a racy pair.
pub fn ground_truth(program: &Program) -> Result<bool, OracleError> {
    Ok(!racy_granules(program)?.is_empty())
}
