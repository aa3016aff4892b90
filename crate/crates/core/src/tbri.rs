//! Tag-based race inference. Each thread tags the granules it accesses with
//! its own tag when the pointee's lockset history proves the access safe;
//! otherwise it issues an untagged dummy load, which faults exactly when
//! another thread's tag is live on the granule.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{AliasId, ThreadId};
use crate::lockset::{
    handle_lock_event, handle_lockset_check, handle_unlock_event, protected_by_common_lock, Lockset, LocksetError, LocksetState, PointeeMeta,
    ThreadLockset,
};
use crate::memory::{AccessKind, Fault, GranuleId, MemoryError, PointeeId, Tag, TaggedMemory, TaggedRef};
use crate::program::{instantiate_aliases, validate_trace, Event, EventType, Op, Program, Trace, TraceError};

/// Threads whose ids are congruent modulo this share a tag.
pub const TAG_RESIDUES: u32 = 14;

/// Tag a thread writes into references and granules: `(tid mod 14) + 1`,
/// so never 0 (untagged) nor 15 (reserved).
pub fn tag_of_thread(tid: ThreadId) -> Tag {
    Tag::new((tid.0 % TAG_RESIDUES) as u8 + 1).expect("thread tags are in 1..=14")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DetectorError {
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Lockset(#[from] LocksetError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error("thread {thread} terminates while holding locks")]
    HeldAtTermination { thread: ThreadId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ReportKind {
    DataRace,
    #[serde(rename = "ReaderILU")]
    ReaderIlu,
}

/// A classified tag-check fault.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RaceReport {
    pub kind: ReportKind,
    pub event_seq: u32,
    pub pointee: String,
    pub granule_index: u32,
    pub ref_tag: Tag,
    pub granule_tag: Tag,
    pub accessor_tid: ThreadId,
    pub prior_event_type: EventType,
    /// `tid mod 14` of the thread whose tag was on the granule. Tags cannot
    /// tell threads of the same residue apart.
    pub prior_tid_residue: u8,
}

impl RaceReport {
    pub fn granule(&self, program: &Program) -> Option<GranuleId> {
        program.pointee_by_name(&self.pointee).map(|p| GranuleId::new(p, self.granule_index))
    }
}

/// Who last wrote their tag into a granule, how, and under which locks. A
/// 4-bit tag cannot carry this, so it rides alongside.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagRecord {
    pub tid: ThreadId,
    pub kind: AccessKind,
    pub lockset: Lockset,
}

/// The accesses one thread makes through one alias between two
/// synchronization boundaries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub thread: ThreadId,
    pub alias: AliasId,
    pub pointee: PointeeId,
    pub granule: GranuleId,
    pub state: LocksetState,
    pub lock_free: bool,
    pub updated_refs: BTreeSet<(AliasId, ThreadId)>,
}

type SegmentKey = (ThreadId, AliasId);

/// All detector state for one trace.
#[derive(Debug, Clone)]
pub struct Detector<'p> {
    program: &'p Program,
    memory: TaggedMemory,
    refs: BTreeMap<(AliasId, ThreadId), TaggedRef>,
    locksets: Vec<ThreadLockset>,
    metas: Vec<PointeeMeta>,
    segments: BTreeMap<SegmentKey, Segment>,
    exclusive_owner: BTreeMap<GranuleId, ThreadId>,
    records: BTreeMap<GranuleId, TagRecord>,
    parent: Vec<Option<ThreadId>>,
    reports: Vec<RaceReport>,
}

fn share_lock_id(a: &Lockset, b: &Lockset) -> bool {
    a.keys().any(|l| b.contains_key(l))
}

impl<'p> Detector<'p> {
    pub fn new(program: &'p Program) -> Self {
        Detector {
            program,
            memory: TaggedMemory::new(),
            refs: instantiate_aliases(program),
            locksets: vec![ThreadLockset::new(); program.thread_count()],
            metas: vec![PointeeMeta::new(); program.pointees.len()],
            segments: BTreeMap::new(),
            exclusive_owner: BTreeMap::new(),
            records: BTreeMap::new(),
            parent: vec![None; program.thread_count()],
            reports: Vec::new(),
        }
    }

    pub fn memory(&self) -> &TaggedMemory {
        &self.memory
    }

    pub fn tagged_ref(&self, alias: AliasId, tid: ThreadId) -> Option<&TaggedRef> {
        self.refs.get(&(alias, tid))
    }

    pub fn refs(&self) -> impl Iterator<Item = &TaggedRef> {
        self.refs.values()
    }

    pub fn meta(&self, p: PointeeId) -> &PointeeMeta {
        &self.metas[p.0 as usize]
    }

    pub fn lockset(&self, tid: ThreadId) -> &ThreadLockset {
        &self.locksets[tid.index()]
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.values()
    }

    pub fn exclusive_owner(&self, g: GranuleId) -> Option<ThreadId> {
        self.exclusive_owner.get(&g).copied()
    }

    pub fn record(&self, g: GranuleId) -> Option<&TagRecord> {
        self.records.get(&g)
    }

    pub fn parent(&self, tid: ThreadId) -> Option<ThreadId> {
        self.parent[tid.index()]
    }

    pub fn reports(&self) -> &[RaceReport] {
        &self.reports
    }

    pub fn into_reports(self) -> Vec<RaceReport> {
        self.reports
    }

    /// Processes every event in order without validating the trace first.
    pub fn run(&mut self, trace: &Trace) -> Result<(), DetectorError> {
        for e in &trace.events {
            self.step(e)?;
        }
        Ok(())
    }

    /// Processes one event. A fault raised by this event is classified and
    /// returned before the next event is looked at.
    pub fn step(&mut self, e: &Event) -> Result<Option<RaceReport>, DetectorError> {
        let t = e.tid;
        match e.op {
            Op::Alloc(p) => {
                self.memory.alloc(p, self.program.pointee(p).size)?;
                self.metas[p.0 as usize] = PointeeMeta::new();
            }
            Op::Free(p) => {
                self.close_segments_of(t);
                self.memory.free(p)?;
                self.records.retain(|g, _| g.pointee != p);
                self.exclusive_owner.retain(|g, _| g.pointee != p);
            }
            Op::Acquire { lock, mode } => {
                self.close_segments_of(t);
                self.locksets[t.index()] = handle_lock_event(&self.locksets[t.index()], lock, mode)?;
            }
            Op::Release { lock, .. } => {
                self.locksets[t.index()] = handle_unlock_event(&self.locksets[t.index()], lock)?;
                self.close_segments_of(t);
            }
            Op::Spawn(child) => {
                self.close_segments_of(t);
                self.parent[child.index()] = Some(t);
                self.release_granules_of(t)?;
            }
            Op::Join(child) => {
                self.close_segments_of(t);
                self.on_thread_terminate(child, t)?;
            }
            Op::Access { kind, pointee, offset, alias } => {
                let report = self.handle_read_write_segment(e, kind, GranuleId::at_offset(pointee, offset), alias)?;
                if let Some(r) = &report {
                    self.reports.push(r.clone());
                }
                return Ok(report);
            }
        }
        Ok(None)
    }

    fn close_segment(&mut self, key: SegmentKey) {
        if let Some(seg) = self.segments.remove(&key) {
            for r in &seg.updated_refs {
                if let Some(r) = self.refs.get_mut(r) {
                    update_tag_pointer(r, Tag::UNTAGGED);
                }
            }
        }
    }

    fn close_segments_of(&mut self, t: ThreadId) {
        let keys: Vec<_> = self.segments.range((t, AliasId(0))..=(t, AliasId(u32::MAX))).map(|(k, _)| *k).collect();
        for k in keys {
            self.close_segment(k);
        }
    }

    // Everything `t` did before spawning is ordered before the child, so its
    // tags must not fault the child.
    fn release_granules_of(&mut self, t: ThreadId) -> Result<(), DetectorError> {
        let mine: Vec<GranuleId> = self.records.iter().filter(|(_, r)| r.tid == t).map(|(g, _)| *g).collect();
        for g in mine {
            self.memory.set_granule_tag(g, Tag::UNTAGGED)?;
            self.records.remove(&g);
            if self.exclusive_owner.get(&g) == Some(&t) {
                self.exclusive_owner.remove(&g);
            }
        }
        Ok(())
    }

    /// Closes the finished thread's segments and hands its granules to
    /// `heir`, the thread that joined it: granule tags become the heir's tag.
    pub fn on_thread_terminate(&mut self, tid: ThreadId, heir: ThreadId) -> Result<(), DetectorError> {
        if !self.locksets[tid.index()].is_empty() {
            return Err(DetectorError::HeldAtTermination { thread: tid });
        }
        self.close_segments_of(tid);
        let heir_tag = tag_of_thread(heir);
        for (g, record) in self.records.iter_mut() {
            if record.tid == tid {
                self.memory.set_granule_tag(*g, heir_tag)?;
                record.tid = heir;
            }
        }
        for owner in self.exclusive_owner.values_mut() {
            if *owner == tid {
                *owner = heir;
            }
        }
        Ok(())
    }

    fn handle_read_write_segment(
        &mut self,
        e: &Event,
        kind: AccessKind,
        g: GranuleId,
        alias: AliasId,
    ) -> Result<Option<RaceReport>, DetectorError> {
        let t = e.tid;
        let key = (t, alias);
        let stale: Vec<SegmentKey> = self
            .segments
            .range((t, AliasId(0))..=(t, AliasId(u32::MAX)))
            .filter(|(k, s)| s.pointee != g.pointee && (s.lock_free || **k == key))
            .map(|(k, _)| *k)
            .collect();
        for k in stale {
            self.close_segment(k);
        }
        match self.segments.get(&key) {
            Some(seg) if seg.granule == g => {
                let r = self.refs[&(alias, t)];
                match self.memory.access(&r, kind)? {
                    Ok(()) => Ok(None),
                    Err(fault) => {
                        let report = self.classify_fault(&fault, e);
                        self.tag_access(e, key, g, kind, false)?;
                        Ok(report)
                    }
                }
            }
            Some(_) => self.on_granule_retarget(e, key, g, kind),
            None => {
                let ls = self.locksets[t.index()].held().clone();
                let state = handle_lockset_check(&ls, &mut self.metas[g.pointee.0 as usize]);
                self.segments.insert(
                    key,
                    Segment {
                        thread: t,
                        alias,
                        pointee: g.pointee,
                        granule: g,
                        state,
                        lock_free: ls.is_empty(),
                        updated_refs: BTreeSet::new(),
                    },
                );
                self.tag_access(e, key, g, kind, true)
            }
        }
    }

    /// The segment's reference moved to another granule of the same pointee:
    /// repeat the tagging (and the dummy load, if inconclusive) there without
    /// checking the lockset again.
    fn on_granule_retarget(
        &mut self,
        e: &Event,
        key: SegmentKey,
        g: GranuleId,
        kind: AccessKind,
    ) -> Result<Option<RaceReport>, DetectorError> {
        self.tag_access(e, key, g, kind, true)
    }

    fn tag_access(
        &mut self,
        e: &Event,
        key: SegmentKey,
        g: GranuleId,
        kind: AccessKind,
        dummy: bool,
    ) -> Result<Option<RaceReport>, DetectorError> {
        let (t, alias) = key;
        let state = self.segments[&key].state;
        let mut report = None;
        if dummy && state == LocksetState::Inconclusive {
            if let Err(fault) = dummy_load(&self.memory, &self.refs[&(alias, t)], g, kind)? {
                report = self.classify_fault(&fault, e);
            }
        }
        let r = self.refs.get_mut(&(alias, t)).expect("every used alias has a reference");
        r.target = g;
        if state == LocksetState::Shared && !kind.is_write() {
            update_tag_pointer(r, self.memory.granule_tag(g)?);
        } else {
            update_tag_pointer(r, tag_of_thread(t));
            update_tag_pointee(&mut self.memory, r)?;
            let lockset = self.locksets[t.index()].held().clone();
            self.records.insert(g, TagRecord { tid: t, kind, lockset });
        }
        match state {
            LocksetState::Exclusive => {
                self.exclusive_owner.insert(g, t);
            }
            LocksetState::Shared => {
                self.exclusive_owner.remove(&g);
            }
            LocksetState::Inconclusive => {}
        }
        let seg = self.segments.get_mut(&key).expect("segment is open");
        seg.granule = g;
        seg.updated_refs.insert((alias, t));
        Ok(report)
    }

    /// Turns a fault into a report, or `None` when the two accesses cannot
    /// race: the granule carries the accessor's own tag, or both sides held a
    /// common lock with at least one of them exclusive. Two reads under
    /// disjoint locks are inconsistent lock usage rather than a race.
    pub fn classify_fault(&self, fault: &Fault, e: &Event) -> Option<RaceReport> {
        if fault.granule_tag.is_untagged() || fault.granule_tag == tag_of_thread(e.tid) {
            return None;
        }
        let prior = self.records.get(&fault.granule)?;
        let mine = self.locksets[e.tid.index()].held();
        let kind = if !fault.kind.is_write() && !prior.kind.is_write() {
            if share_lock_id(mine, &prior.lockset) {
                return None;
            }
            ReportKind::ReaderIlu
        } else if protected_by_common_lock(mine, &prior.lockset) {
            return None;
        } else {
            ReportKind::DataRace
        };
        Some(RaceReport {
            kind,
            event_seq: e.seq,
            pointee: self.program.pointee(fault.granule.pointee).name.clone(),
            granule_index: fault.granule.index,
            ref_tag: fault.ref_tag,
            granule_tag: fault.granule_tag,
            accessor_tid: e.tid,
            prior_event_type: if prior.kind.is_write() { EventType::Wr } else { EventType::Rd },
            prior_tid_residue: fault.granule_tag.value() - 1,
        })
    }
}

/// Access through an untagged copy of `r`: succeeds only on an untagged
/// granule.
pub fn dummy_load(
    memory: &TaggedMemory,
    r: &TaggedRef,
    g: GranuleId,
    kind: AccessKind,
) -> Result<Result<(), Fault>, MemoryError> {
    let probe = TaggedRef { tag: Tag::UNTAGGED, target: g, ..*r };
    memory.access(&probe, kind)
}

/// Sets the reference's tag. [`Tag`] cannot hold the reserved value, so
/// this cannot fail.
pub fn update_tag_pointer(r: &mut TaggedRef, t: Tag) {
    r.tag = t;
}

/// Copies the reference's tag onto its target granule.
pub fn update_tag_pointee(memory: &mut TaggedMemory, r: &TaggedRef) -> Result<(), MemoryError> {
    memory.set_granule_tag(r.target, r.tag)
}

/// Validates `trace` against `program` and runs the detector over it.
pub fn run_detector(trace: &Trace, program: &Program) -> Result<Vec<RaceReport>, DetectorError> {
    validate_trace(program, trace)?;
    let mut d = Detector::new(program);
    d.run(trace)?;
    Ok(d.into_reports())
}
