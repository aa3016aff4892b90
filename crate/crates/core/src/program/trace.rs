use serde::{Deserialize, Serialize};

use super::{LockMode, Model, Program, ScheduleState, TraceError};
use crate::ids::{AliasId, LockId, ThreadId};
use crate::memory::{AccessKind, GranuleId, PointeeId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventType {
    #[serde(rename = "RD")]
    Rd,
    #[serde(rename = "WR")]
    Wr,
    #[serde(rename = "LA")]
    La,
    #[serde(rename = "LR")]
    Lr,
    #[serde(rename = "SPAWN")]
    Spawn,
    #[serde(rename = "JOIN")]
    Join,
    #[serde(rename = "ALLOC")]
    Alloc,
    #[serde(rename = "FREE")]
    Free,
}

/// What an event does. The tag field of a memory event is not part of the
/// trace; the detector attaches it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Op {
    Access { kind: AccessKind, pointee: PointeeId, offset: u64, alias: AliasId },
    Acquire { lock: LockId, mode: LockMode },
    /// Carries the mode the lock was held in.
    Release { lock: LockId, mode: LockMode },
    Spawn(ThreadId),
    Join(ThreadId),
    Alloc(PointeeId),
    Free(PointeeId),
}

impl Op {
    pub fn event_type(&self) -> EventType {
        match self {
            Op::Access { kind: AccessKind::Read, .. } => EventType::Rd,
            Op::Access { kind: AccessKind::Write, .. } => EventType::Wr,
            Op::Acquire { .. } => EventType::La,
            Op::Release { .. } => EventType::Lr,
            Op::Spawn(_) => EventType::Spawn,
            Op::Join(_) => EventType::Join,
            Op::Alloc(_) => EventType::Alloc,
            Op::Free(_) => EventType::Free,
        }
    }

    pub fn granule(&self) -> Option<GranuleId> {
        match *self {
            Op::Access { pointee, offset, .. } => Some(GranuleId::at_offset(pointee, offset)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub seq: u32,
    pub tid: ThreadId,
    pub op: Op,
}

impl Event {
    pub fn event_type(&self) -> EventType {
        self.op.event_type()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Trace {
    pub events: Vec<Event>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn to_records(&self, program: &Program) -> Vec<EventRecord> {
        self.events.iter().map(|e| EventRecord::from_event(e, program)).collect()
    }

    /// Serializes to the JSON trace-file format.
    pub fn to_json(&self, program: &Program) -> String {
        serde_json::to_string(&self.to_records(program)).expect("event records always serialize")
    }

    pub fn from_json(text: &str, program: &Program) -> Result<Trace, TraceError> {
        let records: Vec<EventRecord> = serde_json::from_str(text).map_err(|e| TraceError::Json(e.to_string()))?;
        let events = records
            .iter()
            .map(|r| r.to_event(program))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Trace { events })
    }
}

/// One line of the JSON trace-file format. Field order is fixed and absent
/// fields are omitted. `child` names the thread of a SPAWN or JOIN.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub seq: u32,
    pub tid: u32,
    pub op: EventType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pointee: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alias: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lock: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<LockMode>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub child: Option<u32>,
}

impl EventRecord {
    pub fn from_event(e: &Event, program: &Program) -> Self {
        let mut r = EventRecord {
            seq: e.seq,
            tid: e.tid.0,
            op: e.event_type(),
            pointee: None,
            offset: None,
            alias: None,
            lock: None,
            mode: None,
            child: None,
        };
        match e.op {
            Op::Access { pointee, offset, alias, .. } => {
                r.pointee = Some(program.pointee(pointee).name.clone());
                r.offset = Some(offset);
                r.alias = Some(program.alias_name(alias).to_string());
            }
            Op::Acquire { lock, mode } | Op::Release { lock, mode } => {
                r.lock = Some(program.lock(lock).name.clone());
                r.mode = Some(mode);
            }
            Op::Spawn(t) | Op::Join(t) => r.child = Some(t.0),
            Op::Alloc(p) | Op::Free(p) => r.pointee = Some(program.pointee(p).name.clone()),
        }
        r
    }

    pub fn to_event(&self, program: &Program) -> Result<Event, TraceError> {
        let missing = |field: &'static str| TraceError::Record { seq: self.seq, message: format!("missing `{field}`") };
        let unknown = |what: &str, name: &str| TraceError::Record {
            seq: self.seq,
            message: format!("unknown {what} `{name}`"),
        };
        let pointee = || -> Result<PointeeId, TraceError> {
            let name = self.pointee.as_deref().ok_or_else(|| missing("pointee"))?;
            program.pointee_by_name(name).ok_or_else(|| unknown("pointee", name))
        };
        let lock = || -> Result<(LockId, LockMode), TraceError> {
            let name = self.lock.as_deref().ok_or_else(|| missing("lock"))?;
            let id = program.lock_by_name(name).ok_or_else(|| unknown("lock", name))?;
            Ok((id, self.mode.ok_or_else(|| missing("mode"))?))
        };
        let child = || -> Result<ThreadId, TraceError> {
            let c = self.child.ok_or_else(|| missing("child"))?;
            if (c as usize) < program.thread_count() {
                Ok(ThreadId(c))
            } else {
                Err(unknown("thread", &c.to_string()))
            }
        };
        let op = match self.op {
            EventType::Rd | EventType::Wr => {
                let pointee = pointee()?;
                let alias_name = self.alias.as_deref().unwrap_or(&program.pointee(pointee).name);
                let alias = program.alias_by_name(alias_name).ok_or_else(|| unknown("alias", alias_name))?;
                let kind = if self.op == EventType::Rd { AccessKind::Read } else { AccessKind::Write };
                Op::Access { kind, pointee, offset: self.offset.unwrap_or(0), alias }
            }
            EventType::La => {
                let (lock, mode) = lock()?;
                Op::Acquire { lock, mode }
            }
            EventType::Lr => {
                let (lock, mode) = lock()?;
                Op::Release { lock, mode }
            }
            EventType::Spawn => Op::Spawn(child()?),
            EventType::Join => Op::Join(child()?),
            EventType::Alloc => Op::Alloc(pointee()?),
            EventType::Free => Op::Free(pointee()?),
        };
        if self.tid as usize >= program.thread_count() {
            return Err(unknown("thread", &self.tid.to_string()));
        }
        Ok(Event { seq: self.seq, tid: ThreadId(self.tid), op })
    }
}

/// Checks that `trace` is a complete, valid interleaving of `program`: dense
/// sequence numbers, per-thread program order, spawn before a child's first
/// event, join after its last, and lock exclusion.
pub fn validate_trace(program: &Program, trace: &Trace) -> Result<(), TraceError> {
    let model = Model::new(program);
    let mut state = ScheduleState::initial(&model);
    for (i, e) in trace.events.iter().enumerate() {
        if e.seq as usize != i {
            return Err(TraceError::Sequence { index: i, seq: e.seq });
        }
        let t = e.tid.index();
        if t >= model.thread_count() {
            return Err(TraceError::Mismatch { seq: e.seq, message: format!("unknown thread {}", e.tid) });
        }
        match model.next_op(&state, e.tid) {
            Some(expected) if expected == e.op => {}
            Some(expected) => {
                return Err(TraceError::Mismatch {
                    seq: e.seq,
                    message: format!("{} expected {:?}, found {:?}", e.tid, expected, e.op),
                })
            }
            None => {
                return Err(TraceError::Mismatch { seq: e.seq, message: format!("{} has already finished", e.tid) })
            }
        }
        if !model.enabled(&state, e.tid) {
            return Err(TraceError::Mismatch {
                seq: e.seq,
                message: format!("{} is not runnable here (spawn, join or lock order violated)", e.tid),
            });
        }
        state.step(e.tid);
    }
    if !model.all_finished(&state) {
        return Err(TraceError::Incomplete);
    }
    Ok(())
}
