use std::cell::RefCell;
use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Event, LockMode, Op, Program, ScheduleError, Stmt, Trace, MAX_EVENTS};
use crate::ids::{LockId, ThreadId};
use crate::memory::PointeeId;

// Reachable-state budget for the up-front deadlock-freedom check. Larger
// programs fall back to per-step completion checks.
const STATE_BUDGET: usize = 200_000;

/// Program counters of every thread. Locks held, spawned and finished threads
/// are all functions of this vector because thread bodies are straight-line.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ScheduleState {
    pcs: Vec<u16>,
}

impl ScheduleState {
    pub fn initial(model: &Model<'_>) -> Self {
        ScheduleState { pcs: vec![0; model.thread_count()] }
    }

    pub fn pc(&self, t: ThreadId) -> usize {
        self.pcs[t.index()] as usize
    }

    pub fn step(&mut self, t: ThreadId) {
        self.pcs[t.index()] += 1;
    }

    fn unstep(&mut self, t: ThreadId) {
        self.pcs[t.index()] -= 1;
    }
}

/// The per-thread event lists of a program plus the constraints that decide
/// which thread may run next.
#[derive(Debug)]
pub struct Model<'p> {
    program: &'p Program,
    ops: Vec<Vec<Op>>,
    // held[t][pc]: locks thread t holds before executing ops[t][pc]
    held: Vec<Vec<Vec<(LockId, LockMode)>>>,
    spawn_point: Vec<Option<(ThreadId, usize)>>,
    implicit_main: bool,
    can_finish: RefCell<HashMap<ScheduleState, bool>>,
    deadlock_free: RefCell<Option<bool>>,
}

impl<'p> Model<'p> {
    pub fn new(program: &'p Program) -> Self {
        let n = program.thread_count();
        let pointees = (0..program.pointees.len() as u32).map(PointeeId);
        let mut ops: Vec<Vec<Op>> = Vec::with_capacity(n);
        let mut held_all = Vec::with_capacity(n);
        let mut joined: HashSet<ThreadId> = HashSet::new();
        for thread in &program.threads {
            for s in &thread.body {
                if let Stmt::Join(c) = s {
                    joined.insert(*c);
                }
            }
        }
        for (t, thread) in program.threads.iter().enumerate() {
            let mut list = Vec::new();
            if t == 0 {
                list.extend(pointees.clone().map(Op::Alloc));
                if !program.explicit_main {
                    list.extend((1..n as u32).map(|c| Op::Spawn(ThreadId(c))));
                }
            }
            let mut modes: HashMap<LockId, LockMode> = HashMap::new();
            for s in &thread.body {
                list.push(match *s {
                    Stmt::Acquire { lock, mode } => {
                        modes.insert(lock, mode);
                        Op::Acquire { lock, mode }
                    }
                    Stmt::Release { lock } => Op::Release { lock, mode: modes[&lock] },
                    Stmt::Access { kind, pointee, offset, alias } => Op::Access { kind, pointee, offset, alias },
                    Stmt::Spawn(c) => Op::Spawn(c),
                    Stmt::Join(c) => Op::Join(c),
                });
            }
            if t == 0 {
                list.extend((1..n as u32).map(ThreadId).filter(|c| !joined.contains(c)).map(Op::Join));
                list.extend(pointees.clone().map(Op::Free));
            }
            let mut held = Vec::with_capacity(list.len() + 1);
            let mut current: Vec<(LockId, LockMode)> = Vec::new();
            for op in &list {
                held.push(current.clone());
                match *op {
                    Op::Acquire { lock, mode } => current.push((lock, mode)),
                    Op::Release { lock, .. } => current.retain(|(l, _)| *l != lock),
                    _ => {}
                }
            }
            held.push(current);
            ops.push(list);
            held_all.push(held);
        }
        let mut spawn_point = vec![None; n];
        for (t, list) in ops.iter().enumerate() {
            for (pc, op) in list.iter().enumerate() {
                if let Op::Spawn(c) = op {
                    spawn_point[c.index()] = Some((ThreadId(t as u32), pc));
                }
            }
        }
        Model {
            program,
            ops,
            held: held_all,
            spawn_point,
            implicit_main: !program.explicit_main,
            can_finish: RefCell::new(HashMap::new()),
            deadlock_free: RefCell::new(None),
        }
    }

    pub fn program(&self) -> &'p Program {
        self.program
    }

    pub fn thread_count(&self) -> usize {
        self.ops.len()
    }

    pub fn ops(&self, t: ThreadId) -> &[Op] {
        &self.ops[t.index()]
    }

    pub fn total_events(&self) -> usize {
        self.ops.iter().map(Vec::len).sum()
    }

    /// Locks held by `t` right before it executes the op at `pc`.
    pub fn held_at(&self, t: ThreadId, pc: usize) -> &[(LockId, LockMode)] {
        &self.held[t.index()][pc]
    }

    pub fn next_op(&self, state: &ScheduleState, t: ThreadId) -> Option<Op> {
        self.ops[t.index()].get(state.pc(t)).copied()
    }

    pub fn started(&self, state: &ScheduleState, t: ThreadId) -> bool {
        match self.spawn_point[t.index()] {
            None => t == ThreadId::MAIN,
            Some((parent, pc)) => state.pc(parent) > pc,
        }
    }

    pub fn finished(&self, state: &ScheduleState, t: ThreadId) -> bool {
        state.pc(t) >= self.ops[t.index()].len()
    }

    pub fn all_finished(&self, state: &ScheduleState) -> bool {
        self.threads().all(|t| self.finished(state, t))
    }

    fn threads(&self) -> impl Iterator<Item = ThreadId> {
        (0..self.ops.len() as u32).map(ThreadId)
    }

    /// Whether `t` may execute its next op in `state`.
    pub fn enabled(&self, state: &ScheduleState, t: ThreadId) -> bool {
        let Some(op) = self.next_op(state, t) else { return false };
        if !self.started(state, t) {
            return false;
        }
        match op {
            Op::Acquire { lock, mode } => self.threads().filter(|&u| u != t).all(|u| {
                !self.started(state, u)
                    || self.held_at(u, state.pc(u)).iter().all(|&(l, m)| l != lock || !mode.conflicts_with(m))
            }),
            Op::Join(c) => {
                self.finished(state, c)
                    && !(self.implicit_main
                        && t == ThreadId::MAIN
                        && self.threads().skip(1).any(|u| !self.finished(state, u)))
            }
            _ => true,
        }
    }

    /// Threads that may run next, ascending. The implicit main thread's
    /// plumbing is never a scheduling choice: when it can run, it runs.
    pub fn runnable(&self, state: &ScheduleState) -> Vec<ThreadId> {
        if self.implicit_main && self.enabled(state, ThreadId::MAIN) {
            return vec![ThreadId::MAIN];
        }
        self.threads().filter(|&t| self.enabled(state, t)).collect()
    }

    /// Whether some schedule from `state` runs every thread to completion.
    pub fn can_finish(&self, state: &ScheduleState) -> bool {
        if self.all_finished(state) {
            return true;
        }
        if let Some(&known) = self.can_finish.borrow().get(state) {
            return known;
        }
        let mut next = state.clone();
        let result = self.runnable(state).into_iter().any(|t| {
            next.step(t);
            let ok = self.can_finish(&next);
            next.unstep(t);
            ok
        });
        self.can_finish.borrow_mut().insert(state.clone(), result);
        result
    }

    /// True when no reachable state is stuck. Answers `None` when the state
    /// space exceeds the exploration budget.
    pub fn deadlock_free(&self) -> Option<bool> {
        if let Some(known) = *self.deadlock_free.borrow() {
            return Some(known);
        }
        let init = ScheduleState::initial(self);
        let mut seen: HashSet<ScheduleState> = HashSet::from([init.clone()]);
        let mut stack = vec![init];
        let mut free = true;
        while let Some(s) = stack.pop() {
            if seen.len() > STATE_BUDGET {
                return None;
            }
            let runnable = self.runnable(&s);
            if runnable.is_empty() && !self.all_finished(&s) {
                free = false;
                break;
            }
            for t in runnable {
                let mut n = s.clone();
                n.step(t);
                if seen.insert(n.clone()) {
                    stack.push(n);
                }
            }
        }
        *self.deadlock_free.borrow_mut() = Some(free);
        Some(free)
    }

    /// Runnable threads whose step keeps the run completable.
    pub fn choices(&self, state: &ScheduleState) -> Vec<ThreadId> {
        let runnable = self.runnable(state);
        if self.deadlock_free() == Some(true) {
            return runnable;
        }
        let mut next = state.clone();
        runnable
            .into_iter()
            .filter(|&t| {
                next.step(t);
                let ok = self.can_finish(&next);
                next.unstep(t);
                ok
            })
            .collect()
    }

    pub fn event_at(&self, state: &ScheduleState, t: ThreadId, seq: u32) -> Event {
        Event { seq, tid: t, op: self.ops[t.index()][state.pc(t)] }
    }
}

struct Frame {
    choices: Vec<ThreadId>,
    next: usize,
}

/// Depth-first generator of complete interleavings in lexicographic order of
/// thread ids.
pub struct Interleavings<'p> {
    model: Model<'p>,
    state: ScheduleState,
    stack: Vec<Frame>,
    trail: Vec<ThreadId>,
    events: Vec<Event>,
    remaining: usize,
    empty_pending: bool,
}

impl<'p> Interleavings<'p> {
    pub fn model(&self) -> &Model<'p> {
        &self.model
    }

    fn push_step(&mut self, t: ThreadId) {
        let e = self.model.event_at(&self.state, t, self.events.len() as u32);
        self.events.push(e);
        self.state.step(t);
        self.trail.push(t);
    }

    fn pop_step(&mut self) {
        let t = self.trail.pop().expect("pop_step without a step");
        self.state.unstep(t);
        self.events.pop();
    }
}

impl Iterator for Interleavings<'_> {
    type Item = Trace;

    fn next(&mut self) -> Option<Trace> {
        if self.empty_pending {
            self.empty_pending = false;
            self.remaining = self.remaining.saturating_sub(1);
            return Some(Trace::default());
        }
        loop {
            if self.remaining == 0 {
                return None;
            }
            let frame = self.stack.last_mut()?;
            if frame.next < frame.choices.len() {
                let t = frame.choices[frame.next];
                frame.next += 1;
                self.push_step(t);
                if self.model.all_finished(&self.state) {
                    let trace = Trace { events: self.events.clone() };
                    self.pop_step();
                    self.remaining -= 1;
                    return Some(trace);
                }
                let choices = self.model.choices(&self.state);
                self.stack.push(Frame { choices, next: 0 });
            } else {
                self.stack.pop();
                if !self.stack.is_empty() {
                    self.pop_step();
                }
            }
        }
    }
}

fn checked_model(program: &Program) -> Result<Model<'_>, ScheduleError> {
    let model = Model::new(program);
    if !model.can_finish(&ScheduleState::initial(&model)) {
        return Err(ScheduleError::Deadlock);
    }
    Ok(model)
}

/// Every distinct complete interleaving of `program` that respects program
/// order, spawn/join and lock exclusion, up to `max_traces`.
pub fn enumerate_interleavings(program: &Program, max_traces: usize) -> Result<Interleavings<'_>, ScheduleError> {
    let events = Model::new(program).total_events();
    if events > MAX_EVENTS {
        return Err(ScheduleError::TooLarge { events, limit: MAX_EVENTS });
    }
    let model = checked_model(program)?;
    let state = ScheduleState::initial(&model);
    let empty = model.all_finished(&state);
    let stack = if empty { Vec::new() } else { vec![Frame { choices: model.choices(&state), next: 0 }] };
    Ok(Interleavings {
        model,
        state,
        stack,
        trail: Vec::new(),
        events: Vec::new(),
        remaining: max_traces,
        empty_pending: empty && max_traces > 0,
    })
}

/// One interleaving drawn by uniform choice among the runnable threads at each
/// step. The same seed always yields the same trace.
pub fn random_schedule(program: &Program, seed: u64) -> Result<Trace, ScheduleError> {
    let model = checked_model(program)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = ScheduleState::initial(&model);
    let mut events = Vec::with_capacity(model.total_events());
    while !model.all_finished(&state) {
        let choices = model.choices(&state);
        let t = choices[rng.gen_range(0..choices.len())];
        events.push(model.event_at(&state, t, events.len() as u32));
        state.step(t);
    }
    Ok(Trace { events })
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::program::{instantiate_aliases, parse_program, validate_trace};

    fn count(src: &str) -> usize {
        let p = parse_program(src).unwrap();
        enumerate_interleavings(&p, usize::MAX).unwrap().count()
    }

    #[test]
    fn counts_match_multinomials() {
        assert_eq!(count("pointee A size 16\nthread a { read A }\nthread b { read A }"), 2);
        assert_eq!(count("pointee A size 16\nthread a { read A write A }\nthread b { read A write A }"), 6);
        assert_eq!(count("pointee A size 16\nthread a { read A write A read A }"), 1);
        assert_eq!(
            count("pointee A size 16\nthread a { read A }\nthread b { read A }\nthread c { read A }\nthread d { read A }"),
            24
        );
    }

    #[test]
    fn empty_program_has_one_empty_trace() {
        let p = parse_program("").unwrap();
        let traces: Vec<_> = enumerate_interleavings(&p, 10).unwrap().collect();
        assert_eq!(traces, vec![Trace::default()]);
    }

    #[test]
    fn critical_sections_do_not_interleave() {
        // Two 3-event critical sections on the same mutex can only run back to back.
        let src = "pointee A size 16\nlock m kind mutex\n\
                   thread a { acquire m write A release m }\nthread b { acquire m write A release m }";
        assert_eq!(count(src), 2);
        let src = "pointee A size 16\nlock r kind rwlock\n\
                   thread a { acquire r read read A release r }\nthread b { acquire r read read A release r }";
        assert_eq!(count(src), 20);
    }

    #[test]
    fn enumeration_yields_valid_distinct_traces() {
        let p = parse_program(
            "pointee A size 32\nlock m kind mutex\nlock r kind rwlock\n\
             thread a { acquire m write A release m read A+16 }\n\
             thread b { acquire r read read A release r acquire m read A release m }\n\
             thread c { acquire r write A+16 release r }",
        )
        .unwrap();
        let traces: Vec<_> = enumerate_interleavings(&p, usize::MAX).unwrap().collect();
        assert!(traces.len() > 10);
        let unique: HashSet<_> = traces.iter().collect();
        assert_eq!(unique.len(), traces.len());
        for t in &traces {
            validate_trace(&p, t).unwrap();
        }
    }

    #[test]
    fn max_traces_caps_output() {
        let p = parse_program("pointee A size 16\nthread a { read A read A }\nthread b { read A read A }").unwrap();
        assert_eq!(enumerate_interleavings(&p, 4).unwrap().count(), 4);
    }

    #[test]
    fn too_large_and_deadlock() {
        let body = "read A ".repeat(70);
        let p = parse_program(&format!("pointee A size 16\nthread a {{ {body} }}")).unwrap();
        assert!(matches!(enumerate_interleavings(&p, 1), Err(ScheduleError::TooLarge { .. })));
        let p = parse_program("thread a { }\nthread main { spawn a join a join a }");
        assert!(p.is_err());
        // main joins a thread that waits on a lock main holds forever
        let p = parse_program(
            "lock m kind mutex\nthread a { acquire m release m }\nthread main { acquire m spawn a join a release m }",
        )
        .unwrap();
        assert!(matches!(enumerate_interleavings(&p, 1), Err(ScheduleError::Deadlock)));
        assert!(matches!(random_schedule(&p, 0), Err(ScheduleError::Deadlock)));
    }

    #[test]
    fn partially_deadlocking_program_only_yields_completions() {
        let p = parse_program(
            "lock m kind mutex\nlock n kind mutex\n\
             thread a { acquire m acquire n release n release m }\n\
             thread b { acquire n acquire m release m release n }",
        )
        .unwrap();
        // a|b run whole, or one releases its inner lock before the other starts
        let traces: Vec<_> = enumerate_interleavings(&p, usize::MAX).unwrap().collect();
        assert_eq!(traces.len(), 4);
        for t in &traces {
            validate_trace(&p, t).unwrap();
        }
        for seed in 0..20 {
            validate_trace(&p, &random_schedule(&p, seed).unwrap()).unwrap();
        }
    }

    #[test]
    fn random_schedule_is_deterministic_and_enumerable() {
        let p = parse_program(
            "pointee A size 16\nlock m kind mutex\n\
             thread a { write A acquire m read A release m }\nthread b { acquire m write A release m read A }",
        )
        .unwrap();
        let all: HashSet<Trace> = enumerate_interleavings(&p, usize::MAX).unwrap().collect();
        for seed in 0..50 {
            let t = random_schedule(&p, seed).unwrap();
            assert_eq!(t, random_schedule(&p, seed).unwrap());
            assert!(all.contains(&t));
        }
        let single = parse_program("pointee A size 16\nthread a { write A read A }").unwrap();
        assert_eq!(random_schedule(&single, 1).unwrap(), random_schedule(&single, 99).unwrap());
    }

    #[test]
    fn explicit_spawn_join_ordering() {
        let p = parse_program(
            "pointee A size 16\nthread w { write A }\nthread r { read A }\n\
             thread main { spawn w join w spawn r join r }",
        )
        .unwrap();
        let traces: Vec<_> = enumerate_interleavings(&p, usize::MAX).unwrap().collect();
        assert_eq!(traces.len(), 1);
        let kinds: Vec<_> = traces[0].events.iter().map(|e| (e.tid.0, e.event_type())).collect();
        use crate::program::EventType::*;
        assert_eq!(
            kinds,
            [(0, Alloc), (0, Spawn), (1, Wr), (0, Join), (0, Spawn), (2, Rd), (0, Join), (0, Free)]
        );
    }

    #[test]
    fn aliases_are_private_per_thread() {
        let p = parse_program(
            "pointee A size 32\nthread a { write A via p }\nthread b { read A+16 via p }\nthread c { read A via q }",
        )
        .unwrap();
        let mut refs = instantiate_aliases(&p);
        let pa = p.alias_by_name("p").unwrap();
        assert_eq!(refs.len(), 3);
        let (a, b) = (ThreadId(1), ThreadId(2));
        assert_ne!(refs[&(pa, a)].target, refs[&(pa, b)].target);
        refs.get_mut(&(pa, a)).unwrap().tag = crate::memory::Tag::new(2).unwrap();
        assert!(refs[&(pa, b)].tag.is_untagged());
    }
}
