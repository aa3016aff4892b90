//! Per-thread locksets, the per-pointee minimal lockset with trimming, and
//! the tri-state lockset check that gates tagging.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::LockId;
use crate::program::LockMode;

/// A set of held locks, each with the mode it was acquired in.
pub type Lockset = BTreeMap<LockId, LockMode>;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LocksetError {
    #[error("lock {0} acquired recursively")]
    RecursiveLock(LockId),
    #[error("lock {0} released without being held")]
    UnmatchedRelease(LockId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LocksetState {
    Inconclusive,
    Exclusive,
    Shared,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ThreadLockset {
    held: Lockset,
}

impl ThreadLockset {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn held(&self) -> &Lockset {
        &self.held
    }

    pub fn mode_of(&self, lock: LockId) -> Option<LockMode> {
        self.held.get(&lock).copied()
    }

    pub fn is_empty(&self) -> bool {
        self.held.is_empty()
    }
}

pub fn handle_lock_event(ls: &ThreadLockset, lock: LockId, mode: LockMode) -> Result<ThreadLockset, LocksetError> {
    if ls.held.contains_key(&lock) {
        return Err(LocksetError::RecursiveLock(lock));
    }
    let mut next = ls.clone();
    next.held.insert(lock, mode);
    Ok(next)
}

/// Drops `lock` from the set. Untagging the closing segment's references is
/// the detector's half of the unlock.
pub fn handle_unlock_event(ls: &ThreadLockset, lock: LockId) -> Result<ThreadLockset, LocksetError> {
    let mut next = ls.clone();
    next.held.remove(&lock).ok_or(LocksetError::UnmatchedRelease(lock))?;
    Ok(next)
}

/// Locks common to both sets by id. A lock held in reader mode on either
/// side survives in reader mode.
pub fn intersect(a: &Lockset, b: &Lockset) -> Lockset {
    a.iter()
        .filter_map(|(l, &ma)| {
            b.get(l).map(|&mb| {
                let mode = if ma == LockMode::Reader || mb == LockMode::Reader { LockMode::Reader } else { LockMode::Exclusive };
                (*l, mode)
            })
        })
        .collect()
}

/// Two locksets protect a pair of accesses when they share a lock that at
/// least one side holds exclusively; two readers of one rwlock do not.
pub fn protected_by_common_lock(a: &Lockset, b: &Lockset) -> bool {
    a.iter()
        .any(|(l, &ma)| b.get(l).is_some_and(|&mb| ma == LockMode::Exclusive || mb == LockMode::Exclusive))
}

pub fn has_rshared_locks(ls: &Lockset) -> bool {
    ls.values().any(|&m| m == LockMode::Reader)
}

/// Lockset history of one pointee.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PointeeMeta {
    ls: Lockset,
    spa: bool,
}

/// Stands for exclusive access to a [`PointeeMeta`] while it is updated. The
/// detector replays a totally ordered trace on one thread, so taking it never
/// waits.
pub struct UpdateToken<'a> {
    meta: &'a mut PointeeMeta,
}

impl PointeeMeta {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn ls(&self) -> &Lockset {
        &self.ls
    }

    /// Shared-prior-access flag.
    pub fn spa(&self) -> bool {
        self.spa
    }

    pub fn begin_update(&mut self) -> UpdateToken<'_> {
        UpdateToken { meta: self }
    }
}

/// Trims the pointee's lockset with the accessor's. The first locked access
/// seeds it; a lock-free access against an empty history sets the flag.
pub fn update_lockset_pointee(ls_tau: &Lockset, token: &mut UpdateToken<'_>) {
    let meta = &mut *token.meta;
    if meta.ls.is_empty() {
        if ls_tau.is_empty() {
            meta.spa = true;
        } else {
            meta.ls = ls_tau.clone();
        }
    } else {
        meta.ls = intersect(&meta.ls, ls_tau);
    }
}

pub fn handle_lockset_check(ls_tau: &Lockset, meta: &mut PointeeMeta) -> LocksetState {
    if meta.ls.is_empty() && meta.spa {
        return LocksetState::Inconclusive;
    }
    if meta.ls.is_empty() || !intersect(ls_tau, &meta.ls).is_empty() {
        update_lockset_pointee(ls_tau, &mut meta.begin_update());
        if has_rshared_locks(&intersect(ls_tau, &meta.ls)) {
            LocksetState::Shared
        } else {
            LocksetState::Exclusive
        }
    } else {
        LocksetState::Inconclusive
    }
}
