//! Software model of tagged memory.
//!
//! Memory is addressed symbolically: a pointee id plus a granule index. Every
//! pointee is padded to a whole number of 16-byte granules, and every granule
//! carries a 4-bit tag. References carry their own tag and an access through a
//! reference faults synchronously when the two tags differ.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ids::{AliasId, ThreadId};

/// Size of one taggable granule in bytes.
pub const GRANULE_SIZE: u64 = 16;

/// Tag value 15 is the unfiltered tag and is never produced.
pub const RESERVED_TAG: u8 = 15;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemoryError {
    #[error("invalid allocation: size must be at least one byte")]
    InvalidAllocation,
    #[error("pointee {0} is already allocated")]
    DuplicateAllocation(PointeeId),
    #[error("access to dead granule {0}")]
    DeadGranule(GranuleId),
    #[error("tag 15 is reserved")]
    ReservedTag,
    #[error("tag value {0} does not fit in 4 bits")]
    TagOutOfRange(u8),
}

/// A 4-bit memory tag. 0 means untagged; 15 is reserved and rejected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Tag(u8);

impl Tag {
    pub const UNTAGGED: Tag = Tag(0);

    pub fn new(value: u8) -> Result<Self, MemoryError> {
        match value {
            RESERVED_TAG => Err(MemoryError::ReservedTag),
            v if v > RESERVED_TAG => Err(MemoryError::TagOutOfRange(v)),
            v => Ok(Tag(v)),
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn is_untagged(self) -> bool {
        self.0 == 0
    }
}

impl TryFrom<u8> for Tag {
    type Error = MemoryError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Tag::new(value)
    }
}

impl From<Tag> for u8 {
    fn from(tag: Tag) -> u8 {
        tag.0
    }
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PointeeId(pub u32);

impl fmt::Display for PointeeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", self.0)
    }
}

/// Granule `index` of pointee `pointee`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GranuleId {
    pub pointee: PointeeId,
    pub index: u32,
}

impl GranuleId {
    pub fn new(pointee: PointeeId, index: u32) -> Self {
        GranuleId { pointee, index }
    }

    /// Granule covering byte `offset` of a pointee.
    pub fn at_offset(pointee: PointeeId, offset: u64) -> Self {
        GranuleId { pointee, index: (offset / GRANULE_SIZE) as u32 }
    }
}

impl fmt::Display for GranuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.pointee, self.index)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AccessKind {
    Read,
    Write,
}

impl AccessKind {
    pub fn is_write(self) -> bool {
        matches!(self, AccessKind::Write)
    }
}

/// A thread-private tagged alias: one exists per (alias, thread) pair so a
/// tag written by one thread never leaks into another thread's reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TaggedRef {
    pub ref_id: AliasId,
    pub owner: ThreadId,
    pub target: GranuleId,
    pub tag: Tag,
}

/// Synchronous tag-check fault.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fault {
    pub ref_tag: Tag,
    pub granule_tag: Tag,
    pub granule: GranuleId,
    pub thread: ThreadId,
    pub kind: AccessKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub declared_size: u64,
    pub padded_size: u64,
}

impl Layout {
    pub fn granules(&self) -> u32 {
        (self.padded_size / GRANULE_SIZE) as u32
    }
}

/// Least multiple of 16 that is at least `declared_size`.
pub fn pad_pointee(declared_size: u64) -> Result<u64, MemoryError> {
    if declared_size == 0 {
        return Err(MemoryError::InvalidAllocation);
    }
    Ok(declared_size.div_ceil(GRANULE_SIZE) * GRANULE_SIZE)
}

#[derive(Debug, Clone, Default)]
pub struct TaggedMemory {
    // indexed by pointee id; `None` is dead or never allocated
    pointees: Vec<Option<(Layout, Vec<Tag>)>>,
}

impl TaggedMemory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocates a pointee with every granule cleared to tag 0.
    pub fn alloc(&mut self, id: PointeeId, declared_size: u64) -> Result<Vec<GranuleId>, MemoryError> {
        if self.entry(id).is_some() {
            return Err(MemoryError::DuplicateAllocation(id));
        }
        let padded_size = pad_pointee(declared_size)?;
        let layout = Layout { declared_size, padded_size };
        let count = layout.granules();
        let slot = id.0 as usize;
        if self.pointees.len() <= slot {
            self.pointees.resize(slot + 1, None);
        }
        self.pointees[slot] = Some((layout, vec![Tag::UNTAGGED; count as usize]));
        Ok((0..count).map(|i| GranuleId::new(id, i)).collect())
    }

    pub fn free(&mut self, id: PointeeId) -> Result<(), MemoryError> {
        self.pointees
            .get_mut(id.0 as usize)
            .and_then(Option::take)
            .map(|_| ())
            .ok_or(MemoryError::DeadGranule(GranuleId::new(id, 0)))
    }

    fn entry(&self, id: PointeeId) -> Option<&(Layout, Vec<Tag>)> {
        self.pointees.get(id.0 as usize).and_then(Option::as_ref)
    }

    pub fn layout(&self, id: PointeeId) -> Option<Layout> {
        self.entry(id).map(|(layout, _)| *layout)
    }

    pub fn is_live(&self, g: GranuleId) -> bool {
        self.entry(g.pointee).is_some_and(|(_, tags)| (g.index as usize) < tags.len())
    }

    pub fn granule_tag(&self, g: GranuleId) -> Result<Tag, MemoryError> {
        self.entry(g.pointee)
            .and_then(|(_, tags)| tags.get(g.index as usize).copied())
            .ok_or(MemoryError::DeadGranule(g))
    }

    /// STG analogue.
    pub fn set_granule_tag(&mut self, g: GranuleId, tag: Tag) -> Result<(), MemoryError> {
        let slot = self
            .pointees
            .get_mut(g.pointee.0 as usize)
            .and_then(Option::as_mut)
            .and_then(|(_, tags)| tags.get_mut(g.index as usize))
            .ok_or(MemoryError::DeadGranule(g))?;
        *slot = tag;
        Ok(())
    }

    pub fn tag_check(&self, ref_tag: Tag, g: GranuleId) -> Result<bool, MemoryError> {
        Ok(self.granule_tag(g)? == ref_tag)
    }

    /// Performs a checked access. The outer error is a simulator error (dead
    /// granule); the inner one is the tag-check fault.
    pub fn access(&self, r: &TaggedRef, kind: AccessKind) -> Result<Result<(), Fault>, MemoryError> {
        let granule_tag = self.granule_tag(r.target)?;
        if granule_tag == r.tag {
            Ok(Ok(()))
        } else {
            Ok(Err(Fault {
                ref_tag: r.tag,
                granule_tag,
                granule: r.target,
                thread: r.owner,
                kind,
            }))
        }
    }

    /// All live granules with their tags, in pointee then index order.
    pub fn tags(&self) -> impl Iterator<Item = (GranuleId, Tag)> + '_ {
        self.pointees.iter().enumerate().flat_map(|(id, entry)| {
            let id = PointeeId(id as u32);
            entry.iter().flat_map(move |(_, tags)| {
                tags.iter().enumerate().map(move |(i, t)| (GranuleId::new(id, i as u32), *t))
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::ids::{AliasId, ThreadId};

    const A: PointeeId = PointeeId(0);
    const B: PointeeId = PointeeId(1);

    fn tag(v: u8) -> Tag {
        Tag::new(v).unwrap()
    }

    #[test]
    fn padding_examples() {
        assert_eq!(pad_pointee(1), Ok(16));
        assert_eq!(pad_pointee(24), Ok(32));
        assert_eq!(pad_pointee(256), Ok(256));
        assert_eq!(pad_pointee(0), Err(MemoryError::InvalidAllocation));
    }

    #[test]
    fn alloc_clears_granules() {
        let mut mem = TaggedMemory::new();
        let gs = mem.alloc(A, 20).unwrap();
        assert_eq!(gs, vec![GranuleId::new(A, 0), GranuleId::new(A, 1)]);
        assert!(gs.iter().all(|g| mem.granule_tag(*g) == Ok(Tag::UNTAGGED)));
        assert_eq!(mem.alloc(B, 16).unwrap(), vec![GranuleId::new(B, 0)]);
        assert_eq!(mem.alloc(A, 16), Err(MemoryError::DuplicateAllocation(A)));
        assert_eq!(mem.layout(A), Some(Layout { declared_size: 20, padded_size: 32 }));
    }

    #[test]
    fn set_tag_and_reserved_value() {
        let mut mem = TaggedMemory::new();
        mem.alloc(A, 32).unwrap();
        let g = GranuleId::new(A, 0);
        mem.set_granule_tag(g, tag(3)).unwrap();
        assert_eq!(mem.granule_tag(g), Ok(tag(3)));
        mem.set_granule_tag(g, tag(0)).unwrap();
        assert!(mem.granule_tag(g).unwrap().is_untagged());
        assert_eq!(Tag::new(15), Err(MemoryError::ReservedTag));
        assert_eq!(Tag::new(16), Err(MemoryError::TagOutOfRange(16)));
        assert_eq!(
            mem.set_granule_tag(GranuleId::new(A, 2), tag(1)),
            Err(MemoryError::DeadGranule(GranuleId::new(A, 2)))
        );
    }

    #[test]
    fn tag_check_examples() {
        let mut mem = TaggedMemory::new();
        mem.alloc(A, 16).unwrap();
        let g = GranuleId::new(A, 0);
        assert_eq!(mem.tag_check(tag(0), g), Ok(true));
        mem.set_granule_tag(g, tag(3)).unwrap();
        assert_eq!(mem.tag_check(tag(3), g), Ok(true));
        assert_eq!(mem.tag_check(tag(0), g), Ok(false));
    }

    #[test]
    fn access_faults_and_dead_granules() {
        let mut mem = TaggedMemory::new();
        mem.alloc(A, 16).unwrap();
        let g = GranuleId::new(A, 0);
        mem.set_granule_tag(g, tag(2)).unwrap();
        let mut r = TaggedRef { ref_id: AliasId(0), owner: ThreadId(1), target: g, tag: tag(2) };
        assert_eq!(mem.access(&r, AccessKind::Read), Ok(Ok(())));
        r.tag = tag(0);
        let fault = mem.access(&r, AccessKind::Read).unwrap().unwrap_err();
        assert_eq!((fault.ref_tag, fault.granule_tag, fault.granule), (tag(0), tag(2), g));
        assert_eq!(fault.thread, ThreadId(1));
        r.tag = tag(2);
        mem.free(A).unwrap();
        assert_eq!(mem.access(&r, AccessKind::Read), Err(MemoryError::DeadGranule(g)));
    }

    #[test]
    fn access_agrees_with_tag_check_on_every_tag_pair() {
        for ref_raw in 0u8..16 {
            for granule_raw in 0u8..16 {
                let (Ok(rt), Ok(gt)) = (Tag::new(ref_raw), Tag::new(granule_raw)) else {
                    assert!(ref_raw == RESERVED_TAG || granule_raw == RESERVED_TAG);
                    continue;
                };
                let mut mem = TaggedMemory::new();
                mem.alloc(A, 16).unwrap();
                let g = GranuleId::new(A, 0);
                mem.set_granule_tag(g, gt).unwrap();
                let r = TaggedRef { ref_id: AliasId(0), owner: ThreadId(0), target: g, tag: rt };
                let ok = mem.access(&r, AccessKind::Write).unwrap().is_ok();
                assert_eq!(ok, mem.tag_check(rt, g).unwrap());
                assert_eq!(ok, ref_raw == granule_raw);
            }
        }
    }

    proptest! {
        #[test]
        fn padding_is_tight(n in 1u64..1_000_000) {
            let p = pad_pointee(n).unwrap();
            prop_assert_eq!(p % GRANULE_SIZE, 0);
            prop_assert!(p >= n && p - n < GRANULE_SIZE);
        }

        #[test]
        fn stored_tags_stay_in_range(ops in prop::collection::vec((0u32..4, 0u8..16), 0..64)) {
            let mut mem = TaggedMemory::new();
            mem.alloc(A, 64).unwrap();
            for (index, raw) in ops {
                if let Ok(t) = Tag::new(raw) {
                    mem.set_granule_tag(GranuleId::new(A, index), t).unwrap();
                }
            }
            prop_assert!(mem.tags().all(|(_, t)| t.value() < RESERVED_TAG));
        }
    }
}
