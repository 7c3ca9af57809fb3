use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::plru::{plru_select_victim, plru_touch};
use super::tlb::Tlb;
use super::UarchError;
use crate::address::Address;

/// Number of history-table entries.
pub const TABLE_ENTRIES: usize = 24;
/// Confidence at which a matching load issues a prefetch.
pub const TRIGGER_CONFIDENCE: u8 = 2;
/// Saturation value of the two-bit confidence counter.
pub const CONFIDENCE_MAX: u8 = 3;
/// Largest stride magnitude the sign-plus-magnitude stride field can hold.
pub const MAX_STRIDE: i64 = 2047;

/// One history-table slot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct PrefetcherEntry {
    pub ip_tag: u8,
    /// Physical address of the last load that trained this entry.
    pub last_addr: Address,
    /// Byte stride, `|stride| <= MAX_STRIDE`.
    pub stride: i16,
    pub confidence: u8,
    pub valid: bool,
    pub mru_bit: bool,
}

/// A prefetch issued by the table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PrefetchRequest {
    pub target: Address,
    pub origin_ip_tag: u8,
    pub issued_at: u64,
}

/// What a single load did to the table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainingOutcome {
    /// No entry matched; one was allocated in `slot`, displacing `evicted`.
    Created { slot: usize, evicted: Option<u8> },
    /// The matching entry in `slot` was trained.
    Updated { slot: usize },
    /// The load reached a new page frame that missed in the TLB; the entry in
    /// `slot` was left as it was.
    TlbBypass { slot: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Observation {
    pub request: Option<PrefetchRequest>,
    pub outcome: TrainingOutcome,
}

/// The 24-entry fully associative IP-stride history table.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PrefetchTable {
    entries: [PrefetcherEntry; TABLE_ENTRIES],
}

impl Default for PrefetchTable {
    fn default() -> Self {
        Self::new()
    }
}

impl PrefetchTable {
    pub fn new() -> Self {
        Self {
            entries: [PrefetcherEntry::default(); TABLE_ENTRIES],
        }
    }

    pub fn entries(&self) -> &[PrefetcherEntry] {
        &self.entries
    }

    pub fn entry(&self, slot: usize) -> &PrefetcherEntry {
        &self.entries[slot]
    }

    /// Slot of the valid entry tagged `ip_tag`, if any.
    pub fn lookup(&self, ip_tag: u8) -> Option<usize> {
        self.entries
            .iter()
            .position(|e| e.valid && e.ip_tag == ip_tag)
    }

    /// Entry for the instruction pointer `ip` (only its low eight bits count).
    pub fn entry_for_ip(&self, ip: Address) -> Option<&PrefetcherEntry> {
        self.lookup(ip.ip_tag()).map(|slot| &self.entries[slot])
    }

    pub fn occupancy(&self) -> usize {
        self.entries.iter().filter(|e| e.valid).count()
    }

    pub fn plru_touch(&mut self, slot: usize) {
        plru_touch(&mut self.entries, slot);
    }

    pub fn plru_select_victim(&self) -> Result<usize, UarchError> {
        plru_select_victim(&self.entries)
    }

    /// Invalidates every entry, as a privileged clear instruction would, and
    /// returns the cycles it takes with `write_ports` entries written per cycle.
    pub fn reset(&mut self, write_ports: u32) -> Result<u64, UarchError> {
        if write_ports == 0 {
            return Err(UarchError::ZeroWritePorts);
        }
        self.entries = [PrefetcherEntry::default(); TABLE_ENTRIES];
        Ok((TABLE_ENTRIES as u64).div_ceil(u64::from(write_ports)))
    }

    /// Stable hash of the full table state.
    pub fn digest(&self) -> u64 {
        let mut h = DefaultHasher::new();
        self.hash(&mut h);
        h.finish()
    }

    /// Trains the table with one retired load at physical address `paddr`.
    pub fn observe_load(
        &mut self,
        tlb: &mut Tlb,
        ip: Address,
        paddr: Address,
        cycle: u64,
    ) -> Observation {
        let tag = ip.ip_tag();
        let frame = paddr.page_frame();
        let tlb_hit = tlb.access(frame);

        let Some(slot) = self.lookup(tag) else {
            let (slot, evicted) = self.allocate();
            self.entries[slot] = PrefetcherEntry {
                ip_tag: tag,
                last_addr: paddr,
                stride: 0,
                confidence: 0,
                valid: true,
                mru_bit: false,
            };
            self.plru_touch(slot);
            return Observation {
                request: None,
                outcome: TrainingOutcome::Created { slot, evicted },
            };
        };

        let last = self.entries[slot].last_addr;
        if frame != last.page_frame() && !tlb_hit {
            return Observation {
                request: None,
                outcome: TrainingOutcome::TlbBypass { slot },
            };
        }

        let entry = &mut self.entries[slot];
        let distance = paddr.distance_from(last);
        let stride = i64::from(entry.stride);
        let mut prefetch = false;
        if entry.confidence >= TRIGGER_CONFIDENCE {
            prefetch = true;
            if distance != stride {
                relearn(entry, distance);
            } else if entry.confidence != CONFIDENCE_MAX {
                entry.confidence += 1;
            }
        } else if distance != stride {
            relearn(entry, distance);
        } else {
            entry.confidence += 1;
            prefetch = entry.confidence == TRIGGER_CONFIDENCE;
        }
        entry.last_addr = paddr;
        self.plru_touch(slot);

        let request = prefetch
            .then(|| paddr.offset(stride))
            .filter(|&target| page_rule_allows(last, paddr, target))
            .map(|target| PrefetchRequest {
                target,
                origin_ip_tag: tag,
                issued_at: cycle,
            });
        Observation {
            request,
            outcome: TrainingOutcome::Updated { slot },
        }
    }

    fn allocate(&self) -> (usize, Option<u8>) {
        if let Some(free) = self.entries.iter().position(|e| !e.valid) {
            return (free, None);
        }
        let victim = self
            .plru_select_victim()
            .expect("table is full when no invalid slot exists");
        (victim, Some(self.entries[victim].ip_tag))
    }
}

/// Mismatched distance: take it as the new stride with confidence 1, or start
/// over from scratch when the stride field cannot represent it.
fn relearn(entry: &mut PrefetcherEntry, distance: i64) {
    if distance.unsigned_abs() <= MAX_STRIDE as u64 {
        entry.stride = distance as i16;
        entry.confidence = 1;
    } else {
        entry.stride = 0;
        entry.confidence = 0;
    }
}

/// A prefetch may land in the current frame or the one after it, measured from
/// both the triggering load and the frame the entry was trained on.
fn page_rule_allows(last: Address, current: Address, target: Address) -> bool {
    let t = target.page_frame() as i128;
    let from_current = t - current.page_frame() as i128;
    let from_trained = t - last.page_frame() as i128;
    (0..=1).contains(&from_current) && (0..=1).contains(&from_trained)
}
