//! Reference model of the prefetcher written as a literal, branch-for-branch
//! transcription of the confidence/stride update policy, plus an equivalence
//! fuzzer that replays random load sequences through it and through
//! [`PrefetchTable`].
//!
//! Nothing here is shared with the table implementation beyond [`Address`]:
//! replacement, TLB and page gating are re-derived independently so a bug in
//! one route cannot hide in the other.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256PlusPlus;

use crate::address::{Address, PAGE_SIZE};
use crate::uarch::{PrefetchTable, Tlb};

const SLOTS: usize = 24;
const STRIDE_LIMIT: i64 = 2047;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ReferenceEntry {
    pub valid: bool,
    pub tag: u8,
    pub last_address: u64,
    pub stride: i64,
    pub confidence: i64,
    pub recently_used: bool,
}

/// Reference prefetcher with its own TLB bookkeeping.
#[derive(Clone, Debug)]
pub struct ReferenceModel {
    pub entries: [ReferenceEntry; SLOTS],
    tlb_capacity: usize,
    // Oldest first.
    tlb: Vec<u64>,
}

impl ReferenceModel {
    pub fn new(tlb_capacity: usize) -> Self {
        Self {
            entries: [ReferenceEntry::default(); SLOTS],
            tlb_capacity: tlb_capacity.max(1),
            tlb: Vec::new(),
        }
    }

    fn tlb_lookup(&mut self, frame: u64) -> bool {
        let hit = match self.tlb.iter().position(|&f| f == frame) {
            Some(i) => {
                self.tlb.remove(i);
                true
            }
            None => {
                if self.tlb.len() == self.tlb_capacity {
                    self.tlb.remove(0);
                }
                false
            }
        };
        self.tlb.push(frame);
        hit
    }

    fn mark_used(&mut self, slot: usize) {
        let mut others_all_used = true;
        for i in 0..SLOTS {
            if i != slot && !self.entries[i].recently_used {
                others_all_used = false;
            }
        }
        if others_all_used {
            for i in 0..SLOTS {
                self.entries[i].recently_used = false;
            }
        }
        self.entries[slot].recently_used = true;
    }

    fn create_new_entry(&mut self, tag: u8, address: u64) {
        let mut slot = None;
        for i in 0..SLOTS {
            if !self.entries[i].valid {
                slot = Some(i);
                break;
            }
        }
        if slot.is_none() {
            for i in 0..SLOTS {
                if !self.entries[i].recently_used {
                    slot = Some(i);
                    break;
                }
            }
        }
        let slot = slot.expect("some slot is free or not recently used");
        self.entries[slot] = ReferenceEntry {
            valid: true,
            tag,
            last_address: address,
            stride: 0,
            confidence: 0,
            recently_used: false,
        };
        self.mark_used(slot);
    }

    /// Processes one load, returning the prefetch target if one is issued.
    pub fn load(&mut self, ip: u64, current_address: u64) -> Option<u64> {
        let tag = (ip & 0xFF) as u8;
        let frame = current_address / PAGE_SIZE;
        let tlb_hit = self.tlb_lookup(frame);

        let mut found = None;
        for i in 0..SLOTS {
            if self.entries[i].valid & (self.entries[i].tag == tag) {
                found = Some(i);
            }
        }
        let Some(i) = found else {
            self.create_new_entry(tag, current_address);
            return None;
        };

        let last_address = self.entries[i].last_address;
        if frame != last_address / PAGE_SIZE && !tlb_hit {
            return None;
        }

        let e = &mut self.entries[i];
        let distance = current_address.wrapping_sub(last_address) as i64;
        let mut prefetch = None;
        if e.confidence >= 2 {
            prefetch = Some(current_address.wrapping_add(e.stride as u64));
            if distance != e.stride {
                e.stride = distance;
                e.confidence = 1;
            } else if e.confidence != 3 {
                e.confidence += 1;
            }
        } else if distance != e.stride {
            e.stride = distance;
            e.confidence = 1;
        } else {
            e.confidence += 1;
            if e.confidence == 2 {
                prefetch = Some(current_address.wrapping_add(e.stride as u64));
            }
        }
        // The stride field holds at most 2047 bytes; anything wider restarts training.
        if e.stride.abs() > STRIDE_LIMIT {
            e.stride = 0;
            e.confidence = 0;
        }
        e.last_address = current_address;
        self.mark_used(i);

        let target = prefetch?;
        let target_frame = (target / PAGE_SIZE) as i128;
        let ok_current = target_frame == frame as i128 || target_frame == frame as i128 + 1;
        let trained_frame = (last_address / PAGE_SIZE) as i128;
        let ok_trained = target_frame == trained_frame || target_frame == trained_frame + 1;
        (ok_current && ok_trained).then_some(target)
    }
}

/// First disagreement found by [`fuzz_equivalence`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mismatch {
    pub seed: u64,
    pub sequence: usize,
    pub step: usize,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FuzzReport {
    pub sequences: usize,
    pub loads: usize,
    pub prefetches: usize,
    pub mismatches: Vec<Mismatch>,
}

/// Replays `sequences` random load sequences from `seed` through both models
/// and compares every emitted prefetch and the complete post-load state.
pub fn fuzz_equivalence(seed: u64, sequences: usize) -> FuzzReport {
    let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
    let mut report = FuzzReport {
        sequences,
        ..FuzzReport::default()
    };
    for seq in 0..sequences {
        let tlb_capacity = rng.gen_range(1..=8);
        let mut table = PrefetchTable::new();
        let mut tlb = Tlb::new(tlb_capacity);
        let mut reference = ReferenceModel::new(tlb_capacity);
        let mut gen = SequenceGenerator::new(&mut rng);
        let len = rng.gen_range(1..=32);
        for step in 0..len {
            let (ip, addr) = gen.next(&mut rng);
            let got = table
                .observe_load(&mut tlb, Address(ip), Address(addr), step as u64)
                .request
                .map(|r| r.target.value());
            let want = reference.load(ip, addr);
            report.loads += 1;
            report.prefetches += usize::from(want.is_some());
            let detail = if got != want {
                Some(format!("prefetch {got:x?} vs reference {want:x?}"))
            } else {
                first_state_difference(&table, &reference, step + 1 == len)
            };
            if let Some(detail) = detail {
                report.mismatches.push(Mismatch {
                    seed,
                    sequence: seq,
                    step,
                    detail,
                });
                break;
            }
        }
    }
    report
}

/// Compares both tables slot by slot. Neither model ever invalidates a slot
/// and both fill the lowest free one, so the reference's valid slots form a
/// prefix; unless `whole` is set the scan stops at the first slot that is
/// invalid in both.
fn first_state_difference(
    table: &PrefetchTable,
    reference: &ReferenceModel,
    whole: bool,
) -> Option<String> {
    let agree = table
        .entries()
        .iter()
        .zip(&reference.entries)
        .take_while(|(a, b)| whole || a.valid || b.valid)
        .all(|(a, b)| {
            a.valid == b.valid
                && a.ip_tag == b.tag
                && a.last_addr.value() == b.last_address
                && i64::from(a.stride) == b.stride
                && i64::from(a.confidence) == b.confidence
                && a.mru_bit == b.recently_used
        });
    if agree {
        return None;
    }
    for (slot, (a, b)) in table.entries().iter().zip(&reference.entries).enumerate() {
        if a.valid != b.valid {
            return Some(format!("slot {slot}: valid {} vs {}", a.valid, b.valid));
        }
        if !a.valid {
            continue;
        }
        let same = a.ip_tag == b.tag
            && a.last_addr.value() == b.last_address
            && i64::from(a.stride) == b.stride
            && i64::from(a.confidence) == b.confidence
            && a.mru_bit == b.recently_used;
        if !same {
            return Some(format!("slot {slot}: {a:?} vs {b:?}"));
        }
    }
    None
}

/// Loads drawn to exercise every branch: steady strides, stride changes,
/// repeated addresses, next-frame and far-frame hops, and enough distinct tags
/// to force replacement.
const MAX_STREAMS: usize = 30;

#[derive(Clone, Copy)]
struct Stream {
    ip: u64,
    cursor: u64,
    stride: i64,
}

struct SequenceGenerator {
    n: usize,
    base_frame: u64,
    // Drawn on first use.
    streams: [Option<Stream>; MAX_STREAMS],
}

impl SequenceGenerator {
    fn new(rng: &mut Xoshiro256PlusPlus) -> Self {
        Self {
            n: rng.gen_range(1..=MAX_STREAMS),
            base_frame: rng.gen_range(0x100..0x10_0000),
            streams: [None; MAX_STREAMS],
        }
    }

    fn stream(&mut self, k: usize, rng: &mut Xoshiro256PlusPlus) -> &mut Stream {
        let base_frame = self.base_frame;
        self.streams[k].get_or_insert_with(|| Stream {
            ip: rng.gen::<u64>() >> 16,
            cursor: (base_frame + rng.gen_range(0..6)) * PAGE_SIZE + rng.gen_range(0..PAGE_SIZE),
            stride: random_stride(rng),
        })
    }

    fn next(&mut self, rng: &mut Xoshiro256PlusPlus) -> (u64, u64) {
        // Few streams dominate so entries actually reach high confidence.
        let k = if rng.gen_bool(0.7) {
            rng.gen_range(0..self.n.min(3))
        } else {
            rng.gen_range(0..self.n)
        };
        let mut st = *self.stream(k, rng);
        let mut ip = st.ip;
        if rng.gen_bool(0.1) {
            // Same low byte, different IP.
            ip = (rng.gen::<u64>() >> 16) & !0xFF | (ip & 0xFF);
        }
        let roll: f64 = rng.gen();
        let addr = if roll < 0.6 {
            st.cursor.wrapping_add(st.stride as u64)
        } else if roll < 0.7 {
            st.cursor
        } else if roll < 0.8 {
            st.stride = random_stride(rng);
            st.cursor.wrapping_add(st.stride as u64)
        } else if roll < 0.9 {
            (st.cursor / PAGE_SIZE + 1) * PAGE_SIZE + rng.gen_range(0..PAGE_SIZE)
        } else {
            let frame = (st.cursor / PAGE_SIZE)
                .wrapping_add(rng.gen_range(0..8))
                .wrapping_sub(4);
            frame * PAGE_SIZE + rng.gen_range(0..PAGE_SIZE)
        };
        st.cursor = addr;
        self.streams[k] = Some(st);
        (ip, addr)
    }
}

fn random_stride(rng: &mut Xoshiro256PlusPlus) -> i64 {
    match rng.gen_range(0..4) {
        0 => rng.gen_range(-2047..=2047),
        1 => 64 * rng.gen_range(-31..=31),
        2 => rng.gen_range(-3000..=3000),
        _ => 64 * rng.gen_range(5..=14),
    }
}
