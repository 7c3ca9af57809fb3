use std::collections::VecDeque;

pub const DEFAULT_TLB_CAPACITY: usize = 64;

/// Recency-ordered set of page frames with a fixed capacity.
///
/// Only presence matters to the prefetcher: a load that reaches a new frame
/// which misses here does not train its entry.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Tlb {
    capacity: usize,
    // Most recently used at the back.
    frames: VecDeque<u64>,
}

impl Default for Tlb {
    fn default() -> Self {
        Self::new(DEFAULT_TLB_CAPACITY)
    }
}

impl Tlb {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        Self {
            capacity,
            frames: VecDeque::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn contains(&self, frame: u64) -> bool {
        self.frames.contains(&frame)
    }

    /// Looks `frame` up, refreshing its recency on a hit and installing it on
    /// a miss. Returns whether it hit.
    pub fn access(&mut self, frame: u64) -> bool {
        if self.frames.back() == Some(&frame) {
            return true;
        }
        if let Some(pos) = self.frames.iter().position(|&f| f == frame) {
            self.frames.remove(pos);
            self.frames.push_back(frame);
            true
        } else {
            self.install(frame);
            false
        }
    }

    pub fn install(&mut self, frame: u64) {
        if let Some(pos) = self.frames.iter().position(|&f| f == frame) {
            self.frames.remove(pos);
        } else if self.frames.len() == self.capacity {
            self.frames.pop_front();
        }
        self.frames.push_back(frame);
    }

    pub fn flush(&mut self) {
        self.frames.clear();
    }
}
