//! One observable cache level: sliced, set-associative, true LRU inside each
//! set, with a two-valued latency model.

use thiserror::Error;

use crate::address::Address;
use crate::uarch::PrefetchRequest;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CacheError {
    #[error("{field} must be a power of two, got {value}")]
    NotPowerOfTwo { field: &'static str, value: u64 },
    #[error(
        "threshold {threshold} must lie strictly between hit latency {hit} and miss latency {miss}"
    )]
    ThresholdOutOfRange { threshold: u64, hit: u64, miss: u64 },
    #[error("set {set} does not exist (sets per slice: {sets})")]
    NoSuchSet { set: usize, sets: usize },
    #[error("slice {slice} does not exist (slices: {slices})")]
    NoSuchSlice { slice: usize, slices: usize },
    #[error(
        "candidate pool exhausted: found {found} of {needed} lines for set {set}, slice {slice}"
    )]
    PoolExhausted {
        set: usize,
        slice: usize,
        found: usize,
        needed: usize,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CacheConfig {
    pub slices: usize,
    pub sets_per_slice: usize,
    pub associativity: usize,
    pub hit_latency: u64,
    pub miss_latency: u64,
    /// Latencies below this read as "cached".
    pub threshold: u64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            slices: 4,
            sets_per_slice: 2048,
            associativity: 16,
            hit_latency: 40,
            miss_latency: 200,
            threshold: 120,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<(), CacheError> {
        for (field, value) in [
            ("slices", self.slices),
            ("sets_per_slice", self.sets_per_slice),
            ("associativity", self.associativity),
        ] {
            if !value.is_power_of_two() {
                return Err(CacheError::NotPowerOfTwo {
                    field,
                    value: value as u64,
                });
            }
        }
        if !(self.hit_latency < self.threshold && self.threshold < self.miss_latency) {
            return Err(CacheError::ThresholdOutOfRange {
                threshold: self.threshold,
                hit: self.hit_latency,
                miss: self.miss_latency,
            });
        }
        Ok(())
    }

    pub fn is_hit(&self, latency: u64) -> bool {
        latency < self.threshold
    }
}

/// Associativity-many distinct lines that all map to one (set, slice).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MinimalEvictionSet {
    pub set: usize,
    pub slice: usize,
    pub members: Vec<Address>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cache {
    config: CacheConfig,
    // Indexed by slice * sets_per_slice + set; each holds line numbers, LRU first.
    sets: Vec<Vec<u64>>,
}

impl Cache {
    pub fn new(config: CacheConfig) -> Result<Self, CacheError> {
        config.validate()?;
        Ok(Self {
            config,
            sets: vec![Vec::new(); config.slices * config.sets_per_slice],
        })
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    /// Slice selected by XOR-folding the line-number bits above the set index.
    pub fn slice_of(&self, paddr: Address) -> usize {
        let slices = self.config.slices as u64;
        if slices == 1 {
            return 0;
        }
        let width = slices.trailing_zeros();
        let mut upper = paddr.line_index() >> self.config.sets_per_slice.trailing_zeros();
        let mut folded = 0;
        while upper != 0 {
            folded ^= upper & (slices - 1);
            upper >>= width;
        }
        folded as usize
    }

    pub fn set_of(&self, paddr: Address) -> usize {
        (paddr.line_index() as usize) & (self.config.sets_per_slice - 1)
    }

    fn slot(&self, paddr: Address) -> usize {
        self.slice_of(paddr) * self.config.sets_per_slice + self.set_of(paddr)
    }

    pub fn is_resident(&self, paddr: Address) -> bool {
        self.sets[self.slot(paddr)].contains(&paddr.line_index())
    }

    /// Lines currently held by (set, slice), least recently used first.
    pub fn set_contents(&self, set: usize, slice: usize) -> Vec<Address> {
        self.sets[slice * self.config.sets_per_slice + set]
            .iter()
            .map(|&line| Address(line << 6))
            .collect()
    }

    /// Demand access: returns the latency and leaves the line most recently used.
    pub fn access(&mut self, paddr: Address) -> u64 {
        if self.touch(paddr) {
            self.config.hit_latency
        } else {
            self.config.miss_latency
        }
    }

    /// Places the prefetched line exactly as a demand access would.
    pub fn install_prefetch(&mut self, request: &PrefetchRequest) {
        self.touch(request.target);
    }

    pub fn flush_line(&mut self, paddr: Address) {
        let slot = self.slot(paddr);
        let line = paddr.line_index();
        self.sets[slot].retain(|&l| l != line);
    }

    /// Flushes all 64 lines of the page holding `paddr`.
    pub fn flush_page(&mut self, paddr: Address) {
        let base = paddr.page_base();
        for i in 0..crate::LINES_PER_PAGE {
            self.flush_line(base + i * crate::LINE_SIZE);
        }
    }

    pub fn flush_all(&mut self) {
        for set in &mut self.sets {
            set.clear();
        }
    }

    // Returns whether the line was already resident.
    fn touch(&mut self, paddr: Address) -> bool {
        let slot = self.slot(paddr);
        let line = paddr.line_index();
        let ways = self.config.associativity;
        let set = &mut self.sets[slot];
        if let Some(pos) = set.iter().position(|&l| l == line) {
            set.remove(pos);
            set.push(line);
            true
        } else {
            if set.len() == ways {
                set.remove(0);
            }
            set.push(line);
            false
        }
    }

    /// Picks the first `associativity` distinct lines of `pool` that map to
    /// (set, slice).
    pub fn build_eviction_set(
        &self,
        set: usize,
        slice: usize,
        pool: impl IntoIterator<Item = Address>,
    ) -> Result<MinimalEvictionSet, CacheError> {
        if set >= self.config.sets_per_slice {
            return Err(CacheError::NoSuchSet {
                set,
                sets: self.config.sets_per_slice,
            });
        }
        if slice >= self.config.slices {
            return Err(CacheError::NoSuchSlice {
                slice,
                slices: self.config.slices,
            });
        }
        let needed = self.config.associativity;
        let mut members: Vec<Address> = Vec::with_capacity(needed);
        for candidate in pool {
            let line = candidate.line_base();
            if self.set_of(line) == set && self.slice_of(line) == slice && !members.contains(&line)
            {
                members.push(line);
                if members.len() == needed {
                    return Ok(MinimalEvictionSet {
                        set,
                        slice,
                        members,
                    });
                }
            }
        }
        Err(CacheError::PoolExhausted {
            set,
            slice,
            found: members.len(),
            needed,
        })
    }
}
