//! A single simulated core: prefetcher, TLB and cache wired together, plus a
//! cycle counter.

use crate::address::{Address, LINE_SIZE};
use crate::cache::{Cache, CacheConfig, CacheError};
use crate::uarch::{Observation, PrefetchRequest, PrefetchTable, Tlb, UarchError};

/// Result of one demand load through the core.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadResult {
    pub latency: u64,
    pub observation: Observation,
}

impl LoadResult {
    pub fn prefetch(&self) -> Option<PrefetchRequest> {
        self.observation.request
    }
}

#[derive(Clone, Debug)]
pub struct Machine {
    pub prefetcher: PrefetchTable,
    pub tlb: Tlb,
    pub cache: Cache,
    pub cycle: u64,
    /// Emulates the adjacent-line prefetchers: every demand load also brings
    /// in the lines just before and after it.
    pub adjacent_line_noise: bool,
}

impl Machine {
    pub fn new(config: CacheConfig) -> Result<Self, CacheError> {
        Ok(Self {
            prefetcher: PrefetchTable::new(),
            tlb: Tlb::default(),
            cache: Cache::new(config)?,
            cycle: 0,
            adjacent_line_noise: false,
        })
    }

    pub fn config(&self) -> &CacheConfig {
        self.cache.config()
    }

    /// A retired load: trains the prefetcher, accesses the cache, then
    /// installs whatever the prefetcher asked for.
    pub fn load(&mut self, ip: Address, paddr: Address) -> LoadResult {
        let observation = self
            .prefetcher
            .observe_load(&mut self.tlb, ip, paddr, self.cycle);
        let latency = self.cache.access(paddr);
        if self.adjacent_line_noise {
            self.cache
                .access(paddr.line_base().offset(-(LINE_SIZE as i64)));
            self.cache.access(paddr.line_base() + LINE_SIZE);
        }
        if let Some(req) = &observation.request {
            self.cache.install_prefetch(req);
        }
        self.cycle += latency;
        LoadResult {
            latency,
            observation,
        }
    }

    /// A measurement load that never reaches the IP-stride prefetcher, as the
    /// pointer-chased probes and shuffled reloads of a careful observer.
    pub fn timed_load(&mut self, paddr: Address) -> u64 {
        let latency = self.cache.access(paddr);
        self.cycle += latency;
        latency
    }

    pub fn flush_line(&mut self, paddr: Address) {
        self.cache.flush_line(paddr);
    }

    pub fn flush_page(&mut self, paddr: Address) {
        self.cache.flush_page(paddr);
    }

    /// Clears the prefetcher and charges the reset time to the cycle counter.
    pub fn reset_prefetcher(&mut self, write_ports: u32) -> Result<u64, UarchError> {
        let cycles = self.prefetcher.reset(write_ports)?;
        self.cycle += cycles;
        Ok(cycles)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trained_stride_prefetches_into_cache() {
        let mut m = Machine::new(CacheConfig::default()).unwrap();
        let ip = Address(0x4010A0);
        let page = Address(0x2000_0000);
        for i in 0..3 {
            m.load(ip, page + i * 448);
        }
        assert!(m.cache.is_resident(page + 3 * 448));
        assert_eq!(m.timed_load(page + 3 * 448), 40);
    }

    #[test]
    fn timed_loads_leave_prefetcher_alone() {
        let mut m = Machine::new(CacheConfig::default()).unwrap();
        let before = m.prefetcher.digest();
        for i in 0..64 {
            m.timed_load(Address(0x3000_0000 + i * 64));
        }
        assert_eq!(m.prefetcher.digest(), before);
    }

    #[test]
    fn adjacent_noise_caches_neighbours() {
        let mut m = Machine::new(CacheConfig::default()).unwrap();
        m.adjacent_line_noise = true;
        let a = Address(0x4000_0000 + 10 * 64);
        m.load(Address(0x11), a);
        assert!(m.cache.is_resident(a - 64));
        assert!(m.cache.is_resident(a + 64));
        assert!(!m.cache.is_resident(a + 128));
    }
}
