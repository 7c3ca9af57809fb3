//! Microbenchmarks that recover the prefetcher's organisation from timing
//! alone. Each one drives a fresh core and reads results back through cache
//! latency, never through the table itself.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::address::{Address, LINES_PER_PAGE, LINE_SIZE};
use crate::cache::CacheConfig;
use crate::machine::Machine;

use super::ExperimentError;

const TRAIN_FRAME: u64 = 0x1_2340;
const IP_BASE: u64 = 0x40_1000;
const LINE: i64 = LINE_SIZE as i64;

fn core(cache: CacheConfig) -> Result<Machine, ExperimentError> {
    Ok(Machine::new(cache)?)
}

fn line_addr(frame: u64, line: u64) -> Address {
    Address::from_frame(frame) + line * LINE_SIZE
}

/// Whether a load by `ip` at `addr` made `addr + stride` come back fast.
fn triggers(machine: &mut Machine, ip: Address, addr: Address, stride: i64) -> (bool, u64) {
    let target = addr.offset(stride);
    machine.flush_line(target);
    machine.load(ip, addr);
    let latency = machine.timed_load(target);
    (machine.config().is_hit(latency), latency)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexingRow {
    /// Low byte of the replayed IP.
    pub offset: u8,
    pub ip: Address,
    pub latency: u64,
    pub triggered: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexingReport {
    pub trained_ip: Address,
    pub stride_lines: i64,
    pub rows: Vec<IndexingRow>,
    /// Replaying with only IP bit 9 flipped.
    pub bit9_flip_triggered: bool,
    /// Replaying with only IP bit 3 flipped.
    pub bit3_flip_triggered: bool,
}

impl IndexingReport {
    pub fn triggered_offsets(&self) -> Vec<u8> {
        self.rows
            .iter()
            .filter(|r| r.triggered)
            .map(|r| r.offset)
            .collect()
    }
}

/// Trains one IP, then replays a load from each of 256 IPs in another code
/// page whose low byte runs through every value.
pub fn rev_indexing(cache: CacheConfig) -> Result<IndexingReport, ExperimentError> {
    let stride_lines = 7;
    let trained_ip = Address(IP_BASE + 0xA0);
    let mut trained = core(cache)?;
    for i in 0..3 {
        trained.load(trained_ip, line_addr(TRAIN_FRAME, i * stride_lines as u64));
    }
    trained.flush_page(Address::from_frame(TRAIN_FRAME));
    let probe_addr = line_addr(TRAIN_FRAME, 40);
    let replay = |ip: Address| {
        let mut m = trained.clone();
        triggers(&mut m, ip, probe_addr, stride_lines * LINE)
    };
    let rows = (0..=255u8)
        .map(|offset| {
            let ip = Address(IP_BASE + 0x3000 + u64::from(offset));
            let (triggered, latency) = replay(ip);
            IndexingRow {
                offset,
                ip,
                latency,
                triggered,
            }
        })
        .collect();
    Ok(IndexingReport {
        trained_ip,
        stride_lines,
        rows,
        bit9_flip_triggered: replay(Address(trained_ip.value() ^ (1 << 9))).0,
        bit3_flip_triggered: replay(Address(trained_ip.value() ^ (1 << 3))).0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OffsetMode {
    /// Phase 2 starts at a random line unrelated to either stride.
    Random,
    /// Phase 2 starts exactly one `st2` after the last phase-1 load.
    EqualsSt2,
}

/// Which stride, if any, a load was seen to prefetch with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trigger {
    None,
    St1,
    St2,
    Both,
}

impl fmt::Display for Trigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Trigger::None => "none",
            Trigger::St1 => "st1",
            Trigger::St2 => "st2",
            Trigger::Both => "both",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfStrideLog {
    pub st1: i64,
    pub st2: i64,
    /// Phase-2 starting line.
    pub offset_line: u64,
    pub phase1: Vec<Trigger>,
    pub phase2: Vec<Trigger>,
}

/// Trains one IP `tr1` times with stride `st1` (lines), then `tr2` times with
/// `st2`, recording after every load which stride got prefetched.
pub fn rev_conf_stride(
    cache: CacheConfig,
    st1: i64,
    st2: i64,
    tr1: u32,
    tr2: u32,
    mode: OffsetMode,
    seed: u64,
) -> Result<ConfStrideLog, ExperimentError> {
    let reach = st1.max(st2);
    if st1 <= 0 || st2 <= 0 || st1 == st2 {
        return Err(ExperimentError::BadParameter(format!(
            "strides must be positive and distinct, got {st1} and {st2}"
        )));
    }
    let phase1_end = st1 * (i64::from(tr1) - 1).max(0);
    let phase2_span = st2 * (i64::from(tr2) - 1).max(0) + reach;
    let last_start = LINES_PER_PAGE as i64 - 1 - phase2_span;
    if tr1 == 0 || phase1_end + st1 >= LINES_PER_PAGE as i64 || last_start < 0 {
        return Err(ExperimentError::BadParameter(format!(
            "{tr1}x{st1} then {tr2}x{st2} lines do not fit in one page"
        )));
    }
    let offset_line = match mode {
        OffsetMode::EqualsSt2 => phase1_end + st2,
        OffsetMode::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            loop {
                let o = rng.gen_range(0..=last_start);
                if o - phase1_end != st1 && o - phase1_end != st2 {
                    break o;
                }
            }
        }
    };
    if offset_line > last_start {
        return Err(ExperimentError::BadParameter(format!(
            "phase 2 starting at line {offset_line} leaves the page"
        )));
    }

    let ip = Address(IP_BASE + 0x5C);
    let page = Address::from_frame(TRAIN_FRAME);
    let mut m = core(cache)?;
    let step = |m: &mut Machine, line: i64| {
        let addr = page + line as u64 * LINE_SIZE;
        m.flush_page(page);
        m.load(ip, addr);
        let hit = |m: &mut Machine, s: i64| {
            let t = addr.offset(s * LINE);
            if t.page_frame() != page.page_frame() {
                return false;
            }
            let latency = m.timed_load(t);
            m.config().is_hit(latency)
        };
        match (hit(m, st1), hit(m, st2)) {
            (false, false) => Trigger::None,
            (true, false) => Trigger::St1,
            (false, true) => Trigger::St2,
            (true, true) => Trigger::Both,
        }
    };
    let phase1 = (0..i64::from(tr1)).map(|i| step(&mut m, i * st1)).collect();
    let phase2 = (0..i64::from(tr2))
        .map(|i| step(&mut m, offset_line + i * st2))
        .collect();
    Ok(ConfStrideLog {
        st1,
        st2,
        offset_line: offset_line as u64,
        phase1,
        phase2,
    })
}

/// How the test pages are backed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PagePool {
    /// Every virtual page lands on the training frame.
    Reclaimed,
    /// Each virtual page keeps its own frame.
    Locked,
}

impl fmt::Display for PagePool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PagePool::Reclaimed => "reclaimed",
            PagePool::Locked => "locked",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TlbState {
    /// The test page's translation is cached before the access.
    Warm,
    Cold,
}

impl fmt::Display for TlbState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TlbState::Warm => "warm",
            TlbState::Cold => "cold",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PageTrial {
    pub offset_pages: u64,
    pub pool: PagePool,
    pub tlb: TlbState,
    pub first_access: bool,
    pub second_access: bool,
}

impl PageTrial {
    pub fn triggered(&self) -> bool {
        self.first_access || self.second_access
    }
}

/// Trains on one page, then loads from the page `offset_pages` further on and
/// checks the stride target, twice.
pub fn rev_page(
    cache: CacheConfig,
    offset_pages: u64,
    pool: PagePool,
    tlb: TlbState,
) -> Result<PageTrial, ExperimentError> {
    if offset_pages == 0 {
        return Err(ExperimentError::BadParameter(
            "page offset must be at least 1".into(),
        ));
    }
    let stride_lines = 7u64;
    let ip = Address(IP_BASE + 0x33);
    let mut m = core(cache)?;
    for i in 0..4 {
        m.load(ip, line_addr(TRAIN_FRAME, i * stride_lines));
    }
    let test_frame = match pool {
        PagePool::Reclaimed => TRAIN_FRAME,
        PagePool::Locked => TRAIN_FRAME + offset_pages,
    };
    match tlb {
        TlbState::Warm => m.tlb.install(test_frame),
        TlbState::Cold => {
            if pool == PagePool::Locked {
                m.tlb.flush();
                m.tlb.install(TRAIN_FRAME);
            }
        }
    }
    let addr = line_addr(test_frame, 4 * stride_lines);
    let stride = stride_lines as i64 * LINE;
    let (first_access, _) = triggers(&mut m, ip, addr, stride);
    let (second_access, _) = triggers(&mut m, ip, addr, stride);
    Ok(PageTrial {
        offset_pages,
        pool,
        tlb,
        first_access,
        second_access,
    })
}

/// The 1..=4 page sweep for both pools, warm TLB.
pub fn rev_page_table(cache: CacheConfig) -> Result<Vec<PageTrial>, ExperimentError> {
    let mut out = Vec::new();
    for pool in [PagePool::Reclaimed, PagePool::Locked] {
        for offset in 1..=4 {
            out.push(rev_page(cache, offset, pool, TlbState::Warm)?);
        }
    }
    Ok(out)
}

const ENTRY_STRIDE_LINES: u64 = 7;
const ENTRY_TRAIN_ITERS: u64 = 5;

fn entry_ip(i: usize) -> Address {
    // Spread over several code pages; only the low byte differs per load.
    Address(IP_BASE + 0x10_0000 + (i as u64 / 256) * 0x1000 + (i as u64 % 256))
}

fn entry_frame(i: usize) -> u64 {
    TRAIN_FRAME + 0x100 + i as u64
}

fn train_entry(m: &mut Machine, i: usize) {
    for k in 0..ENTRY_TRAIN_ITERS {
        m.load(
            entry_ip(i),
            line_addr(entry_frame(i), k * ENTRY_STRIDE_LINES),
        );
    }
}

/// Replays every IP against its own copy of the trained core so probing one
/// IP cannot displace another.
fn alive(m: &Machine, n: usize) -> Vec<bool> {
    (0..n)
        .map(|i| {
            let mut c = m.clone();
            c.flush_page(Address::from_frame(entry_frame(i)));
            let addr = line_addr(entry_frame(i), 40);
            triggers(
                &mut c,
                entry_ip(i),
                addr,
                (ENTRY_STRIDE_LINES * LINE_SIZE) as i64,
            )
            .0
        })
        .collect()
}

/// Trains `n_ips` loads one after another, each on its own frame, and reports
/// which of them can still trigger a prefetch.
pub fn rev_entries(cache: CacheConfig, n_ips: usize) -> Result<Vec<bool>, ExperimentError> {
    if n_ips > 256 {
        return Err(ExperimentError::BadParameter(format!(
            "{n_ips} loads cannot have distinct 8-bit tags"
        )));
    }
    let mut m = core(cache)?;
    for i in 0..n_ips {
        train_entry(&mut m, i);
    }
    Ok(alive(&m, n_ips))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplacementReport {
    pub retrained: usize,
    pub inserted: usize,
    pub alive: Vec<bool>,
}

impl ReplacementReport {
    /// 1-based positions among the original 24 that no longer trigger.
    pub fn evicted_positions(&self) -> Vec<usize> {
        self.alive[..24]
            .iter()
            .enumerate()
            .filter(|(_, &a)| !a)
            .map(|(i, _)| i + 1)
            .collect()
    }
}

/// Fills the table with 24 loads, retrains the first `retrained`, then trains
/// `inserted` new ones.
pub fn rev_replacement(
    cache: CacheConfig,
    retrained: usize,
    inserted: usize,
) -> Result<ReplacementReport, ExperimentError> {
    if retrained > 24 || inserted > 256 - 24 {
        return Err(ExperimentError::BadParameter(format!(
            "cannot retrain {retrained} of 24 and insert {inserted}"
        )));
    }
    let mut m = core(cache)?;
    for i in 0..24 {
        train_entry(&mut m, i);
    }
    m.cache.flush_all();
    for i in 0..retrained {
        train_entry(&mut m, i);
    }
    for i in 24..24 + inserted {
        train_entry(&mut m, i);
    }
    m.cache.flush_all();
    Ok(ReplacementReport {
        retrained,
        inserted,
        alive: alive(&m, 24 + inserted),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> CacheConfig {
        CacheConfig::default()
    }

    #[test]
    fn indexing_uses_low_byte_only() {
        let r = rev_indexing(cfg()).unwrap();
        assert_eq!(r.triggered_offsets(), vec![0xA0]);
        assert!(r.bit9_flip_triggered);
        assert!(!r.bit3_flip_triggered);
    }

    #[test]
    fn confidence_switches_stride_after_two_mispredictions() {
        let log = rev_conf_stride(cfg(), 5, 9, 3, 3, OffsetMode::Random, 3).unwrap();
        assert_eq!(log.phase1, vec![Trigger::None, Trigger::None, Trigger::St1]);
        assert_eq!(log.phase2, vec![Trigger::St1, Trigger::None, Trigger::St2]);
        let log = rev_conf_stride(cfg(), 5, 9, 3, 3, OffsetMode::EqualsSt2, 3).unwrap();
        assert_eq!(log.phase2, vec![Trigger::St1, Trigger::St2, Trigger::St2]);
    }

    #[test]
    fn confidence_example_from_seven_to_five() {
        let log = rev_conf_stride(cfg(), 7, 5, 4, 3, OffsetMode::Random, 11).unwrap();
        assert_eq!(log.phase2, vec![Trigger::St1, Trigger::None, Trigger::St2]);
        let log = rev_conf_stride(cfg(), 7, 5, 4, 3, OffsetMode::EqualsSt2, 11).unwrap();
        assert_eq!(log.phase2, vec![Trigger::St1, Trigger::St2, Trigger::St2]);
        let log = rev_conf_stride(cfg(), 7, 5, 1, 3, OffsetMode::Random, 11).unwrap();
        assert!(log.phase1.iter().all(|&t| t == Trigger::None));
    }

    #[test]
    fn page_table_matches_reclaim_and_lock() {
        let t = rev_page_table(cfg()).unwrap();
        let got: Vec<bool> = t.iter().map(PageTrial::triggered).collect();
        assert_eq!(got, vec![true, true, true, true, true, false, false, false]);
    }

    #[test]
    fn cold_tlb_suppresses_cross_page_trigger() {
        let t = rev_page(cfg(), 1, PagePool::Locked, TlbState::Cold).unwrap();
        assert!(!t.first_access);
    }

    #[test]
    fn table_holds_twenty_four() {
        assert!(rev_entries(cfg(), 24).unwrap().iter().all(|&a| a));
        let alive = rev_entries(cfg(), 26).unwrap();
        assert_eq!(alive.iter().position(|&a| a), Some(2));
        assert!(alive[2..].iter().all(|&a| a));
        let alive = rev_entries(cfg(), 30).unwrap();
        assert!(alive[..6].iter().all(|&a| !a) && alive[6..].iter().all(|&a| a));
    }

    #[test]
    fn retrained_entries_survive() {
        let r = rev_replacement(cfg(), 8, 8).unwrap();
        assert_eq!(r.evicted_positions(), (9..=16).collect::<Vec<_>>());
        assert!(r.alive[24..].iter().all(|&a| a));
        let r = rev_replacement(cfg(), 0, 8).unwrap();
        assert_eq!(r.evicted_positions(), (1..=8).collect::<Vec<_>>());
        assert!(rev_replacement(cfg(), 8, 0)
            .unwrap()
            .evicted_positions()
            .is_empty());
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(rev_conf_stride(cfg(), 5, 5, 3, 3, OffsetMode::Random, 0).is_err());
        assert!(rev_page(cfg(), 0, PagePool::Locked, TlbState::Warm).is_err());
        assert!(rev_entries(cfg(), 257).is_err());
        assert!(rev_replacement(cfg(), 25, 1).is_err());
    }
}
