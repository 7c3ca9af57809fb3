use std::collections::HashSet;

use super::{run_attack, AttackConfig, Channel, ExperimentError, TraceRecord, Variant};
use crate::address::Address;
use crate::cache::{Cache, CacheConfig};
use crate::programs::{DomainKind, Domains, FlushPolicy};
use crate::uarch::{PrefetchTable, Tlb, TABLE_ENTRIES};

pub const DEFAULT_CLOCK_GHZ: f64 = 3.6;

/// Converts a wall-clock period to core cycles.
pub fn period_from_micros(micros: f64, clock_ghz: f64) -> u64 {
    (micros * clock_ghz * 1000.0).round() as u64
}

#[derive(Clone, Debug, PartialEq)]
pub enum Workload {
    /// `streams` loads walking disjoint regions with a fixed stride,
    /// interleaved round-robin.
    Synthetic {
        loads: usize,
        stride: i64,
        streams: usize,
    },
    Trace(Vec<TraceRecord>),
}

impl Default for Workload {
    fn default() -> Self {
        Workload::Synthetic {
            loads: 200_000,
            stride: 448,
            streams: 4,
        }
    }
}

impl Workload {
    /// (ip, physical address) per load.
    fn loads(&self) -> Result<Vec<(Address, Address)>, ExperimentError> {
        match self {
            Workload::Synthetic {
                loads,
                stride,
                streams,
            } => {
                let streams = (*streams).max(1);
                Ok((0..*loads)
                    .map(|i| {
                        let s = (i % streams) as u64;
                        let k = (i / streams) as i64;
                        let base = Address::from_frame(0x10_0000 + s * 0x1_0000);
                        (
                            Address(0x40_0000 + 0x40 * s + 0x10),
                            base.offset(k * stride),
                        )
                    })
                    .collect())
            }
            Workload::Trace(records) => {
                let mut domains = Domains::new();
                let max = records.iter().map(|r| r.domain).max();
                if let Some(max) = max {
                    for _ in 0..=max {
                        domains.add(DomainKind::UserProcess);
                    }
                }
                records
                    .iter()
                    .map(|r| Ok((r.ip, domains.get(r.domain)?.translate(r.vaddr))))
                    .collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MitigationConfig {
    pub workload: Workload,
    /// `None` never flushes.
    pub period_cycles: Option<u64>,
    pub write_ports: u32,
    pub cycles_per_load: u64,
    pub cache: CacheConfig,
    /// Rounds per attack variant run under flush-on-switch; 0 skips them.
    pub attack_rounds: usize,
    pub seed: u64,
}

impl Default for MitigationConfig {
    fn default() -> Self {
        Self {
            workload: Workload::default(),
            period_cycles: Some(period_from_micros(10.0, DEFAULT_CLOCK_GHZ)),
            write_ports: 1,
            cycles_per_load: 10,
            cache: CacheConfig::default(),
            attack_rounds: 200,
            seed: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MitigationReport {
    pub period_cycles: Option<u64>,
    pub write_ports: u32,
    pub loads: usize,
    pub flushes: u64,
    pub reset_cycles: u64,
    pub demand_misses_without_prefetcher: u64,
    pub prefetches_issued: u64,
    /// Prefetched lines later hit by a demand load.
    pub useful_prefetches: u64,
    pub coverage: f64,
    pub coverage_without_flush: f64,
    pub coverage_delta: f64,
    /// Success rate per variant with the prefetcher cleared on every switch.
    pub attack_success: Vec<(Variant, f64)>,
}

impl MitigationReport {
    pub fn reset_cycles_per_flush(&self) -> Option<u64> {
        (self.flushes > 0).then(|| self.reset_cycles / self.flushes)
    }
}

#[derive(Debug, Default)]
struct Run {
    misses: u64,
    issued: u64,
    useful: u64,
    flushes: u64,
    reset_cycles: u64,
}

fn replay(
    loads: &[(Address, Address)],
    cache_cfg: CacheConfig,
    prefetcher: bool,
    period: Option<u64>,
    write_ports: u32,
    cycles_per_load: u64,
) -> Result<Run, ExperimentError> {
    let mut cache = Cache::new(cache_cfg)?;
    let mut table = PrefetchTable::new();
    let mut tlb = Tlb::default();
    let mut pending: HashSet<u64> = HashSet::new();
    let mut run = Run::default();
    let mut next_flush = period;
    for (i, &(ip, paddr)) in loads.iter().enumerate() {
        let now = i as u64 * cycles_per_load;
        if let Some(p) = period {
            while next_flush.is_some_and(|due| now >= due) {
                run.reset_cycles += table.reset(write_ports)?;
                run.flushes += 1;
                next_flush = next_flush.map(|d| d + p);
            }
        }
        let request = if prefetcher {
            table.observe_load(&mut tlb, ip, paddr, now).request
        } else {
            None
        };
        let line = paddr.line_index();
        if cache_cfg.is_hit(cache.access(paddr)) {
            if pending.remove(&line) {
                run.useful += 1;
            }
        } else {
            run.misses += 1;
            pending.remove(&line);
        }
        if let Some(req) = request {
            run.issued += 1;
            if !cache.is_resident(req.target) {
                pending.insert(req.target.line_index());
            }
            cache.install_prefetch(&req);
        }
    }
    Ok(run)
}

/// Replays the workload without a prefetcher, with one, and with one that is
/// cleared every `period_cycles`, then checks that the flushing also stops the
/// cross-domain attacks.
pub fn mitigation_eval(cfg: &MitigationConfig) -> Result<MitigationReport, ExperimentError> {
    if cfg.write_ports == 0 {
        return Err(ExperimentError::BadParameter(
            "write_ports must be at least 1".into(),
        ));
    }
    let reset = (TABLE_ENTRIES as u64).div_ceil(u64::from(cfg.write_ports));
    if let Some(p) = cfg.period_cycles {
        if p < reset {
            return Err(ExperimentError::PeriodTooShort { period: p, reset });
        }
    }
    let loads = cfg.workload.loads()?;
    let run = |prefetch, period| {
        replay(
            &loads,
            cfg.cache,
            prefetch,
            period,
            cfg.write_ports,
            cfg.cycles_per_load,
        )
    };
    let baseline = run(false, None)?;
    let unflushed = run(true, None)?;
    let flushed = run(true, cfg.period_cycles)?;
    let coverage = |r: &Run| {
        if baseline.misses == 0 {
            0.0
        } else {
            r.useful as f64 / baseline.misses as f64
        }
    };
    let mut attack_success = Vec::new();
    if cfg.attack_rounds > 0 {
        for variant in [Variant::CrossProcess, Variant::UserKernel] {
            let mut a =
                AttackConfig::new(variant, Channel::FlushReload, cfg.attack_rounds, cfg.seed);
            a.flush_policy = FlushPolicy::FlushOnSwitch;
            a.write_ports = cfg.write_ports;
            a.cache = cfg.cache;
            attack_success.push((variant, run_attack(&a)?.success_rate()));
        }
    }
    Ok(MitigationReport {
        period_cycles: cfg.period_cycles,
        write_ports: cfg.write_ports,
        loads: loads.len(),
        flushes: flushed.flushes,
        reset_cycles: flushed.reset_cycles,
        demand_misses_without_prefetcher: baseline.misses,
        prefetches_issued: flushed.issued,
        useful_prefetches: flushed.useful,
        coverage: coverage(&flushed),
        coverage_without_flush: coverage(&unflushed),
        coverage_delta: coverage(&unflushed) - coverage(&flushed),
        attack_success,
    })
}
