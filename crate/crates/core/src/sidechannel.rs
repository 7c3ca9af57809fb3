//! Turning cache and prefetcher state back into strides and branch outcomes.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::address::{Address, LINES_PER_PAGE, LINE_SIZE};
use crate::cache::{Cache, CacheError, MinimalEvictionSet};
use crate::machine::Machine;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SideChannelError {
    #[error("candidate stride {0} lines is not longer than 4 lines")]
    CandidateTooShort(i64),
    #[error("candidate stride {0} appears more than once")]
    DuplicateCandidate(i64),
    #[error("baseline covers {baseline} targets but {targets} were given")]
    LengthMismatch { baseline: usize, targets: usize },
    #[error(transparent)]
    Cache(#[from] CacheError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Prime,
    Probe,
    Reload,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Prime => "prime",
            Phase::Probe => "probe",
            Phase::Reload => "reload",
        })
    }
}

/// Latency per observed target (an eviction set or a line index).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TimingVector {
    pub phase: Phase,
    pub latencies: Vec<u64>,
}

impl TimingVector {
    pub fn len(&self) -> usize {
        self.latencies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latencies.is_empty()
    }
}

/// Result of a probe: the signed `prime - probe` difference per set and
/// whether its magnitude crossed the threshold.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvictionMap {
    pub tv: Vec<i64>,
    pub evicted: Vec<bool>,
}

impl EvictionMap {
    /// Indices of the evicted targets.
    pub fn evicted_indices(&self) -> Vec<u64> {
        self.evicted
            .iter()
            .enumerate()
            .filter(|(_, &e)| e)
            .map(|(i, _)| i as u64)
            .collect()
    }
}

/// One eviction set per line of `page`, drawn from the pages in `pool`.
pub fn eviction_sets_for_page(
    cache: &Cache,
    page: Address,
    pool: &[Address],
) -> Result<Vec<MinimalEvictionSet>, CacheError> {
    (0..LINES_PER_PAGE)
        .map(|line| {
            let target = page.page_base() + line * LINE_SIZE;
            let candidates = pool.iter().map(|p| p.page_base() + line * LINE_SIZE);
            cache.build_eviction_set(cache.set_of(target), cache.slice_of(target), candidates)
        })
        .collect()
}

/// Visits the members along a random cycle of successor links, so that no two
/// consecutive loads are a fixed distance apart.
fn chase<R: Rng + ?Sized>(machine: &mut Machine, members: &[Address], rng: &mut R) -> u64 {
    let mut order: Vec<usize> = (0..members.len()).collect();
    order.shuffle(rng);
    let mut next = vec![0; members.len()];
    for w in 0..order.len() {
        next[order[w]] = order[(w + 1) % order.len()];
    }
    let Some(&start) = order.first() else {
        return 0;
    };
    let mut at = start;
    let mut total = 0;
    loop {
        total += machine.timed_load(members[at]);
        at = next[at];
        if at == start {
            return total;
        }
    }
}

/// Fills every set, then times a second pass as the baseline.
pub fn prime<R: Rng + ?Sized>(
    machine: &mut Machine,
    mes_list: &[MinimalEvictionSet],
    rng: &mut R,
) -> TimingVector {
    for mes in mes_list {
        chase(machine, &mes.members, rng);
    }
    TimingVector {
        phase: Phase::Prime,
        latencies: mes_list
            .iter()
            .map(|mes| chase(machine, &mes.members, rng))
            .collect(),
    }
}

pub fn probe<R: Rng + ?Sized>(
    machine: &mut Machine,
    mes_list: &[MinimalEvictionSet],
    baseline: &TimingVector,
    rng: &mut R,
) -> Result<(TimingVector, EvictionMap), SideChannelError> {
    if baseline.len() != mes_list.len() {
        return Err(SideChannelError::LengthMismatch {
            baseline: baseline.len(),
            targets: mes_list.len(),
        });
    }
    let threshold = machine.config().threshold;
    let latencies: Vec<u64> = mes_list
        .iter()
        .map(|mes| chase(machine, &mes.members, rng))
        .collect();
    let tv: Vec<i64> = baseline
        .latencies
        .iter()
        .zip(&latencies)
        .map(|(&p, &q)| p as i64 - q as i64)
        .collect();
    let evicted = tv.iter().map(|d| d.unsigned_abs() > threshold).collect();
    Ok((
        TimingVector {
            phase: Phase::Probe,
            latencies,
        },
        EvictionMap { tv, evicted },
    ))
}

/// How the reload pass walks the page.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReloadOrder {
    /// A fresh uniform permutation of 0..63 per pass.
    Shuffled,
    Sequential,
}

/// Who issues the reload loads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Observer {
    /// Measurement loads invisible to the IP-stride prefetcher.
    Untracked,
    /// Ordinary loads from one instruction, which the prefetcher trains on.
    Tracked(Address),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reload {
    /// Line indices visited, in order.
    pub order: Vec<u64>,
    /// Latency per line index (not per visit position).
    pub timing: TimingVector,
    pub cached: BTreeSet<u64>,
}

/// Times every line of `page`; lines that come back fast were cached.
pub fn flush_reload<R: Rng + ?Sized>(
    machine: &mut Machine,
    page: Address,
    order: ReloadOrder,
    observer: Observer,
    rng: &mut R,
) -> Reload {
    let mut visit: Vec<u64> = (0..LINES_PER_PAGE).collect();
    if order == ReloadOrder::Shuffled {
        visit.shuffle(rng);
    }
    let base = page.page_base();
    let mut latencies = vec![0; LINES_PER_PAGE as usize];
    for &line in &visit {
        let addr = base + line * LINE_SIZE;
        latencies[line as usize] = match observer {
            Observer::Untracked => machine.timed_load(addr),
            Observer::Tracked(ip) => machine.load(ip, addr).latency,
        };
    }
    let cfg = *machine.config();
    let cached = latencies
        .iter()
        .enumerate()
        .filter(|(_, &l)| cfg.is_hit(l))
        .map(|(i, _)| i as u64)
        .collect();
    Reload {
        order: visit,
        timing: TimingVector {
            phase: Phase::Reload,
            latencies,
        },
        cached,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StrideDetection {
    /// Candidate strides in lines.
    pub candidates: Vec<i64>,
    /// Observed line pairs `(a, b)` with `b - a` equal to each candidate.
    pub support: Vec<Vec<(u64, u64)>>,
    pub detected: Option<i64>,
    /// Two or more candidates tie for the most support.
    pub ambiguous: bool,
}

impl StrideDetection {
    pub fn supporting_pairs(&self, stride: i64) -> &[(u64, u64)] {
        self.candidates
            .iter()
            .position(|&c| c == stride)
            .map_or(&[], |i| &self.support[i])
    }
}

pub fn validate_candidates(candidates: &[i64]) -> Result<(), SideChannelError> {
    for (i, &c) in candidates.iter().enumerate() {
        if c.abs() <= 4 {
            return Err(SideChannelError::CandidateTooShort(c));
        }
        if candidates[..i].contains(&c) {
            return Err(SideChannelError::DuplicateCandidate(c));
        }
    }
    Ok(())
}

/// Finds which candidate stride (in lines) the observed line indices of one
/// page exhibit.
pub fn detect_stride(
    observed: &BTreeSet<u64>,
    candidates: &[i64],
) -> Result<StrideDetection, SideChannelError> {
    validate_candidates(candidates)?;
    let support: Vec<Vec<(u64, u64)>> = candidates
        .iter()
        .map(|&s| {
            observed
                .iter()
                .filter_map(|&a| {
                    let b = a.checked_add_signed(s)?;
                    (b < LINES_PER_PAGE && observed.contains(&b)).then_some((a, b))
                })
                .collect()
        })
        .collect();
    let best = support.iter().map(Vec::len).max().unwrap_or(0);
    let leaders: Vec<i64> = candidates
        .iter()
        .zip(&support)
        .filter(|(_, s)| best > 0 && s.len() == best)
        .map(|(&c, _)| c)
        .collect();
    Ok(StrideDetection {
        candidates: candidates.to_vec(),
        support,
        detected: (leaders.len() == 1).then(|| leaders[0]),
        ambiguous: leaders.len() > 1,
    })
}

/// A previously trained load and the stride (bytes) it was trained with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TrainedProbe {
    pub ip: Address,
    pub stride: i64,
    /// Physical page the entry was trained on.
    pub page: Address,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StatusFlag {
    pub ip: Address,
    pub probe_addr: Address,
    pub still_triggers: bool,
}

/// Replays each trained load once at a random line of its page and checks
/// whether the line one stride further was prefetched.
pub fn prefetcher_status_probe<R: Rng + ?Sized>(
    machine: &mut Machine,
    probes: &[TrainedProbe],
    rng: &mut R,
) -> Vec<StatusFlag> {
    prefetcher_status_probe_with(machine, probes, rng, |_, _, _| {})
}

/// As [`prefetcher_status_probe`], calling `disturb(i, machine, target)`
/// between the replay of probe `i` and the timing of its target.
pub fn prefetcher_status_probe_with<R, F>(
    machine: &mut Machine,
    probes: &[TrainedProbe],
    rng: &mut R,
    mut disturb: F,
) -> Vec<StatusFlag>
where
    R: Rng + ?Sized,
    F: FnMut(usize, &mut Machine, Address),
{
    probes
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let base = p.page.page_base();
            let stride_lines = p.stride / LINE_SIZE as i64;
            let lines = if stride_lines >= 0 {
                0..(LINES_PER_PAGE as i64 - stride_lines).max(1)
            } else {
                (-stride_lines).min(LINES_PER_PAGE as i64 - 1)..LINES_PER_PAGE as i64
            };
            let line = rng.gen_range(lines) as u64;
            let probe_addr = base + line * LINE_SIZE;
            let target = probe_addr.offset(p.stride);
            machine.flush_page(base);
            machine.flush_line(target);
            machine.load(p.ip, probe_addr);
            disturb(i, machine, target);
            let latency = machine.timed_load(target);
            let still_triggers = machine.config().is_hit(latency);
            machine.flush_page(base);
            StatusFlag {
                ip: p.ip,
                probe_addr,
                still_triggers,
            }
        })
        .collect()
}
