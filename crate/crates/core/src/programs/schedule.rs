use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::domain::{DomainId, Domains};
use super::{AddrExpr, Program, ScheduleError, Step};
use crate::address::{Address, LINE_SIZE};
use crate::machine::Machine;
use crate::uarch::TrainingOutcome;

/// When the prefetcher is cleared.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum FlushPolicy {
    #[default]
    None,
    /// On every change of active domain.
    FlushOnSwitch,
    /// Whenever the cycle counter crosses a multiple of the period.
    Periodic(u64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EventKind {
    Load {
        ip: Address,
        vaddr: Address,
        paddr: Address,
        latency: u64,
        prefetch: Option<Address>,
        /// The prefetch came from an entry last trained in another domain.
        cross_domain: bool,
    },
    Flush {
        vaddr: Address,
        paddr: Address,
        whole_page: bool,
    },
    Branch {
        secret: bool,
    },
    ContextSwitch {
        from: Option<DomainId>,
        to: DomainId,
    },
    PrefetcherReset {
        cycles: u64,
    },
    Observe {
        label: String,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Event {
    pub time: u64,
    pub domain: Option<DomainId>,
    pub kind: EventKind,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    /// Secret bits as the branches resolved them, in order.
    pub fn executed_path(&self) -> Vec<bool> {
        self.events
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::Branch { secret } => Some(secret),
                _ => None,
            })
            .collect()
    }

    pub fn prefetches(&self) -> Vec<Address> {
        self.events
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::Load { prefetch, .. } => prefetch,
                _ => None,
            })
            .collect()
    }

    pub fn cross_domain_triggers(&self) -> usize {
        self.events
            .iter()
            .filter(|e| {
                matches!(
                    e.kind,
                    EventKind::Load {
                        cross_domain: true,
                        ..
                    }
                )
            })
            .count()
    }

    pub fn resets(&self) -> usize {
        self.events
            .iter()
            .filter(|e| matches!(e.kind, EventKind::PrefetcherReset { .. }))
            .count()
    }

    /// One row per event: `time,domain,event,ip,vaddr,paddr,latency,prefetch,cross_domain,detail`.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "time",
            "domain",
            "event",
            "ip",
            "vaddr",
            "paddr",
            "latency",
            "prefetch",
            "cross_domain",
            "detail",
        ])?;
        let hex = |a: Address| format!("{a}");
        for e in &self.events {
            let domain = e.domain.map(|d| d.to_string()).unwrap_or_default();
            let mut row = vec![e.time.to_string(), domain];
            match &e.kind {
                EventKind::Load {
                    ip,
                    vaddr,
                    paddr,
                    latency,
                    prefetch,
                    cross_domain,
                } => row.extend([
                    "load".into(),
                    hex(*ip),
                    hex(*vaddr),
                    hex(*paddr),
                    latency.to_string(),
                    prefetch.map(hex).unwrap_or_default(),
                    u8::from(*cross_domain).to_string(),
                    String::new(),
                ]),
                EventKind::Flush {
                    vaddr,
                    paddr,
                    whole_page,
                } => row.extend([
                    if *whole_page { "flush_page" } else { "flush" }.into(),
                    String::new(),
                    hex(*vaddr),
                    hex(*paddr),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                ]),
                other => {
                    let (name, detail) = match other {
                        EventKind::Branch { secret } => ("branch", u8::from(*secret).to_string()),
                        EventKind::ContextSwitch { from, to } => (
                            "switch",
                            format!(
                                "{}->{to}",
                                from.map(|f| f.to_string()).unwrap_or_else(|| "-".into())
                            ),
                        ),
                        EventKind::PrefetcherReset { cycles } => ("reset", cycles.to_string()),
                        EventKind::Observe { label } => ("observe", label.clone()),
                        _ => unreachable!(),
                    };
                    row.push(name.into());
                    row.extend(std::iter::repeat_n(String::new(), 6));
                    row.push(detail);
                }
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One time slice: `program` runs to completion in `domain`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Slice {
    pub domain: DomainId,
    pub program: Program,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Schedule {
    pub slices: Vec<Slice>,
    pub flush_policy: FlushPolicy,
    pub write_ports: u32,
}

impl Schedule {
    pub fn new(flush_policy: FlushPolicy) -> Self {
        Self {
            slices: Vec::new(),
            flush_policy,
            write_ports: 1,
        }
    }

    pub fn push(&mut self, domain: DomainId, program: Program) -> &mut Self {
        self.slices.push(Slice { domain, program });
        self
    }
}

/// A core plus the domains sharing it. Prefetcher and cache state persist
/// across slices unless the flush policy clears the prefetcher.
#[derive(Clone, Debug)]
pub struct Simulator {
    pub machine: Machine,
    pub domains: Domains,
    pub flush_policy: FlushPolicy,
    pub write_ports: u32,
    current: Option<DomainId>,
    rng: ChaCha8Rng,
    log: EventLog,
    next_periodic_flush: Option<u64>,
    // Domain that last trained the entry for each tag.
    trainer: [Option<DomainId>; 256],
}

impl Simulator {
    pub fn new(machine: Machine, domains: Domains, seed: u64) -> Self {
        Self {
            machine,
            domains,
            flush_policy: FlushPolicy::None,
            write_ports: 1,
            current: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
            log: EventLog::default(),
            next_periodic_flush: None,
            trainer: [None; 256],
        }
    }

    pub fn with_flush_policy(mut self, policy: FlushPolicy, write_ports: u32) -> Self {
        self.set_flush_policy(policy, write_ports);
        self
    }

    pub fn set_flush_policy(&mut self, policy: FlushPolicy, write_ports: u32) {
        self.flush_policy = policy;
        self.write_ports = write_ports;
        self.next_periodic_flush = match policy {
            FlushPolicy::Periodic(p) => Some(self.machine.cycle + p.max(1)),
            _ => None,
        };
    }

    pub fn current_domain(&self) -> Option<DomainId> {
        self.current
    }

    pub fn log(&self) -> &EventLog {
        &self.log
    }

    pub fn take_log(&mut self) -> EventLog {
        std::mem::take(&mut self.log)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    fn record(&mut self, kind: EventKind) {
        self.log.events.push(Event {
            time: self.machine.cycle,
            domain: self.current,
            kind,
        });
    }

    fn reset_prefetcher(&mut self) -> Result<(), ScheduleError> {
        let cycles = self.machine.reset_prefetcher(self.write_ports)?;
        self.trainer = [None; 256];
        self.record(EventKind::PrefetcherReset { cycles });
        Ok(())
    }

    /// Makes `domain` the active one, applying the flush policy on a change.
    pub fn switch_to(&mut self, domain: DomainId) -> Result<(), ScheduleError> {
        self.domains.get(domain)?;
        if self.current == Some(domain) {
            return Ok(());
        }
        let from = self.current;
        self.current = Some(domain);
        self.record(EventKind::ContextSwitch { from, to: domain });
        if from.is_some() && self.flush_policy == FlushPolicy::FlushOnSwitch {
            self.reset_prefetcher()?;
        }
        Ok(())
    }

    fn periodic_flush(&mut self) -> Result<(), ScheduleError> {
        let FlushPolicy::Periodic(period) = self.flush_policy else {
            return Ok(());
        };
        let period = period.max(1);
        while let Some(due) = self.next_periodic_flush {
            if self.machine.cycle < due {
                break;
            }
            self.reset_prefetcher()?;
            self.next_periodic_flush = Some(due + period);
        }
        Ok(())
    }

    /// A demand load issued by the active domain at virtual address `vaddr`.
    pub fn load(&mut self, ip: Address, vaddr: Address) -> Result<u64, ScheduleError> {
        self.periodic_flush()?;
        let domain = self
            .current
            .ok_or(ScheduleError::UnknownDomain(DomainId::MAX))?;
        let paddr = self.domains.get(domain)?.translate(vaddr);
        let tag = ip.ip_tag() as usize;
        let previous_trainer = self.trainer[tag];
        let result = self.machine.load(ip, paddr);
        let prefetch = result.prefetch().map(|r| r.target);
        let cross_domain = prefetch.is_some() && previous_trainer != Some(domain);
        if !matches!(
            result.observation.outcome,
            TrainingOutcome::TlbBypass { .. }
        ) {
            self.trainer[tag] = Some(domain);
        }
        self.record(EventKind::Load {
            ip,
            vaddr,
            paddr,
            latency: result.latency,
            prefetch,
            cross_domain,
        });
        Ok(result.latency)
    }

    pub fn flush(&mut self, vaddr: Address, whole_page: bool) -> Result<(), ScheduleError> {
        let domain = self
            .current
            .ok_or(ScheduleError::UnknownDomain(DomainId::MAX))?;
        let paddr = self.domains.get(domain)?.translate(vaddr);
        if whole_page {
            self.machine.flush_page(paddr);
        } else {
            self.machine.flush_line(paddr);
        }
        self.record(EventKind::Flush {
            vaddr,
            paddr,
            whole_page,
        });
        Ok(())
    }

    /// Runs `program` to completion in `domain`.
    pub fn run_program(
        &mut self,
        domain: DomainId,
        program: &mut Program,
    ) -> Result<(), ScheduleError> {
        program.validate()?;
        self.switch_to(domain)?;
        let steps = std::mem::take(&mut program.steps);
        let outcome = self.run_steps(&steps, program);
        program.steps = steps;
        outcome
    }

    fn run_steps(&mut self, steps: &[Step], program: &mut Program) -> Result<(), ScheduleError> {
        for step in steps {
            match step {
                Step::Load { ip, addr } => {
                    let vaddr = match addr {
                        AddrExpr::Fixed(a) => *a,
                        AddrExpr::RandomLine { page, lines } => {
                            let line = self.rng.gen_range(lines.clone());
                            page.page_base() + line * LINE_SIZE
                        }
                    };
                    self.load(*ip, vaddr)?;
                }
                Step::Branch { taken, not_taken } => {
                    let secret = program
                        .secret
                        .as_mut()
                        .ok_or_else(|| ScheduleError::MissingSecret(program.name.clone()))?
                        .next_bit()
                        .ok_or_else(|| ScheduleError::SecretExhausted(program.name.clone()))?;
                    self.record(EventKind::Branch { secret });
                    self.run_steps(if secret { taken } else { not_taken }, program)?;
                }
                Step::Flush(vaddr) => self.flush(*vaddr, false)?,
                Step::FlushPage(vaddr) => self.flush(*vaddr, true)?,
                Step::Observe(label) => self.record(EventKind::Observe {
                    label: label.clone(),
                }),
            }
        }
        Ok(())
    }

    /// Executes every slice in order and returns the events they produced.
    pub fn run_schedule(&mut self, schedule: &mut Schedule) -> Result<EventLog, ScheduleError> {
        for slice in &schedule.slices {
            self.domains.get(slice.domain)?;
            slice.program.validate()?;
        }
        self.set_flush_policy(schedule.flush_policy, schedule.write_ports);
        let start = self.log.events.len();
        for slice in &mut schedule.slices {
            self.run_program(slice.domain, &mut slice.program)?;
        }
        Ok(EventLog {
            events: self.log.events[start..].to_vec(),
        })
    }
}

/// Runs `schedule` on `machine` with the given domains.
pub fn run_schedule(
    schedule: &mut Schedule,
    machine: Machine,
    domains: Domains,
    seed: u64,
) -> Result<(EventLog, Machine), ScheduleError> {
    let mut sim = Simulator::new(machine, domains, seed);
    let log = sim.run_schedule(schedule)?;
    Ok((log, sim.machine))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::CacheConfig;
    use crate::programs::{
        build_gadget, build_victim, DomainKind, GadgetSpec, SecretSource, VictimSpec,
    };

    const SHARED_A: Address = Address(0x7000_0000);
    const SHARED_B: Address = Address(0x9000_0000);

    fn two_processes() -> (Domains, DomainId, DomainId) {
        let mut ds = Domains::new();
        let a = ds.add(DomainKind::UserProcess);
        let b = ds.add(DomainKind::UserProcess);
        ds.share(a, SHARED_A, b, SHARED_B, Address::from_frame(0x5_0000), 1)
            .unwrap();
        (ds, a, b)
    }

    fn machine() -> Machine {
        Machine::new(CacheConfig::default()).unwrap()
    }

    fn cross_process(policy: FlushPolicy, stride_lines: i64) -> (EventLog, Machine, Address) {
        let (ds, attacker, victim) = two_processes();
        let gadget = build_gadget(&GadgetSpec {
            stride_if: stride_lines * 64,
            data_page: SHARED_A,
            ..GadgetSpec::default()
        })
        .unwrap();
        let victim_prog = build_victim(
            SecretSource::from_bits(vec![true]),
            &VictimSpec {
                if_ip: Address(0x7f00_0000) + 0xA0,
                else_ip: Address(0x7f00_0000) + 0xB4,
                array_page: SHARED_B,
                lines: 0..40,
            },
        )
        .unwrap();
        let mut schedule = Schedule::new(policy);
        schedule
            .push(attacker, gadget.program)
            .push(
                attacker,
                Program::new("flush", vec![Step::FlushPage(SHARED_A)]),
            )
            .push(victim, victim_prog);
        let (log, m) = run_schedule(&mut schedule, machine(), ds, 3).unwrap();
        let shared = Address::from_frame(0x5_0000);
        (log, m, shared)
    }

    #[test]
    fn empty_schedule_gives_empty_log() {
        let mut s = Schedule::new(FlushPolicy::None);
        let (log, _) = run_schedule(&mut s, machine(), Domains::new(), 0).unwrap();
        assert!(log.is_empty());
    }

    #[test]
    fn unknown_domain_is_rejected() {
        let mut s = Schedule::new(FlushPolicy::None);
        s.push(5, Program::new("p", vec![]));
        let err = run_schedule(&mut s, machine(), Domains::new(), 0).unwrap_err();
        assert_eq!(err, ScheduleError::UnknownDomain(5));
    }

    #[test]
    fn victim_footprint_shows_trained_stride() {
        let (log, m, shared) = cross_process(FlushPolicy::None, 8);
        let victim_load = log
            .events
            .iter()
            .rev()
            .find_map(|e| match e.kind {
                EventKind::Load { paddr, .. } => Some(paddr),
                _ => None,
            })
            .unwrap();
        let l = victim_load.line_in_page();
        let cached: Vec<u64> = (0..64)
            .filter(|&i| m.cache.is_resident(shared + i * 64))
            .collect();
        assert_eq!(cached, vec![l, l + 8]);
        assert_eq!(log.cross_domain_triggers(), 1);
        assert_eq!(log.executed_path(), vec![true]);
    }

    #[test]
    fn flush_on_switch_stops_cross_domain_triggers() {
        let (log, _, _) = cross_process(FlushPolicy::FlushOnSwitch, 7);
        assert_eq!(log.cross_domain_triggers(), 0);
        assert!(log.prefetches().iter().all(|p| p.page_frame() != 0x5_0000));
        assert_eq!(log.resets(), 1);
    }

    #[test]
    fn switch_without_policy_keeps_table() {
        let (ds, a, b) = two_processes();
        let mut sim = Simulator::new(machine(), ds, 1);
        sim.switch_to(a).unwrap();
        sim.load(Address(0x4000A0), SHARED_A).unwrap();
        let before = sim.machine.prefetcher.clone();
        sim.switch_to(b).unwrap();
        assert_eq!(sim.machine.prefetcher, before);
    }

    #[test]
    fn periodic_policy_resets_on_schedule() {
        let (ds, a, _) = two_processes();
        let mut sim =
            Simulator::new(machine(), ds, 1).with_flush_policy(FlushPolicy::Periodic(1000), 4);
        sim.switch_to(a).unwrap();
        for i in 0..20u64 {
            sim.load(Address(0x40_0000 + i), SHARED_A + i * 64).unwrap();
        }
        // 20 misses of 200 cycles cross 3 period boundaries.
        assert_eq!(sim.log().resets(), 3);
    }

    #[test]
    fn csv_export_has_one_row_per_event() {
        let (log, _, _) = cross_process(FlushPolicy::None, 7);
        let mut out = Vec::new();
        log.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().count(), log.len() + 1);
        assert!(text.starts_with("time,domain,event"));
    }
}
