use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ExperimentError, NoiseModel};
use crate::address::{Address, LINES_PER_PAGE, LINE_SIZE};
use crate::cache::{CacheConfig, MinimalEvictionSet};
use crate::machine::Machine;
use crate::programs::{
    build_gadget, build_kernel_syscall, build_victim, ip_matching_groups, training_offsets,
    AddrExpr, DomainId, DomainKind, Domains, FlushPolicy, GadgetSpec, GroupLayout, KernelSpec,
    Program, SecretSource, Simulator, Step, VictimSpec,
};
use crate::sidechannel::{
    detect_stride, eviction_sets_for_page, flush_reload, prefetcher_status_probe_with, prime,
    probe, Observer, ReloadOrder, StrideDetection, TrainedProbe,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    /// Attacker and victim share an address space.
    SameProcess,
    /// Attacker and victim are separate processes sharing a page.
    CrossProcess,
    /// The victim is a system call.
    UserKernel,
}

impl Variant {
    pub fn number(self) -> u8 {
        match self {
            Variant::SameProcess => 1,
            Variant::CrossProcess => 2,
            Variant::UserKernel => 3,
        }
    }
}

impl TryFrom<u8> for Variant {
    type Error = ExperimentError;

    fn try_from(n: u8) -> Result<Self, Self::Error> {
        match n {
            1 => Ok(Variant::SameProcess),
            2 => Ok(Variant::CrossProcess),
            3 => Ok(Variant::UserKernel),
            _ => Err(ExperimentError::BadParameter(format!(
                "variant must be 1, 2 or 3, got {n}"
            ))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.number())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Channel {
    PrimeProbe,
    FlushReload,
    StatusProbe,
}

impl Channel {
    pub const ALL: [Channel; 3] = [
        Channel::PrimeProbe,
        Channel::FlushReload,
        Channel::StatusProbe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Channel::PrimeProbe => "prime_probe",
            Channel::FlushReload => "flush_reload",
            Channel::StatusProbe => "status_probe",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Channel {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Channel::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| {
                ExperimentError::BadParameter(format!(
                    "unknown channel `{s}` (expected prime_probe, flush_reload or status_probe)"
                ))
            })
    }
}

/// Cross-process and user-kernel runs disturb too many sets for
/// Prime+Probe, and only the same-process gadget keeps both trained entries
/// around for a status probe.
pub fn channel_supported(variant: Variant, channel: Channel) -> bool {
    matches!(
        (variant, channel),
        (Variant::SameProcess, _) | (_, Channel::FlushReload)
    )
}

fn supported_list(variant: Variant) -> String {
    Channel::ALL
        .into_iter()
        .filter(|&c| channel_supported(variant, c))
        .map(Channel::name)
        .collect::<Vec<_>>()
        .join(", ")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Inference {
    One,
    Zero,
    /// Evidence for both paths.
    Ambiguous,
    /// No usable evidence.
    Inconclusive,
}

impl Inference {
    pub fn bit(self) -> Option<bool> {
        match self {
            Inference::One => Some(true),
            Inference::Zero => Some(false),
            _ => None,
        }
    }
}

impl fmt::Display for Inference {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Inference::One => "1",
            Inference::Zero => "0",
            Inference::Ambiguous => "ambiguous",
            Inference::Inconclusive => "none",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoundOutcome {
    pub round: usize,
    pub truth: bool,
    /// Lines.
    pub detected_stride: Option<i64>,
    pub inferred: Inference,
    pub success: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub variant: Variant,
    pub channel: Channel,
    pub rounds: usize,
    pub seed: u64,
    pub noise: NoiseModel,
    pub flush_policy: FlushPolicy,
    pub write_ports: u32,
    pub cache: CacheConfig,
    pub if_tag: u8,
    pub else_tag: u8,
    /// Lines.
    pub stride_if: i64,
    pub stride_else: i64,
    pub kernel_tag: u8,
    pub kernel_stride: i64,
    /// Reload sequentially from one ordinary load instruction.
    pub careless_observer: bool,
}

impl AttackConfig {
    pub fn new(variant: Variant, channel: Channel, rounds: usize, seed: u64) -> Self {
        Self {
            variant,
            channel,
            rounds,
            seed,
            noise: NoiseModel::none(),
            flush_policy: FlushPolicy::None,
            write_ports: 1,
            cache: CacheConfig::default(),
            if_tag: 0xA0,
            else_tag: 0xB4,
            stride_if: 7,
            stride_else: 13,
            kernel_tag: 0x30,
            kernel_stride: 11,
            careless_observer: false,
        }
    }

    /// Strides the attacker looks for, in lines.
    pub fn candidates(&self) -> Vec<i64> {
        match self.variant {
            Variant::UserKernel => vec![self.kernel_stride],
            _ => vec![self.stride_if, self.stride_else],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    pub config: AttackConfig,
    pub rows: Vec<RoundOutcome>,
    /// Prefetches issued from entries trained in another domain.
    pub cross_domain_triggers: usize,
    /// User-kernel only: the user IP found to share the kernel load's tag.
    pub matched_ip: Option<Address>,
    /// User-kernel only: system calls spent finding it.
    pub search_syscalls: usize,
}

impl AttackOutcome {
    pub fn successes(&self) -> usize {
        self.rows.iter().filter(|r| r.success).count()
    }

    pub fn success_rate(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.successes() as f64 / self.rows.len() as f64
        }
    }

    pub fn secret(&self) -> Vec<bool> {
        self.rows.iter().map(|r| r.truth).collect()
    }
}

const ATTACKER_CODE: Address = Address(0x40_0000);
const VICTIM_CODE: Address = Address(0x5612_3456_7000);
const KERNEL_CODE: Address = Address(0xffff_ffff_8120_3000);
const ARRAY_PAGE: Address = Address(0x6000_0000);
const ATTACKER_SHARED: Address = Address(0x7000_0000);
const VICTIM_SHARED: Address = Address(0x9000_0000);
const KERNEL_SHARED: Address = Address(0xffff_8880_0345_6000);
const SHARED_FRAME: u64 = 0x5_0000;
const GROUP_CODE: Address = Address(0x80_0000);

const SEARCH_GROUPS: usize = 20;
const SEARCH_PASSES: usize = 32;
const REFINE_TRIES: usize = 16;
const CONFIRM_HITS: usize = 4;

/// Per-round noise draws, independent of the probabilities they are compared
/// against, so a higher probability only ever adds events.
struct RoundNoise {
    evict: Vec<f64>,
    member: Vec<usize>,
    extra: f64,
    extra_line: u64,
}

impl RoundNoise {
    fn draw(seed: u64, round: usize, ways: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(round as u64 + 1);
        let n = LINES_PER_PAGE as usize;
        Self {
            evict: (0..n).map(|_| rng.gen()).collect(),
            member: (0..n).map(|_| rng.gen_range(0..ways)).collect(),
            extra: rng.gen(),
            extra_line: rng.gen_range(0..LINES_PER_PAGE),
        }
    }
}

struct Attack {
    cfg: AttackConfig,
    sim: Simulator,
    attacker: DomainId,
    victim: DomainId,
    /// Attacker-side virtual address of the observed page.
    attacker_page: Address,
    phys_page: Address,
    training: Program,
    target: Program,
    probes: Vec<TrainedProbe>,
    mes: Vec<MinimalEvictionSet>,
    observe_rng: ChaCha8Rng,
}

pub fn run_attack(cfg: &AttackConfig) -> Result<AttackOutcome, ExperimentError> {
    if !channel_supported(cfg.variant, cfg.channel) {
        return Err(ExperimentError::Unsupported {
            variant: cfg.variant,
            channel: cfg.channel,
            supported: supported_list(cfg.variant),
        });
    }
    cfg.noise.validate()?;
    if [cfg.stride_if, cfg.stride_else, cfg.kernel_stride]
        .iter()
        .any(|&s| s <= 0)
    {
        return Err(ExperimentError::BadParameter(
            "attack strides must be positive".into(),
        ));
    }
    let mut attack = Attack::setup(cfg)?;
    let (matched_ip, search_syscalls) = if cfg.variant == Variant::UserKernel {
        attack.search_kernel_ip()?
    } else {
        (None, 0)
    };
    let rows = (0..cfg.rounds)
        .map(|round| attack.round(round))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(AttackOutcome {
        config: cfg.clone(),
        rows,
        cross_domain_triggers: attack.sim.log().cross_domain_triggers(),
        matched_ip,
        search_syscalls,
    })
}

impl Attack {
    fn setup(cfg: &AttackConfig) -> Result<Self, ExperimentError> {
        let mut machine = Machine::new(cfg.cache)?;
        machine.adjacent_line_noise = cfg.noise.next_line_noise;
        let mut domains = Domains::new();
        let attacker = domains.add(DomainKind::UserProcess);
        let shared_phys = Address::from_frame(SHARED_FRAME);
        let (victim, attacker_page, victim_page) = match cfg.variant {
            Variant::SameProcess => (attacker, ARRAY_PAGE, ARRAY_PAGE),
            Variant::CrossProcess => {
                let v = domains.add(DomainKind::UserProcess);
                domains.share(attacker, ATTACKER_SHARED, v, VICTIM_SHARED, shared_phys, 1)?;
                (v, ATTACKER_SHARED, VICTIM_SHARED)
            }
            Variant::UserKernel => {
                let k = domains.add(DomainKind::Kernel);
                domains.share(attacker, ATTACKER_SHARED, k, KERNEL_SHARED, shared_phys, 1)?;
                (k, ATTACKER_SHARED, KERNEL_SHARED)
            }
        };
        let phys_page = domains.get(attacker)?.translate(attacker_page);
        let secret = SecretSource::random(cfg.seed, cfg.rounds);
        let line = LINE_SIZE as i64;

        let (training, target, probes) = match cfg.variant {
            Variant::UserKernel => {
                let kernel = KernelSpec {
                    ip: KERNEL_CODE + u64::from(cfg.kernel_tag),
                    shared_page: victim_page,
                    lines: 0..reach_limit(&[cfg.kernel_stride]),
                };
                // Replaced once the search has found a matching IP.
                (
                    Program::new("train", vec![]),
                    build_kernel_syscall(secret, &kernel)?,
                    vec![],
                )
            }
            _ => {
                let gadget = build_gadget(&GadgetSpec {
                    if_tag: cfg.if_tag,
                    else_tag: cfg.else_tag,
                    stride_if: cfg.stride_if * line,
                    stride_else: cfg.stride_else * line,
                    iterations: 3,
                    data_page: attacker_page,
                    code_base: ATTACKER_CODE,
                })?;
                let victim_prog = build_victim(
                    secret,
                    &VictimSpec {
                        if_ip: VICTIM_CODE + u64::from(cfg.if_tag),
                        else_ip: VICTIM_CODE + u64::from(cfg.else_tag),
                        array_page: victim_page,
                        lines: 0..reach_limit(&[cfg.stride_if, cfg.stride_else]),
                    },
                )?;
                let probes = vec![
                    TrainedProbe {
                        ip: gadget.if_ip,
                        stride: gadget.stride_if,
                        page: phys_page,
                    },
                    TrainedProbe {
                        ip: gadget.else_ip,
                        stride: gadget.stride_else,
                        page: phys_page,
                    },
                ];
                (gadget.program, victim_prog, probes)
            }
        };

        let mes = if cfg.channel == Channel::PrimeProbe {
            let pool: Vec<Address> = (1..8192u64)
                .map(|k| Address::from_frame(phys_page.page_frame() + 32 * k))
                .collect();
            eviction_sets_for_page(&machine.cache, phys_page, &pool)?
        } else {
            Vec::new()
        };

        let mut sim = Simulator::new(machine, domains, cfg.seed ^ 0x005e_ed0f_1c7a_u64);
        sim.set_flush_policy(cfg.flush_policy, cfg.write_ports);
        Ok(Self {
            cfg: cfg.clone(),
            sim,
            attacker,
            victim,
            attacker_page,
            phys_page,
            training,
            target,
            probes,
            mes,
            observe_rng: ChaCha8Rng::seed_from_u64(cfg.seed.rotate_left(17) ^ 0x0b5e_12e7),
        })
    }

    fn single_ip_training(&self, ip: Address) -> Result<Program, ExperimentError> {
        let offsets = training_offsets(self.cfg.kernel_stride * LINE_SIZE as i64, 3)?;
        let steps = offsets
            .into_iter()
            .map(|o| Step::Load {
                ip,
                addr: AddrExpr::Fixed(self.attacker_page + o),
            })
            .collect();
        Ok(Program::new("train", steps))
    }

    fn train_and_flush(&mut self, training: &mut Program) -> Result<(), ExperimentError> {
        self.sim.run_program(self.attacker, training)?;
        self.sim.flush(self.attacker_page, true)?;
        Ok(())
    }

    /// One calibration run of `training` against the system call, reporting
    /// whether the kernel stride showed up.
    fn calibration_hit(
        &mut self,
        training: &mut Program,
        syscall: &mut Program,
    ) -> Result<bool, ExperimentError> {
        self.train_and_flush(training)?;
        self.sim.run_program(self.victim, syscall)?;
        self.sim.switch_to(self.attacker)?;
        let reload = flush_reload(
            &mut self.sim.machine,
            self.phys_page,
            ReloadOrder::Shuffled,
            Observer::Untracked,
            &mut self.observe_rng,
        );
        let stride = self.cfg.kernel_stride;
        Ok(detect_stride(&reload.cached, &[stride])?.detected == Some(stride))
    }

    /// Trains groups of user loads covering every tag until one makes the
    /// system call leave the trained stride, then narrows the group down to a
    /// single load.
    fn search_kernel_ip(&mut self) -> Result<(Option<Address>, usize), ExperimentError> {
        let layout = GroupLayout {
            code_base: GROUP_CODE,
            data_base: self.attacker_page,
            page_step: 0,
            stride: self.cfg.kernel_stride * LINE_SIZE as i64,
            iterations: 3,
        };
        let mut groups = ip_matching_groups(SEARCH_GROUPS, 24, &layout)?;
        let budget = SEARCH_GROUPS * SEARCH_PASSES + 24 * REFINE_TRIES * SEARCH_PASSES;
        let kernel = KernelSpec {
            ip: KERNEL_CODE + u64::from(self.cfg.kernel_tag),
            shared_page: KERNEL_SHARED,
            lines: 0..reach_limit(&[self.cfg.kernel_stride]),
        };
        let mut syscall = build_kernel_syscall(
            SecretSource::random(self.cfg.seed ^ 0xca11, budget),
            &kernel,
        )?;
        let mut calls = 0;
        let mut found = None;
        'search: for _ in 0..SEARCH_PASSES {
            for group in &mut groups {
                calls += 1;
                if !self.calibration_hit(group, &mut syscall)? {
                    continue;
                }
                let mut members = group.load_ips();
                members.dedup();
                for ip in members {
                    let mut training = self.single_ip_training(ip)?;
                    // The kernel's own loads occasionally line up with the
                    // stride, so a member must hit on a fair share of calls.
                    let mut hits = 0;
                    for _ in 0..REFINE_TRIES {
                        calls += 1;
                        if self.calibration_hit(&mut training, &mut syscall)? {
                            hits += 1;
                            if hits == CONFIRM_HITS {
                                found = Some(ip);
                                break 'search;
                            }
                        }
                    }
                }
            }
        }
        let ip = found.unwrap_or(GROUP_CODE + u64::from(self.cfg.kernel_tag.wrapping_add(1)));
        self.training = self.single_ip_training(ip)?;
        self.probes = vec![TrainedProbe {
            ip,
            stride: self.cfg.kernel_stride * LINE_SIZE as i64,
            page: self.phys_page,
        }];
        Ok((found, calls))
    }

    fn round(&mut self, round: usize) -> Result<RoundOutcome, ExperimentError> {
        let mut training = std::mem::replace(&mut self.training, Program::new("", vec![]));
        let trained = self.train_and_flush(&mut training);
        self.training = training;
        trained?;

        let baseline = if self.cfg.channel == Channel::PrimeProbe {
            Some(prime(
                &mut self.sim.machine,
                &self.mes,
                &mut self.observe_rng,
            ))
        } else {
            None
        };

        let mut target = std::mem::replace(&mut self.target, Program::new("", vec![]));
        let ran = self.sim.run_program(self.victim, &mut target);
        self.target = target;
        ran?;
        let truth = *self
            .sim
            .log()
            .executed_path()
            .last()
            .expect("victim program always branches");
        self.sim.switch_to(self.attacker)?;

        let noise = RoundNoise::draw(self.cfg.noise.seed, round, self.cfg.cache.associativity);
        let (detected_stride, inferred) = match self.cfg.channel {
            Channel::StatusProbe => self.observe_status(&noise),
            Channel::FlushReload => {
                let observed = self.observe_reload(&noise);
                let d = detect_stride(&observed, &self.cfg.candidates())?;
                self.infer(&d)
            }
            Channel::PrimeProbe => {
                let baseline = baseline.expect("primed above");
                let observed = self.observe_probe(&noise, &baseline)?;
                let d = detect_stride(&observed, &self.cfg.candidates())?;
                self.infer(&d)
            }
        };
        Ok(RoundOutcome {
            round,
            truth,
            detected_stride,
            inferred,
            success: inferred.bit() == Some(truth),
        })
    }

    fn disturb_lines(&mut self, noise: &RoundNoise) {
        let p = self.cfg.noise;
        for (i, &u) in noise.evict.iter().enumerate() {
            if u < p.p_evict {
                let victim_line = match self.mes.get(i) {
                    Some(mes) => mes.members[noise.member[i] % mes.members.len()],
                    None => self.phys_page + i as u64 * LINE_SIZE,
                };
                self.sim.machine.flush_line(victim_line);
            }
        }
        if noise.extra < p.p_extra_load {
            self.sim
                .machine
                .timed_load(self.phys_page + noise.extra_line * LINE_SIZE);
        }
    }

    fn observe_reload(&mut self, noise: &RoundNoise) -> std::collections::BTreeSet<u64> {
        self.disturb_lines(noise);
        let (order, observer) = if self.cfg.careless_observer {
            (
                ReloadOrder::Sequential,
                Observer::Tracked(ATTACKER_CODE + 0x7C0),
            )
        } else {
            (ReloadOrder::Shuffled, Observer::Untracked)
        };
        flush_reload(
            &mut self.sim.machine,
            self.phys_page,
            order,
            observer,
            &mut self.observe_rng,
        )
        .cached
    }

    fn observe_probe(
        &mut self,
        noise: &RoundNoise,
        baseline: &crate::sidechannel::TimingVector,
    ) -> Result<std::collections::BTreeSet<u64>, ExperimentError> {
        self.disturb_lines(noise);
        let (_, map) = probe(
            &mut self.sim.machine,
            &self.mes,
            baseline,
            &mut self.observe_rng,
        )?;
        Ok(map.evicted_indices().into_iter().collect())
    }

    fn observe_status(&mut self, noise: &RoundNoise) -> (Option<i64>, Inference) {
        let p = self.cfg.noise;
        let flags = prefetcher_status_probe_with(
            &mut self.sim.machine,
            &self.probes,
            &mut self.observe_rng,
            |i, m, target| {
                if noise.evict[i] < p.p_evict {
                    m.flush_line(target);
                }
                if noise.extra < p.p_extra_load && noise.extra_line as usize % 2 == i {
                    m.timed_load(target);
                }
            },
        );
        let line = LINE_SIZE as i64;
        match (flags[0].still_triggers, flags[1].still_triggers) {
            (false, true) => (Some(self.probes[0].stride / line), Inference::One),
            (true, false) => (Some(self.probes[1].stride / line), Inference::Zero),
            _ => (None, Inference::Inconclusive),
        }
    }

    fn infer(&mut self, d: &StrideDetection) -> (Option<i64>, Inference) {
        if d.ambiguous {
            return (None, Inference::Ambiguous);
        }
        match (self.cfg.variant, d.detected) {
            (Variant::UserKernel, Some(s)) => (Some(s), Inference::One),
            (Variant::UserKernel, None) => {
                // No stride: either the branch was not taken, or the entry is
                // gone. Only a live entry supports the first reading.
                let flags = prefetcher_status_probe_with(
                    &mut self.sim.machine,
                    &self.probes,
                    &mut self.observe_rng,
                    |_, _, _| {},
                );
                if flags[0].still_triggers {
                    (None, Inference::Zero)
                } else {
                    (None, Inference::Inconclusive)
                }
            }
            (_, Some(s)) if s == self.cfg.stride_if => (Some(s), Inference::One),
            (_, Some(s)) => (Some(s), Inference::Zero),
            (_, None) => (None, Inference::Inconclusive),
        }
    }
}

/// Exclusive upper bound on victim lines such that every candidate stride
/// stays inside the page.
fn reach_limit(strides: &[i64]) -> u64 {
    let reach = strides.iter().map(|s| s.unsigned_abs()).max().unwrap_or(0);
    LINES_PER_PAGE.saturating_sub(reach).max(1)
}
