use std::collections::BTreeSet;

use ipstride::cache::{Cache, CacheConfig};
use ipstride::experiments::{run_attack, AttackConfig, Channel, NoiseModel, Variant};
use ipstride::programs::{
    build_gadget, build_victim, ip_matching_groups, AddrExpr, DomainKind, Domains, FlushPolicy,
    GadgetSpec, GroupLayout, Program, Schedule, SecretSource, Simulator, Step, VictimSpec,
};
use ipstride::sidechannel::{
    detect_stride, eviction_sets_for_page, flush_reload, prime, probe, Observer, ReloadOrder,
};
use ipstride::uarch::{TrainingOutcome, CONFIDENCE_MAX, MAX_STRIDE, TABLE_ENTRIES};
use ipstride::{Address, Machine, PrefetchTable, Tlb, LINE_SIZE, PAGE_SIZE};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BASE_FRAME: u64 = 0x3_0000;

/// Loads concentrated on a handful of tags, frames and strides so entries
/// get trained, mistrained, evicted and pushed across pages.
fn load_stream() -> impl Strategy<Value = Vec<(Address, Address)>> {
    let step = (
        0u64..40,
        0u64..4,
        prop_oneof![Just(0i64), Just(448), Just(-320), Just(832), -2100i64..2100],
        any::<bool>(),
    );
    (proptest::collection::vec(step, 1..200), 0u64..PAGE_SIZE).prop_map(|(steps, start)| {
        let mut cursor = [Address::from_frame(BASE_FRAME) + start; 40];
        steps
            .into_iter()
            .map(|(k, high, stride, jump)| {
                let ip = Address(0x40_0000 + high * 0x1_0000 + k * 7);
                let slot = k as usize;
                cursor[slot] = if jump {
                    Address::from_frame(BASE_FRAME + (cursor[slot].page_frame() + 1) % 8)
                        + cursor[slot].page_offset()
                } else {
                    let next = cursor[slot].offset(stride);
                    let frame = BASE_FRAME + next.page_frame().wrapping_sub(BASE_FRAME) % 8;
                    Address::from_frame(frame) + next.page_offset()
                };
                (ip, cursor[slot])
            })
            .collect()
    })
}

fn replay(loads: &[(Address, Address)], tlb_capacity: usize) -> (PrefetchTable, Vec<Option<u64>>) {
    let mut table = PrefetchTable::new();
    let mut tlb = Tlb::new(tlb_capacity);
    let requests = loads
        .iter()
        .enumerate()
        .map(|(i, &(ip, a))| {
            table
                .observe_load(&mut tlb, ip, a, i as u64)
                .request
                .map(|r| r.target.value())
        })
        .collect();
    (table, requests)
}

fn cache() -> CacheConfig {
    CacheConfig::default()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn table_fields_stay_in_range(loads in load_stream(), cap in 1usize..16) {
        let mut table = PrefetchTable::new();
        let mut tlb = Tlb::new(cap);
        for (i, &(ip, a)) in loads.iter().enumerate() {
            let before = table.clone();
            let obs = table.observe_load(&mut tlb, ip, a, i as u64);
            prop_assert!(table.occupancy() <= TABLE_ENTRIES);
            for e in table.entries() {
                prop_assert!(e.confidence <= CONFIDENCE_MAX);
                prop_assert!(i64::from(e.stride).abs() <= MAX_STRIDE);
            }
            if let TrainingOutcome::Created { slot, evicted: Some(_) } = obs.outcome {
                prop_assert!(!before.entry(slot).mru_bit);
                prop_assert_eq!(before.occupancy(), TABLE_ENTRIES);
            }
        }
    }

    #[test]
    fn prefetch_only_at_the_two_trigger_sites(loads in load_stream()) {
        let mut table = PrefetchTable::new();
        let mut tlb = Tlb::new(64);
        for (i, &(ip, a)) in loads.iter().enumerate() {
            let prior = table.entry_for_ip(ip).copied();
            let obs = table.observe_load(&mut tlb, ip, a, i as u64);
            let Some(e) = prior else {
                prop_assert!(obs.request.is_none());
                continue;
            };
            if matches!(obs.outcome, TrainingOutcome::TlbBypass { .. }) {
                prop_assert!(obs.request.is_none());
                continue;
            }
            let distance = a.distance_from(e.last_addr);
            let stride = i64::from(e.stride);
            let fires = e.confidence >= 2 || (e.confidence == 1 && distance == stride);
            let target = a.offset(stride);
            let t = target.page_frame() as i128;
            let in_reach = (0..=1).contains(&(t - a.page_frame() as i128))
                && (0..=1).contains(&(t - e.last_addr.page_frame() as i128));
            prop_assert_eq!(obs.request.map(|r| r.target), (fires && in_reach).then_some(target));
        }
    }

    #[test]
    fn prefetches_never_skip_a_page(loads in load_stream(), cap in 1usize..16) {
        let (_, requests) = replay(&loads, cap);
        for (&(_, a), r) in loads.iter().zip(requests) {
            if let Some(t) = r {
                let d = (t / PAGE_SIZE) as i128 - a.page_frame() as i128;
                prop_assert!((0..=1).contains(&d), "load {a} prefetched {t:#x}");
            }
        }
    }

    #[test]
    fn upper_ip_bits_are_invisible(loads in load_stream(), highs in proptest::collection::vec(any::<u64>(), 200)) {
        let renamed: Vec<_> = loads
            .iter()
            .zip(&highs)
            .map(|(&(ip, a), &h)| (Address((h & !0xFF) | u64::from(ip.ip_tag())), a))
            .collect();
        let (t1, r1) = replay(&loads, 64);
        let (t2, r2) = replay(&renamed, 64);
        prop_assert_eq!(r1, r2);
        prop_assert_eq!(t1, t2);
    }

    #[test]
    fn replay_is_deterministic(loads in load_stream(), cap in 1usize..16) {
        let (t1, r1) = replay(&loads, cap);
        let (t2, r2) = replay(&loads, cap);
        prop_assert_eq!(t1.digest(), t2.digest());
        prop_assert_eq!(r1, r2);
    }

    #[test]
    fn latency_is_hit_or_miss(lines in proptest::collection::vec(0u64..1 << 20, 1..300)) {
        let cfg = cache();
        let mut c = Cache::new(cfg).unwrap();
        for l in lines {
            let a = Address(l * LINE_SIZE);
            let resident = c.is_resident(a);
            let lat = c.access(a);
            prop_assert_eq!(lat, if resident { cfg.hit_latency } else { cfg.miss_latency });
            prop_assert!(c.is_resident(a));
        }
    }

    #[test]
    fn double_flush_equals_single(lines in proptest::collection::vec(0u64..4096, 1..64), victim in 0u64..4096) {
        let mut once = Cache::new(cache()).unwrap();
        for &l in &lines {
            once.access(Address(l * LINE_SIZE));
        }
        let mut twice = once.clone();
        once.flush_line(Address(victim * LINE_SIZE));
        twice.flush_line(Address(victim * LINE_SIZE));
        twice.flush_line(Address(victim * LINE_SIZE));
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn prime_probe_sees_exactly_the_touched_set(frame in 0x100u64..0x1000, line in 0u64..64, touch in any::<bool>(), seed in any::<u64>()) {
        let mut m = Machine::new(cache()).unwrap();
        let page = Address::from_frame(frame);
        let pool: Vec<Address> = (1..512u64).map(|k| Address::from_frame(frame + 32 * k)).collect();
        let mes = eviction_sets_for_page(&m.cache, page, &pool).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = prime(&mut m, &mes, &mut rng);
        if touch {
            m.timed_load(page + line * LINE_SIZE);
        }
        let (_, map) = probe(&mut m, &mes, &base, &mut rng).unwrap();
        let expected: Vec<u64> = if touch { vec![line] } else { vec![] };
        prop_assert_eq!(map.evicted_indices(), expected);
    }

    #[test]
    fn observers_leave_the_table_alone(loads in load_stream(), seed in any::<u64>(), use_probe in any::<bool>()) {
        let mut m = Machine::new(cache()).unwrap();
        for &(ip, a) in &loads {
            m.load(ip, a);
        }
        let before = m.prefetcher.clone();
        let page = Address::from_frame(BASE_FRAME);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if use_probe {
            let pool: Vec<Address> = (1..512u64).map(|k| Address::from_frame(BASE_FRAME + 32 * k)).collect();
            let mes = eviction_sets_for_page(&m.cache, page, &pool).unwrap();
            let base = prime(&mut m, &mes, &mut rng);
            probe(&mut m, &mes, &base, &mut rng).unwrap();
        } else {
            flush_reload(&mut m, page, ReloadOrder::Shuffled, Observer::Untracked, &mut rng);
        }
        prop_assert_eq!(before.digest(), m.prefetcher.digest());
    }

    #[test]
    fn neighbour_lines_never_fake_a_candidate(
        strides in proptest::collection::btree_set(5i64..20, 2..4),
        pick in any::<prop::sample::Index>(),
        line in 0u64..44,
        seed in any::<u64>(),
    ) {
        let candidates: Vec<i64> = strides.iter().copied().collect();
        let stride = candidates[pick.index(candidates.len())];
        let mut m = Machine::new(cache()).unwrap();
        m.adjacent_line_noise = true;
        let page = Address::from_frame(BASE_FRAME);
        let ip = Address(0x40_00A0);
        for k in 0..3u64 {
            m.load(ip, page + (63 - (2 - k) * stride as u64) * LINE_SIZE);
        }
        m.flush_page(page);
        m.load(ip, page + line * LINE_SIZE);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cached = flush_reload(&mut m, page, ReloadOrder::Shuffled, Observer::Untracked, &mut rng).cached;
        let d = detect_stride(&cached, &candidates).unwrap();
        prop_assert!(d.detected.is_none() || d.detected == Some(stride), "{:?} from {:?}", d.detected, cached);
    }

    #[test]
    fn domain_switch_keeps_table(loads in load_stream()) {
        let mut domains = Domains::new();
        let a = domains.add(DomainKind::UserProcess);
        let b = domains.add(DomainKind::UserProcess);
        let mut sim = Simulator::new(Machine::new(cache()).unwrap(), domains, 1);
        sim.switch_to(a).unwrap();
        for &(ip, v) in &loads {
            sim.load(ip, v).unwrap();
        }
        let before = sim.machine.prefetcher.digest();
        sim.switch_to(b).unwrap();
        prop_assert_eq!(before, sim.machine.prefetcher.digest());
    }

    #[test]
    fn gadget_fires_once_from_any_domain(
        stride_lines in prop_oneof![5i64..=31, -31i64..=-5],
        iterations in 3u32..=5,
        line in 0u64..64,
    ) {
        let else_lines = if stride_lines.abs() == 13 { 7 } else { 13 };
        let spec = GadgetSpec {
            stride_if: stride_lines * LINE_SIZE as i64,
            stride_else: else_lines * LINE_SIZE as i64,
            iterations,
            ..GadgetSpec::default()
        };
        let gadget = build_gadget(&spec);
        prop_assume!(gadget.is_ok());
        let gadget = gadget.unwrap();
        let mut domains = Domains::new();
        let attacker = domains.add(DomainKind::UserProcess);
        let victim = domains.add(DomainKind::UserProcess);
        let page = Address(0x2000_0000);
        domains.share(attacker, spec.data_page, victim, page, Address::from_frame(0x5_0000), 1).unwrap();
        let mut sim = Simulator::new(Machine::new(cache()).unwrap(), domains, 3);
        let mut program = gadget.program.clone();
        sim.run_program(attacker, &mut program).unwrap();
        let other = Address(0x5555_0000_0000 | u64::from(spec.if_tag));
        let addr = page + line * LINE_SIZE;
        let mut load = Program::new("probe", vec![Step::Load { ip: other, addr: AddrExpr::Fixed(addr) }]);
        let start = sim.log().prefetches().len();
        sim.run_program(victim, &mut load).unwrap();
        let issued = sim.log().prefetches()[start..].to_vec();
        let phys = sim.domains.get(victim).unwrap().translate(addr);
        let target = phys.offset(spec.stride_if);
        let d = target.page_frame() as i128 - phys.page_frame() as i128;
        let expected = if (0..=1).contains(&d) { vec![target] } else { vec![] };
        prop_assert_eq!(issued, expected);
    }

    #[test]
    fn groups_cover_every_tag(size in 1usize..=24) {
        let n = 256usize.div_ceil(size);
        let groups = ip_matching_groups(n, size, &GroupLayout::default()).unwrap();
        let tags: BTreeSet<u8> = groups.iter().flat_map(|g| g.load_ips()).map(|ip| ip.ip_tag()).collect();
        prop_assert_eq!(tags.len(), 256);
    }

    #[test]
    fn log_records_the_secret(bits in proptest::collection::vec(any::<bool>(), 1..40), seed in any::<u64>()) {
        let mut domains = Domains::new();
        let v = domains.add(DomainKind::UserProcess);
        let spec = VictimSpec {
            if_ip: Address(0x4010A0),
            else_ip: Address(0x4010B4),
            array_page: Address(0x6000_0000),
            lines: 0..40,
        };
        let mut program = build_victim(SecretSource::from_bits(bits.clone()), &spec).unwrap();
        let mut sim = Simulator::new(Machine::new(cache()).unwrap(), domains, seed);
        for _ in 0..bits.len() {
            sim.run_program(v, &mut program).unwrap();
        }
        prop_assert_eq!(sim.log().executed_path(), bits);
    }

    #[test]
    fn flush_on_switch_stops_every_cross_domain_trigger(
        slices in proptest::collection::vec((0u32..3, load_stream()), 1..6),
        ports in 1u32..5,
    ) {
        let mut domains = Domains::new();
        for _ in 0..3 {
            domains.add(DomainKind::UserProcess);
        }
        let mut schedule = Schedule::new(FlushPolicy::FlushOnSwitch);
        schedule.write_ports = ports;
        for (d, loads) in slices {
            let steps = loads
                .into_iter()
                .map(|(ip, a)| Step::Load { ip, addr: AddrExpr::Fixed(a) })
                .collect();
            schedule.push(d, Program::new("slice", steps));
        }
        let mut sim = Simulator::new(Machine::new(cache()).unwrap(), domains, 0);
        let log = sim.run_schedule(&mut schedule).unwrap();
        prop_assert_eq!(log.cross_domain_triggers(), 0);
    }
}

fn rate(variant: Variant, channel: Channel, noise: NoiseModel, seed: u64) -> f64 {
    let mut cfg = AttackConfig::new(variant, channel, 60, seed);
    cfg.noise = noise;
    run_attack(&cfg).unwrap().success_rate()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn more_eviction_noise_never_helps(seed in any::<u64>(), noise_seed in any::<u64>(), v in 1u8..=2) {
        let variant = Variant::try_from(v).unwrap();
        for channel in [Channel::FlushReload, Channel::StatusProbe] {
            if variant != Variant::SameProcess && channel == Channel::StatusProbe {
                continue;
            }
            let mut last = 1.0;
            for p in [0.0, 0.02, 0.05, 0.1, 0.3] {
                let r = rate(variant, channel, NoiseModel { p_evict: p, seed: noise_seed, ..NoiseModel::none() }, seed);
                prop_assert!(r <= last, "{channel} p_evict={p}: {r} > {last}");
                last = r;
            }
        }
    }

    #[test]
    fn more_stray_loads_never_help(seed in any::<u64>(), noise_seed in any::<u64>(), v in 1u8..=2) {
        let variant = Variant::try_from(v).unwrap();
        let mut last = 1.0;
        for p in [0.0, 0.1, 0.3, 0.6, 1.0] {
            let r = rate(variant, Channel::FlushReload, NoiseModel { p_extra_load: p, seed: noise_seed, ..NoiseModel::none() }, seed);
            prop_assert!(r <= last, "p_extra_load={p}: {r} > {last}");
            last = r;
        }
    }

    #[test]
    fn attacks_are_reproducible(seed in any::<u64>(), v in 1u8..=3, p in 0.0f64..0.05) {
        let mut cfg = AttackConfig::new(Variant::try_from(v).unwrap(), Channel::FlushReload, 30, seed);
        cfg.noise = NoiseModel { p_evict: p, p_extra_load: p, next_line_noise: true, seed };
        prop_assert_eq!(run_attack(&cfg).unwrap(), run_attack(&cfg).unwrap());
    }

    #[test]
    fn noiseless_attacks_are_exact(seed in any::<u64>(), v in 1u8..=3) {
        let variant = Variant::try_from(v).unwrap();
        let out = run_attack(&AttackConfig::new(variant, Channel::FlushReload, 40, seed)).unwrap();
        prop_assert_eq!(out.success_rate(), 1.0);
        for row in &out.rows {
            if row.truth || variant != Variant::UserKernel {
                prop_assert!(row.detected_stride.is_some());
            }
        }
    }
}
