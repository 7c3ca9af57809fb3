//! Drives the history table by hand: train one load, watch it fire, then
//! break its stride.

use ipstride::uarch::TrainingOutcome;
use ipstride::{Address, PrefetchTable, Tlb, LINE_SIZE};

fn main() {
    let mut table = PrefetchTable::new();
    let mut tlb = Tlb::default();
    let ip = Address(0x40_10A0);
    let page = Address::from_frame(0x3_0000);
    let stride = 7 * LINE_SIZE;

    for (cycle, k) in [0u64, 1, 2, 3].into_iter().enumerate() {
        let addr = page + k * stride;
        let obs = table.observe_load(&mut tlb, ip, addr, cycle as u64);
        let e = table.entry_for_ip(ip).unwrap();
        println!(
            "load {addr} -> prefetch {:<12} stride {:>4} confidence {}",
            obs.request
                .map_or("-".to_string(), |r| r.target.to_string()),
            e.stride,
            e.confidence
        );
    }

    // Same low byte, different upper bits: the same entry answers.
    let alias = Address(0x7F_F0A0);
    let obs = table.observe_load(&mut tlb, alias, page + 4 * stride, 4);
    println!("alias {alias} fires: {}", obs.request.is_some());

    let obs = table.observe_load(&mut tlb, ip, page + 4 * stride + 5 * LINE_SIZE, 5);
    if let TrainingOutcome::Updated { slot } = obs.outcome {
        let e = table.entry(slot);
        println!(
            "after a mismatch: prefetch {} stride {} confidence {}",
            obs.request.is_some(),
            e.stride,
            e.confidence
        );
    }
}
