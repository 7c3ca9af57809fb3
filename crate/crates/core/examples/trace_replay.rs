//! Feeds a load trace (`ip,vaddr,domain` per line) through the mitigation
//! study. Without an argument a small two-process trace is generated.

use ipstride::experiments::{mitigation_eval, parse_trace, read_trace, MitigationConfig, Workload};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let records = match std::env::args().nth(1) {
        Some(path) => read_trace(path.as_ref())?,
        None => {
            let mut text = String::from("# ip,vaddr,domain\n");
            for i in 0..50_000u64 {
                let domain = (i / 5_000) % 2;
                let ip = 0x40_1000 + 0x40 * (i % 3);
                let vaddr = 0x10_0000 * (1 + i % 3) + (i / 3) * 320;
                text += &format!("{ip:#x},{vaddr:#x},{domain}\n");
            }
            parse_trace(&text)?
        }
    };
    println!("{} loads", records.len());
    let r = mitigation_eval(&MitigationConfig {
        workload: Workload::Trace(records),
        attack_rounds: 0,
        ..MitigationConfig::default()
    })?;
    println!(
        "coverage {:.4} with flushing, {:.4} without, {} flushes",
        r.coverage, r.coverage_without_flush, r.flushes
    );
    Ok(())
}
