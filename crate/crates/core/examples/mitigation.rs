//! Cost of clearing the table every 10 µs on a strided workload, for a few
//! write-port counts.

use ipstride::experiments::{mitigation_eval, MitigationConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for ports in [1, 2, 4, 8] {
        let r = mitigation_eval(&MitigationConfig {
            write_ports: ports,
            attack_rounds: if ports == 1 { 200 } else { 0 },
            ..MitigationConfig::default()
        })?;
        println!(
            "{ports} port(s): {} flushes at {} cycles, coverage {:.4} (unflushed {:.4})",
            r.flushes,
            r.reset_cycles_per_flush().unwrap_or(0),
            r.coverage,
            r.coverage_without_flush
        );
        for (v, s) in &r.attack_success {
            println!("  variant {v} under flush-on-switch: {s:.3}");
        }
    }
    Ok(())
}
