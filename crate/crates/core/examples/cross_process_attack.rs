//! An attacker process reads another process's branch through the shared
//! prefetcher, then fails once the table is cleared on every switch.

use ipstride::experiments::{run_attack, AttackConfig, Channel, Variant};
use ipstride::programs::FlushPolicy;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut cfg = AttackConfig::new(Variant::CrossProcess, Channel::FlushReload, 200, 5);
    let open = run_attack(&cfg)?;
    println!(
        "no mitigation:    success {:.3}, cross-domain triggers {}",
        open.success_rate(),
        open.cross_domain_triggers
    );

    cfg.flush_policy = FlushPolicy::FlushOnSwitch;
    let closed = run_attack(&cfg)?;
    println!(
        "flush on switch:  success {:.3}, cross-domain triggers {}",
        closed.success_rate(),
        closed.cross_domain_triggers
    );
    Ok(())
}
