//! Searches for a user IP that aliases a kernel load, then uses it to read a
//! secret-dependent kernel branch.

use ipstride::experiments::{run_attack, AttackConfig, Channel, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map_or(Ok(1), |s| s.parse())?;
    let out = run_attack(&AttackConfig::new(
        Variant::UserKernel,
        Channel::FlushReload,
        100,
        seed,
    ))?;
    match out.matched_ip {
        Some(ip) => println!(
            "kernel load aliased by {ip} after {} system calls",
            out.search_syscalls
        ),
        None => println!(
            "no aliasing IP found in {} system calls",
            out.search_syscalls
        ),
    }
    println!(
        "success over {} rounds: {:.3}",
        out.rows.len(),
        out.success_rate()
    );
    Ok(())
}
