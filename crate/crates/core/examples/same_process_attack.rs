//! Leaks a branch direction inside one process through each of the three
//! observation channels.

use ipstride::experiments::{run_attack, AttackConfig, Channel, Variant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for channel in [
        Channel::FlushReload,
        Channel::PrimeProbe,
        Channel::StatusProbe,
    ] {
        let out = run_attack(&AttackConfig::new(Variant::SameProcess, channel, 64, 3))?;
        let leaked: String = out
            .rows
            .iter()
            .map(|r| r.inferred.to_string().chars().next().unwrap_or('?'))
            .collect();
        println!("{:<13} success {:.3}", channel.name(), out.success_rate());
        println!(
            "  secret {}",
            out.secret()
                .iter()
                .map(|&b| if b { '1' } else { '0' })
                .collect::<String>()
        );
        println!("  leaked {leaked}");
    }
    Ok(())
}
