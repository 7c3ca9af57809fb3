//! Success rate of every supported attack as unrelated evictions become more
//! likely. Writes the grid to `noise_sweep.csv`.

use ipstride::experiments::{
    channel_supported, run_attack, AttackConfig, Channel, NoiseModel, Variant,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut out = csv::Writer::from_path("noise_sweep.csv")?;
    out.write_record(["variant", "channel", "p_evict", "success_rate"])?;
    let levels = [0.0, 0.005, 0.01, 0.02, 0.05, 0.1];
    for variant in [
        Variant::SameProcess,
        Variant::CrossProcess,
        Variant::UserKernel,
    ] {
        for channel in [
            Channel::FlushReload,
            Channel::PrimeProbe,
            Channel::StatusProbe,
        ] {
            if !channel_supported(variant, channel) {
                continue;
            }
            let mut line = format!("v{variant} {:<13}", channel.name());
            for p in levels {
                let mut cfg = AttackConfig::new(variant, channel, 200, 1);
                cfg.noise = NoiseModel {
                    p_evict: p,
                    seed: 1,
                    ..NoiseModel::none()
                };
                let rate = run_attack(&cfg)?.success_rate();
                line += &format!(" {rate:.3}");
                out.write_record([
                    variant.to_string(),
                    channel.to_string(),
                    p.to_string(),
                    rate.to_string(),
                ])?;
            }
            println!("{line}");
        }
    }
    out.flush()?;
    Ok(())
}
