//! Cross-checks the table against a line-by-line reference model on random
//! load sequences.

use std::time::Instant;

use ipstride::oracle::fuzz_equivalence;

fn main() {
    let sequences = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(100_000);
    let start = Instant::now();
    for seed in 1..=10 {
        let r = fuzz_equivalence(seed, sequences);
        println!(
            "seed {seed:>2}: {} loads, {} prefetches, {} mismatches",
            r.loads,
            r.prefetches,
            r.mismatches.len()
        );
        for m in r.mismatches.iter().take(3) {
            println!("  sequence {} step {}: {}", m.sequence, m.step, m.detail);
        }
    }
    println!("{:.2?}", start.elapsed());
}
