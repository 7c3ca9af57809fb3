//! Builds one minimal eviction set per line of a page, then spots the line a
//! stray load touched.

use ipstride::sidechannel::{eviction_sets_for_page, prime, probe};
use ipstride::{Address, CacheConfig, Machine, LINE_SIZE};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut m = Machine::new(CacheConfig::default())?;
    let page = Address::from_frame(0x3_0000);
    let pool: Vec<Address> = (1..512u64)
        .map(|k| Address::from_frame(0x3_0000 + 32 * k))
        .collect();
    let sets = eviction_sets_for_page(&m.cache, page, &pool)?;
    println!(
        "{} eviction sets of {} lines each",
        sets.len(),
        sets[0].members.len()
    );

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let baseline = prime(&mut m, &sets, &mut rng);
    m.timed_load(page + 42 * LINE_SIZE);
    let (_, map) = probe(&mut m, &sets, &baseline, &mut rng)?;
    println!("evicted lines: {:?}", map.evicted_indices());
    Ok(())
}
