//! Runs the five microbenchmarks and prints what each one reveals about the
//! table.

use ipstride::experiments::{
    rev_conf_stride, rev_entries, rev_indexing, rev_page_table, rev_replacement, OffsetMode,
};
use ipstride::CacheConfig;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cache = CacheConfig::default();

    let idx = rev_indexing(cache)?;
    println!(
        "indexing: trained {} -> triggering low bytes {:02x?}",
        idx.trained_ip,
        idx.triggered_offsets()
    );

    for mode in [OffsetMode::Random, OffsetMode::EqualsSt2] {
        let log = rev_conf_stride(cache, 7, 5, 4, 3, mode, 1)?;
        println!("conf/stride {mode:?}: phase 2 {:?}", log.phase2);
    }

    for t in rev_page_table(cache)? {
        println!(
            "page +{} {:<9} {:<4} triggered {}",
            t.offset_pages,
            t.pool,
            t.tlb,
            t.triggered()
        );
    }

    for n in [24, 26, 30] {
        let dead = rev_entries(cache, n)?.iter().filter(|&&a| !a).count();
        println!("entries: {n} IPs -> {dead} evicted");
    }

    let r = rev_replacement(cache, 8, 8)?;
    println!("replacement: evicted positions {:?}", r.evicted_positions());
    Ok(())
}
