//! CSV tables with `# key=value` comment lines before and after the data.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use crate::cache::CacheConfig;
use crate::experiments::{
    AttackOutcome, ConfStrideLog, IndexingReport, MitigationReport, PageTrial, ReplacementReport,
};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<(String, String)>,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
    pub summary: Vec<(String, String)>,
}

fn bit(b: bool) -> String {
    u8::from(b).to_string()
}

impl Table {
    pub fn new(columns: &[&'static str]) -> Self {
        Self {
            columns: columns.to_vec(),
            ..Self::default()
        }
    }

    pub fn meta(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.header.push((key.to_string(), value.to_string()));
        self
    }

    pub fn cache_meta(&mut self, cache: &CacheConfig) -> &mut Self {
        self.meta("cache_slices", cache.slices)
            .meta("cache_sets_per_slice", cache.sets_per_slice)
            .meta("cache_ways", cache.associativity)
            .meta("hit_latency", cache.hit_latency)
            .meta("miss_latency", cache.miss_latency)
            .meta("threshold", cache.threshold)
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> io::Result<()> {
        for (k, v) in &self.header {
            writeln!(out, "# {k}={v}")?;
        }
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(&self.columns)?;
            for row in &self.rows {
                w.write_record(row)?;
            }
            w.flush()?;
        }
        for (k, v) in &self.summary {
            writeln!(out, "# {k}={v}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)
    }

    pub fn to_string_lossy(&self) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to memory");
        String::from_utf8_lossy(&buf).into_owned()
    }
}

pub fn indexing_table(r: &IndexingReport) -> Table {
    let mut t = Table::new(&["offset", "triggered"]);
    t.meta("trained_ip", r.trained_ip)
        .meta("stride_lines", r.stride_lines);
    for row in &r.rows {
        t.push(vec![row.offset.to_string(), bit(row.triggered)]);
    }
    t.summary
        .push(("bit9_flip_triggered".into(), bit(r.bit9_flip_triggered)));
    t.summary
        .push(("bit3_flip_triggered".into(), bit(r.bit3_flip_triggered)));
    t
}

pub fn conf_stride_table(logs: &[ConfStrideLog]) -> Table {
    let mut t = Table::new(&["st1", "st2", "offset_line", "phase", "iteration", "trigger"]);
    for log in logs {
        for (phase, seq) in [(1, &log.phase1), (2, &log.phase2)] {
            for (i, trig) in seq.iter().enumerate() {
                t.push(vec![
                    log.st1.to_string(),
                    log.st2.to_string(),
                    log.offset_line.to_string(),
                    phase.to_string(),
                    (i + 1).to_string(),
                    trig.to_string(),
                ]);
            }
        }
    }
    t
}

pub fn page_table(trials: &[PageTrial]) -> Table {
    let mut t = Table::new(&[
        "offset_pages",
        "pool",
        "tlb",
        "first_access",
        "second_access",
        "triggered",
    ]);
    for p in trials {
        t.push(vec![
            p.offset_pages.to_string(),
            p.pool.to_string(),
            p.tlb.to_string(),
            bit(p.first_access),
            bit(p.second_access),
            bit(p.triggered()),
        ]);
    }
    t
}

pub fn entries_table(runs: &[(usize, Vec<bool>)]) -> Table {
    let mut t = Table::new(&["n_ips", "position", "triggered"]);
    for (n, alive) in runs {
        for (i, &a) in alive.iter().enumerate() {
            t.push(vec![n.to_string(), (i + 1).to_string(), bit(a)]);
        }
    }
    t
}

pub fn replacement_table(r: &ReplacementReport) -> Table {
    let mut t = Table::new(&["position", "triggered"]);
    t.meta("retrained", r.retrained)
        .meta("inserted", r.inserted);
    for (i, &a) in r.alive.iter().enumerate() {
        t.push(vec![(i + 1).to_string(), bit(a)]);
    }
    let evicted: Vec<String> = r
        .evicted_positions()
        .iter()
        .map(|p| p.to_string())
        .collect();
    t.summary.push(("evicted".into(), evicted.join(" ")));
    t
}

pub fn attack_table(o: &AttackOutcome) -> Table {
    let c = &o.config;
    let mut t = Table::new(&["round", "truth", "detected_stride", "inferred", "success"]);
    t.meta("variant", c.variant)
        .meta("channel", c.channel)
        .meta("rounds", c.rounds)
        .meta("seed", c.seed)
        .meta("noise_evict", c.noise.p_evict)
        .meta("noise_load", c.noise.p_extra_load)
        .meta("next_line_noise", bit(c.noise.next_line_noise))
        .meta("noise_seed", c.noise.seed)
        .meta("flush_policy", format!("{:?}", c.flush_policy))
        .meta("write_ports", c.write_ports)
        .cache_meta(&c.cache);
    for r in &o.rows {
        t.push(vec![
            r.round.to_string(),
            bit(r.truth),
            r.detected_stride.map(|s| s.to_string()).unwrap_or_default(),
            r.inferred.to_string(),
            bit(r.success),
        ]);
    }
    if let Some(ip) = o.matched_ip {
        t.summary.push(("matched_ip".into(), ip.to_string()));
        t.summary
            .push(("search_syscalls".into(), o.search_syscalls.to_string()));
    }
    t.summary.push((
        "cross_domain_triggers".into(),
        o.cross_domain_triggers.to_string(),
    ));
    t.summary
        .push(("success_rate".into(), o.success_rate().to_string()));
    t
}

pub fn mitigation_table(r: &MitigationReport) -> Table {
    let mut t = Table::new(&["metric", "value"]);
    let period = r
        .period_cycles
        .map_or("none".to_string(), |p| p.to_string());
    t.meta("period_cycles", &period)
        .meta("write_ports", r.write_ports);
    let mut row = |k: &str, v: String| t.push(vec![k.to_string(), v]);
    row("loads", r.loads.to_string());
    row("flushes", r.flushes.to_string());
    row("reset_cycles", r.reset_cycles.to_string());
    row(
        "reset_cycles_per_flush",
        r.reset_cycles_per_flush()
            .map(|c| c.to_string())
            .unwrap_or_default(),
    );
    row(
        "demand_misses_without_prefetcher",
        r.demand_misses_without_prefetcher.to_string(),
    );
    row("prefetches_issued", r.prefetches_issued.to_string());
    row("useful_prefetches", r.useful_prefetches.to_string());
    row("coverage", r.coverage.to_string());
    row(
        "coverage_without_flush",
        r.coverage_without_flush.to_string(),
    );
    row("coverage_delta", r.coverage_delta.to_string());
    for (v, s) in &r.attack_success {
        row(
            &format!("attack_v{v}_success_flush_on_switch"),
            s.to_string(),
        );
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_table_is_header_only() {
        let mut t = Table::new(&["a", "b"]);
        t.meta("seed", 3);
        assert_eq!(t.to_string_lossy(), "# seed=3\na,b\n");
    }

    #[test]
    fn summary_follows_rows() {
        let mut t = Table::new(&["x"]);
        t.push(vec!["1".into()]);
        t.summary.push(("success_rate".into(), "1".into()));
        assert_eq!(t.to_string_lossy(), "x\n1\n# success_rate=1\n");
    }

    #[test]
    fn save_creates_directories() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b/out.csv");
        Table::new(&["x"]).save(&path).unwrap();
        assert_eq!(fs::read_to_string(path).unwrap(), "x\n");
    }
}
