//! Command-line front end. Settings resolve as flag, then `--config` file
//! entry, then `AFTERIMAGE_SEED` (seed only), then the built-in default.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::cache::CacheConfig;
use crate::experiments::{
    self, mitigation_eval, period_from_micros, run_attack, AttackConfig, Channel, ExperimentError,
    MitigationConfig, NoiseModel, Variant, Workload, DEFAULT_CLOCK_GHZ,
};
use crate::oracle::fuzz_equivalence;
use crate::programs::FlushPolicy;
use crate::report::{self, Table};

pub const SEED_ENV: &str = "AFTERIMAGE_SEED";
const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Parser)]
#[command(
    name = "ipstride",
    version,
    about = "IP-stride prefetcher side-channel simulator"
)]
pub struct Cli {
    /// key=value file supplying any option not given on the command line.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for CSV output [default: results].
    #[arg(long, global = true, value_name = "DIR")]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub cache: CacheArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CacheArgs {
    #[arg(long, global = true)]
    pub cache_slices: Option<usize>,
    #[arg(long, global = true)]
    pub cache_sets: Option<usize>,
    #[arg(long, global = true)]
    pub cache_ways: Option<usize>,
    #[arg(long, global = true)]
    pub hit_latency: Option<u64>,
    #[arg(long, global = true)]
    pub miss_latency: Option<u64>,
    #[arg(long, global = true)]
    pub threshold: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Indexing,
    Confstride,
    Page,
    Entries,
    Replacement,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rerun the reverse-engineering microbenchmarks and check their verdicts.
    Reveng {
        #[arg(long, value_enum)]
        which: Option<Which>,
    },
    /// Leak a secret branch direction through the prefetcher.
    Attack {
        #[arg(long)]
        variant: Option<u8>,
        /// prime_probe, flush_reload or status_probe.
        #[arg(long)]
        channel: Option<String>,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long, value_name = "P")]
        noise_evict: Option<f64>,
        #[arg(long, value_name = "P")]
        noise_load: Option<f64>,
        #[arg(long)]
        next_line_noise: bool,
        #[arg(long)]
        noise_seed: Option<u64>,
        /// Clear the prefetcher on every context switch.
        #[arg(long)]
        flush_on_switch: bool,
        #[arg(long)]
        write_ports: Option<u32>,
        /// Reload in order from a single ordinary load instruction.
        #[arg(long)]
        careless_observer: bool,
    },
    /// Measure the prefetch coverage lost to periodic flushing.
    Mitigate {
        #[arg(long, value_name = "X")]
        period_us: Option<f64>,
        #[arg(long)]
        clock_ghz: Option<f64>,
        #[arg(long)]
        write_ports: Option<u32>,
        /// ip_hex,vaddr_hex,domain_id lines instead of the synthetic workload.
        #[arg(long, value_name = "FILE")]
        trace: Option<PathBuf>,
        #[arg(long)]
        loads: Option<usize>,
        #[arg(long)]
        attack_rounds: Option<usize>,
    },
    /// Fuzz the prefetch table against the reference algorithm.
    Oracle {
        #[arg(long)]
        sequences: Option<usize>,
        /// Number of consecutive seeds starting at --seed.
        #[arg(long)]
        seeds: Option<u64>,
    },
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Mismatch(String),
    Io(String),
}

impl CliError {
    fn code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Mismatch(_) | CliError::Io(_) => 1,
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Io(e) => CliError::Io(e.to_string()),
            ExperimentError::Unsupported { .. }
            | ExperimentError::BadParameter(_)
            | ExperimentError::BadNoise { .. }
            | ExperimentError::PeriodTooShort { .. }
            | ExperimentError::Trace { .. }
            | ExperimentError::Cache(_) => CliError::Usage(e.to_string()),
            other => CliError::Mismatch(other.to_string()),
        }
    }
}

const FILE_KEYS: &[&str] = &[
    "seed",
    "out_dir",
    "cache_slices",
    "cache_sets",
    "cache_ways",
    "hit_latency",
    "miss_latency",
    "threshold",
    "which",
    "variant",
    "channel",
    "rounds",
    "noise_evict",
    "noise_load",
    "next_line_noise",
    "noise_seed",
    "flush_on_switch",
    "write_ports",
    "careless_observer",
    "period_us",
    "clock_ghz",
    "trace",
    "loads",
    "attack_rounds",
    "sequences",
    "seeds",
];

struct Settings {
    file: BTreeMap<String, String>,
    env_seed: Option<String>,
}

impl Settings {
    fn load(path: Option<&Path>, env_seed: Option<String>) -> Result<Self, CliError> {
        let mut file = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            for (n, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (k, v) = line.split_once('=').ok_or_else(|| {
                    CliError::Usage(format!("{}:{}: expected key=value", path.display(), n + 1))
                })?;
                let k = k.trim().replace('-', "_");
                if !FILE_KEYS.contains(&k.as_str()) {
                    return Err(CliError::Usage(format!(
                        "{}:{}: unknown key `{k}`",
                        path.display(),
                        n + 1
                    )));
                }
                file.insert(k, v.trim().to_string());
            }
        }
        Ok(Self { file, env_seed })
    }

    fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.file
            .get(key)
            .map(|v| {
                v.parse()
                    .map_err(|e| CliError::Usage(format!("config key {key}=`{v}`: {e}")))
            })
            .transpose()
    }

    fn or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        Ok(self.get(flag, key)?.unwrap_or(default))
    }

    fn switch(&self, flag: bool, key: &str) -> Result<bool, CliError> {
        Ok(flag || self.get(None, key)?.unwrap_or(false))
    }

    fn seed(&self, flag: Option<u64>) -> Result<u64, CliError> {
        if let Some(s) = self.get(flag, "seed")? {
            return Ok(s);
        }
        match &self.env_seed {
            Some(v) => v
                .trim()
                .parse()
                .map_err(|e| CliError::Usage(format!("{SEED_ENV}=`{v}`: {e}"))),
            None => Ok(DEFAULT_SEED),
        }
    }

    fn cache(&self, a: &CacheArgs) -> Result<CacheConfig, CliError> {
        let d = CacheConfig::default();
        let cfg = CacheConfig {
            slices: self.or(a.cache_slices, "cache_slices", d.slices)?,
            sets_per_slice: self.or(a.cache_sets, "cache_sets", d.sets_per_slice)?,
            associativity: self.or(a.cache_ways, "cache_ways", d.associativity)?,
            hit_latency: self.or(a.hit_latency, "hit_latency", d.hit_latency)?,
            miss_latency: self.or(a.miss_latency, "miss_latency", d.miss_latency)?,
            threshold: self.or(a.threshold, "threshold", d.threshold)?,
        };
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }
}

struct Ctx {
    out_dir: PathBuf,
    seed: u64,
    cache: CacheConfig,
}

impl Ctx {
    fn save(&self, name: &str, mut table: Table) -> Result<PathBuf, CliError> {
        if !table.header.iter().any(|(k, _)| k == "seed") {
            table
                .header
                .insert(0, ("seed".to_string(), self.seed.to_string()));
        }
        if !table.header.iter().any(|(k, _)| k == "cache_slices") {
            table.cache_meta(&self.cache);
        }
        let path = self.out_dir.join(name);
        table
            .save(&path)
            .map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }
}

/// Parses `args` (program name first) and runs the chosen subcommand,
/// returning the process exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli, std::env::var(SEED_ENV).ok()) {
        Ok(()) => 0,
        Err(e) => {
            match &e {
                CliError::Usage(m) => eprintln!("error: {m}\n\nRun with --help for usage."),
                CliError::Mismatch(m) | CliError::Io(m) => eprintln!("error: {m}"),
            }
            e.code()
        }
    }
}

fn run(cli: Cli, env_seed: Option<String>) -> Result<(), CliError> {
    let settings = Settings::load(cli.config.as_deref(), env_seed)?;
    let ctx = Ctx {
        out_dir: settings.or(cli.out_dir, "out_dir", PathBuf::from("results"))?,
        seed: settings.seed(cli.seed)?,
        cache: settings.cache(&cli.cache)?,
    };
    match cli.command {
        Command::Reveng { which } => {
            let which = settings.or(
                which.map(|w| format!("{w:?}").to_lowercase()),
                "which",
                "all".into(),
            )?;
            let which = Which::from_str(&which, true).map_err(CliError::Usage)?;
            reveng(&ctx, which)
        }
        Command::Attack {
            variant,
            channel,
            rounds,
            noise_evict,
            noise_load,
            next_line_noise,
            noise_seed,
            flush_on_switch,
            write_ports,
            careless_observer,
        } => {
            let variant = Variant::try_from(settings.or(variant, "variant", 1u8)?)?;
            let channel: Channel = settings
                .or(channel, "channel", "flush_reload".to_string())?
                .parse()?;
            let mut cfg = AttackConfig::new(
                variant,
                channel,
                settings.or(rounds, "rounds", 200)?,
                ctx.seed,
            );
            cfg.cache = ctx.cache;
            cfg.noise = NoiseModel {
                p_evict: settings.or(noise_evict, "noise_evict", 0.0)?,
                p_extra_load: settings.or(noise_load, "noise_load", 0.0)?,
                next_line_noise: settings.switch(next_line_noise, "next_line_noise")?,
                seed: settings.or(noise_seed, "noise_seed", ctx.seed)?,
            };
            if settings.switch(flush_on_switch, "flush_on_switch")? {
                cfg.flush_policy = FlushPolicy::FlushOnSwitch;
            }
            cfg.write_ports = settings.or(write_ports, "write_ports", 1)?;
            cfg.careless_observer = settings.switch(careless_observer, "careless_observer")?;
            let out = run_attack(&cfg)?;
            let path = ctx.save(
                &format!("attack_v{}_{}.csv", variant, channel),
                report::attack_table(&out),
            )?;
            println!(
                "variant {variant} via {channel}: {}/{} rounds correct (success_rate={}) -> {}",
                out.successes(),
                out.rows.len(),
                out.success_rate(),
                path.display()
            );
            Ok(())
        }
        Command::Mitigate {
            period_us,
            clock_ghz,
            write_ports,
            trace,
            loads,
            attack_rounds,
        } => {
            let clock = settings.or(clock_ghz, "clock_ghz", DEFAULT_CLOCK_GHZ)?;
            let micros = settings.or(period_us, "period_us", 10.0)?;
            if !(micros > 0.0 && clock > 0.0) {
                return Err(CliError::Usage("period and clock must be positive".into()));
            }
            let workload = match settings.get(trace, "trace")? {
                Some(path) => {
                    Workload::Trace(experiments::read_trace(&path).map_err(|e| match e {
                        ExperimentError::Io(io) => {
                            CliError::Usage(format!("cannot read {}: {io}", path.display()))
                        }
                        other => other.into(),
                    })?)
                }
                None => Workload::Synthetic {
                    loads: settings.or(loads, "loads", 200_000)?,
                    stride: 448,
                    streams: 4,
                },
            };
            let cfg = MitigationConfig {
                workload,
                period_cycles: Some(period_from_micros(micros, clock)),
                write_ports: settings.or(write_ports, "write_ports", 1)?,
                cache: ctx.cache,
                attack_rounds: settings.or(attack_rounds, "attack_rounds", 200)?,
                seed: ctx.seed,
                ..MitigationConfig::default()
            };
            let r = mitigation_eval(&cfg)?;
            let mut table = report::mitigation_table(&r);
            table.meta("period_us", micros).meta("clock_ghz", clock);
            let path = ctx.save("mitigation.csv", table)?;
            println!(
                "coverage {:.4} (without flushing {:.4}, delta {:.4}); {} flushes at {} cycles each -> {}",
                r.coverage,
                r.coverage_without_flush,
                r.coverage_delta,
                r.flushes,
                r.reset_cycles_per_flush().unwrap_or(0),
                path.display()
            );
            for (v, s) in &r.attack_success {
                println!("variant {v} with flush on switch: success_rate={s}");
            }
            if let Some((v, s)) = r.attack_success.iter().find(|(_, s)| *s > 0.05) {
                return Err(CliError::Mismatch(format!(
                    "variant {v} still succeeds {s} of the time under flush on switch"
                )));
            }
            Ok(())
        }
        Command::Oracle { sequences, seeds } => {
            let sequences = settings.or(sequences, "sequences", 100_000)?;
            let seeds = settings.or(seeds, "seeds", 1)?;
            let mut table = Table::new(&["seed", "sequences", "loads", "prefetches", "mismatches"]);
            let mut first = None;
            for seed in ctx.seed..ctx.seed + seeds {
                let r = fuzz_equivalence(seed, sequences);
                table.push(vec![
                    seed.to_string(),
                    r.sequences.to_string(),
                    r.loads.to_string(),
                    r.prefetches.to_string(),
                    r.mismatches.len().to_string(),
                ]);
                if first.is_none() {
                    first = r.mismatches.into_iter().next();
                }
            }
            let path = ctx.save("oracle.csv", table)?;
            match first {
                None => {
                    println!(
                        "no mismatches over {seeds} seed(s) x {sequences} sequences -> {}",
                        path.display()
                    );
                    Ok(())
                }
                Some(m) => Err(CliError::Mismatch(format!(
                    "seed {} sequence {} step {}: {}",
                    m.seed, m.sequence, m.step, m.detail
                ))),
            }
        }
    }
}

fn verdict(name: &str, ok: bool, failures: &mut Vec<String>) {
    println!("{name}: {}", if ok { "ok" } else { "MISMATCH" });
    if !ok {
        failures.push(name.to_string());
    }
}

fn reveng(ctx: &Ctx, which: Which) -> Result<(), CliError> {
    use experiments::*;
    let wants = |w: Which| which == Which::All || which == w;
    let cache = ctx.cache;
    let mut failures = Vec::new();

    if wants(Which::Indexing) {
        let r = rev_indexing(cache)?;
        let ok = r.triggered_offsets() == vec![r.trained_ip.ip_tag()]
            && r.bit9_flip_triggered
            && !r.bit3_flip_triggered;
        ctx.save("reveng_indexing.csv", report::indexing_table(&r))?;
        verdict("indexing", ok, &mut failures);
    }
    if wants(Which::Confstride) {
        let random = rev_conf_stride(cache, 7, 5, 4, 3, OffsetMode::Random, ctx.seed)?;
        let equal = rev_conf_stride(cache, 7, 5, 4, 3, OffsetMode::EqualsSt2, ctx.seed)?;
        let ok = random.phase2 == [Trigger::St1, Trigger::None, Trigger::St2]
            && equal.phase2 == [Trigger::St1, Trigger::St2, Trigger::St2];
        ctx.save(
            "reveng_confstride.csv",
            report::conf_stride_table(&[random, equal]),
        )?;
        verdict("confstride", ok, &mut failures);
    }
    if wants(Which::Page) {
        let mut trials = rev_page_table(cache)?;
        let got: Vec<bool> = trials.iter().map(PageTrial::triggered).collect();
        let cold = rev_page(cache, 1, PagePool::Locked, TlbState::Cold)?;
        let ok = got == [true, true, true, true, true, false, false, false]
            && !cold.first_access
            && cold.second_access;
        trials.push(cold);
        ctx.save("reveng_page.csv", report::page_table(&trials))?;
        verdict("page", ok, &mut failures);
    }
    if wants(Which::Entries) {
        let mut runs = Vec::new();
        let mut ok = true;
        for n in [24, 26, 30] {
            let alive = rev_entries(cache, n)?;
            let dead = n.saturating_sub(24);
            ok &= alive.iter().enumerate().all(|(i, &a)| a == (i >= dead));
            runs.push((n, alive));
        }
        ctx.save("reveng_entries.csv", report::entries_table(&runs))?;
        verdict("entries", ok, &mut failures);
    }
    if wants(Which::Replacement) {
        let r = rev_replacement(cache, 8, 8)?;
        let ok = r.evicted_positions() == (9..=16).collect::<Vec<_>>();
        ctx.save("reveng_replacement.csv", report::replacement_table(&r))?;
        verdict("replacement", ok, &mut failures);
    }
    println!("results in {}", ctx.out_dir.display());
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Mismatch(format!(
            "verdicts differ: {}",
            failures.join(", ")
        )))
    }
}
