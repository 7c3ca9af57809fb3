use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    run_env(dir, args, None)
}

fn run_env(dir: &Path, args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ipstride"));
    cmd.current_dir(dir)
        .args(args)
        .env_remove("AFTERIMAGE_SEED");
    if let Some(s) = seed_env {
        cmd.env("AFTERIMAGE_SEED", s);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join("results").join(name)).unwrap()
}

fn data_rows(csv: &str) -> usize {
    csv.lines().filter(|l| !l.starts_with('#')).count() - 1
}

#[test]
fn attack_writes_one_row_per_round_and_a_summary() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &[
            "--seed",
            "7",
            "attack",
            "--variant",
            "1",
            "--channel",
            "flush_reload",
            "--rounds",
            "200",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(dir.path(), "attack_v1_flush_reload.csv");
    assert!(csv.contains("\nround,truth,detected_stride,inferred,success\n"));
    assert_eq!(data_rows(&csv), 200);
    assert!(csv.ends_with("# success_rate=1\n"), "{csv}");
    assert!(csv.contains("# seed=7\n"));
    assert!(csv.contains("# cache_ways=16\n"));
}

#[test]
fn same_seed_same_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = [
        "--seed",
        "11",
        "attack",
        "--variant",
        "3",
        "--rounds",
        "30",
        "--noise-evict",
        "0.02",
    ];
    assert_eq!(code(&run(a.path(), &args)), 0);
    assert_eq!(code(&run(b.path(), &args)), 0);
    let name = "attack_v3_flush_reload.csv";
    assert_eq!(read(a.path(), name), read(b.path(), name));
}

#[test]
fn unsupported_pair_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &["attack", "--variant", "2", "--channel", "prime_probe"],
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("flush_reload"));
}

#[test]
fn unknown_flag_prints_usage() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["attack", "--bogus"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert!(o.stdout.is_empty());
}

#[test]
fn zero_rounds_give_a_header_only_table() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&run(
            dir.path(),
            &["attack", "--variant", "1", "--rounds", "0"]
        )),
        0
    );
    let csv = read(dir.path(), "attack_v1_flush_reload.csv");
    assert_eq!(data_rows(&csv), 0);
}

#[test]
fn unwritable_output_fails_with_one() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("blocker"), "").unwrap();
    let o = run(
        dir.path(),
        &[
            "--out-dir",
            "blocker/sub",
            "attack",
            "--variant",
            "1",
            "--rounds",
            "2",
        ],
    );
    assert_eq!(code(&o), 1);
}

fn seed_header(dir: &Path) -> String {
    read(dir, "attack_v1_flush_reload.csv")
        .lines()
        .find(|l| l.starts_with("# seed="))
        .unwrap()
        .to_string()
}

#[test]
fn seed_precedence_flag_file_env() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    fs::write(p.join("run.cfg"), "# comment\nseed = 5\n").unwrap();
    let attack = ["attack", "--variant", "1", "--rounds", "2"];
    let with = |pre: &[&'static str]| -> Vec<&'static str> { [pre, &attack[..]].concat() };

    assert_eq!(code(&run_env(p, &with(&[]), Some("9"))), 0);
    assert_eq!(seed_header(p), "# seed=9");
    assert_eq!(
        code(&run_env(p, &with(&["--config", "run.cfg"]), Some("9"))),
        0
    );
    assert_eq!(seed_header(p), "# seed=5");
    assert_eq!(
        code(&run_env(
            p,
            &with(&["--config", "run.cfg", "--seed", "3"]),
            Some("9")
        )),
        0
    );
    assert_eq!(seed_header(p), "# seed=3");
    assert_eq!(code(&run(p, &with(&[]))), 0);
    assert_eq!(seed_header(p), "# seed=1");
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.cfg"), "sede=5\n").unwrap();
    let o = run(
        dir.path(),
        &["--config", "bad.cfg", "oracle", "--sequences", "10"],
    );
    assert_eq!(code(&o), 2);
}

#[test]
fn reveng_all_writes_five_tables() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["reveng", "--which", "all"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    for name in ["indexing", "confstride", "page", "entries", "replacement"] {
        assert!(dir
            .path()
            .join(format!("results/reveng_{name}.csv"))
            .exists());
    }
    let indexing = read(dir.path(), "reveng_indexing.csv");
    assert_eq!(data_rows(&indexing), 256);
    assert!(indexing.contains("\noffset,triggered\n"));
}

#[test]
fn mitigate_and_oracle_succeed() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(
        dir.path(),
        &[
            "mitigate",
            "--period-us",
            "10",
            "--write-ports",
            "2",
            "--loads",
            "20000",
            "--attack-rounds",
            "20",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(dir.path(), "mitigation.csv");
    assert!(csv.contains("\nreset_cycles_per_flush,12\n"), "{csv}");

    let o = run(
        dir.path(),
        &["oracle", "--sequences", "2000", "--seeds", "2"],
    );
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("results/oracle.csv").exists());
}

#[test]
fn mitigate_reads_a_trace() {
    let dir = tempfile::tempdir().unwrap();
    let mut trace = String::from("# ip,vaddr,domain\n");
    for i in 0..400u64 {
        trace += &format!("0x4010a0,{:#x},{}\n", 0x10_0000 + i * 448, i % 2);
    }
    fs::write(dir.path().join("t.csv"), trace).unwrap();
    let o = run(
        dir.path(),
        &[
            "mitigate",
            "--trace",
            "t.csv",
            "--period-us",
            "1",
            "--attack-rounds",
            "0",
        ],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read(dir.path(), "mitigation.csv").contains("\nloads,400\n"));

    fs::write(dir.path().join("bad.csv"), "0x1,zz,0\n").unwrap();
    let o = run(
        dir.path(),
        &["mitigate", "--trace", "bad.csv", "--attack-rounds", "0"],
    );
    assert_ne!(code(&o), 0);
}
