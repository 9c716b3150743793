use std::process::Command;

use slimfer::bench::{bench_distributed, bench_kv_plan, DistributedBench, KvPlan};
use slimfer::report::BenchReport;
use slimfer::timing::Timing;
use slimfer_core::model::ModelConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slimfer"))
}

fn untimed(r: &BenchReport) -> Vec<(String, String, String)> {
    r.rows
        .iter()
        .filter(|row| row.iterations == 0)
        .map(|row| {
            (
                row.parameters.clone(),
                row.metric.clone(),
                row.value.to_string(),
            )
        })
        .collect()
}

#[test]
fn non_timing_columns_are_reproducible() {
    let b = DistributedBench {
        config: ModelConfig::toy(),
        workers: vec![1, 2, 4],
        steps: 4,
        k: 8,
        prompt_len: 6,
        timing: Timing { warmup: 0, reps: 1 },
        seed: 11,
    };
    let a = bench_distributed(&b).unwrap();
    let c = bench_distributed(&b).unwrap();
    assert_eq!(untimed(&a), untimed(&c));
    assert_eq!(a.footers, c.footers);
}

#[test]
fn real_report_round_trips_through_csv() {
    let r = bench_kv_plan(&KvPlan::llama2_7b()).unwrap();
    let back = BenchReport::read_csv(r.to_csv_string().as_bytes()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn kv_plan_command_writes_csv() {
    let dir = std::env::temp_dir().join(format!("slimfer-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("plan.csv");
    let out = bin()
        .args(["bench", "kv-plan", "--dtype-bytes", "1", "--csv"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success());
    let report = BenchReport::read_csv(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(report.rows[0].value, 137_438_953_472.0);
    std::fs::remove_dir_all(dir).ok();
}

#[test]
fn constraint_violation_exits_nonzero_with_name() {
    let out = bin()
        .args(["bench", "distributed", "--workers", "3"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("n_head"), "{err}");

    let out = bin()
        .args(["bench", "throughput", "--out-len", "0"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("out_len"));
}

#[test]
fn quick_verify_passes() {
    let out = bin().arg("verify").output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 9);
}
