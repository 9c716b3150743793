use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use slimfer::bench::{
    bench_attention, bench_distributed, bench_kv_plan, bench_throughput, AttentionBench,
    DistributedBench, KvPlan, ThroughputBench,
};
use slimfer::config::parse_model_config;
use slimfer::timing::Timing;
use slimfer::{verify, BenchError, BenchReport};
use slimfer_core::attention::Kernel;
use slimfer_core::kvcache::KvCacheSpec;
use slimfer_core::model::CacheDtype;

#[derive(Parser)]
#[command(
    name = "slimfer",
    version,
    about = "CPU transformer inference kernels: benchmarks and checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Timed repetitions.
    #[arg(long, default_value_t = 10)]
    reps: u32,
    /// Untimed repetitions before measuring.
    #[arg(long, default_value_t = 3)]
    warmup: u32,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Preset name and/or key=value overrides, e.g. `toy,layers=4,cache=int8`.
    #[arg(long, default_value = "toy")]
    config: String,
}

#[derive(Subcommand)]
enum Command {
    #[command(subcommand)]
    Bench(BenchCmd),
    /// Run every equivalence suite; exits nonzero naming failed checks.
    Verify {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Full-size sweeps instead of the quick ones.
        #[arg(long)]
        full: bool,
    },
}

#[derive(Subcommand)]
enum BenchCmd {
    /// Attention latency per input length for each kernel.
    Attention {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
        lengths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "flash,slim,naive")]
        kernels: Vec<Kernel>,
    },
    /// Decode throughput per batch size, prefill excluded.
    Throughput {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "8,16")]
        batches: Vec<usize>,
        #[arg(long, default_value_t = 32)]
        in_len: usize,
        #[arg(long, default_value_t = 32)]
        out_len: usize,
        /// Overrides the cache dtype of --config.
        #[arg(long)]
        cache: Option<String>,
        #[arg(long, default_value_t = ThroughputBench::DEFAULT_MEMORY_LIMIT)]
        memory_limit: u64,
    },
    /// Tensor-parallel decode: latency, bytes and copies per worker count.
    Distributed {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        workers: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        steps: usize,
        #[arg(long, default_value_t = 8)]
        k: usize,
        #[arg(long, default_value_t = 8)]
        prompt_len: usize,
    },
    /// KV cache size plan. Defaults to the Llama2-7B example.
    KvPlan {
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        batch: u64,
        #[arg(long, default_value_t = 1024)]
        input_len: u64,
        #[arg(long, default_value_t = 1024)]
        output_len: u64,
        #[arg(long, default_value_t = 32)]
        layers: u64,
        #[arg(long, default_value_t = 32)]
        heads: u64,
        #[arg(long, default_value_t = 128)]
        head_size: u64,
        #[arg(long, default_value_t = 2)]
        dtype_bytes: u64,
        #[arg(long, default_value_t = 4)]
        scale_bytes: u64,
        /// Parameter count for the weight-traffic line.
        #[arg(long, default_value_t = 6_738_415_616)]
        params: u64,
    },
}

fn emit(report: &BenchReport, csv: Option<&PathBuf>) -> anyhow::Result<()> {
    print!("{}", report.to_text());
    if let Some(path) = csv {
        let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
        report.write_csv(BufWriter::new(f))?;
    }
    Ok(())
}

fn run_bench(cmd: BenchCmd) -> Result<(BenchReport, Option<PathBuf>), BenchError> {
    Ok(match cmd {
        BenchCmd::Attention {
            common,
            lengths,
            kernels,
        } => {
            let cfg = parse_model_config(&common.config)?;
            let mut b = AttentionBench::for_model(
                &cfg,
                lengths,
                Timing::new(common.warmup, common.reps)?,
                common.seed,
            );
            b.kernels = kernels;
            let report = bench_attention(&b)?;
            println!(
                "{}",
                report.pivot(&["flash_ms", "slim_ms", "naive_ms", "correctness"])
            );
            (report, common.csv)
        }
        BenchCmd::Throughput {
            common,
            batches,
            in_len,
            out_len,
            cache,
            memory_limit,
        } => {
            let mut cfg = parse_model_config(&common.config)?;
            match cache.as_deref() {
                None => {}
                Some("f32") => cfg.cache_dtype = CacheDtype::F32,
                Some("int8") => cfg.cache_dtype = CacheDtype::Int8,
                Some(other) => {
                    return Err(BenchError::Config(format!(
                        "--cache must be f32 or int8, got `{other}`"
                    )))
                }
            }
            let b = ThroughputBench {
                config: cfg,
                batches,
                in_len,
                out_len,
                timing: Timing::new(common.warmup, common.reps)?,
                seed: common.seed,
                memory_limit,
            };
            (bench_throughput(&b)?, common.csv)
        }
        BenchCmd::Distributed {
            common,
            workers,
            steps,
            k,
            prompt_len,
        } => {
            let b = DistributedBench {
                config: parse_model_config(&common.config)?,
                workers,
                steps,
                k,
                prompt_len,
                timing: Timing::new(common.warmup, common.reps)?,
                seed: common.seed,
            };
            (bench_distributed(&b)?, common.csv)
        }
        BenchCmd::KvPlan {
            csv,
            batch,
            input_len,
            output_len,
            layers,
            heads,
            head_size,
            dtype_bytes,
            scale_bytes,
            params,
        } => {
            let plan = KvPlan {
                spec: KvCacheSpec {
                    batch,
                    input_len,
                    output_len,
                    layers,
                    n_head: heads,
                    head_size,
                    dtype_bytes,
                },
                params,
                scale_bytes,
            };
            (bench_kv_plan(&plan)?, csv)
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Bench(cmd) => match run_bench(cmd) {
            Ok((report, csv)) => match emit(&report, csv.as_ref()) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e) => {
                    eprintln!("error: {e:#}");
                    ExitCode::from(1)
                }
            },
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(match e {
                    BenchError::Gate { .. } => 2,
                    _ => 1,
                })
            }
        },
        Command::Verify { seed, full } => {
            let checks = verify::run_all(seed, !full);
            for c in &checks {
                println!("{}", c.line());
            }
            let failed: Vec<&str> = checks
                .iter()
                .filter(|c| !c.passed)
                .map(|c| c.name)
                .collect();
            if failed.is_empty() {
                ExitCode::SUCCESS
            } else {
                eprintln!("failed checks: {}", failed.join(", "));
                ExitCode::from(2)
            }
        }
    }
}
