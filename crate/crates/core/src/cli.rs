//! Command-line driver.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 numerical
//! failure (non-finite values or a gradient tolerance breach).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, GradcheckOptions};
use crate::io::{
    metrics_csv_bytes, peak_rss_bytes, save_checkpoint, save_dataset, write_json, RunManifest, RunSummary,
};
use crate::trainer::{bench_heads, compare_strategies, default_compare_grid, HeadMode, TrainConfig, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

/// Identity counts of the reference benchmark table.
pub const DEFAULT_BENCH_N: [usize; 4] = [93_431, 205_990, 411_980, 1_029_950];

#[derive(Debug, Parser)]
#[command(name = "attfc", version, about = "AttFC head: training, gradient checks, head benchmarks, ablations")]
pub struct Cli {
    /// JSON config file; fields left out take their defaults. Without it the
    /// toy setup is used.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Dotted override such as `dataset.identities=800` (repeatable).
    #[arg(long = "set", global = true, value_name = "K=V")]
    pub set: Vec<String>,
    /// Output directory for artifacts.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    pub out: PathBuf,
    /// Replaces the config's top-level `seed`
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, value_name = "INT")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train an AttFC or FC head as selected by the config's `head` field.
    Train(TrainArgs),
    /// Finite-difference check of every analytic gradient.
    Gradcheck(GradcheckArgs),
    /// FC versus container head sizes.
    Bench(BenchArgs),
    /// GCC strategies at k = 2 and a k sweep for the attention strategy.
    Compare,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Also write the generated dataset into the output directory.
    #[arg(long)]
    pub dump_dataset: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Largest feature dimension drawn.
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Largest number of center slots drawn.
    #[arg(long, default_value_t = 32)]
    pub slots: usize,
    /// Largest batch drawn.
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated identity counts.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BENCH_N)]
    pub n: Vec<usize>,
    #[arg(long, default_value_t = 0.3)]
    pub ratio: f64,
    #[arg(long, default_value_t = 512)]
    pub dim: usize,
    #[arg(long, default_value_t = 384)]
    pub batch: usize,
    /// Bytes per scalar.
    #[arg(long, default_value_t = 4)]
    pub precision_bytes: usize,
}

/// Applies `a.b.c=value` to a JSON document. The value is parsed as JSON and
/// falls back to a plain string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| Error::Config {
        field: assignment.to_string(),
        message: "override must look like key=value".into(),
    })?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config {
            field: key.to_string(),
            message: "empty path segment".into(),
        });
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(map) => map,
            _ => {
                return Err(Error::Config {
                    field: parts[..i].join("."),
                    message: "is not an object".into(),
                })
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last segment")
}

/// Config file (or the toy preset), then overrides, then `--seed`.
pub fn resolve_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<TrainConfig> {
    let mut doc = match path {
        Some(p) => {
            let bytes = fs::read(p).map_err(|source| Error::Io {
                path: p.to_path_buf(),
                source,
            })?;
            serde_json::from_slice(&bytes).map_err(|source| Error::Json {
                path: p.to_path_buf(),
                source,
            })?
        }
        None => serde_json::to_value(TrainConfig::toy()).expect("config serializes"),
    };
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    if let Some(s) = seed {
        apply_override(&mut doc, &format!("seed={s}"))?;
    }
    let cfg: TrainConfig = serde_json::from_value(doc).map_err(|e| Error::Config {
        field: "config".into(),
        message: e.to_string(),
    })?;
    cfg.validate()?;
    Ok(cfg)
}

struct Context {
    out: PathBuf,
    config_path: Option<PathBuf>,
    threads: Option<usize>,
    artifacts: Vec<String>,
}

impl Context {
    fn path(&mut self, name: &str) -> PathBuf {
        self.artifacts.push(name.to_string());
        self.out.join(name)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|source| Error::Io { path, source })
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let path = self.path(name);
        write_json(&path, value)
    }

    fn manifest(&mut self, command: &str, config: Value, seed: u64, extra: Value) -> Result<()> {
        let path = self.out.join("manifest.json");
        self.artifacts.push("manifest.json".into());
        let manifest = RunManifest {
            command: command.to_string(),
            config_path: self.config_path.as_ref().map(|p| p.display().to_string()),
            resolved_config: config,
            output_dir: self.out.display().to_string(),
            seed,
            threads: self.threads,
            artifacts: self.artifacts.clone(),
            extra,
        };
        write_json(&path, &manifest)
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numerical() {
                EXIT_NUMERICAL
            } else {
                EXIT_USAGE
            }
        }
    }
}

pub fn run(cli: Cli) -> Result<i32> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::Config {
                field: "threads".into(),
                message: "must be >= 1".into(),
            });
        }
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    fs::create_dir_all(&cli.out).map_err(|source| Error::Io {
        path: cli.out.clone(),
        source,
    })?;
    let mut ctx = Context {
        out: cli.out.clone(),
        config_path: cli.config.clone(),
        threads: cli.threads,
        artifacts: Vec::new(),
    };
    pool.install(|| match &cli.command {
        Command::Train(args) => cmd_train(&cli, args, &mut ctx),
        Command::Gradcheck(args) => cmd_gradcheck(&cli, args, &mut ctx),
        Command::Bench(args) => cmd_bench(args, &mut ctx),
        Command::Compare => cmd_compare(&cli, &mut ctx),
    })
}

fn cmd_train(cli: &Cli, args: &TrainArgs, ctx: &mut Context) -> Result<i32> {
    let cfg = resolve_config(cli.config.as_deref(), &cli.set, cli.seed)?;
    let resolved = serde_json::to_value(&cfg).expect("config serializes");
    ctx.write_json("resolved_config.json", &cfg)?;
    let start = Instant::now();
    let mut trainer = Trainer::new(cfg.clone())?;
    if args.dump_dataset {
        let path = ctx.path("dataset.json");
        save_dataset(&path, trainer.dataset())?;
    }
    let mut records = Vec::new();
    let outcome = loop {
        if trainer.is_finished() {
            break Ok(());
        }
        match trainer.step_with_metrics() {
            Ok(rec) => records.push(rec),
            Err(e) => break Err(e),
        }
    };
    ctx.write("metrics.csv", &metrics_csv_bytes(&records)?)?;
    let command = match cfg.head {
        HeadMode::Attfc => "train attfc",
        HeadMode::Fc => "train fc",
    };
    if let Err(e) = outcome {
        let path = ctx.path("diagnostic_checkpoint.json");
        save_checkpoint(&path, trainer.state())?;
        ctx.manifest(command, resolved, cfg.seed, json!({ "failed_at_step": trainer.step_index() }))?;
        eprintln!("diagnostic checkpoint written to {}", path.display());
        return Err(e);
    }
    let summary = RunSummary::from_records(command, &cfg, &records, trainer.head_params(), trainer.memory_estimate(4));
    ctx.write_json("summary.json", &summary)?;
    let ckpt = ctx.path("checkpoint.json");
    save_checkpoint(&ckpt, trainer.state())?;
    // wall time and RSS vary between runs and stay out of the asserted files
    ctx.write_json(
        "aux.json",
        &json!({
            "wall_seconds": start.elapsed().as_secs_f64(),
            "peak_rss_bytes": peak_rss_bytes(),
        }),
    )?;
    ctx.manifest(command, resolved, cfg.seed, Value::Null)?;
    println!(
        "{command}: {} steps, epoch-mean loss {:.4} -> {:.4}, verification accuracy {}",
        summary.steps,
        summary.first_epoch_mean_loss.unwrap_or(f64::NAN),
        summary.last_epoch_mean_loss.unwrap_or(f64::NAN),
        summary
            .final_verif_acc
            .map(|a| format!("{a:.4}"))
            .unwrap_or_else(|| "n/a".into()),
    );
    Ok(EXIT_OK)
}

fn cmd_gradcheck(cli: &Cli, args: &GradcheckArgs, ctx: &mut Context) -> Result<i32> {
    let opts = GradcheckOptions {
        trials: args.trials,
        max_dim: args.dim,
        max_slots: args.slots,
        max_batch: args.batch,
        seed: cli.seed.unwrap_or(0),
        ..GradcheckOptions::default()
    };
    let report = run_gradcheck(&opts)?;
    for s in &report.suites {
        println!(
            "{:<44} max rel err {:.3e}  tol {:.0e}  {}",
            s.name,
            s.max_rel_error,
            s.tolerance,
            if s.passed { "PASS" } else { "FAIL" }
        );
    }
    ctx.write_json("gradcheck.json", &report)?;
    let opts_json = serde_json::to_value(opts).expect("options serialize");
    ctx.manifest("gradcheck", opts_json, opts.seed, Value::Null)?;
    Ok(if report.all_passed() { EXIT_OK } else { EXIT_NUMERICAL })
}

pub fn bench_csv(args: &BenchArgs) -> Result<Vec<u8>> {
    let rows = bench_heads(&args.n, args.ratio, args.dim, args.batch, args.precision_bytes)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["N", "fc_params", "dcc_params", "fc_bytes", "dcc_bytes", "ratio"])?;
    for r in rows {
        w.write_record([
            r.identities.to_string(),
            r.fc_params.to_string(),
            r.dcc_params.to_string(),
            r.fc_bytes.to_string(),
            r.dcc_bytes.to_string(),
            r.ratio.to_string(),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Invalid(e.to_string()))
}

fn cmd_bench(args: &BenchArgs, ctx: &mut Context) -> Result<i32> {
    if args.precision_bytes == 0 || args.dim == 0 {
        return Err(Error::Config {
            field: "bench".into(),
            message: "dim and precision-bytes must be >= 1".into(),
        });
    }
    let bytes = bench_csv(args)?;
    print!("{}", String::from_utf8_lossy(&bytes));
    ctx.write("bench.csv", &bytes)?;
    let params = json!({
        "n": args.n,
        "ratio": args.ratio,
        "dim": args.dim,
        "batch": args.batch,
        "precision_bytes": args.precision_bytes,
    });
    ctx.manifest("bench", params, 0, Value::Null)?;
    Ok(EXIT_OK)
}

fn cmd_compare(cli: &Cli, ctx: &mut Context) -> Result<i32> {
    let cfg = resolve_config(cli.config.as_deref(), &cli.set, cli.seed)?;
    let rows = compare_strategies(&cfg, &default_compare_grid())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["strategy", "k", "seed", "verif_acc", "gcc_tcc_cos", "step_ms"])?;
    for r in &rows {
        w.write_record([
            r.strategy.name().to_string(),
            r.k.to_string(),
            r.seed.to_string(),
            r.verif_acc.to_string(),
            r.gcc_tcc_cos.to_string(),
            r.step_ms.map(|x| x.to_string()).unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Invalid(e.to_string()))?;
    print!("{}", String::from_utf8_lossy(&bytes));
    ctx.write("compare.csv", &bytes)?;
    ctx.write_json("resolved_config.json", &cfg)?;
    let row_seeds: Vec<Value> = rows
        .iter()
        .map(|r| json!({ "strategy": r.strategy.name(), "k": r.k, "seed": r.seed }))
        .collect();
    let resolved = serde_json::to_value(&cfg).expect("config serializes");
    ctx.manifest("compare", resolved, cfg.seed, json!({ "rows": row_seeds }))?;
    Ok(EXIT_OK)
}
