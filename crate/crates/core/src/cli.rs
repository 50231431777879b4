//! The `lpat` command line. Exit codes: 0 success, 1 check failed,
//! 2 runtime or configuration error.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::archive;
use crate::bench::{run_bench, write_csv, BenchConfig};
use crate::checks::oracle::global_limit;
use crate::checks::{gradient_suite, oracle_sweep};
use crate::config::{init_threads, RunConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{DEFAULT_EPS, DEFAULT_REFINE_ABOVE};
use crate::harness::{gen_sequence, track_sequence, train_toy, write_trace, TrackResult};
use crate::model::Model;
use crate::tensor::{DType, Storable};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_ERROR: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "lpat", version, about = "Local-attention tracker toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Finite-difference check of every primitive and layer.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_EPS)]
        eps: f64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        /// Entries whose 64-bit error exceeds this are re-measured in double-double.
        #[arg(long, default_value_t = DEFAULT_REFINE_ABOVE)]
        refine_above: f64,
        /// Only run cases whose name starts with one of these prefixes.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
    /// Local attention against the dense masked oracle on random instances.
    Oracle {
        #[arg(long, default_value_t = 200)]
        trials: usize,
        #[arg(long, default_value_t = 6)]
        max_grid: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Seeds of the full-window reduction check.
        #[arg(long, default_value_t = 20)]
        limit_seeds: u64,
    },
    /// Times windowed against dense attention scores and writes CSV.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
    },
    /// Trains the toy tracker; writes trace.csv, weights.lpat and config.json.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Tracks a synthetic sequence and writes per-frame IoU as JSON.
    Track {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seq_seed: Option<u64>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value = "track.json")]
        out: PathBuf,
    },
}

/// Parses `args` and runs; clap's own exit codes apply to usage errors.
pub fn main_with<I, A>(args: I) -> i32
where
    I: IntoIterator<Item = A>,
    A: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    run(&cli.command, &mut stdout.lock())
}

pub fn run(cmd: &Command, out: &mut dyn Write) -> i32 {
    match dispatch(cmd, out) {
        Ok(passed) => {
            if passed {
                EXIT_OK
            } else {
                EXIT_FAILED
            }
        }
        Err(e) => {
            let _ = writeln!(out, "error: {e}");
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

fn dispatch(cmd: &Command, out: &mut dyn Write) -> Result<bool> {
    match cmd {
        Command::Gradcheck {
            seed,
            eps,
            tol,
            refine_above,
            only,
        } => gradcheck(*seed, *eps, *tol, *refine_above, only, out),
        Command::Oracle {
            trials,
            max_grid,
            seed,
            limit_seeds,
        } => oracle(*trials, *max_grid, *seed, *limit_seeds, out),
        Command::Bench {
            sizes,
            k,
            reps,
            out: path,
        } => bench(sizes, *k, *reps, path, out),
        Command::TrainToy {
            config,
            steps,
            out: dir,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = steps {
                cfg.harness.train.steps = *s;
            }
            init_threads(cfg.threads()?);
            match cfg.tensor.precision {
                DType::F32 => train::<f32>(&cfg, dir, out),
                DType::F64 => train::<f64>(&cfg, dir, out),
            }
        }
        Command::Track {
            weights,
            config,
            seq_seed,
            frames,
            out: path,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seq_seed {
                cfg.harness.track.seq_seed = *s;
            }
            if let Some(f) = frames {
                cfg.harness.track.frames = *f;
            }
            cfg.validate()?;
            init_threads(cfg.threads()?);
            let bytes = std::fs::read(weights)?;
            let result = match archive::peek_dtype(&bytes)? {
                Some(DType::F64) => track::<f64>(&cfg, &bytes)?,
                _ => track::<f32>(&cfg, &bytes)?,
            };
            let doc = TrackDoc {
                seq_seed: cfg.harness.track.seq_seed,
                result: &result,
            };
            std::fs::write(path, serde_json::to_string_pretty(&doc)?)?;
            writeln!(
                out,
                "tracked {} frames, mean IoU {:.4}",
                result.frames.len() + 1,
                result.mean_iou
            )?;
            writeln!(out, "wrote {}", path.display())?;
            Ok(true)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn gradcheck(
    seed: u64,
    eps: f64,
    tol: f64,
    refine_above: f64,
    only: &[String],
    out: &mut dyn Write,
) -> Result<bool> {
    if !(eps > 0.0) || !(tol >= 0.0) {
        return Err(Error::config(
            "--eps must be positive and --tol non-negative",
        ));
    }
    let mut all_passed = true;
    let mut worst: Option<(String, crate::gradcheck::Worst, f64)> = None;
    let mut ran = 0;
    for case in gradient_suite(seed) {
        if !only.is_empty() && !only.iter().any(|p| case.name.starts_with(p.as_str())) {
            continue;
        }
        ran += 1;
        let o = case.run(eps, refine_above)?;
        let r = &o.report;
        let passed = o.passed(tol);
        all_passed &= passed;
        writeln!(
            out,
            "{:<18} entries={:<6} refined={:<5} max_rel={:.3e} f64_max_rel={:.3e} fixed_grad={:.1e} {}",
            o.name,
            r.entries,
            r.refined,
            r.max_rel_error,
            r.max_rel_error_f64,
            o.fixed_grad_max,
            if passed { "PASS" } else { "FAIL" }
        )?;
        if let Some(w) = &r.worst {
            if worst.as_ref().is_none_or(|(_, _, e)| r.max_rel_error > *e) {
                worst = Some((o.name.clone(), w.clone(), r.max_rel_error));
            }
        }
    }
    if ran == 0 {
        return Err(Error::config(format!("no gradient case matches {only:?}")));
    }
    if let Some((case, w, e)) = worst {
        writeln!(
            out,
            "worst: {case} {}[{}] analytic={:.6e} numeric={:.6e} rel={:.3e}",
            w.name, w.index, w.analytic, w.numeric, e
        )?;
    }
    writeln!(
        out,
        "{} at tol {tol:e}",
        if all_passed { "PASS" } else { "FAIL" }
    )?;
    Ok(all_passed)
}

fn oracle(
    trials: usize,
    max_grid: usize,
    seed: u64,
    limit_seeds: u64,
    out: &mut dyn Write,
) -> Result<bool> {
    if max_grid == 0 {
        return Err(Error::config("--max-grid must be positive"));
    }
    let r = oracle_sweep(trials, max_grid, seed)?;
    writeln!(
        out,
        "oracle: {} trials, max |lra - oracle| = {:.3e}, max weight diff = {:.3e}",
        r.trials, r.max_output_diff, r.max_weight_diff
    )?;
    writeln!(
        out,
        "rows: {} checked, max |sum - 1| = {:.3e}, nonzero outside scope = {}",
        r.rows_checked, r.max_row_sum_err, r.outside_nonzero
    )?;
    let mut limit = 0.0f64;
    for s in 0..limit_seeds {
        let (_, d) = global_limit(seed.wrapping_add(s), max_grid)?;
        limit = limit.max(d);
    }
    let limit_ok = limit < crate::checks::oracle::ORACLE_TOL;
    if limit_seeds > 0 {
        writeln!(
            out,
            "full window vs plain attention: {limit_seeds} seeds, max diff = {limit:.3e}"
        )?;
    }
    let passed = r.passed() && limit_ok;
    if !passed {
        if let Some(w) = r.worst {
            writeln!(out, "worst instance: {}", serde_json::to_string(&w)?)?;
        }
    }
    writeln!(out, "{}", if passed { "PASS" } else { "FAIL" })?;
    Ok(passed)
}

fn bench(sizes: &[usize], k: usize, reps: usize, path: &Path, out: &mut dyn Write) -> Result<bool> {
    let cfg = BenchConfig {
        sizes: sizes.to_vec(),
        k,
        reps,
        ..BenchConfig::default()
    };
    let r = run_bench(&cfg)?;
    write_csv(path, &r.rows)?;
    for row in &r.rows {
        writeln!(
            out,
            "n={:<6} lra={:>12.0}ns global={:>14.0}ns scores={}",
            row.n, row.lra_ns, row.global_ns, row.lra_scores_counted
        )?;
    }
    writeln!(
        out,
        "log-log slope: lra {:.3}, global {:.3}",
        r.lra_slope, r.global_slope
    )?;
    writeln!(out, "max timing CV {:.1}%", r.max_cv * 100.0)?;
    writeln!(out, "wrote {}", path.display())?;
    if !r.counts_exact() {
        writeln!(out, "FAIL: score count differs from scope size")?;
        return Ok(false);
    }
    if !r.stable() {
        writeln!(out, "FAIL: timings vary by more than 20% across reps")?;
        return Ok(false);
    }
    Ok(true)
}

fn train<T: Storable>(cfg: &RunConfig, dir: &Path, out: &mut dyn Write) -> Result<bool> {
    let model = Model::new(cfg.model())?;
    let o = train_toy::<T>(&model, &cfg.harness.train, cfg.harness.seed)?;
    std::fs::create_dir_all(dir)?;
    write_trace(&dir.join("trace.csv"), &o.records)?;
    archive::save(&o.params, dir.join("weights.lpat"))?;
    std::fs::write(dir.join("config.json"), cfg.to_json()?)?;
    writeln!(
        out,
        "{} steps, eval loss {:.4} -> {:.4}",
        o.records.len(),
        o.initial_eval.total,
        o.final_eval.total
    )?;
    writeln!(out, "wrote {}", dir.display())?;
    Ok(true)
}

#[derive(Serialize)]
struct TrackDoc<'a> {
    seq_seed: u64,
    #[serde(flatten)]
    result: &'a TrackResult,
}

fn track<T: Storable>(cfg: &RunConfig, bytes: &[u8]) -> Result<TrackResult> {
    let model = Model::new(cfg.model())?;
    let params = archive::decode::<T>(bytes)?;
    let t = &cfg.harness.track;
    let seq = gen_sequence(&t.sequence(), t.seq_seed)?;
    track_sequence(&model, &params, &seq)
}
