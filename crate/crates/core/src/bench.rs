//! Timing of windowed versus dense attention scores.

use std::hint::black_box;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::build_scope;
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Largest tolerated coefficient of variation across repetitions.
pub const MAX_CV: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    /// Token counts; each must be a perfect square.
    pub sizes: Vec<usize>,
    pub k: usize,
    pub reps: usize,
    /// Query/key width.
    pub dim: usize,
    /// Each repetition loops the kernel until at least this long.
    pub min_rep_ms: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![256, 1024, 4096],
            k: 3,
            reps: 5,
            dim: 16,
            min_rep_ms: 50.0,
            seed: 0,
        }
    }
}

/// `n,k,lra_ns,global_ns,lra_scores_counted`
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub k: usize,
    pub lra_ns: f64,
    pub global_ns: f64,
    pub lra_scores_counted: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    /// `Σ_i |scope(i)|` per row.
    pub expected_counts: Vec<u64>,
    pub lra_slope: f64,
    pub global_slope: f64,
    /// Worst coefficient of variation over all timed series.
    pub max_cv: f64,
}

impl BenchReport {
    pub fn counts_exact(&self) -> bool {
        self.rows
            .iter()
            .zip(&self.expected_counts)
            .all(|(r, &e)| r.lra_scores_counted == e)
    }

    pub fn stable(&self) -> bool {
        self.max_cv <= MAX_CV
    }
}

fn square_side(n: usize) -> Result<usize> {
    let s = (n as f64).sqrt().round() as usize;
    if s == 0 || s * s != n {
        return Err(Error::config(format!(
            "bench size {n} is not a square token count"
        )));
    }
    Ok(s)
}

/// Median and coefficient of variation of per-call nanoseconds over `reps`
/// repetitions.
fn time(reps: usize, min_rep_ms: f64, mut f: impl FnMut()) -> (f64, f64) {
    let t = Instant::now();
    f();
    let once = t.elapsed().as_secs_f64() * 1e3;
    let iters = ((min_rep_ms / once.max(1e-6)).ceil() as usize).max(1);
    let mut rep = || {
        let t = Instant::now();
        for _ in 0..iters {
            f();
        }
        t.elapsed().as_nanos() as f64 / iters as f64
    };
    // warm-up, untimed
    rep();
    let mut per_call: Vec<f64> = (0..reps).map(|_| rep()).collect();
    let mean = per_call.iter().sum::<f64>() / reps as f64;
    let var = per_call.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / reps as f64;
    per_call.sort_by(f64::total_cmp);
    (per_call[reps / 2], var.sqrt() / mean)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

pub fn run_bench(cfg: &BenchConfig) -> Result<BenchReport> {
    if cfg.sizes.len() < 2 || cfg.reps == 0 {
        return Err(Error::config("bench needs at least two sizes and one rep"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    let mut expected_counts = Vec::new();
    let mut max_cv = 0.0f64;
    for &n in &cfg.sizes {
        let side = square_side(n)?;
        let scope = build_scope(side, side, cfg.k)?;
        let q = Tensor::<f32>::uniform(&[n, cfg.dim], 1.0, &mut rng);
        let k = Tensor::<f32>::uniform(&[n, cfg.dim], 1.0, &mut rng);
        let cols = (cfg.dim, 0, cfg.dim);

        kernels::reset_score_counter();
        black_box(kernels::local_scores(q.data(), k.data(), &scope, cols));
        let counted = kernels::score_counter();
        expected_counts.push((0..n).map(|i| scope.scope(i).len() as u64).sum());

        let (lra_ns, cv_l) = time(cfg.reps, cfg.min_rep_ms, || {
            black_box(kernels::local_scores(
                black_box(q.data()),
                black_box(k.data()),
                &scope,
                cols,
            ));
        });
        let (global_ns, cv_g) = time(cfg.reps, cfg.min_rep_ms, || {
            black_box(kernels::dense_scores(
                black_box(q.data()),
                black_box(k.data()),
                n,
                n,
                cfg.dim,
            ));
        });
        max_cv = max_cv.max(cv_l).max(cv_g);
        rows.push(BenchRow {
            n,
            k: cfg.k,
            lra_ns,
            global_ns,
            lra_scores_counted: counted,
        });
    }
    let ns: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let lra: Vec<f64> = rows.iter().map(|r| r.lra_ns).collect();
    let global: Vec<f64> = rows.iter().map(|r| r.global_ns).collect();
    Ok(BenchReport {
        lra_slope: loglog_slope(&ns, &lra),
        global_slope: loglog_slope(&ns, &global),
        rows,
        expected_counts,
        max_cv,
    })
}

pub fn write_csv(path: impl AsRef<Path>, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<BenchRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
