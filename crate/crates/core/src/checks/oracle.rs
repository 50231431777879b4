//! Random-instance sweep of multi-head local attention against the dense
//! masked oracle, plus the full-window reduction to plain attention.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{
    build_scope, init_lra, lra_embed, lra_head_weights, masked_oracle, masked_oracle_weights,
    mh_lra, AttentionParams, LraConfig, ScopeMask,
};
use crate::autodiff::Graph;
use crate::error::Result;
use crate::params::{Init, ModelParams};
use crate::tensor::Tensor;

/// Largest tolerated `|mh_lra − oracle|`.
pub const ORACLE_TOL: f64 = 1e-10;
/// Largest tolerated `|Σ_j p_ij − 1|`.
pub const ROW_SUM_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Instance {
    pub trial: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
}

impl Instance {
    pub fn lra(&self) -> LraConfig {
        LraConfig {
            channels: self.channels,
            heads: self.heads,
            window: self.window,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceOutcome {
    pub instance: Instance,
    /// Max abs difference of the assembled outputs.
    pub output_diff: f64,
    /// Max `|row sum − 1|` over local and dense weight rows of every head.
    pub row_sum_err: f64,
    /// Dense weights outside the scope that are not exactly zero.
    pub outside_nonzero: usize,
    /// Max abs difference between local weights and the in-scope dense ones.
    pub weight_diff: f64,
    pub rows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub trials: usize,
    pub max_output_diff: f64,
    pub max_weight_diff: f64,
    pub max_row_sum_err: f64,
    pub outside_nonzero: usize,
    pub rows_checked: usize,
    /// Instance with the largest output difference.
    pub worst: Option<Instance>,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.max_output_diff < ORACLE_TOL
            && self.max_weight_diff < ORACLE_TOL
            && self.max_row_sum_err <= ROW_SUM_TOL
            && self.outside_nonzero == 0
    }
}

/// `H, W ∈ [1, max_grid]`, `h ∈ {1, 2}`, `c ≤ 8` divisible by `h`,
/// `k ∈ {1, 3, 5}`.
pub fn random_instance(rng: &mut impl Rng, max_grid: usize, trial: usize) -> Instance {
    let heads = rng.random_range(1..=2);
    let max_grid = max_grid.max(1);
    Instance {
        trial,
        height: rng.random_range(1..=max_grid),
        width: rng.random_range(1..=max_grid),
        channels: heads * rng.random_range(1..=8 / heads),
        heads,
        window: [1, 3, 5][rng.random_range(0..3)],
    }
}

fn random_params(inst: &Instance, rng: &mut ChaCha8Rng) -> ModelParams<f64> {
    let mut p = ModelParams::new();
    init_lra(&mut Init::new(&mut p, rng), "a", &inst.lra());
    for (name, t) in p.iter_mut() {
        if name.ends_with(".bias") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.5..=0.5);
            }
        }
    }
    p
}

/// Columns `from..from + d` of an `n×c` tensor.
fn columns(x: &Tensor<f64>, from: usize, d: usize) -> Result<Tensor<f64>> {
    let (n, _) = x.dims2()?;
    Tensor::new(
        &[n, d],
        (0..n)
            .flat_map(|i| x.row(i)[from..from + d].to_vec())
            .collect(),
    )
}

/// Plain row-wise `Σ_l a_il b_lj`.
fn matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (n, p) = a.dims2()?;
    let (_, m) = b.dims2()?;
    Ok(Tensor::from_fn(&[n, m], |idx| {
        let (i, j) = (idx / m, idx % m);
        (0..p).map(|l| a.at2(i, l) * b.at2(l, j)).sum()
    }))
}

/// Every head through `attend(Q̂_j, K̂_j, V·W_v_j)`, concatenated and
/// projected by `W_o`.
fn assemble(
    params: &ModelParams<f64>,
    inst: &Instance,
    q_hat: &Tensor<f64>,
    k_hat: &Tensor<f64>,
    v: &Tensor<f64>,
    attend: impl Fn(&Tensor<f64>, &Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>,
) -> Result<Tensor<f64>> {
    let n = q_hat.dims2()?.0;
    let d = inst.channels / inst.heads;
    let mut cat = Tensor::zeros(&[n, inst.channels]);
    for j in 0..inst.heads {
        let v_hat = matmul(v, params.get(&format!("a.w_v.{j}"))?)?;
        let out = attend(
            &columns(q_hat, j * d, d)?,
            &columns(k_hat, j * d, d)?,
            &v_hat,
        )?;
        for i in 0..n {
            for l in 0..d {
                cat.data_mut()[i * inst.channels + j * d + l] = out.at2(i, l);
            }
        }
    }
    matmul(&cat, params.get("a.w_o")?)
}

struct Evaluated {
    params: ModelParams<f64>,
    scope: ScopeMask,
    q_hat: Tensor<f64>,
    k_hat: Tensor<f64>,
    v: Tensor<f64>,
    output: Tensor<f64>,
    weights: Vec<Tensor<f64>>,
}

fn evaluate(inst: &Instance, rng: &mut ChaCha8Rng) -> Result<Evaluated> {
    let params = random_params(inst, rng);
    let scope = build_scope(inst.height, inst.width, inst.window)?;
    let n = scope.len();
    let g = Graph::new();
    let b = params.bind(&g);
    let a = AttentionParams::bind(&b, "a", inst.lra())?;
    let v = Tensor::uniform(&[n, inst.channels], 1.0, rng);
    let q = g.leaf(Tensor::uniform(&[n, inst.channels], 1.0, rng));
    let k = g.leaf(Tensor::uniform(&[n, inst.channels], 1.0, rng));
    let output = (*mh_lra(q, k, g.leaf(v.clone()), &a, &scope)?.value()).clone();
    let emb = lra_embed(q, k, &a, &scope)?;
    let weights = (0..inst.heads)
        .map(|j| lra_head_weights(q, k, &a, j, &scope))
        .collect::<Result<_>>()?;
    Ok(Evaluated {
        q_hat: (*emb.queries.value()).clone(),
        k_hat: (*emb.keys.value()).clone(),
        params,
        scope,
        v,
        output,
        weights,
    })
}

/// Compares `mh_lra` against per-head [`masked_oracle`] assembly on shared
/// embeddings, and checks every materialized weight row.
pub fn check_instance(inst: &Instance, rng: &mut ChaCha8Rng) -> Result<InstanceOutcome> {
    let e = evaluate(inst, rng)?;
    let expect = assemble(&e.params, inst, &e.q_hat, &e.k_hat, &e.v, |q, k, v| {
        masked_oracle(q, k, v, &e.scope)
    })?;
    let mut out = InstanceOutcome {
        instance: *inst,
        output_diff: e.output.max_abs_diff(&expect)?,
        row_sum_err: 0.0,
        outside_nonzero: 0,
        weight_diff: 0.0,
        rows: 0,
    };
    let n = e.scope.len();
    let d = inst.channels / inst.heads;
    for (j, local) in e.weights.iter().enumerate() {
        let dense = masked_oracle_weights(
            &columns(&e.q_hat, j * d, d)?,
            &columns(&e.k_hat, j * d, d)?,
            &e.scope,
        )?;
        for i in 0..n {
            let range = e.scope.range(i);
            let local_sum: f64 = local.data()[range.clone()].iter().sum();
            let dense_sum: f64 = dense.row(i).iter().sum();
            out.row_sum_err = out
                .row_sum_err
                .max((local_sum - 1.0).abs())
                .max((dense_sum - 1.0).abs());
            out.rows += 2;
            for (&jj, &w) in e.scope.scope(i).iter().zip(&local.data()[range]) {
                out.weight_diff = out.weight_diff.max((w - dense.at2(i, jj)).abs());
            }
            out.outside_nonzero += (0..n)
                .filter(|&jj| !e.scope.contains(i, jj) && dense.at2(i, jj) != 0.0)
                .count();
        }
    }
    Ok(out)
}

/// `trials` random instances drawn from `seed`.
pub fn oracle_sweep(trials: usize, max_grid: usize, seed: u64) -> Result<SweepReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = SweepReport {
        trials,
        max_output_diff: 0.0,
        max_weight_diff: 0.0,
        max_row_sum_err: 0.0,
        outside_nonzero: 0,
        rows_checked: 0,
        worst: None,
    };
    for trial in 0..trials {
        let inst = random_instance(&mut rng, max_grid, trial);
        let o = check_instance(&inst, &mut rng)?;
        if report.worst.is_none() || o.output_diff > report.max_output_diff {
            report.max_output_diff = o.output_diff;
            report.worst = Some(inst);
        }
        report.max_weight_diff = report.max_weight_diff.max(o.weight_diff);
        report.max_row_sum_err = report.max_row_sum_err.max(o.row_sum_err);
        report.outside_nonzero += o.outside_nonzero;
        report.rows_checked += o.rows;
    }
    Ok(report)
}

/// Unmasked, unscaled `softmax(Q·Kᵀ)·V`.
pub fn dense_attention(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (n, d) = q.dims2()?;
    let (m, dv) = v.dims2()?;
    let mut out = Tensor::zeros(&[n, dv]);
    for i in 0..n {
        let s: Vec<f64> = (0..m)
            .map(|j| (0..d).map(|l| q.at2(i, l) * k.at2(j, l)).sum())
            .collect();
        let top = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = s.iter().map(|x| (x - top).exp()).collect();
        let z: f64 = e.iter().sum();
        for l in 0..dv {
            out.data_mut()[i * dv + l] = (0..m).map(|j| e[j] / z * v.at2(j, l)).sum();
        }
    }
    Ok(out)
}

/// With a window of at least `2·max(H, W) − 1` every key is in scope, so
/// `mh_lra` must equal plain multi-head attention with the same weights.
/// Returns the max abs difference for one random instance.
pub fn global_limit(seed: u64, max_grid: usize) -> Result<(Instance, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inst = random_instance(&mut rng, max_grid, 0);
    inst.window = 2 * inst.height.max(inst.width) - 1 + 2 * rng.random_range(0..2);
    let e = evaluate(&inst, &mut rng)?;
    let expect = assemble(&e.params, &inst, &e.q_hat, &e.k_hat, &e.v, dense_attention)?;
    Ok((inst, e.output.max_abs_diff(&expect)?))
}
