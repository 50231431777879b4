//! Momentum SGD on synthetic pairs.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::crop::{make_pair, Pair};
use super::synth::{gen_sequence, SequenceConfig, SyntheticSequence};
use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ModelParams;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Pairs averaged per step.
    pub batch: usize,
    /// Size of the pool of generated training sequences.
    pub sequences: usize,
    /// Largest frame distance between template and search.
    pub max_gap: usize,
    /// Search-center jitter, pixels per axis.
    pub jitter: f64,
    /// Fixed pairs scored before and after training.
    pub eval_pairs: usize,
    /// Rescale the batch gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
    pub sequence: SequenceConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 300,
            lr: 0.005,
            momentum: 0.9,
            batch: 4,
            sequences: 32,
            max_gap: 3,
            jitter: 8.0,
            eval_pairs: 16,
            grad_clip: Some(5.0),
            sequence: SequenceConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sequence.validate()?;
        if self.batch == 0 || self.sequences == 0 {
            return Err(Error::config(
                "harness.train.batch and sequences must be positive",
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "harness.train needs lr >= 0 and momentum in [0, 1), got {} and {}",
                self.lr, self.momentum
            )));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::config("harness.train.grad_clip must be positive"));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::config("harness.train.jitter must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub total: f64,
    pub cls1: f64,
    pub cls2: f64,
    pub reg: f64,
    /// Milliseconds since training started.
    #[serde(skip)]
    pub elapsed_ms: f64,
    /// Global L2 norm of the batch gradient before clipping.
    #[serde(skip)]
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls1: f64,
    pub cls2: f64,
    pub reg: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.cls1 += o.cls1;
        self.cls2 += o.cls2;
        self.reg += o.reg;
    }

    fn scaled(mut self, s: f64) -> Self {
        self.total *= s;
        self.cls1 *= s;
        self.cls2 *= s;
        self.reg *= s;
        self
    }
}

pub struct TrainOutcome<T> {
    pub records: Vec<TrainRecord>,
    pub params: ModelParams<T>,
    /// Mean loss over the fixed evaluation pairs before the first step.
    pub initial_eval: LossBreakdown,
    pub final_eval: LossBreakdown,
}

/// Velocity `v ← μ·v + g`, update `θ ← θ − lr·v`.
pub struct Sgd<T> {
    pub lr: T,
    pub momentum: T,
    velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr: T::lit(lr),
            momentum: T::lit(momentum),
            velocity: Vec::new(),
        }
    }

    /// `grads` are in the parameter store's name order.
    pub fn step(&mut self, params: &mut ModelParams<T>, grads: &[Tensor<T>]) -> Result<()> {
        if self.velocity.is_empty() {
            self.velocity = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
        }
        if grads.len() != params.len() || self.velocity.len() != grads.len() {
            return Err(Error::contract("gradient count does not match parameters"));
        }
        for (((_, p), g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            if p.shape() != g.shape() {
                return Err(Error::shape("sgd", p.shape(), g.shape()));
            }
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
        Ok(())
    }
}

/// Loss and, when asked, parameter gradients for one pair.
pub fn pair_loss<T: Real>(
    model: &Model,
    params: &ModelParams<T>,
    pair: &Pair<T>,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Vec<Tensor<T>>>)> {
    let g = Graph::new();
    let b = params.bind(&g);
    let tp = model.bind(&b)?;
    let z = g.leaf(pair.template.image.clone());
    let x = g.leaf(pair.search.image.clone());
    let l = model.loss(&tp, z, x, &pair.targets)?;
    let breakdown = LossBreakdown {
        total: l.total.value().item().as_f64(),
        cls1: l.cls1.value().item().as_f64(),
        cls2: l.cls2.value().item().as_f64(),
        reg: l.reg.value().item().as_f64(),
    };
    if !with_grad || !breakdown.total.is_finite() {
        return Ok((breakdown, None));
    }
    let grads = g.backward(l.total)?;
    Ok((
        breakdown,
        Some(b.iter().map(|(_, v)| grads.wrt(v)).collect()),
    ))
}

fn sample_pair<T: Real>(
    pool: &[SyntheticSequence],
    model: &Model,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Pair<T>> {
    let seq = &pool[rng.random_range(0..pool.len())];
    let i = rng.random_range(0..seq.len());
    let lo = i.saturating_sub(cfg.max_gap);
    let hi = (i + cfg.max_gap).min(seq.len() - 1);
    let j = rng.random_range(lo..=hi);
    make_pair(seq, i, j, model, cfg.jitter, rng)
}

fn mean_loss<T: Real>(
    model: &Model,
    params: &ModelParams<T>,
    pairs: &[Pair<T>],
) -> Result<LossBreakdown> {
    let losses = pairs
        .par_iter()
        .map(|p| pair_loss(model, params, p, false).map(|(l, _)| l))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = LossBreakdown::default();
    for l in &losses {
        acc.add(l);
    }
    Ok(acc.scaled(1.0 / pairs.len().max(1) as f64))
}

/// Deterministic in `(model, cfg, seed)`: pairs are drawn sequentially from
/// one generator and per-pair gradients are summed in batch order.
pub fn train_toy<T: Real>(model: &Model, cfg: &TrainConfig, seed: u64) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = model.init_params::<T>(rng.random());
    let pool = (0..cfg.sequences)
        .map(|_| gen_sequence(&cfg.sequence, rng.random()))
        .collect::<Result<Vec<_>>>()?;
    let mut eval_rng = ChaCha8Rng::seed_from_u64(rng.random());
    let eval = (0..cfg.eval_pairs)
        .map(|_| sample_pair(&pool, model, cfg, &mut eval_rng))
        .collect::<Result<Vec<_>>>()?;
    let initial_eval = mean_loss(model, &params, &eval)?;

    let mut sgd = Sgd::new(cfg.lr, cfg.momentum);
    let mut records = Vec::with_capacity(cfg.steps);
    let start = Instant::now();
    let inv = T::lit(1.0 / cfg.batch as f64);
    for step in 0..cfg.steps {
        let batch = (0..cfg.batch)
            .map(|_| sample_pair::<T>(&pool, model, cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let results = batch
            .par_iter()
            .map(|p| pair_loss(model, &params, p, true))
            .collect::<Result<Vec<_>>>()?;
        let mut loss = LossBreakdown::default();
        let mut grads: Option<Vec<Tensor<T>>> = None;
        for (l, g) in results {
            loss.add(&l);
            let Some(g) = g else {
                let l = loss.scaled(1.0 / cfg.batch as f64);
                return Err(Error::NonFiniteLoss {
                    step,
                    total: l.total,
                    cls1: l.cls1,
                    cls2: l.cls2,
                    reg: l.reg,
                });
            };
            match &mut grads {
                None => grads = Some(g),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&g) {
                        for (x, &y) in a.data_mut().iter_mut().zip(b.data()) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let loss = loss.scaled(1.0 / cfg.batch as f64);
        let mut grads = grads.unwrap_or_default();
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|&v| (v * inv).as_f64().powi(2))
            .sum::<f64>()
            .sqrt();
        let factor = match cfg.grad_clip {
            Some(c) if norm > c => inv * T::lit(c / norm),
            _ => inv,
        };
        for g in &mut grads {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
        sgd.step(&mut params, &grads)?;
        records.push(TrainRecord {
            step,
            total: loss.total,
            cls1: loss.cls1,
            cls2: loss.cls2,
            reg: loss.reg,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
            grad_norm: norm,
        });
    }
    let final_eval = mean_loss(model, &params, &eval)?;
    Ok(TrainOutcome {
        records,
        params,
        initial_eval,
        final_eval,
    })
}

/// `step,total,cls1,cls2,reg`; the header is written even with no records.
pub fn write_trace(path: &Path, records: &[TrainRecord]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(["step", "total", "cls1", "cls2", "reg"])?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace(path: &Path) -> Result<Vec<TrainRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> TrainConfig {
        TrainConfig {
            steps: 3,
            batch: 2,
            sequences: 2,
            eval_pairs: 2,
            sequence: SequenceConfig {
                frames: 3,
                ..SequenceConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_gives_flat_trace() {
        let model = Model::new(ModelConfig::toy()).unwrap();
        let cfg = TrainConfig { lr: 0.0, ..tiny() };
        let out = train_toy::<f64>(&model, &cfg, 1).unwrap();
        assert_eq!(out.initial_eval, out.final_eval);
        let fresh = model.init_params::<f64>(ChaCha8Rng::seed_from_u64(1).random());
        assert!(out.params.bit_eq(&fresh));
    }

    #[test]
    fn momentum_zero_is_plain_step() {
        let mut p = ModelParams::new();
        p.insert("a", Tensor::from_fn(&[3], |i| i as f64));
        let g = vec![Tensor::from_fn(&[3], |i| 1.0 - i as f64)];
        let mut sgd = Sgd::new(0.5, 0.0);
        sgd.step(&mut p, &g).unwrap();
        assert_eq!(p.get("a").unwrap().data(), &[-0.5, 1.0, 2.5]);
        sgd.step(&mut p, &g).unwrap();
        assert_eq!(p.get("a").unwrap().data(), &[-1.0, 1.0, 3.0]);

        let mut q = ModelParams::new();
        q.insert("a", Tensor::from_fn(&[3], |i| i as f64));
        let mut heavy = Sgd::new(0.5, 0.5);
        heavy.step(&mut q, &g).unwrap();
        heavy.step(&mut q, &g).unwrap();
        // second velocity 1.5·g
        assert_eq!(q.get("a").unwrap().data(), &[-1.25, 1.0, 3.25]);
    }

    #[test]
    fn training_is_reproducible() {
        let model = Model::new(ModelConfig::toy()).unwrap();
        let a = train_toy::<f64>(&model, &tiny(), 9).unwrap();
        let b = train_toy::<f64>(&model, &tiny(), 9).unwrap();
        let strip = |r: &[TrainRecord]| {
            r.iter()
                .map(|x| (x.total, x.cls1, x.cls2, x.reg))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&a.records), strip(&b.records));
        assert!(a.params.bit_eq(&b.params));
    }

    #[test]
    fn trace_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let recs = vec![
            TrainRecord {
                step: 0,
                total: 2.5,
                cls1: 0.7,
                cls2: 0.8,
                reg: 1.0,
                elapsed_ms: 1.0,
                grad_norm: 0.0,
            },
            TrainRecord {
                step: 1,
                total: 2.25,
                cls1: 0.5,
                cls2: 0.75,
                reg: 1.0,
                elapsed_ms: 2.0,
                grad_norm: 0.0,
            },
        ];
        write_trace(&path, &recs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,total,cls1,cls2,reg\n"));
        let back = read_trace(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].total, 2.25);
        assert_eq!(back[1].elapsed_ms, 0.0);
    }
}
