use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ScopeMask;
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::{grid_to_tokens, tokens_to_grid, Conv};
use crate::params::{Bound, Init};
use crate::tensor::{Real, Tensor};

/// Shape of one local-recognition attention block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LraConfig {
    pub channels: usize,
    pub heads: usize,
    /// Odd window side `k`.
    pub window: usize,
}

impl LraConfig {
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels == 0 || self.channels % self.heads != 0 {
            return Err(Error::config(format!(
                "attention.channels ({}) must be a positive multiple of attention.heads ({})",
                self.channels, self.heads
            )));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::config(format!(
                "attention.k must be a positive odd integer, got {}",
                self.window
            )));
        }
        Ok(())
    }
}

/// Query/key embeddings are 3×3 same-size convolutions over the token grid
/// shared by all heads; each head owns a `c×d` value matrix; `w_o` is `c×c`.
pub fn init_lra<T: Real, R: Rng>(init: &mut Init<'_, T, R>, prefix: &str, cfg: &LraConfig) {
    let c = cfg.channels;
    init.conv(&format!("{prefix}.phi_q"), c, c, 3, 1.0);
    init.conv(&format!("{prefix}.phi_k"), c, c, 3, 1.0);
    for j in 0..cfg.heads {
        init.matrix(&format!("{prefix}.w_v.{j}"), c, cfg.head_dim(), 1.0);
    }
    init.matrix(&format!("{prefix}.w_o"), c, c, 1.0);
}

pub struct AttentionParams<'g, T: Real> {
    pub cfg: LraConfig,
    pub phi_q: Conv<'g, T>,
    pub phi_k: Conv<'g, T>,
    pub w_v: Vec<Var<'g, T>>,
    pub w_o: Var<'g, T>,
}

impl<'g, T: Real> AttentionParams<'g, T> {
    pub fn bind(b: &Bound<'g, T>, prefix: &str, cfg: LraConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(AttentionParams {
            cfg,
            phi_q: Conv::bind_same(b, &format!("{prefix}.phi_q"))?,
            phi_k: Conv::bind_same(b, &format!("{prefix}.phi_k"))?,
            w_v: (0..cfg.heads)
                .map(|j| b.get(&format!("{prefix}.w_v.{j}")))
                .collect::<Result<_>>()?,
            w_o: b.get(&format!("{prefix}.w_o"))?,
        })
    }
}

/// Convolutionally embedded queries and keys, both `n×c`.
#[derive(Clone, Copy, Debug)]
pub struct LraEmbedding<'g, T: Real> {
    pub queries: Var<'g, T>,
    pub keys: Var<'g, T>,
}

fn check_tokens<T: Real>(name: &str, x: Var<'_, T>, scope: &ScopeMask, c: usize) -> Result<()> {
    let shape = x.shape();
    if shape != [scope.len(), c] {
        return Err(Error::contract(format!(
            "{name} must be {}×{c} for a {}×{} scope grid, got {shape:?}",
            scope.len(),
            scope.height(),
            scope.width()
        )));
    }
    Ok(())
}

pub fn lra_embed<'g, T: Real>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    params: &AttentionParams<'g, T>,
    scope: &ScopeMask,
) -> Result<LraEmbedding<'g, T>> {
    let c = params.cfg.channels;
    check_tokens("queries", q, scope, c)?;
    check_tokens("keys", k, scope, c)?;
    let (h, w) = (scope.height(), scope.width());
    let embed = |x: Var<'g, T>, conv: &Conv<'g, T>| -> Result<Var<'g, T>> {
        grid_to_tokens(conv.forward(tokens_to_grid(x, h, w)?)?)
    };
    Ok(LraEmbedding {
        queries: embed(q, &params.phi_q)?,
        keys: embed(k, &params.phi_k)?,
    })
}

/// One head on pre-computed embeddings: head `j` reads channels
/// `j·d..(j+1)·d` of the embedded queries and keys. Scores are plain dot
/// products, only for keys inside each query's window.
pub fn lra_head_embedded<'g, T: Real>(
    emb: &LraEmbedding<'g, T>,
    v: Var<'g, T>,
    params: &AttentionParams<'g, T>,
    head: usize,
    scope: &Rc<ScopeMask>,
) -> Result<Var<'g, T>> {
    let (weights, values) = head_weights(emb, v, params, head, scope)?;
    weights.local_mix(values, scope)
}

fn head_weights<'g, T: Real>(
    emb: &LraEmbedding<'g, T>,
    v: Var<'g, T>,
    params: &AttentionParams<'g, T>,
    head: usize,
    scope: &Rc<ScopeMask>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    if head >= params.cfg.heads {
        return Err(Error::contract(format!(
            "head {head} out of {}",
            params.cfg.heads
        )));
    }
    check_tokens("values", v, scope, params.cfg.channels)?;
    let d = params.cfg.head_dim();
    let q = emb.queries.slice_cols(head * d, d)?;
    let k = emb.keys.slice_cols(head * d, d)?;
    let values = v.matmul(params.w_v[head])?;
    let weights = q.local_scores(k, scope)?.segment_softmax(scope)?;
    Ok((weights, values))
}

/// Local-recognition attention head `j`, `n×d`.
pub fn lra_head<'g, T: Real>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    params: &AttentionParams<'g, T>,
    head: usize,
    scope: &ScopeMask,
) -> Result<Var<'g, T>> {
    let emb = lra_embed(q, k, params, scope)?;
    lra_head_embedded(&emb, v, params, head, &Rc::new(scope.clone()))
}

/// Attention weights of head `j`, one per CSR entry of `scope`.
pub fn lra_head_weights<'g, T: Real>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    params: &AttentionParams<'g, T>,
    head: usize,
    scope: &ScopeMask,
) -> Result<Tensor<T>> {
    let emb = lra_embed(q, k, params, scope)?;
    // values are irrelevant to the weights; reuse the queries for shape
    let (w, _) = head_weights(&emb, q, params, head, &Rc::new(scope.clone()))?;
    Ok((*w.value()).clone())
}

/// Heads concatenated channel-wise, then projected by `W^O`.
pub fn mh_lra<'g, T: Real>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    params: &AttentionParams<'g, T>,
    scope: &ScopeMask,
) -> Result<Var<'g, T>> {
    let emb = lra_embed(q, k, params, scope)?;
    let scope = Rc::new(scope.clone());
    let heads = (0..params.cfg.heads)
        .map(|j| lra_head_embedded(&emb, v, params, j, &scope))
        .collect::<Result<Vec<_>>>()?;
    Var::concat_cols(&heads)?.matmul(params.w_o)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{build_scope, masked_oracle};
    use crate::autodiff::Graph;
    use crate::kernels;
    use crate::params::ModelParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_conv(store: &mut ModelParams<f64>, prefix: &str, c: usize) {
        let mut w = Tensor::zeros(&[c, c, 3, 3]);
        for ch in 0..c {
            w.data_mut()[((ch * c + ch) * 3 + 1) * 3 + 1] = 1.0;
        }
        store.insert(format!("{prefix}.weight"), w);
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[c]));
    }

    #[test]
    fn window_one_returns_own_value() {
        let cfg = LraConfig {
            channels: 4,
            heads: 1,
            window: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ModelParams::<f64>::new();
        init_lra(&mut Init::new(&mut store, &mut rng), "a", &cfg);
        identity_conv(&mut store, "a.phi_q", 4);
        identity_conv(&mut store, "a.phi_k", 4);
        let scope = build_scope(3, 3, 1).unwrap();
        let g = Graph::new();
        let b = store.bind(&g);
        let p = AttentionParams::bind(&b, "a", cfg).unwrap();
        let x = g.leaf(Tensor::uniform(&[9, 4], 1.0, &mut rng));
        let v = g.leaf(Tensor::uniform(&[9, 4], 1.0, &mut rng));
        let out = lra_head(x, x, v, &p, 0, &scope).unwrap();
        let v_hat = v.matmul(p.w_v[0]).unwrap();
        assert_eq!(*out.value(), *v_hat.value());
    }

    #[test]
    fn counts_one_dot_product_per_scope_entry() {
        let cfg = LraConfig {
            channels: 4,
            heads: 2,
            window: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ModelParams::<f64>::new();
        init_lra(&mut Init::new(&mut store, &mut rng), "a", &cfg);
        let scope = build_scope(5, 4, 3).unwrap();
        let g = Graph::new();
        let b = store.bind(&g);
        let p = AttentionParams::bind(&b, "a", cfg).unwrap();
        let x = g.leaf(Tensor::uniform(&[20, 4], 1.0, &mut rng));
        kernels::reset_score_counter();
        lra_head(x, x, x, &p, 1, &scope).unwrap();
        assert_eq!(kernels::score_counter(), scope.nnz() as u64);
        assert!(scope.nnz() <= 20 * 9);
    }

    #[test]
    fn grid_mismatch_is_contract_error() {
        let cfg = LraConfig {
            channels: 2,
            heads: 1,
            window: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ModelParams::<f64>::new();
        init_lra(&mut Init::new(&mut store, &mut rng), "a", &cfg);
        let scope = build_scope(3, 3, 3).unwrap();
        let g = Graph::new();
        let b = store.bind(&g);
        let p = AttentionParams::bind(&b, "a", cfg).unwrap();
        let x = g.leaf(Tensor::<f64>::zeros(&[8, 2]));
        assert!(matches!(
            lra_head(x, x, x, &p, 0, &scope),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn matches_masked_oracle_on_embeddings() {
        let cfg = LraConfig {
            channels: 4,
            heads: 1,
            window: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ModelParams::<f64>::new();
        init_lra(&mut Init::new(&mut store, &mut rng), "a", &cfg);
        let scope = build_scope(3, 3, 3).unwrap();
        let g = Graph::new();
        let b = store.bind(&g);
        let p = AttentionParams::bind(&b, "a", cfg).unwrap();
        let q = g.leaf(Tensor::uniform(&[9, 4], 1.0, &mut rng));
        let k = g.leaf(Tensor::uniform(&[9, 4], 1.0, &mut rng));
        let v = g.leaf(Tensor::uniform(&[9, 4], 1.0, &mut rng));
        let out = lra_head(q, k, v, &p, 0, &scope).unwrap();
        let emb = lra_embed(q, k, &p, &scope).unwrap();
        let v_hat = v.matmul(p.w_v[0]).unwrap();
        let expect = masked_oracle(
            &emb.queries.value(),
            &emb.keys.value(),
            &v_hat.value(),
            &scope,
        )
        .unwrap();
        assert!(out.value().max_abs_diff(&expect).unwrap() < 1e-10);
    }
}
