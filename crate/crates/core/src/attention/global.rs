use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{Bound, Init};
use crate::tensor::Real;

/// Standard scaled dot-product multi-head attention with biased linear
/// projections `{prefix}.{w_q,w_k,w_v,w_o}.{weight,bias}`.
pub fn init_mha<T: Real, R: Rng>(init: &mut Init<'_, T, R>, prefix: &str, channels: usize) {
    for name in ["w_q", "w_k", "w_v", "w_o"] {
        init.matrix(&format!("{prefix}.{name}.weight"), channels, channels, 1.0);
        init.full(&format!("{prefix}.{name}.bias"), &[channels], 0.0);
    }
}

pub struct MhaParams<'g, T: Real> {
    pub heads: usize,
    pub w_q: Linear<'g, T>,
    pub w_k: Linear<'g, T>,
    pub w_v: Linear<'g, T>,
    pub w_o: Linear<'g, T>,
}

impl<'g, T: Real> MhaParams<'g, T> {
    pub fn bind(b: &Bound<'g, T>, prefix: &str, heads: usize) -> Result<Self> {
        let p = MhaParams {
            heads,
            w_q: Linear::bind(b, &format!("{prefix}.w_q"))?,
            w_k: Linear::bind(b, &format!("{prefix}.w_k"))?,
            w_v: Linear::bind(b, &format!("{prefix}.w_v"))?,
            w_o: Linear::bind(b, &format!("{prefix}.w_o"))?,
        };
        let c = p.channels();
        if heads == 0 || c % heads != 0 {
            return Err(Error::config(format!(
                "{c} channels do not split into {heads} heads"
            )));
        }
        Ok(p)
    }

    pub fn channels(&self) -> usize {
        self.w_q.weight.shape()[0]
    }
}

/// `Q` is `n_q×c`, `K` and `V` are `n_kv×c`; scores are scaled by `1/√d`.
pub fn mha_global<'g, T: Real>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    params: &MhaParams<'g, T>,
) -> Result<Var<'g, T>> {
    let c = params.channels();
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || qs[1] != c || ks.len() != 2 || ks[1] != c || vs != ks {
        return Err(Error::contract(format!(
            "attention expects Q n_q×{c} and K, V n_kv×{c}; got {qs:?}, {ks:?}, {vs:?}"
        )));
    }
    let d = c / params.heads;
    let scale = T::one() / T::lit(d as f64).sqrt();
    let qp = params.w_q.forward(q)?;
    let kp = params.w_k.forward(k)?;
    let vp = params.w_v.forward(v)?;
    let heads = (0..params.heads)
        .map(|j| {
            let qj = qp.slice_cols(j * d, d)?;
            let kj = kp.slice_cols(j * d, d)?;
            let vj = vp.slice_cols(j * d, d)?;
            qj.matmul(kj.transpose()?)?
                .scale(scale)
                .softmax_rows()?
                .matmul(vj)
        })
        .collect::<Result<Vec<_>>>()?;
    params.w_o.forward(Var::concat_cols(&heads)?)
}
