use super::ScopeMask;
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Real, Tensor};

/// Dense `n×n` attention weights: every score outside the scope is set to
/// the masked sentinel before a full row softmax. Quadratic on purpose.
pub fn masked_oracle_weights<T: Real>(
    q_hat: &Tensor<T>,
    k_hat: &Tensor<T>,
    scope: &ScopeMask,
) -> Result<Tensor<T>> {
    let (n, d) = q_hat.dims2()?;
    if k_hat.shape() != q_hat.shape() || n != scope.len() {
        return Err(Error::shape("masked_oracle", q_hat.shape(), k_hat.shape()));
    }
    let mut scores = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            scores[i * n + j] = if scope.contains(i, j) {
                let mut s = T::zero();
                for l in 0..d {
                    s += q_hat.at2(i, l) * k_hat.at2(j, l);
                }
                s
            } else {
                T::sentinel()
            };
        }
    }
    Tensor::new(&[n, n], kernels::softmax_rows(&scores, n, n)?)
}

/// `softmax(mask(Q̂·K̂ᵀ))·V̂` computed densely.
pub fn masked_oracle<T: Real>(
    q_hat: &Tensor<T>,
    k_hat: &Tensor<T>,
    v_hat: &Tensor<T>,
    scope: &ScopeMask,
) -> Result<Tensor<T>> {
    let p = masked_oracle_weights(q_hat, k_hat, scope)?;
    let (n, dv) = v_hat.dims2()?;
    if n != scope.len() {
        return Err(Error::shape("masked_oracle", p.shape(), v_hat.shape()));
    }
    let mut out = vec![T::zero(); n * dv];
    for i in 0..n {
        for j in 0..n {
            let pij = p.at2(i, j);
            for l in 0..dv {
                out[i * dv + l] += pij * v_hat.at2(j, l);
            }
        }
    }
    Tensor::new(&[n, dv], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::build_scope;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn self_scope_gathers_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = Tensor::<f64>::uniform(&[6, 3], 2.0, &mut rng);
        let v = Tensor::<f64>::uniform(&[6, 2], 2.0, &mut rng);
        let scope = build_scope(2, 3, 1).unwrap();
        assert_eq!(masked_oracle(&q, &q, &v, &scope).unwrap(), v);
    }

    #[test]
    fn full_scope_is_unmasked_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Tensor::<f64>::uniform(&[4, 3], 1.0, &mut rng);
        let k = Tensor::<f64>::uniform(&[4, 3], 1.0, &mut rng);
        let v = Tensor::<f64>::uniform(&[4, 2], 1.0, &mut rng);
        let scope = build_scope(2, 2, 3).unwrap();
        let out = masked_oracle(&q, &k, &v, &scope).unwrap();
        for i in 0..4 {
            let e: Vec<f64> = (0..4)
                .map(|j| (0..3).map(|l| q.at2(i, l) * k.at2(j, l)).sum::<f64>().exp())
                .collect();
            let z: f64 = e.iter().sum();
            for l in 0..2 {
                let want: f64 = (0..4).map(|j| e[j] / z * v.at2(j, l)).sum();
                assert!((out.at2(i, l) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn weights_are_exactly_zero_outside_scope() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = Tensor::<f64>::uniform(&[16, 2], 3.0, &mut rng);
        let scope = build_scope(4, 4, 3).unwrap();
        let p = masked_oracle_weights(&q, &q, &scope).unwrap();
        for i in 0..16 {
            for j in 0..16 {
                if !scope.contains(i, j) {
                    assert_eq!(p.at2(i, j).to_bits(), 0.0f64.to_bits());
                }
            }
        }
    }
}
