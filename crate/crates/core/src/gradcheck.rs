//! Central finite-difference verification of reverse-mode gradients.

use crate::autodiff::{Graph, Var};
use crate::dd::Dd;
use crate::error::{Error, Result};
use crate::params::{Bound, ModelParams};
use crate::tensor::Real;

pub const DEFAULT_EPS: f64 = 1e-6;
/// Refinement threshold of [`refined_check`] used by the command line.
pub const DEFAULT_REFINE_ABOVE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Worst {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub entries: usize,
    pub worst: Option<Worst>,
    /// Entries whose numeric gradient was re-measured in double-double.
    pub refined: usize,
    /// Largest error against the plain 64-bit differences.
    pub max_rel_error_f64: f64,
}

/// `|a − b| / max(1e-8, |a| + |b|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares `backward` against `(f(θ+eps) − f(θ−eps)) / 2eps` for every entry
/// of every tensor in `params`. `f` must build a scalar from the bound
/// parameters and be a pure function of them.
pub fn finite_difference_check<F>(
    params: &ModelParams<f64>,
    eps: f64,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &Bound<'g, f64>) -> Result<Var<'g, f64>>,
{
    check(params, eps, &f, None::<(f64, &NoRefine)>)
}

/// Like [`finite_difference_check`], but entries whose 64-bit error exceeds
/// `refine_above` are measured again with `dd`, the same objective evaluated
/// in double-double. Their difference quotient then carries no rounding
/// noise, which matters for gradients near zero.
pub fn refined_check<F, D>(
    params: &ModelParams<f64>,
    eps: f64,
    refine_above: f64,
    f: F,
    dd: D,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &Bound<'g, f64>) -> Result<Var<'g, f64>>,
    D: for<'g> Fn(&'g Graph<Dd>, &Bound<'g, Dd>) -> Result<Var<'g, Dd>>,
{
    check(params, eps, &f, Some((refine_above, &dd)))
}

type NoRefine = for<'g> fn(&'g Graph<Dd>, &Bound<'g, Dd>) -> Result<Var<'g, Dd>>;

fn perturbed<T: Real>(
    work: &mut ModelParams<T>,
    name: &str,
    index: usize,
    eps: T,
    eval: impl Fn(&ModelParams<T>) -> Result<T>,
) -> Result<(T, T)> {
    let orig = work.get(name)?.data()[index];
    work.get_mut(name)?.data_mut()[index] = orig + eps;
    let plus = eval(work);
    work.get_mut(name)?.data_mut()[index] = orig - eps;
    let minus = eval(work);
    work.get_mut(name)?.data_mut()[index] = orig;
    let (plus, minus) = (plus?, minus?);
    if !plus.is_finite() || !minus.is_finite() {
        return Err(Error::Unstable {
            name: name.to_string(),
            index,
        });
    }
    Ok((plus, minus))
}

fn check<F, D>(
    params: &ModelParams<f64>,
    eps: f64,
    f: &F,
    refine: Option<(f64, &D)>,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &Bound<'g, f64>) -> Result<Var<'g, f64>>,
    D: for<'g> Fn(&'g Graph<Dd>, &Bound<'g, Dd>) -> Result<Var<'g, Dd>>,
{
    let analytic: Vec<(String, Vec<f64>)> = {
        let graph = Graph::new();
        let bound = params.bind(&graph);
        let loss = f(&graph, &bound)?;
        if !loss.value().all_finite() {
            return Err(Error::Unstable {
                name: "<unperturbed>".into(),
                index: 0,
            });
        }
        let grads = graph.backward(loss)?;
        bound
            .iter()
            .map(|(name, v)| (name.to_string(), grads.wrt(v).into_data()))
            .collect()
    };

    let eval = |p: &ModelParams<f64>| -> Result<f64> {
        let graph = Graph::new();
        let bound = p.bind(&graph);
        Ok(f(&graph, &bound)?.value().item())
    };

    let mut work = params.clone();
    let mut wide: Option<ModelParams<Dd>> = None;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        entries: 0,
        worst: None,
        refined: 0,
        max_rel_error_f64: 0.0,
    };
    for (name, g_ad) in &analytic {
        for (index, &ga) in g_ad.iter().enumerate() {
            let (plus, minus) = perturbed(&mut work, name, index, eps, eval)?;
            let mut gn = (plus - minus) / (2.0 * eps);
            let mut err = relative_error(ga, gn);
            report.max_rel_error_f64 = report.max_rel_error_f64.max(err);
            if let Some((_, dd)) = refine.filter(|&(above, _)| err > above) {
                let wide = wide.get_or_insert_with(|| params.cast());
                let eps = Dd::lit(eps);
                let (plus, minus) = perturbed(wide, name, index, eps, |p| {
                    let graph = Graph::new();
                    let bound = p.bind(&graph);
                    Ok(dd(&graph, &bound)?.value().item())
                })?;
                gn = ((plus - minus) / (eps + eps)).hi();
                err = relative_error(ga, gn);
                report.refined += 1;
            }
            report.entries += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(Worst {
                    name: name.clone(),
                    index,
                    analytic: ga,
                    numeric: gn,
                });
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn square_at_three() {
        let mut p = ModelParams::new();
        p.insert("theta", Tensor::scalar(3.0));
        let r = finite_difference_check(&p, DEFAULT_EPS, |_, b| {
            let t = b.get("theta")?;
            Ok(t.mul(t)?.sum())
        })
        .unwrap();
        let w = r.worst.unwrap();
        assert_eq!(w.analytic, 6.0);
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn linear_is_exact_to_rounding() {
        let mut p = ModelParams::new();
        p.insert("x", Tensor::from_fn(&[4], |i| i as f64 - 1.5));
        let r = finite_difference_check(&p, DEFAULT_EPS, |_, b| Ok(b.get("x")?.scale(2.0).sum()))
            .unwrap();
        assert_eq!(r.entries, 4);
        assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    }

    #[test]
    fn non_finite_objective_names_entry() {
        let mut p = ModelParams::new();
        p.insert("x", Tensor::from_fn(&[3], |i| [0.0, 700.0, 1.0][i]));
        // exp(700 + eps) stays finite, exp(exp(700)) does not
        let err =
            finite_difference_check(&p, DEFAULT_EPS, |_, b| Ok(b.get("x")?.exp().exp().sum()))
                .unwrap_err();
        assert!(matches!(err, Error::Unstable { .. }));
    }
}
