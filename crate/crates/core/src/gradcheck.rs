//! Central finite-difference verification of recorded gradients.
//!
//! Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-8)`; a check
//! reports the maximum over every coordinate of the selected parameters.

use std::collections::BTreeMap;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

fn evaluate<F>(store: &ParameterStore<f64>, f: &F) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &ParameterStore<f64>) -> Result<Var<'g, f64>>,
{
    let graph = Graph::new();
    let out = f(&graph, store)?;
    let v = out.value();
    v.item().ok_or_else(|| Error::NonScalarLoss(v.shape().to_vec()))
}

/// Recorded gradients of `f` with respect to `names`.
pub fn analytic_gradient<F>(store: &ParameterStore<f64>, names: &[&str], f: &F) -> Result<BTreeMap<String, Tensor<f64>>>
where
    F: for<'g> Fn(&'g Graph<f64>, &ParameterStore<f64>) -> Result<Var<'g, f64>>,
{
    let graph = Graph::new();
    // bind first so unused parameters still get a (zero) gradient
    for name in names {
        graph.param(store, name)?;
    }
    let out = f(&graph, store)?;
    let grads = graph.backward(out)?;
    names
        .iter()
        .map(|&name| {
            let shape = store
                .value(name)
                .ok_or_else(|| Error::UnknownParameter(name.to_string()))?
                .shape()
                .to_vec();
            let g = grads.param(name).cloned().unwrap_or_else(|| Tensor::zeros(&shape));
            Ok((name.to_string(), g))
        })
        .collect()
}

/// Central differences `(f(x+eps) - f(x-eps)) / 2eps` for every coordinate.
pub fn numeric_gradient<F>(
    store: &mut ParameterStore<f64>,
    names: &[&str],
    eps: f64,
    f: &F,
) -> Result<BTreeMap<String, Tensor<f64>>>
where
    F: for<'g> Fn(&'g Graph<f64>, &ParameterStore<f64>) -> Result<Var<'g, f64>>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {eps}")));
    }
    let mut out = BTreeMap::new();
    for &name in names {
        let n = store
            .value(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?
            .len();
        let mut g = vec![0.0; n];
        for (i, slot) in g.iter_mut().enumerate() {
            let orig = store.value(name).expect("checked").data()[i];
            store.value_mut(name)?.data_mut()[i] = orig + eps;
            let plus = evaluate(store, f);
            store.value_mut(name)?.data_mut()[i] = orig - eps;
            let minus = evaluate(store, f);
            store.value_mut(name)?.data_mut()[i] = orig;
            *slot = (plus? - minus?) / (2.0 * eps);
        }
        let shape = store.value(name).expect("checked").shape().to_vec();
        out.insert(name.to_string(), Tensor::from_vec(&shape, g)?);
    }
    Ok(out)
}

pub fn compare(
    analytic: &BTreeMap<String, Tensor<f64>>,
    numeric: &BTreeMap<String, Tensor<f64>>,
) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (name, a) in analytic {
        let Some(n) = numeric.get(name) else { continue };
        for (i, (&x, &y)) in a.data().iter().zip(n.data()).enumerate() {
            report.coordinates += 1;
            let e = relative_error(x, y);
            if e > report.max_rel_error || e.is_nan() {
                report.max_rel_error = if e.is_nan() { f64::INFINITY } else { e };
                report.worst = Some((name.clone(), i));
            }
        }
    }
    report
}

/// Maximum relative error between recorded and finite-difference gradients
/// of the scalar function `f` over the parameters `names`.
pub fn grad_check<F>(store: &mut ParameterStore<f64>, names: &[&str], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph<f64>, &ParameterStore<f64>) -> Result<Var<'g, f64>>,
{
    let analytic = analytic_gradient(store, names, &f)?;
    let numeric = numeric_gradient(store, names, eps, &f)?;
    Ok(compare(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamKind;

    fn store_with(name: &str, t: Tensor<f64>) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.insert(name, t, ParamKind::Real).unwrap();
        s
    }

    #[test]
    fn linear_function_is_exact() {
        let mut s = store_with("x", Tensor::normal(&[3, 4], 0.0, 1.0, 3).unwrap());
        s.insert("c", Tensor::normal(&[3, 4], 0.0, 1.0, 4).unwrap(), ParamKind::Real)
            .unwrap();
        let r = grad_check(&mut s, &["x"], 1e-5, |g, st| {
            let x = g.param(st, "x")?;
            let c = g.constant(st.value("c").unwrap().clone());
            Ok(x.mul(&c)?.sum().scale(3.0))
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
    }

    #[test]
    fn silu_at_one() {
        let mut s = store_with("x", Tensor::scalar(1.0));
        let r = grad_check(&mut s, &["x"], 1e-5, |g, st| Ok(g.param(st, "x")?.silu().sum())).unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
        let a = analytic_gradient(&s, &["x"], &|g: &Graph<f64>, st: &ParameterStore<f64>| {
            Ok(g.param(st, "x")?.silu().sum())
        })
        .unwrap();
        let sig = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((a["x"].data()[0] - (sig + sig * (1.0 - sig))).abs() < 1e-15);
    }

    #[test]
    fn corrupted_gradient_detected() {
        let mut s = store_with("x", Tensor::normal(&[5], 0.0, 1.0, 1).unwrap());
        fn f<'g>(g: &'g Graph<f64>, st: &ParameterStore<f64>) -> Result<Var<'g, f64>> {
            let x = g.param(st, "x")?;
            x.mul(&x).map(|v| v.sum())
        }
        let mut a = analytic_gradient(&s, &["x"], &f).unwrap();
        a.get_mut("x").unwrap().data_mut().iter_mut().for_each(|v| *v *= 2.0);
        let n = numeric_gradient(&mut s, &["x"], 1e-5, &f).unwrap();
        assert!(compare(&a, &n).max_rel_error >= 0.4);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut s = store_with("x", Tensor::zeros(&[2]));
        let r = grad_check(&mut s, &["x"], 1e-5, |g, st| g.param(st, "x"));
        assert!(matches!(r, Err(Error::NonScalarLoss(_))));
    }
}
