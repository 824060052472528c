//! Central finite-difference gradient checking.

use crate::tensor::{Graph, Tensor, TensorError, Var};

/// Relative error with the denominator floored at `1e-8`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares the autodiff gradient of the scalar built by `f` at `point`
/// against central differences with step `step`, returning the largest
/// elementwise relative error.
///
/// `f` receives a fresh graph and the variable holding the point; it must
/// return a rank-0 value and be deterministic.
pub fn finite_diff_check<F, E>(f: F, point: &Tensor<f64>, step: f64) -> Result<f64, E>
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let analytic = {
        let mut g = Graph::new();
        let x = g.leaf(point.clone(), true);
        let loss = f(&mut g, x)?;
        g.backward(loss)?;
        g.grad(x).expect("leaf requires grad").clone()
    };

    let eval = |p: Tensor<f64>| -> Result<f64, E> {
        let mut g = Graph::new();
        let x = g.constant(p);
        let loss = f(&mut g, x)?;
        let v = g.value(loss);
        v.item().ok_or_else(|| {
            TensorError::NotScalar {
                shape: v.shape().to_vec(),
            }
            .into()
        })
    };

    let mut worst = 0.0f64;
    for i in 0..point.numel() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
