//! Central finite-difference checks of analytic gradients.

use super::{Graph, OpKind, ParamStore, Scalar, Tensor, Var};
use crate::error::Result;

/// Denominator floor for relative errors; keeps near-zero gradients from
/// turning rounding noise into huge ratios.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradError {
    pub max_rel: f64,
    pub max_abs: f64,
    /// (input index, flat element index) of the worst relative error.
    pub worst: (usize, usize),
    pub checked: usize,
}

impl GradError {
    fn merge(&mut self, input: usize, elem: usize, analytic: f64, numeric: f64) {
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        self.max_abs = self.max_abs.max(abs);
        if rel > self.max_rel || self.checked == 0 {
            self.max_rel = self.max_rel.max(rel);
            self.worst = (input, elem);
        }
        self.checked += 1;
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the analytic gradient of a scalar function of `inputs` against
/// central differences with the given `step`.
///
/// `f` is evaluated at `T` for the analytic gradient and at `f64` for the
/// numeric one, so passing `T = f32` measures f32 autodiff against an f64
/// reference.
pub fn check<T, F32, F64>(
    inputs: &[Tensor<f64>],
    step: f64,
    fault: Option<OpKind>,
    f_analytic: F32,
    f_numeric: F64,
) -> Result<GradError>
where
    T: Scalar,
    F32: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
    F64: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::<T>::new();
    if let Some(kind) = fault {
        g.inject_gradient_fault(kind);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.cast())).collect();
    let loss = f_analytic(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.grad(v)
                .map(|gr| gr.cast())
                .unwrap_or_else(|| Tensor::zeros(t.shape()))
        })
        .collect();

    let eval = |xs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::<f64>::inference();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f_numeric(&mut g, &vars)?;
        Ok(g.value(out).item())
    };

    let mut err = GradError {
        max_rel: 0.0,
        max_abs: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut xs = inputs.to_vec();
    for i in 0..xs.len() {
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + step;
            let plus = eval(&xs)?;
            xs[i].data_mut()[j] = orig - step;
            let minus = eval(&xs)?;
            xs[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            err.merge(i, j, analytic[i].data()[j], numeric);
        }
    }
    Ok(err)
}

/// Same-precision convenience wrapper for `f64` closures.
pub fn check_f64<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<GradError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    check::<f64, _, _>(inputs, step, None, &f, &f)
}

/// Scalar function of a parameter store, evaluable at any precision.
pub trait Objective {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Result<Var>;
}

/// Finite-difference check of every parameter gradient of `obj`.
///
/// The analytic pass runs at `T` on a cast of `store`; the numeric pass
/// perturbs `store` itself and evaluates at `f64`.
pub fn check_params<T: Scalar, O: Objective>(
    store: &ParamStore<f64>,
    step: f64,
    fault: Option<OpKind>,
    obj: &O,
) -> Result<GradError> {
    let cast: ParamStore<T> = store.cast();
    let mut g = Graph::<T>::new();
    if let Some(kind) = fault {
        g.inject_gradient_fault(kind);
    }
    let loss = obj.eval(&mut g, &cast)?;
    g.backward(loss)?;
    let mut analytic: Vec<Tensor<f64>> = store
        .entries()
        .iter()
        .map(|e| Tensor::zeros(e.value.shape()))
        .collect();
    for (id, grad) in g.param_grads() {
        analytic[id.index()] = grad.cast();
    }

    let mut err = GradError {
        max_rel: 0.0,
        max_abs: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work = store.clone();
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::<f64>::inference();
        let out = obj.eval(&mut g, s)?;
        Ok(g.value(out).item())
    };
    for id in store.ids() {
        for j in 0..store.get(id).numel() {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[j] = orig;
            err.merge(id.index(), j, analytic[id.index()].data()[j], (plus - minus) / (2.0 * step));
        }
    }
    Ok(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_passes() {
        let x = Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap();
        let err = check_f64(&[x], 1e-3, |g, v| {
            let sq = g.mul(v[0], v[0])?;
            let cube = g.mul(sq, v[0])?;
            g.sum(cube)
        })
        .unwrap();
        assert!(err.max_rel < 1e-5, "{err:?}");
        assert_eq!(err.checked, 3);
    }

    #[test]
    fn injected_fault_is_detected() {
        let x = Tensor::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap();
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let y = g.sigmoid(v[0])?;
            g.sum(y)
        };
        let err = check::<f64, _, _>(&[x], 1e-3, Some(OpKind::Sigmoid), f, f).unwrap();
        assert!(err.max_rel > 1e-2, "{err:?}");
    }
}
