//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the relative error. Below it the comparison is
/// effectively absolute, which keeps round-off in near-zero gradients from
/// dominating.
pub const REL_ERROR_FLOOR: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param index, flat coordinate)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out).item();
    if !v.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite objective {v}")));
    }
    Ok(v)
}

/// Checks every coordinate of every parameter.
pub fn check_gradients<F>(f: F, params: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.len()).map(move |k| (i, k)))
        .collect();
    check_gradients_at(f, params, step, &coords)
}

/// Checks only the listed `(param, coordinate)` pairs.
pub fn check_gradients_at<F>(
    f: F,
    params: &[Tensor],
    step: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(
            "finite-difference step must be > 0".into(),
        ));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).item().is_finite() {
        return Err(Error::InvalidArgument("non-finite objective".into()));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            g.grad(*v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.len()])
        })
        .collect();

    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for &(pi, k) in coords {
        let orig = work[pi].data()[k];
        work[pi].data_mut()[k] = orig + step;
        let plus = evaluate(&f, &work)?;
        work[pi].data_mut()[k] = orig - step;
        let minus = evaluate(&f, &work)?;
        work[pi].data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic[pi][k];
        let err = relative_error(a, numeric);
        if err > report.max_rel_error || report.checked == 0 {
            report.max_rel_error = err;
            report.worst = (pi, k);
            report.analytic = a;
            report.numeric = numeric;
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let f = |g: &mut Graph, v: &[Var]| {
            let s = g.square(v[0]);
            Ok(g.sum(s))
        };
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let out = f(&mut g, &[xv]).unwrap();
        g.backward(out).unwrap();
        assert_eq!(g.grad(xv).unwrap(), &[2.0, 4.0]);
        let r = check_gradients(f, &[x], 1e-4).unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::new(vec![3], vec![0.3, -1.2, 4.0]).unwrap();
        let r = check_gradients(
            |g, v| {
                let y = g.scale(v[0], 2.5);
                Ok(g.sum(y))
            },
            &[x],
            1e-3,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }

    #[test]
    fn rejects_bad_step_and_nan() {
        let x = Tensor::scalar(1.0);
        assert!(check_gradients(|g, v| Ok(g.sum(v[0])), std::slice::from_ref(&x), 0.0).is_err());
        let nan = Tensor::scalar(f64::NAN);
        assert!(check_gradients(|g, v| Ok(g.sum(v[0])), &[nan], 1e-3).is_err());
    }
}
