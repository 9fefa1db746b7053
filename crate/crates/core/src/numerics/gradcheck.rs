//! Central-difference verification of analytic gradients.

use super::params::{ParamSet, ParamVars};
use super::tape::{Graph, Var};
use crate::error::{ensure, Result};

#[derive(Clone, Debug)]
pub struct FdReport {
    /// Max over coordinates of `|analytic − numeric| / (|analytic| + |numeric| + 1e-12)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// Fourth-order central difference `f'(0)` from the shifted evaluations
/// `f(±h)` and `f(±2h)`.
pub fn central_difference<F>(h: f64, mut f: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    ensure!(h > 0.0, Configuration, "finite-difference step must be positive");
    let (p1, m1) = (f(h)?, f(-h)?);
    let (p2, m2) = (f(2.0 * h)?, f(-2.0 * h)?);
    Ok((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h))
}

/// `|a − b| / (|a| + |b| + 1e-12)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs() + 1e-12)
}

/// Compares the tape gradient of the loss built by `build` against central
/// differences (see [`central_difference`]) with step `h`, coordinate by
/// coordinate.
///
/// `build` must be deterministic: it is evaluated twice at the unperturbed
/// point and any disagreement is reported as an oracle error.
pub fn finite_diff_check<F>(params: &ParamSet, h: f64, mut build: F) -> Result<FdReport>
where
    F: FnMut(&mut Graph, &ParamVars) -> Result<Var>,
{
    ensure!(h > 0.0, Configuration, "finite-difference step must be positive");
    let mut analytic = params.clone();
    {
        let mut g = Graph::new();
        let vars = params.bind(&mut g);
        let loss = build(&mut g, &vars)?;
        analytic.collect_grads(&g.backward(loss)?, &vars)?;
    }

    let mut eval = |p: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let loss = build(&mut g, &vars)?;
        Ok(g.scalar(loss))
    };
    let base = eval(params)?;
    let again = eval(params)?;
    ensure!(
        base.to_bits() == again.to_bits(),
        Oracle,
        "loss is not deterministic: {base} then {again}"
    );

    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in &names {
        let original = params.get(name).expect("own name").clone();
        let grad = analytic.grad(name).expect("collected").clone();
        for i in 0..original.len() {
            let numeric = central_difference(h, |shift| {
                let mut moved = original.clone();
                moved.data_mut()[i] += shift;
                probe.set(name, moved)?;
                eval(&probe)
            })?;
            probe.set(name, original.clone())?;
            let rel = relative_error(grad.data()[i], numeric);
            report.coordinates += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::MvpError;
    use crate::numerics::Tensor2;

    fn theta(values: Vec<f64>) -> ParamSet {
        ParamSet::new()
            .with("theta", Tensor2::row_vector(values))
            .unwrap()
    }

    #[test]
    fn linear_sum_has_unit_gradient() {
        let p = theta(vec![0.3, -1.2, 4.0]);
        let r = finite_diff_check(&p, 1e-5, |g, v| g.sum_all(v["theta"])).unwrap();
        assert!(r.max_rel_error <= 1e-10, "{r:?}");
        assert_eq!(r.coordinates, 3);
    }

    #[test]
    fn squared_norm_at_origin_is_flat() {
        let p = theta(vec![0.0; 4]);
        let r = finite_diff_check(&p, 1e-5, |g, v| {
            let sq = g.mul(v["theta"], v["theta"])?;
            g.sum_all(sq)
        })
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        let p = theta(vec![1.0]);
        let mut calls = 0.0;
        let err = finite_diff_check(&p, 1e-5, |g, v| {
            calls += 1.0;
            let s = g.sum_all(v["theta"])?;
            g.add_const(s, calls)
        })
        .unwrap_err();
        assert!(matches!(err, MvpError::Oracle(_)));
    }
}
