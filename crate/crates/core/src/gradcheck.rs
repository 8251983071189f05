//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Denominator floor for the relative error.
pub const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param index, flat offset)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub coordinates: usize,
}

fn evaluate<F>(f: &F, params: &[Tensor], requires_grad: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| tape.leaf(p.clone(), requires_grad))
        .collect();
    let out = f(&mut tape, &vars)?;
    tape.check_finite()?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar function".into()));
    }
    Ok((tape, vars, out))
}

/// Compares the tape gradient of `f` at `params` with central differences
/// `(f(x + eps) - f(x - eps)) / 2eps` on every coordinate, returning the
/// worst `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::Parameter(format!("eps must be positive, got {eps}")));
    }
    let (tape, vars, out) = evaluate(&f, params, true)?;
    let base = tape.value(out).item();
    let (again_tape, _, again) = evaluate(&f, params, false)?;
    if again_tape.value(again).item().to_bits() != base.to_bits() {
        return Err(Error::UnreliableCheck(
            "function returned different values for identical inputs".into(),
        ));
    }
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var, &params[pi]);
        for k in 0..params[pi].numel() {
            let x0 = params[pi].data()[k];
            work[pi].data_mut()[k] = x0 + eps;
            let (t, _, o) = evaluate(&f, &work, false)?;
            let plus = t.value(o).item();
            work[pi].data_mut()[k] = x0 - eps;
            let (t, _, o) = evaluate(&f, &work, false)?;
            let minus = t.value(o).item();
            work[pi].data_mut()[k] = x0;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(ABS_FLOOR);
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, k);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_in(-2.0, 2.0)).collect()).unwrap()
    }

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.7, 1.1]);
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                let s = t.sum(sq);
                Ok(t.scale(s, 0.5))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        assert_eq!(r.coordinates, 3);
    }

    #[test]
    fn zero_eps_rejected() {
        let r = grad_check(|t, v| Ok(t.sum(v[0])), &[Tensor::scalar(1.0)], 0.0);
        assert!(matches!(r, Err(Error::Parameter(_))));
    }

    #[test]
    fn nondeterministic_function_detected() {
        let calls = std::cell::Cell::new(0.0);
        let r = grad_check(
            |t, v| {
                calls.set(calls.get() + 1.0);
                let c = t.constant(Tensor::scalar(calls.get()));
                t.mul(v[0], c)
            },
            &[Tensor::scalar(1.0)],
            1e-5,
        );
        assert!(matches!(r, Err(Error::UnreliableCheck(_))));
    }

    /// Every differentiable primitive against central differences on random
    /// inputs in [-2, 2].
    #[test]
    fn every_primitive() {
        let mut rng = Rng::new(2024);
        let a = random(&mut rng, &[3, 4]);
        let b = random(&mut rng, &[4, 5]);
        let c = random(&mut rng, &[5, 4]);
        let v = random(&mut rng, &[4]);
        let s = random(&mut rng, &[1]);
        let w = random(&mut rng, &[3, 4]);
        let table = random(&mut rng, &[6, 4]);
        let params = [a, b, c, v, s, w, table];

        let r = grad_check(
            |t, p| {
                let ab = t.matmul(p[0], p[1])?; // 3x5
                let abc = t.matmul_nt(ab, p[1])?; // 3x4
                let x = t.add(abc, p[5])?;
                let x = t.add_row(x, p[3])?;
                let x = t.col_scale(x, p[3])?;
                let x = t.scale_by(x, p[4])?;
                let x = t.gelu(x);
                let x = t.layer_norm(x, p[3], p[3])?;
                let g = t.gather(p[6], &[1, 4, 1])?;
                let x = t.mul(x, g)?;
                let sm = t.softmax_t(x, 1.7)?;
                let ls = t.log_softmax_t(x, 0.6)?;
                let y = t.mul(sm, ls)?;
                let r1 = t.row(y, 2)?;
                let y = t.sum(y);
                let r1 = t.sum(r1);
                let z = t.add(y, r1)?;
                Ok(t.scale(z, -1.0))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
