//! Central finite-difference verification of reverse-mode gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One compared entry: which input, which flat index, and both gradients.
#[derive(Clone, Debug)]
pub struct EntryCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries: Vec<EntryCheck>,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }

    pub fn worst(&self) -> Option<&EntryCheck> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Smallest denominator used by [`relative_error`]. Central differences
/// at `h = 1e-5` on losses of size ~10 carry a few `1e-10` of rounding
/// error, which would dominate the ratio for gradients below this floor.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn eval<F>(f: &F, point: &[Tensor], requires_grad: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point
        .iter()
        .map(|t| tape.leaf(t.clone(), requires_grad))
        .collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Contract("grad_check function must return a scalar".into()));
    }
    if !tape.value(out).is_finite() {
        return Err(Error::NumericDomain { op: "grad_check" });
    }
    Ok((tape, vars, out))
}

/// Compares every entry of every input.
pub fn grad_check<F>(f: F, point: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let entries: Vec<(usize, usize)> = point
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    grad_check_entries(f, point, &entries, h, tol)
}

/// Compares only the listed `(input, flat index)` entries.
pub fn grad_check_entries<F>(
    f: F,
    point: &[Tensor],
    entries: &[(usize, usize)],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let (tape, vars, out) = eval(&f, point, true)?;
    let grads = tape.backward(out)?;
    drop(tape);

    let mut probe = point.to_vec();
    let mut checks = Vec::with_capacity(entries.len());
    let mut max_rel: f64 = 0.0;
    for &(input, index) in entries {
        let analytic = grads.get(vars[input]).map_or(0.0, |g| g.data()[index]);
        let orig = probe[input].data()[index];
        probe[input].data_mut()[index] = orig + h;
        let (t_plus, _, o_plus) = eval(&f, &probe, false)?;
        let f_plus = t_plus.value(o_plus).item();
        probe[input].data_mut()[index] = orig - h;
        let (t_minus, _, o_minus) = eval(&f, &probe, false)?;
        let f_minus = t_minus.value(o_minus).item();
        probe[input].data_mut()[index] = orig;

        let numeric = (f_plus - f_minus) / (2.0 * h);
        let rel_error = relative_error(analytic, numeric);
        max_rel = max_rel.max(rel_error);
        checks.push(EntryCheck {
            input,
            index,
            analytic,
            numeric,
            rel_error,
        });
    }
    Ok(GradCheckReport {
        entries: checks,
        max_rel_error: max_rel,
        tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new([3], vec![0.7, -1.3, 2.1]).unwrap();
        let report = grad_check(
            |tape, v| {
                let sq = tape.mul(v[0], v[0])?;
                let s = tape.scale(sq, 1.5);
                Ok(tape.sum(s))
            },
            &[x],
            1e-5,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::new([2], vec![1.0, 2.0]).unwrap();
        let report = grad_check(
            |tape, _| Ok(tape.constant(Tensor::scalar(4.0))),
            &[x],
            1e-5,
            1e-8,
        )
        .unwrap();
        for e in &report.entries {
            assert_eq!(e.analytic, 0.0);
            assert_eq!(e.numeric, 0.0);
        }
    }

    #[test]
    fn rejects_bad_step_and_non_finite_values() {
        let x = Tensor::new([1], vec![1.0]).unwrap();
        let id = |tape: &mut Tape, v: &[Var]| Ok(tape.sum(v[0]));
        assert!(grad_check(id, std::slice::from_ref(&x), 0.0, 1e-4).is_err());
        let inf = Tensor::new([1], vec![f64::INFINITY]).unwrap();
        assert!(matches!(
            grad_check(id, &[inf], 1e-5, 1e-4),
            Err(Error::NumericDomain { .. })
        ));
    }
}
