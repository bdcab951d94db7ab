use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic − numeric| / max(1, |analytic|, |numeric|).
    pub max_rel_error: f64,
    /// (input index, coordinate) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.shape() != [1] {
        return Err(Error::InvalidArgument(format!(
            "grad_check function must return a scalar, got {:?}",
            v.shape()
        )));
    }
    Ok(v.data()[0])
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central differences over every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    grad_check_coords(f, inputs, eps, &coords)
}

/// Like [`grad_check`] but only over the listed `(input, coordinate)` pairs.
pub fn grad_check_coords<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_finite() {
        return Err(Error::NonFinite("grad_check: function value".into()));
    }
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    drop(tape);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = inputs.to_vec();
    for &(i, j) in coords {
        let orig = probe[i].data()[j];
        probe[i].data_mut()[j] = orig + eps;
        let plus = eval_scalar(&f, &probe)?;
        probe[i].data_mut()[j] = orig - eps;
        let minus = eval_scalar(&f, &probe)?;
        probe[i].data_mut()[j] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "grad_check: input {i} coordinate {j}"
            )));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i][j];
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel;
            report.worst = Some((i, j));
        }
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
        Tensor::vector((0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
    }

    #[test]
    fn square_sum_is_exact_to_roundoff() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_vec(&mut rng, 10);
        let r = grad_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum(sq))
            },
            &[x],
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
        assert_eq!(r.checked, 10);
    }

    #[test]
    fn relu_away_from_kink() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let data = (0..10)
            .map(|_| {
                let m: f64 = rng.random_range(0.1..2.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect();
        let r = grad_check(
            |t, v| {
                let y = t.relu(v[0]);
                Ok(t.sum(y))
            },
            &[Tensor::vector(data)],
            1e-4,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let r = grad_check(
            |t, _| Ok(t.constant(Tensor::scalar(3.0))),
            &[Tensor::vector(vec![1.0, 2.0])],
            1e-4,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_is_reported_with_coordinate() {
        // log(x) at x = 1e-5 goes negative under the -eps probe.
        let err = grad_check(
            |t, v| {
                let y = t.log(v[0]);
                Ok(t.sum(y))
            },
            &[Tensor::vector(vec![1.0, 1e-5])],
            1e-4,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("coordinate 1"), "{err}");
    }
}
