//! Central finite-difference gradient oracle.
//!
//! Re-evaluates a forward closure at perturbed inputs; never touches the
//! tape's backward rules, so it stays an independent check of them.

use crate::error::Result;
use crate::scalar::Scalar;

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_difference_grad<F, E>(mut f: E, x: &[F], h: f64) -> Result<Vec<F>>
where
    F: Scalar,
    E: FnMut(&[F]) -> Result<F>,
{
    let step = F::of_f64(h);
    let two = F::of_f64(2.0 * h);
    let mut grad = vec![F::zero(); x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + step;
        let fp = f(&probe)?;
        probe[i] = orig - step;
        let fm = f(&probe)?;
        probe[i] = orig;
        grad[i] = (fp - fm) / two;
    }
    Ok(grad)
}

/// Worst mismatch between an analytic and a numeric gradient.
///
/// An entry agrees when `|a - n| <= rel_tol * max(|a|, |n|)` or when the
/// absolute difference is below `abs_floor` (both gradients effectively
/// zero). Returns `(all_agree, worst_relative_error)`.
pub fn grads_agree<F: Scalar>(
    analytic: &[F],
    numeric: &[F],
    rel_tol: f64,
    abs_floor: f64,
) -> (bool, f64) {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut worst = 0.0f64;
    let mut ok = true;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        let a = a.as_f64();
        let n = n.as_f64();
        let diff = (a - n).abs();
        if diff <= abs_floor {
            continue;
        }
        let rel = diff / a.abs().max(n.abs());
        if rel > worst {
            worst = rel;
        }
        if rel > rel_tol {
            ok = false;
        }
    }
    (ok, worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;

    #[test]
    fn finite_differences_recover_quadratic_gradient() {
        // f(x) = sum(x^2): df/dx_i = 2 x_i
        let x = vec![0.3f64, -1.2, 2.5];
        let g = finite_difference_grad(
            |v| {
                Ok(v.iter().map(|a| a * a).sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        for (gi, xi) in g.iter().zip(x.iter()) {
            assert!((gi - 2.0 * xi).abs() < 1e-8);
        }
    }

    #[test]
    fn tape_gradient_matches_finite_differences_on_composite_graph() {
        let x0 = vec![0.5f64, -0.3, 0.8, 1.1];
        let eval = |v: &[f64]| -> crate::Result<f64> {
            let tape = Tape::new();
            let w = tape.leaf(&[2, 2], v.to_vec())?;
            let y = w.matmul(&w)?.relu()?.softmax_rows()?.mean()?;
            Ok(y.item())
        };
        let numeric = finite_difference_grad(eval, &x0, 1e-5).unwrap();

        let tape = Tape::new();
        let w = tape.leaf(&[2, 2], x0.clone()).unwrap();
        let y = w
            .matmul(&w)
            .unwrap()
            .relu()
            .unwrap()
            .softmax_rows()
            .unwrap()
            .mean()
            .unwrap();
        tape.backward(&y).unwrap();
        let analytic = w.grad().unwrap();

        let (ok, worst) = grads_agree(&analytic, &numeric, 1e-4, 1e-9);
        assert!(ok, "worst relative error {worst}");
    }
}
