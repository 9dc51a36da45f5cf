//! Central finite-difference gradient checking against [`Tape::backward`].

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Outcome for one parameter block.
#[derive(Clone, Debug)]
pub struct BlockReport {
    pub name: String,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`.
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
    /// Both norms fell below the finite-difference resolution, so the block
    /// was compared as an exact zero gradient.
    pub zero_block: bool,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&BlockReport> {
        self.blocks
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn all_passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }
}

// Finite differences cannot resolve gradients below roughly
// `eps · |f| / h` per element; this factor leaves headroom above that.
const RESOLUTION_FACTOR: f64 = 100.0;

// Analytic norm a zero block may have: roundoff only.
const ZERO_ANALYTIC: f64 = 1e-10;

/// Compares the tape gradient of `f` with the fourth-order central difference
/// `(8(f(θ+h) − f(θ−h)) − (f(θ+2h) − f(θ−2h))) / 12h`,
/// `h = rel_step · max(1, |θ|)`, for every element of every block in `params`.
///
/// `f` records a scalar loss on the given tape from the parameter handles,
/// which arrive in the same order as `params`.
pub fn grad_check<F>(
    params: &[(String, Tensor)],
    f: F,
    rel_step: Scalar,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|(_, t)| tape.param(t)).collect();
        let loss = f(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|v| grads.get(*v)).collect()
    };

    let eval = |ps: &[Tensor]| -> Result<Scalar> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|t| tape.constant_ref(t)).collect();
        let loss = f(&mut tape, &vars)?;
        tape.value(loss).item()
    };

    let mut work: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let f0 = eval(&work)?.abs().max(1.0) as f64;
    let mut blocks = Vec::with_capacity(params.len());
    for (b, (name, _)) in params.iter().enumerate() {
        let mut diff_sq = 0.0f64;
        let mut a_sq = 0.0f64;
        let mut n_sq = 0.0f64;
        let mut max_abs = 0.0f64;
        for i in 0..work[b].numel() {
            let theta = work[b].data()[i];
            let h = rel_step * theta.abs().max(1.0);
            let mut at = |x: Scalar| -> Result<f64> {
                work[b].data_mut()[i] = x;
                Ok(eval(&work)? as f64)
            };
            let near = at(theta + h)? - at(theta - h)?;
            let far = at(theta + 2.0 * h)? - at(theta - 2.0 * h)?;
            work[b].data_mut()[i] = theta;
            let numeric = (8.0 * near - far) / (12.0 * h as f64);
            let a = analytic[b].data()[i] as f64;
            diff_sq += (a - numeric).powi(2);
            a_sq += a * a;
            n_sq += numeric * numeric;
            max_abs = max_abs.max((a - numeric).abs());
        }
        let (a_norm, n_norm) = (a_sq.sqrt(), n_sq.sqrt());
        let resolution =
            RESOLUTION_FACTOR * (work[b].numel() as f64).sqrt() * Scalar::EPSILON as f64 * f0
                / rel_step as f64;
        let zero_block = n_norm < resolution && a_norm < ZERO_ANALYTIC.max(resolution * 1e-3);
        let rel_err = if zero_block {
            0.0
        } else {
            diff_sq.sqrt() / a_norm.max(n_norm)
        };
        blocks.push(BlockReport {
            name: name.clone(),
            rel_err,
            max_abs_err: max_abs,
            analytic_norm: a_norm,
            numeric_norm: n_norm,
            zero_block,
            passed: rel_err < tol,
        });
    }
    Ok(GradCheckReport { tol, blocks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[cfg(not(feature = "f32"))]
    const STEP: Scalar = 1e-4;
    #[cfg(feature = "f32")]
    const STEP: Scalar = 2e-2;
    #[cfg(not(feature = "f32"))]
    const TOL: f64 = 1e-5;
    #[cfg(feature = "f32")]
    const TOL: f64 = 1e-3;

    #[test]
    fn quadratic() {
        let params = vec![("theta".to_string(), Tensor::scalar(3.0))];
        let report = grad_check(
            &params,
            |tape, v| {
                let sq = tape.map(v[0], |x| x * x, |x| 2.0 * x)?;
                tape.sum(sq)
            },
            STEP,
            TOL,
        )
        .unwrap();
        assert!(report.all_passed(), "{report:?}");
    }

    #[test]
    fn shift_invariant_block_is_a_zero_block() {
        // softmax ignores a common shift, so `c` has an exactly zero gradient
        let params = vec![
            (
                "x".to_string(),
                Tensor::new(&[1, 3], vec![0.2, -0.4, 0.9]).unwrap(),
            ),
            ("c".to_string(), Tensor::new(&[1, 1], vec![0.7]).unwrap()),
        ];
        let report = grad_check(
            &params,
            |tape, v| {
                let ones = tape.constant(Tensor::ones(&[1, 3]));
                let shift = tape.matmul(v[1], ones)?;
                let z = tape.add(v[0], shift)?;
                let p = tape.softmax_rows(z)?;
                let w = tape.constant(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
                let y = tape.sub(p, w)?;
                let sq = tape.map(y, |x| x * x, |x| 2.0 * x)?;
                tape.sum(sq)
            },
            STEP,
            TOL,
        )
        .unwrap();
        assert!(
            !report.blocks[0].zero_block && report.blocks[0].passed,
            "{report:?}"
        );
        assert!(
            report.blocks[1].zero_block && report.blocks[1].passed,
            "{report:?}"
        );
    }

    #[test]
    fn wrong_gradient_on_flat_block_is_not_hidden() {
        // the loss ignores `c`, but its adjoint claims slope 1e-3
        let params = vec![("c".to_string(), Tensor::new(&[2], vec![0.5, 0.5]).unwrap())];
        let report = grad_check(
            &params,
            |tape, v| {
                let flat = tape.map(v[0], |_| 1.0, |_| 1e-3)?;
                tape.sum(flat)
            },
            STEP,
            TOL,
        )
        .unwrap();
        assert!(!report.blocks[0].zero_block);
        assert!(!report.all_passed());
    }

    #[test]
    fn corrupted_adjoint_is_flagged() {
        let params = vec![
            (
                "good".to_string(),
                Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap(),
            ),
            (
                "bad".to_string(),
                Tensor::new(&[3], vec![0.3, 1.5, -0.7]).unwrap(),
            ),
        ];
        let report = grad_check(
            &params,
            |tape, v| {
                let good = tape.map(v[0], |x| x * x * x, |x| 3.0 * x * x)?;
                // wrong derivative: 2x² instead of 3x²
                let bad = tape.map(v[1], |x| x * x * x, |x| 2.0 * x * x)?;
                let s = tape.add(good, bad)?;
                tape.sum(s)
            },
            STEP,
            TOL,
        )
        .unwrap();
        assert!(report.blocks[0].passed);
        assert!(!report.blocks[1].passed);
        assert!(!report.blocks[1].zero_block);
        assert_eq!(report.worst().unwrap().name, "bad");
    }
}
