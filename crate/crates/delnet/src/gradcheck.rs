//! Central finite-difference oracle for backward passes.
//!
//! The analytic gradient of any scalar-valued graph function is checked
//! against (f(x+h) - f(x-h)) / 2h, h = 1e-5, evaluated with fresh forward
//! passes. Truncation error is O(h^2) and stays below ~1e-10 for the
//! curvatures these graphs produce, while the larger step keeps the
//! subtraction's cancellation noise small even for probe losses that
//! accumulate to O(100) over a few thousand flops. A healthy backward
//! implementation sits orders of magnitude below the 1e-6 relative
//! tolerance used by the test suites; probes that exercise ops with
//! kinks must keep their inputs at least h away from them.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

const H: f64 = 1e-5;

/// Relative error is measured against max(|analytic|, |numeric|, 1e-3):
/// the floor turns the comparison absolute for near-zero gradients, where
/// finite-difference noise would otherwise dominate the quotient.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Number of scalar parameters compared.
    pub checked: usize,
}

/// Check the gradient of `build` (a scalar-valued graph function) w.r.t.
/// every element of `inputs`. Inputs must be parameter tensors
/// (`Tensor::param`) so the analytic pass tracks them.
pub fn check_scalar_fn(
    inputs: &[Tensor],
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    if inputs.iter().any(|t| !t.requires_grad()) {
        return Err(Error::invalid("gradcheck", "inputs must be parameter tensors"));
    }

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let loss = build(&mut g, &vars)?;
    if g.numel(loss) != 1 {
        return Err(Error::invalid("gradcheck", "build must return a scalar"));
    }
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; g.numel(v)]))
        .collect();

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.frozen_leaf(t)).collect();
        let loss = build(&mut g, &vars)?;
        Ok(g.scalar_value(loss))
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel_err: f64 = 0.0;
    let mut checked = 0;
    for ti in 0..inputs.len() {
        for j in 0..inputs[ti].numel() {
            let orig = inputs[ti].data()[j];
            work[ti].data_mut()[j] = orig + H;
            let f_plus = eval(&work)?;
            work[ti].data_mut()[j] = orig - H;
            let f_minus = eval(&work)?;
            work[ti].data_mut()[j] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * H);
            let a = analytic[ti][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            max_rel_err = max_rel_err.max(rel);
            checked += 1;
        }
    }
    Ok(GradReport { max_rel_err, checked })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_a_correct_gradient() {
        let t = Tensor::param(vec![4], vec![0.3, -0.7, 1.1, 0.4]).unwrap();
        let rep = check_scalar_fn(&[t], |g, vs| Ok(g.square_sum(vs[0]))).unwrap();
        assert_eq!(rep.checked, 4);
        assert!(rep.max_rel_err < 1e-9, "rel err {}", rep.max_rel_err);
    }

    #[test]
    fn flags_a_broken_gradient() {
        // A build closure that lies to the finite-difference passes stands
        // in for a buggy backward implementation.
        let t = Tensor::param(vec![3], vec![0.5, 0.8, -0.9]).unwrap();
        let first_call = std::cell::Cell::new(true);
        let rep = check_scalar_fn(&[t], |g, vs| {
            if first_call.replace(false) {
                // Analytic pass sees f; every finite-difference pass sees 2f.
                Ok(g.square_sum(vs[0]))
            } else {
                let s = g.square_sum(vs[0]);
                g.scale(s, 2.0)
            }
        })
        .unwrap();
        assert!(rep.max_rel_err > 0.4, "expected a large mismatch, got {}", rep.max_rel_err);
    }

    #[test]
    fn rejects_non_parameter_inputs() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(check_scalar_fn(&[t], |g, vs| Ok(g.sum(vs[0]))).is_err());
    }

    #[test]
    fn rejects_non_scalar_build() {
        let t = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(check_scalar_fn(&[t], |g, vs| g.scale(vs[0], 1.0)).is_err());
    }
}
