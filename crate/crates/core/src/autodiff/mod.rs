//! Minimal reverse-mode automatic differentiation over dense arrays.
//!
//! Values live on a [`Tape`]; [`Var`] handles record operations. Gradients are
//! recorded as further operations on the same tape, which is what makes
//! gradient-of-gradient computations (IRMv1 penalties, the TRM
//! gradient-matching term) possible. Broadcasting is limited to scalar-with-array.

mod array;
mod tape;

pub use array::Array;
pub use tape::{GradMap, Tape, Var};

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected {expected}, got shape {got:?}")]
    Rank { op: &'static str, expected: &'static str, got: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    Length { shape: Vec<usize>, len: usize },
    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: label {label} out of range for {classes} classes")]
    Label { op: &'static str, label: usize, classes: usize },
    #[error("{op}: expected {expected} arguments, got {got}")]
    Arity { op: &'static str, expected: usize, got: usize },
    #[error("gradient requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("variable belongs to a different tape")]
    ForeignTape,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * (1.0 + b.abs())
    }

    #[test]
    fn logistic_of_zero() {
        let t = Tape::new();
        let x = t.var(Array::scalar(0.0));
        assert!(close(x.logistic().unwrap().item(), std::f64::consts::LN_2, 1e-15));
    }

    #[test]
    fn dot_example() {
        let t = Tape::new();
        let a = t.constant(Array::vector(vec![1.0, 2.0, 3.0]));
        let b = t.constant(Array::vector(vec![4.0, 5.0, 6.0]));
        assert_eq!(a.dot(b).unwrap().item(), 32.0);
    }

    #[test]
    fn square_derivative() {
        let t = Tape::new();
        let x = t.var(Array::scalar(3.0));
        let g = t.grad(x.square().unwrap(), &[x]).unwrap();
        assert_eq!(g.at(0).item(), 6.0);
    }

    #[test]
    fn logistic_gradient_at_origin() {
        let t = Tape::new();
        let w = t.var(Array::vector(vec![0.0, 0.0]));
        let z = t.constant(Array::vector(vec![1.0, 1.0]));
        let l = w.dot(z).unwrap().logistic().unwrap();
        let g = t.grad(l, &[w]).unwrap();
        assert_eq!(g.at(0).data(), &[-0.5, -0.5]);
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let t = Tape::new();
        let x = t.var(Array::scalar(2.0));
        let y = x.square().unwrap().detach();
        assert!(y.is_stop_gradient());
        let out = y.mul(x).unwrap();
        // d/dx [sg(x²)·x] = x² = 4, not 3x² = 12.
        assert_eq!(t.grad(out, &[x]).unwrap().at(0).item(), 4.0);
    }

    #[test]
    fn mixed_second_derivative() {
        let t = Tape::new();
        let a = t.var(Array::scalar(2.0));
        let b = t.var(Array::scalar(3.0));
        let f = a.square().unwrap().mul(b).unwrap();
        let g = t.grad_of_grad(f, &[a], &[Array::scalar(1.0)], &[b]).unwrap();
        assert_eq!(g.at(0).item(), 4.0);
    }

    #[test]
    fn hvp_of_half_norm() {
        let t = Tape::new();
        let w = t.var(Array::vector(vec![0.3, -1.2]));
        let f = w.norm_sq().unwrap().scale(0.5).unwrap();
        let h = t.grad_of_grad(f, &[w], &[Array::vector(vec![1.0, 2.0])], &[w]).unwrap();
        assert_eq!(h.at(0).data(), &[1.0, 2.0]);
    }

    #[test]
    fn absent_param_gets_zeros() {
        let t = Tape::new();
        let x = t.var(Array::scalar(1.0));
        let out = x.exp().unwrap();
        let late = t.var(Array::vector(vec![1.0, 2.0, 3.0]));
        let g = t.grad(out, &[late]).unwrap();
        assert_eq!(g.at(0).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let t = Tape::new();
        let a = t.var(Array::vector(vec![1.0, 2.0]));
        let b = t.var(Array::vector(vec![1.0, 2.0, 3.0]));
        match a.add(b) {
            Err(AdError::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let m = t.var(Array::matrix(2, 2, vec![1.0; 4]).unwrap());
        assert!(matches!(m.matvec(b), Err(AdError::Shape { op: "matvec", .. })));
    }

    #[test]
    fn non_finite_construction_rejected() {
        assert!(matches!(Array::new(&[2], vec![1.0, f64::NAN]), Err(AdError::NonFinite { .. })));
        let t = Tape::new();
        let x = t.var(Array::scalar(-1.0));
        assert!(matches!(x.ln(), Err(AdError::NonFinite { op: "log", .. })));
    }

    #[test]
    fn non_scalar_output_rejected() {
        let t = Tape::new();
        let x = t.var(Array::vector(vec![1.0, 2.0]));
        assert!(matches!(t.grad(x, &[x]), Err(AdError::NonScalarOutput { .. })));
    }

    #[test]
    fn foreign_tape_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.var(Array::scalar(1.0));
        let b = t2.var(Array::scalar(1.0));
        assert!(matches!(a.add(b), Err(AdError::ForeignTape)));
    }
}
