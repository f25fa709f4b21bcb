//! Dense `f32` tensors with tape-based reverse-mode differentiation.
//!
//! The op set is the minimum a LLaMA-style decoder needs: matmul, elementwise
//! arithmetic, SiLU, softmax, RMS normalization, rotary encoding, embedding
//! gather and masked cross-entropy. Every op is checked against central
//! finite differences in `tests/gradcheck.rs`.

mod optim;
mod tape;
mod tensor;

pub use optim::{adam_step, cosine_lr, global_norm, AdamConfig, AdamState};
pub(crate) use tape::rope_rotate;
pub use tape::{log_softmax_row, Gradients, Reduction, Tape, Var, MASK_FILL, RMS_EPS};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("target id {target} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { target: usize, vocab: usize },
    #[error("index {index} out of range (< {bound})")]
    IndexOutOfRange { index: usize, bound: usize },
    #[error("every position is masked")]
    AllMasked,
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("unknown tape variable {0}")]
    UnknownVar(usize),
    #[error("{0}: empty input")]
    EmptyInput(&'static str),
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_and_scalar() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let a = tape.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let out = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(out), tape.value(a));

        let x = tape.constant(Tensor::from_rows(&[&[2.0]]));
        let y = tape.constant(Tensor::from_rows(&[&[3.0]]));
        let z = tape.matmul(x, y).unwrap();
        assert_eq!(tape.value(z).data(), &[6.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(
            tape.matmul(a, b),
            Err(AutodiffError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::new();
        let u = tape.constant(Tensor::from_rows(&[&[0.7, 0.7, 0.7, 0.7]]));
        let su = tape.softmax_lastdim(u);
        for &p in tape.value(su).data() {
            assert!((p - 0.25).abs() < 1e-7);
        }
        let r = tape.constant(Tensor::from_rows(&[&[0.0, 3.0f32.ln()]]));
        let sr = tape.softmax_lastdim(r);
        let d = tape.value(sr).data();
        assert!((d[0] - 0.25).abs() < 1e-6 && (d[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn rmsnorm_constant_and_zero_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[&[3.0, 3.0, 3.0], &[0.0, 0.0, 0.0]]));
        let g = tape.constant(Tensor::ones(&[3]));
        let y = tape.rmsnorm(x, g).unwrap();
        let d = tape.value(y).data();
        for &v in &d[..3] {
            assert!((v - 1.0).abs() < 1e-5);
        }
        assert_eq!(&d[3..], &[0.0, 0.0, 0.0]);

        let bad = tape.constant(Tensor::ones(&[4]));
        assert!(tape.rmsnorm(x, bad).is_err());
    }

    #[test]
    fn cross_entropy_limits_and_errors() {
        let mut tape = Tape::new();
        let uniform = tape.constant(Tensor::zeros(&[3, 4]));
        let l = tape
            .cross_entropy(uniform, &[0, 1, 3], &[true, true, true], Reduction::Mean)
            .unwrap();
        assert!((tape.value(l).data()[0] - 4.0f32.ln()).abs() < 1e-6);

        let peaked = tape.constant(Tensor::from_rows(&[&[60.0, 0.0, 0.0]]));
        let l = tape
            .cross_entropy(peaked, &[0], &[true], Reduction::Mean)
            .unwrap();
        assert!(tape.value(l).data()[0] < 1e-6);

        assert_eq!(
            tape.cross_entropy(uniform, &[0, 1, 2], &[false; 3], Reduction::Mean),
            Err(AutodiffError::AllMasked)
        );
        assert!(matches!(
            tape.cross_entropy(uniform, &[0, 9, 2], &[true; 3], Reduction::Mean),
            Err(AutodiffError::TargetOutOfRange {
                target: 9,
                vocab: 4
            })
        ));
    }

    #[test]
    fn backward_sum_unused_and_consumed() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::from_rows(&[&[1.0, -2.0, 5.0]]));
        let unused = tape.param(Tensor::zeros(&[2, 2]));
        let s = tape.sum(w);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(w).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(&[2, 2]));
        assert_eq!(tape.backward(s).unwrap_err(), AutodiffError::TapeConsumed);
        tape.reset();
        assert!(tape.backward(s).is_ok());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(w), Err(AutodiffError::NotScalar(_))));
    }
}
