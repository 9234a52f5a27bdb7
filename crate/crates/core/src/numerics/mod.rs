//! Tensors, reverse-mode differentiation and the optimizer.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport, FD_ABS_TOL, FD_STEP};
pub use optim::{
    clip_global_norm, AdamW, AdamWConfig, LrSchedule, REFERENCE_DECAY_RATE, REFERENCE_TOTAL_STEPS,
    REFERENCE_WARMUP_STEPS,
};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::{sigmoid, softmax_rows};

use crate::error::{Error, Result};

/// Matrix product of two rank-2 tensors.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.matmul(b)
}

/// Cosine of the angle between two equal-length vectors.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine_similarity",
            left: alloc::vec![u.len()],
            right: alloc::vec![v.len()],
        });
    }
    let nu = libm::sqrt(u.iter().map(|x| x * x).sum());
    let nv = libm::sqrt(v.iter().map(|x| x * x).sum());
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroNorm { op: "cosine_similarity" });
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Mean softmax cross-entropy of `logits[n×c]` against class indices.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let tape = Tape::new();
    Ok(tape.constant(logits.clone()).softmax_cross_entropy(labels)?.item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn identity_and_hand_products() {
        let i = Tensor::identity(2);
        let b = Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(matmul(&i, &b).unwrap(), b);
        let r = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let c = Tensor::matrix(2, 1, vec![3.0, 4.0]).unwrap();
        assert_eq!(matmul(&r, &c).unwrap().data(), &[11.0]);
        assert!(matmul(&r, &r).is_err());
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_similarity(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine_similarity(&[1.0, 1.0], &[-1.0, -1.0]).unwrap() + 1.0).abs() < 1e-15);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let uniform = Tensor::matrix(1, 4, vec![0.7; 4]).unwrap();
        let v = softmax_cross_entropy(&uniform, &[2]).unwrap();
        assert!((v - libm::log(4.0)).abs() < 1e-15);
        let extreme = Tensor::matrix(1, 2, vec![1000.0, 0.0]).unwrap();
        let v = softmax_cross_entropy(&extreme, &[0]).unwrap();
        assert!(v.abs() < 1e-300 || v == 0.0);
        assert!(matches!(
            softmax_cross_entropy(&extreme, &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }
}
