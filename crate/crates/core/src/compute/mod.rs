//! Shaped arrays with reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`] handles and
//! replays the record backwards in [`Graph::backward`]. Leaves created with
//! [`Graph::param`] accumulate gradients; leaves created with
//! [`Graph::constant`] do not. The element type is generic over [`Scalar`] so
//! the same model code runs in `f64` for gradient checks and `f32` for
//! training.

mod gradcheck;
mod graph;
mod scalar;
mod tensor;

use thiserror::Error;

pub use gradcheck::{
    finite_diff_check, relative_error, Coordinate, GradCheckReport, Mismatch, REPORT_THRESHOLD,
};
pub use graph::{Graph, Mode, Var};
pub use scalar::Scalar;
pub use tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ComputeError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {found} elements")]
    ElementCount { shape: Vec<usize>, found: usize },
    #[error("{op}: non-finite input")]
    NonFinite { op: &'static str },
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("cross entropy over zero labelled rows")]
    NoLabels,
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(g: &mut Graph<f64>, r: usize, c: usize, v: &[f64]) -> Var {
        g.param(Tensor::from_f64(&[r, c], v).unwrap())
    }

    #[test]
    fn matmul_shapes() {
        let mut g = Graph::<f64>::default();
        let a = mat(&mut g, 2, 3, &[1., 2., 3., 4., 5., 6.]);
        let b = mat(&mut g, 3, 4, &[1.; 12]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 4]);
        assert_eq!(g.value(c).data()[..4], [6., 6., 6., 6.]);
        let err = g.matmul(a, a).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::<f64>::default();
        let x = mat(&mut g, 1, 2, &[-1., 2.]);
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0., 2.]);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::<f64>::new(Mode::Train);
        let x = mat(&mut g, 1, 3, &[1., 2., 3.]);
        assert_eq!(g.dropout(x, 0.0, &mut rng).unwrap(), x);
        let mut e = Graph::<f64>::new(Mode::Eval);
        let x = mat(&mut e, 1, 3, &[1., 2., 3.]);
        assert_eq!(e.dropout(x, 0.5, &mut rng).unwrap(), x);
        assert!(g.dropout(x, 1.0, &mut rng).is_err());
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::<f64>::new(Mode::Train);
        let x = g.param(Tensor::full(&[1, 1000], 1.0));
        let y = g.dropout(x, 0.25, &mut rng).unwrap();
        let vals = g.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-12));
        let dropped = vals.iter().filter(|&&v| v == 0.0).count();
        assert!((150..350).contains(&dropped));
    }

    #[test]
    fn softmax_cases() {
        let mut g = Graph::<f64>::default();
        let x = mat(&mut g, 1, 4, &[0.; 4]);
        let y = g.softmax_lastdim(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);

        let x = mat(&mut g, 1, 2, &[1000., 0.]);
        let y = g.softmax_lastdim(x).unwrap();
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-12);
        assert!(g.value(y).data()[1] < 1e-300);

        // closed form: 1/(1+3), 3/(1+3)
        let x = mat(&mut g, 1, 2, &[1f64.ln(), 3f64.ln()]);
        let y = g.softmax_lastdim(x).unwrap();
        assert!((g.value(y).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 0.75).abs() < 1e-15);

        let x = mat(&mut g, 1, 2, &[f64::NAN, 0.]);
        assert!(g.softmax_lastdim(x).is_err());
        let x = mat(&mut g, 1, 2, &[f64::NEG_INFINITY, 0.]);
        let y = g.softmax_lastdim(x).unwrap();
        assert_eq!(g.value(y).data(), &[0., 1.]);
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::<f64>::default();
        let ones = g.param(Tensor::full(&[2], 1.0));
        let zeros = g.param(Tensor::zeros(&[2]));
        let x = mat(&mut g, 1, 2, &[3., 3.]);
        let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0., 0.]);

        let x = mat(&mut g, 1, 2, &[1., -1.]);
        let y = g.layer_norm(x, ones, zeros, 1e-14).unwrap();
        for (v, e) in g.value(y).data().iter().zip([1., -1.]) {
            assert!((v - e).abs() < 1e-12);
        }

        let c = g.param(Tensor::full(&[2], 0.7));
        let y = g.layer_norm(x, zeros, c, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.7, 0.7]);
    }

    #[test]
    fn cross_entropy_cases() {
        let mut g = Graph::<f64>::default();
        let x = mat(&mut g, 1, 5, &[0.3; 5]);
        let l = g.cross_entropy_logits(x, &[Some(2)]).unwrap();
        assert!((g.value(l).item() - 5f64.ln()).abs() < 1e-14);

        let x = mat(&mut g, 1, 3, &[50., 0., 0.]);
        let l = g.cross_entropy_logits(x, &[Some(0)]).unwrap();
        assert!(g.value(l).item() < 1e-20);

        // -ln(e^2 / (e^2 + 2)) = ln(1 + 2 e^-2)
        let x = mat(&mut g, 1, 3, &[2., 0., 0.]);
        let l = g.cross_entropy_logits(x, &[Some(0)]).unwrap();
        let expected = 0.239_544_766_221_884_5;
        assert!((g.value(l).item() - expected).abs() < 1e-15);

        assert_eq!(
            g.cross_entropy_logits(x, &[Some(3)]).unwrap_err(),
            ComputeError::InvalidLabel {
                label: 3,
                classes: 3
            }
        );
        assert_eq!(
            g.cross_entropy_logits(x, &[None]).unwrap_err(),
            ComputeError::NoLabels
        );
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut g = Graph::<f64>::default();
        let x = mat(&mut g, 1, 3, &[2., 0., 0.]);
        let l = g.cross_entropy_logits(x, &[Some(0)]).unwrap();
        g.backward(l).unwrap();
        let z = 2f64.exp() + 2.0;
        let expected = [2f64.exp() / z - 1.0, 1.0 / z, 1.0 / z];
        for (a, e) in g.grad(x).unwrap().data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_hand_derivatives() {
        let mut g = Graph::<f64>::default();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);

        let mut g = Graph::<f64>::default();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.param(Tensor::scalar(5.0));
        let z = g.mul(x, y).unwrap();
        g.backward(z).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 5.0);
        assert_eq!(g.grad(y).unwrap().item(), 2.0);
    }

    #[test]
    fn backward_accumulates_and_rejects_non_scalar() {
        let mut g = Graph::<f64>::default();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 12.0);
        g.zero_grads();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);

        let v = mat(&mut g, 1, 2, &[1., 2.]);
        assert!(matches!(g.backward(v), Err(ComputeError::NotScalar(_))));
    }

    #[test]
    fn backward_scales_linearly() {
        let build = |factor: f64| {
            let mut g = Graph::<f64>::default();
            let w = mat(&mut g, 2, 2, &[0.3, -0.2, 0.5, 0.1]);
            let x = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
            let h = g.matmul(x, w).unwrap();
            let l = g.cross_entropy_logits(h, &[Some(1)]).unwrap();
            let l = g.scale(l, factor);
            g.backward(l).unwrap();
            g.grad(w).unwrap()
        };
        let base = build(1.0);
        let scaled = build(2.5);
        for (a, b) in base.data().iter().zip(scaled.data()) {
            assert!((2.5 * a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::default();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.param(Tensor::scalar(4.0));
        let y = g.mul(c, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().item(), 2.0);
    }

    #[test]
    fn gather_and_slices_route_gradients() {
        let mut g = Graph::<f64>::default();
        let table = mat(&mut g, 3, 2, &[1., 2., 3., 4., 5., 6.]);
        let rows = g.embedding_gather(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(rows).data(), &[5., 6., 1., 2., 5., 6.]);
        assert!(g.embedding_gather(table, &[3]).is_err());
        let left = g.slice_cols(rows, 0, 1).unwrap();
        let right = g.slice_cols(rows, 1, 2).unwrap();
        let back = g.concat_lastdim(&[right, left]).unwrap();
        let top = g.slice_rows(back, 0, 2).unwrap();
        let bottom = g.slice_rows(back, 2, 3).unwrap();
        let joined = g.concat_rows(&[bottom, top]).unwrap();
        assert_eq!(g.value(joined).data(), &[6., 5., 6., 5., 2., 1.]);
        let s = g.sum(joined);
        g.backward(s).unwrap();
        assert_eq!(g.grad(table).unwrap().data(), &[1., 1., 0., 0., 2., 2.]);
    }
}
