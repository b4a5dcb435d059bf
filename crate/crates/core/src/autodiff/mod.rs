//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is built fresh for every forward pass. Values flow through
//! [`Var`] handles; any primitive whose inputs include a tracked value is
//! recorded, and [`Tape::backward`] sweeps the record once in reverse.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_gradient, relative_error};
pub use tape::{Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
use tape::sigmoid;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Check d(sum(w ⊙ op(x)))/dx for a fixed random weighting `w`.
    fn check_unary<F>(shape: &[usize], seed: u64, tol: f64, op: F)
    where
        F: for<'t> Fn(&Var<'t>) -> Var<'t>,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random(shape, &mut rng);
        let probe = {
            let tape = Tape::new();
            op(&tape.constant(x0.clone())).value().clone()
        };
        let w = random(probe.shape(), &mut rng);
        let eval = |x: &Tensor| {
            let tape = Tape::new();
            let y = op(&tape.constant(x.clone()));
            y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
        };
        let tape = Tape::new();
        let x = tape.param(x0.clone());
        let y = op(&x);
        let loss = y.mul(&tape.constant(w.clone())).unwrap().sum().unwrap();
        let grads = tape.backward(&loss).unwrap();
        let analytic = grads.get_or_zeros(&x);
        let numeric = finite_difference_gradient(eval, &x0, 1e-5);
        let err = relative_error(&analytic, &numeric);
        assert!(err < tol, "relative error {err} >= {tol}");
    }

    #[test]
    fn matmul_identity() {
        let tape = Tape::new();
        let a = Tensor::matrix(3, 3, (1..=9).map(f64::from).collect()).unwrap();
        let out = tape.constant(Tensor::identity(3)).matmul(&tape.constant(a.clone())).unwrap();
        assert_eq!(out.value(), &a);
    }

    #[test]
    fn analytic_values() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::vector(vec![0.0; 3])).softmax(0).unwrap();
        for p in s.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(tape.scalar(0.0).sigmoid().unwrap().item(), 0.5);
        assert_eq!(tape.scalar(0.0).tanh().unwrap().item(), 0.0);
    }

    #[test]
    fn cross_entropy_is_stable() {
        let tape = Tape::new();
        let ce = |v: Vec<f64>, t| tape.constant(Tensor::vector(v)).cross_entropy(t).unwrap().item();
        assert!((ce(vec![0.0, 0.0], 0) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(ce(vec![1000.0, 0.0], 0).abs() < 1e-12);
        assert!((ce(vec![0.0, 1000.0], 0) - 1000.0).abs() < 1e-9);
        let err = tape.constant(Tensor::vector(vec![0.0, 0.0])).cross_entropy(2);
        assert!(matches!(err, Err(crate::FvnError::Argument(_))));
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        // d/dx [sg(x)·x] at x = 3 is 3: only the free factor contributes.
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = x.stop_gradient().mul(&x).unwrap();
        let g = tape.backward(&y).unwrap();
        assert_eq!(g.get(&x).unwrap().item(), 3.0);

        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0]));
        let y = x.stop_gradient().add(&tape.constant(Tensor::vector(vec![0.0, 0.0]))).unwrap();
        assert!(y.node_id().is_none());
        assert_eq!(x.stop_gradient().value(), x.value());
    }

    #[test]
    fn backward_basics() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.3; 5]));
        let g = tape.backward(&x.sum().unwrap()).unwrap();
        assert_eq!(g.get(&x).unwrap().data(), &[1.0; 5]);

        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.param(Tensor::scalar(5.0));
        let g = tape.backward(&x.mul(&y).unwrap()).unwrap();
        assert_eq!(g.get(&x).unwrap().item(), 5.0);
        assert_eq!(g.get(&y).unwrap().item(), 2.0);

        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(&x), Err(crate::FvnError::Argument(_))));
    }

    #[test]
    fn shape_and_numeric_errors() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(a.add(&b), Err(crate::FvnError::Dimension { .. })));
        let bad = tape.constant(Tensor::vector(vec![f64::NAN, 1.0]));
        assert!(matches!(bad.tanh(), Err(crate::FvnError::Numeric { .. })));
    }

    #[test]
    fn finite_difference_oracle() {
        let g = finite_difference_gradient(|x| x.item() * x.item(), &Tensor::scalar(3.0), 1e-5);
        assert!((g.item() - 6.0).abs() < 1e-8);
        let g = finite_difference_gradient(
            |x| x.data().iter().map(|&v| sigmoid(v)).sum(),
            &Tensor::vector(vec![0.0; 4]),
            1e-5,
        );
        for v in g.data() {
            assert!((v - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn primitive_gradients_match_finite_differences() {
        let tol = 1e-6;
        check_unary(&[4], 1, tol, |x| x.sigmoid().unwrap());
        check_unary(&[4], 2, tol, |x| x.tanh().unwrap());
        check_unary(&[2, 3], 3, tol, |x| x.softmax(1).unwrap());
        check_unary(&[3, 2], 4, tol, |x| x.softmax(0).unwrap());
        check_unary(&[4], 5, tol, |x| x.scale(-1.7).unwrap());
        check_unary(&[3, 4], 6, tol, |x| x.slice(1, 1, 2).unwrap());
        check_unary(&[3, 4], 7, tol, |x| x.row(2).unwrap());
        check_unary(&[5], 8, tol, |x| x.mean().unwrap());
        check_unary(&[5], 9, tol, |x| x.sum_sq().unwrap());
        check_unary(&[3], 10, tol, |x| x.sigmoid().unwrap().log().unwrap());
        check_unary(&[4], 11, tol, |x| x.cross_entropy(2).unwrap());
        check_unary(&[4], 12, tol, |x| x.bce_with_logits(&[1.0, 0.0, 0.0, 1.0]).unwrap());
        check_unary(&[2, 3], 13, tol, |x| {
            let tape = x.tape();
            let other = tape.constant(Tensor::matrix(3, 2, vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.7]).unwrap());
            x.matmul(&other).unwrap()
        });
        check_unary(&[3], 14, tol, |x| {
            let m = x.tape().constant(Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.7]).unwrap());
            m.matmul(x).unwrap()
        });
        check_unary(&[2], 15, tol, |x| {
            let m = x.tape().constant(Tensor::matrix(2, 3, vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.7]).unwrap());
            x.matmul(&m).unwrap()
        });
        check_unary(&[2, 2], 16, tol, |x| {
            let c = x.tape().constant(Tensor::matrix(1, 2, vec![0.2, 0.9]).unwrap());
            Var::concat(&[x.clone(), c, x.clone()], 0).unwrap()
        });
        check_unary(&[2, 2], 17, tol, |x| Var::concat(&[x.clone(), x.tanh().unwrap()], 1).unwrap());
        check_unary(&[3], 18, tol, |x| Var::stack_rows(&[x.clone(), x.sigmoid().unwrap()]).unwrap());
        check_unary(&[3], 19, tol, |x| x.mul(x).unwrap().sub(&x.scale(0.5).unwrap()).unwrap());
    }

    #[test]
    fn matmul_right_operand_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random(&[3, 2], &mut rng);
        check_unary(&[2, 4], 22, 1e-6, move |x| x.tape().constant(a.clone()).matmul(x).unwrap());
    }

    #[test]
    fn two_layer_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w1 = random(&[4, 3], &mut rng);
        let w2 = random(&[2, 4], &mut rng);
        check_unary(&[3], 23, 1e-6, move |x| {
            let t = x.tape();
            let h = t.constant(w1.clone()).matmul(x).unwrap().tanh().unwrap();
            t.constant(w2.clone()).matmul(&h).unwrap().softmax(0).unwrap()
        });
    }

    #[test]
    fn straight_through_copies_gradient() {
        let tape = Tape::new();
        let z = tape.param(Tensor::vector(vec![0.1, 0.2]));
        let q = z.straight_through(Tensor::vector(vec![1.0, -1.0])).unwrap();
        assert_eq!(q.data(), &[1.0, -1.0]);
        let loss = q.mul(&q).unwrap().sum().unwrap();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.get(&z).unwrap().data(), g.get(&q).unwrap().data());
        assert_eq!(g.get(&z).unwrap().data(), &[2.0, -2.0]);
    }

    #[test]
    fn frozen_replay_matches_estimator_gradient() {
        // loss = ‖q‖² + ‖sg(x) - x‖² with q = ST(x -> sign(x)).
        fn f<'t>(tape: &'t Tape, x0: &Tensor) -> (Var<'t>, Var<'t>) {
            let x = tape.param(x0.clone());
            let sign = Tensor::vector(x0.data().iter().map(|v| v.signum()).collect());
            let q = x.straight_through(sign).unwrap();
            let loss = q.sum_sq().unwrap().add(&x.stop_gradient().sub(&x).unwrap().sum_sq().unwrap()).unwrap();
            (x, loss)
        }
        let x0 = Tensor::vector(vec![0.3, -0.7, 1.2]);
        let tape = Tape::recording();
        let (x, loss) = f(&tape, &x0);
        let analytic = tape.backward(&loss).unwrap().get(&x).unwrap().clone();
        let frozen = tape.frozen_values();
        assert_eq!(frozen.len(), 3);
        let numeric = finite_difference_gradient(|p| f(&Tape::replaying(frozen.clone()), p).1.item(), &x0, 1e-5);
        assert!(relative_error(&analytic, &numeric) < 1e-8, "{analytic:?} vs {numeric:?}");
        // Replaying at the base point reproduces the forward value.
        assert_eq!(f(&Tape::replaying(frozen), &x0).1.item(), loss.item());
        let empty = Tape::replaying(vec![]);
        assert!(empty.param(x0.clone()).straight_through(x0.clone()).is_err());
    }

    #[test]
    fn deterministic_replay() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let tape = Tape::new();
            let x = tape.param(random(&[3, 3], &mut rng));
            let y = x.matmul(&x).unwrap().softmax(1).unwrap().sum_sq().unwrap();
            let g = tape.backward(&y).unwrap();
            (y.item().to_bits(), g.get(&x).unwrap().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }

    proptest::proptest! {
        #[test]
        fn softmax_normalizes(v in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
            let tape = Tape::new();
            let s = tape.constant(Tensor::vector(v)).softmax(0).unwrap();
            let total: f64 = s.data().iter().sum();
            proptest::prop_assert!(s.data().iter().all(|p| *p >= 0.0));
            proptest::prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
