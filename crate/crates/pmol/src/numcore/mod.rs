//! Dense-tensor numeric core: tensors, reverse-mode autodiff tape,
//! deterministic RNG, and a finite-difference gradient oracle.

pub mod gradcheck;
pub mod ops;
pub mod rng;
pub mod tensor;

pub use gradcheck::finite_difference_gradient;
pub use rng::Rng;
pub use tensor::{backward, Tape, Tensor};

#[cfg(test)]
mod gradcheck_tests {
    //! Analytic-vs-numeric cross-checks for every differentiable primitive.

    use super::ops;
    use super::{backward, finite_difference_gradient, Rng, Tape, Tensor};
    use crate::numcore::gradcheck::max_rel_error;

    /// Gradchecks a builder that maps a watched copy of `x` to a scalar loss.
    fn check<F>(x: &Tensor, f: F, tol: f64)
    where
        F: Fn(&Tensor) -> crate::error::Result<Tensor>,
    {
        let tape = Tape::new();
        let xt = tape.watch(x);
        let loss = f(&xt).unwrap();
        backward(&loss).unwrap();
        let analytic = xt.grad().unwrap();
        let numeric = finite_difference_gradient(&f, x, 1e-5).unwrap();
        let err = max_rel_error(analytic.values(), numeric.values());
        assert!(err < tol, "gradient mismatch: rel err {err}");
    }

    fn rand_t(rng: &mut Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, rng.normal_vec(n, 0.0, 1.0)).unwrap()
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = Rng::new(101);
        for _ in 0..20 {
            let x = rand_t(&mut rng, vec![5]);
            let c = rand_t(&mut rng, vec![5]);
            check(&x, |x| ops::sum_all(&ops::mul(x, &c)?), 1e-6);
            check(&x, |x| ops::sum_all(&ops::add(&ops::scale(x, 2.5), &c)?), 1e-6);
            check(&x, |x| ops::sum_all(&ops::sub(&c, x)?), 1e-6);
            check(&x, |x| ops::sum_all(&ops::log_sigmoid(x)), 1e-5);
            check(&x, |x| ops::mean_all(&ops::relu(&ops::add_scalar(x, 0.37))), 1e-5);
        }
    }

    #[test]
    fn matmul_both_sides() {
        let mut rng = Rng::new(102);
        for _ in 0..10 {
            let a = rand_t(&mut rng, vec![3, 4]);
            let b = rand_t(&mut rng, vec![4, 2]);
            check(&a, |a| ops::sum_all(&ops::mul(&ops::matmul(a, &b)?, &ops::matmul(a, &b)?)?), 1e-5);
            check(&b, |b| ops::sum_all(&ops::mul(&ops::matmul(&a, b)?, &ops::matmul(&a, b)?)?), 1e-5);
        }
    }

    #[test]
    fn softmax_composite_kl_graph() {
        // KL(p || softmax(x)) for a fixed target p: exercises softmax + ln chain
        let mut rng = Rng::new(103);
        for _ in 0..10 {
            let x = rand_t(&mut rng, vec![6]);
            let p = {
                let raw = rng.normal_vec(6, 0.0, 1.0);
                let e: Vec<f64> = raw.iter().map(|v| v.exp()).collect();
                let z: f64 = e.iter().sum();
                e.into_iter().map(|v| v / z).collect::<Vec<_>>()
            };
            check(
                &x,
                |x| {
                    let lw = ops::ln(&ops::softmax(x, 0)?)?;
                    let pc = Tensor::new(vec![6], p.clone())?;
                    Ok(ops::scale(&ops::sum_all(&ops::mul(&lw, &pc)?)?, -1.0))
                },
                1e-5,
            );
        }
    }

    #[test]
    fn structural_ops() {
        let mut rng = Rng::new(104);
        let x = rand_t(&mut rng, vec![4, 6]);
        let w = rand_t(&mut rng, vec![4]);
        let bias = rand_t(&mut rng, vec![6]);
        check(&x, |x| ops::sum_all(&ops::mul(&ops::slice_cols(x, 1, 4)?, &ops::slice_cols(x, 2, 5)?)?), 1e-5);
        check(&x, |x| ops::sum_all(&ops::mul(&ops::slice_rows(x, 1, 3)?, &ops::slice_rows(x, 0, 2)?)?), 1e-5);
        check(&x, |x| {
            let h = ops::scale_rows_by_col(x, &w)?;
            ops::sum_all(&ops::mul(&h, &h)?)
        }, 1e-5);
        check(&w, |w| {
            let h = ops::scale_rows_by_col(&x, w)?;
            ops::sum_all(&ops::mul(&h, &h)?)
        }, 1e-5);
        check(&x, |x| {
            let m = ops::mean_rows(x)?;
            ops::sum_all(&ops::mul(&m, &m)?)
        }, 1e-5);
        check(&x, |x| {
            let h = ops::add_row_broadcast(x, &bias)?;
            ops::sum_all(&ops::mul(&h, &h)?)
        }, 1e-5);
        check(&bias, |b| {
            let h = ops::add_row_broadcast(&x, b)?;
            ops::sum_all(&ops::mul(&h, &h)?)
        }, 1e-5);
        check(&x, |x| {
            let parts = [ops::slice_cols(x, 0, 3)?, ops::slice_cols(x, 3, 6)?];
            let cat = ops::concat_cols(&[&parts[1], &parts[0]])?;
            ops::sum_all(&ops::mul(&cat, &cat)?)
        }, 1e-5);
    }

    #[test]
    fn norm_embed_gather_ops() {
        let mut rng = Rng::new(105);
        let x = rand_t(&mut rng, vec![3, 8]);
        let gain = rand_t(&mut rng, vec![8]);
        check(&x, |x| {
            let h = ops::rmsnorm(x, &gain)?;
            ops::sum_all(&ops::mul(&h, &h)?)
        }, 1e-5);
        check(&gain, |g| {
            let h = ops::rmsnorm(&x, g)?;
            ops::sum_all(&ops::mul(&h, &h)?)
        }, 1e-5);

        let table = rand_t(&mut rng, vec![5, 4]);
        let toks = [3usize, 0, 3, 2];
        check(&table, |t| {
            let e = ops::embed(t, &toks)?;
            ops::sum_all(&ops::mul(&e, &e)?)
        }, 1e-5);

        let logits = rand_t(&mut rng, vec![4, 7]);
        let tgt = [1usize, 6, 0, 3];
        check(&logits, |l| ops::sum_all(&ops::log_softmax_gather(l, &tgt)?), 1e-5);
    }

    #[test]
    fn log1m_exp_grad() {
        let x = Tensor::new(vec![3], vec![-0.2, -1.5, -8.0]).unwrap();
        let tape = Tape::new();
        let xt = tape.watch(&x);
        let loss = ops::sum_all(&ops::log1m_exp(&xt).unwrap()).unwrap();
        backward(&loss).unwrap();
        let numeric =
            finite_difference_gradient(|x| ops::sum_all(&ops::log1m_exp(x)?), &x, 1e-6).unwrap();
        let err = max_rel_error(xt.grad().unwrap().values(), numeric.values());
        assert!(err < 1e-4, "rel err {err}");
    }

    #[test]
    fn determinism_same_seed_same_tensors() {
        let mk = |seed| {
            let mut rng = Rng::new(seed);
            rng.normal_vec(64, 0.0, 0.02)
        };
        assert_eq!(mk(9), mk(9));
    }
}
