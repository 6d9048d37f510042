//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! Only the primitives the models need are provided. There is no
//! broadcasting: shapes must agree exactly, and a mismatch panics with the
//! offending operation named.

pub mod func;
pub mod gumbel;
mod tape;
mod tensor;

pub use gumbel::GumbelConfig;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Compares tape gradients of `build` against central differences.
    fn check(inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let eval = |xs: &[Tensor]| {
            let mut t = Tape::new();
            let vars: Vec<_> = xs.iter().cloned().map(|x| t.param(x)).collect();
            let out = build(&mut t, &vars);
            (t, vars, out)
        };
        let (tape, vars, out) = eval(&inputs);
        let grads = tape.backward(out).unwrap();
        let h = 1e-6;
        for (k, var) in vars.iter().enumerate() {
            let analytic = grads.wrt(*var);
            for i in 0..inputs[k].len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let (tp, _, op) = eval(&plus);
                let (tm, _, om) = eval(&minus);
                let numeric = (tp.scalar(op) - tm.scalar(om)) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / (1.0 + numeric.abs());
                assert!(err < 1e-6, "input {k}[{i}]: analytic {a} vs numeric {numeric}");
            }
        }
    }

    /// Reduces any value to a scalar with fixed random weights so that every
    /// output entry gets a distinct cotangent.
    fn project(t: &mut Tape, v: Var) -> Var {
        let n = t.data(v).len();
        let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * i as f64).collect();
        let shape = t.shape(v).to_vec();
        let c = t.constant(Tensor::new(shape, w));
        let p = t.mul(v, c);
        t.sum(p)
    }

    #[test]
    fn elementwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, &[4]);
        let b = random(&mut rng, &[4]);
        check(vec![a.clone(), b.clone()], |t, v| {
            let s = t.add(v[0], v[1]);
            let d = t.sub(s, v[1]);
            let m = t.mul(d, v[1]);
            let th = t.tanh(m);
            let sg = t.sigmoid(th);
            let sp = t.softplus(sg);
            let lg = t.log(sp);
            let r = t.recip(sp);
            let both = t.add_n(&[lg, r, sp]);
            let sc = t.scale(both, -0.7);
            let ac = t.add_const(sc, &[0.1, 0.2, 0.3, 0.4]);
            project(t, ac)
        });
        // keep away from the kink
        let a = Tensor::vector(vec![0.5, -0.4, 0.9, -1.2]);
        check(vec![a], |t, v| {
            let r = t.relu(v[0]);
            project(t, r)
        });
    }

    #[test]
    fn linear_and_matmul() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check(
            vec![random(&mut rng, &[3, 4]), random(&mut rng, &[2, 4]), random(&mut rng, &[2])],
            |t, v| {
                let y = t.linear(v[0], v[1], Some(v[2]));
                project(t, y)
            },
        );
        check(vec![random(&mut rng, &[4]), random(&mut rng, &[3, 4])], |t, v| {
            let y = t.linear(v[0], v[1], None);
            project(t, y)
        });
        check(vec![random(&mut rng, &[2, 3]), random(&mut rng, &[3, 5])], |t, v| {
            let y = t.matmul(v[0], v[1]);
            project(t, y)
        });
        check(vec![random(&mut rng, &[3]), random(&mut rng, &[3, 2])], |t, v| {
            let y = t.matmul(v[0], v[1]);
            project(t, y)
        });
    }

    #[test]
    fn bilinear_and_contraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(
            vec![random(&mut rng, &[3]), random(&mut rng, &[3, 4, 2]), random(&mut rng, &[4])],
            |t, v| {
                let y = t.bilinear(v[0], v[1], v[2]);
                project(t, y)
            },
        );
        check(vec![random(&mut rng, &[3, 4, 2]), random(&mut rng, &[4])], |t, v| {
            let y = t.contract_middle(v[0], v[1]);
            project(t, y)
        });
    }

    #[test]
    fn contraction_matches_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, w, y) = (random(&mut rng, &[3]), random(&mut rng, &[3, 3, 2]), random(&mut rng, &[3]));
        let mut t = Tape::new();
        let (xv, wv, yv) = (t.constant(x), t.constant(w), t.constant(y));
        let direct = t.bilinear(xv, wv, yv);
        let g = t.contract_middle(wv, yv);
        let via = t.matmul(xv, g);
        for (a, b) in t.data(direct).iter().zip(t.data(via)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(vec![random(&mut rng, &[3]), random(&mut rng, &[3]), random(&mut rng, &[])], |t, v| {
            let c = t.concat(&[v[0], v[1]]);
            let s = t.slice(c, 2, 3);
            let m = t.stack_rows(&[v[0], v[1], s]);
            let sel = t.select_rows(m, &[2, 0, 2]);
            let r = t.row(m, 1);
            let sr = t.sum_rows(sel);
            let mx = t.max_rows(m);
            let w = t.concat(&[v[2], v[2], v[2]]);
            let scaled = t.scale_rows(m, w);
            let ss = t.sum_rows(scaled);
            let e = t.index(c, 4);
            let by = t.scale_by(e, r);
            let all = t.add_n(&[sr, mx, ss, by]);
            project(t, all)
        });
    }

    #[test]
    fn softmax_family() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        check(vec![random(&mut rng, &[4])], |t, v| {
            let s = t.softmax(v[0]);
            let l = t.log_softmax(v[0]);
            let both = t.add(s, l);
            project(t, both)
        });
        check(vec![random(&mut rng, &[4]), random(&mut rng, &[4])], |t, v| {
            let d = t.dot(v[0], v[1]);
            let s = t.sum(v[0]);
            let both = t.add(d, s);
            t.tanh(both)
        });
    }

    #[test]
    fn softplus_scaled_gradient() {
        check(vec![Tensor::scalar(0.8), Tensor::scalar(1.7)], |t, v| t.softplus_scaled(v[0], v[1]));
        check(vec![Tensor::scalar(-3.0), Tensor::scalar(0.4)], |t, v| t.softplus_scaled(v[0], v[1]));
    }

    #[test]
    fn chain_rule_closed_form() {
        // d/dw softplus(w x) = x sigmoid(w x)
        let (w, x) = (0.7, -1.3);
        let mut t = Tape::new();
        let wv = t.param(Tensor::scalar(w));
        let xv = t.constant(Tensor::scalar(x));
        let one = t.constant_scalar(1.0);
        let prod = t.mul(wv, xv);
        let loss = t.softplus_scaled(prod, one);
        let g = t.backward(loss).unwrap().wrt(wv).data()[0];
        assert!((g - x * func::sigmoid(w * x)).abs() < 1e-12);
    }

    #[test]
    fn unused_leaf_gets_exact_zero() {
        let mut t = Tape::new();
        let a = t.param(Tensor::vector(vec![1.0, 2.0]));
        let unused = t.param(Tensor::vector(vec![3.0, 4.0]));
        let loss = t.sum(a);
        let g = t.backward(loss).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0]);
        assert!(!g.reached(unused));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let a = t.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = t.param(Tensor::vector(vec![3.0, 4.0]));
        let p = t.mul(a, b);
        let loss = t.sum(p);
        let g = t.backward(loss).unwrap();
        assert!(!g.reached(a));
        assert_eq!(g.wrt(b).data(), &[1.0, 2.0]);
    }
}
