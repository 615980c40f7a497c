//! Minimal reverse-mode differentiable-array engine.
//!
//! Dense row-major tensors, an append-only tape, exact reverse-mode
//! gradients, a finite-difference gradient checker, and Adam. Deliberately
//! small: it supplies exactly the primitives the quantile forecaster and the
//! zero-inflated negative-binomial head need.

mod optim;
mod tape;
mod tensor;

pub use optim::{adam_step, AdamConfig, AdamState, ParamSet};
pub use tape::{Graph, NodeId};
pub use tensor::{binary_broadcast, broadcast_shapes, reduce_to_shape, Tensor};

pub(crate) use tape::{matmul_value, stable_sigmoid, stable_softplus};

use crate::error::Result;

/// Compares reverse-mode gradients of a scalar-valued `build` against central
/// finite differences with step `h`. Returns the max over coordinates of
/// `|analytic - central| / (|analytic| + |central| + 1e-12)`.
pub fn grad_check<F>(mut build: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let xid = graph.leaf(x.clone());
    let root = build(&mut graph, xid)?;
    let grads = graph.backward(root)?;
    let analytic = grads[xid.0].clone();

    let eval = |xs: Tensor, build: &mut F| -> Result<f64> {
        let mut g = Graph::new();
        let id = g.leaf(xs);
        let r = build(&mut g, id)?;
        Ok(g.value(r).scalar_value())
    };

    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let fp = eval(xp, &mut build)?;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fm = eval(xm, &mut build)?;
        let central = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_vec(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn quadratic_form_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&[6], &mut rng);
        let err = grad_check(
            |g, id| {
                let sq = g.mul(id, id)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn softplus_matmul_composition_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = random_tensor(&[4, 3], &mut rng);
        let v = random_tensor(&[3, 2], &mut rng);
        let err = grad_check(
            |g, id| {
                let vid = g.leaf(v.clone());
                let prod = g.matmul(id, vid)?;
                let act = g.softplus(prod);
                Ok(g.sum(act))
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }

    #[test]
    fn constant_function_zero_error() {
        let x = Tensor::vector(&[1.0, -2.0, 0.5]);
        let err = grad_check(
            |g, _id| {
                let c = g.scalar(3.0);
                Ok(g.sum(c))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    // Gradient check every primitive on seeded random inputs. Inputs are kept
    // away from kinks (relu at 0) and singularities (log at 0) by shifting.
    #[test]
    fn all_primitives_gradcheck() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tol = 1e-4;
        let h = 1e-5;

        let unary: Vec<(&str, Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId>>)> = vec![
            ("exp", Box::new(|g: &mut Graph, id: NodeId| Ok(g.exp(id)))),
            ("tanh", Box::new(|g: &mut Graph, id: NodeId| Ok(g.tanh(id)))),
            ("sigmoid", Box::new(|g: &mut Graph, id: NodeId| Ok(g.sigmoid(id)))),
            ("softplus", Box::new(|g: &mut Graph, id: NodeId| Ok(g.softplus(id)))),
            ("relu", Box::new(|g: &mut Graph, id: NodeId| Ok(g.relu(id)))),
            ("neg", Box::new(|g: &mut Graph, id: NodeId| Ok(g.neg(id)))),
            ("scale", Box::new(|g: &mut Graph, id: NodeId| Ok(g.scale(id, -2.5)))),
        ];
        for (name, op) in &unary {
            let x = random_tensor(&[5], &mut rng).map(|v| v + 2.0); // keep off kinks
            let err = grad_check(
                |g, id| {
                    let y = op(g, id)?;
                    Ok(g.sum(y))
                },
                &x,
                h,
            )
            .unwrap();
            assert!(err < tol, "{name}: err = {err}");
        }

        // log and lgamma need strictly positive input
        for (name, op) in [
            ("log", Box::new(|g: &mut Graph, id: NodeId| Ok(g.log(id)))
                as Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId>>),
            ("lgamma", Box::new(|g: &mut Graph, id: NodeId| Ok(g.lgamma(id)))),
        ] {
            let x = random_tensor(&[5], &mut rng).map(|v| v.abs() + 0.5);
            let err = grad_check(
                |g, id| {
                    let y = op(g, id)?;
                    Ok(g.sum(y))
                },
                &x,
                h,
            )
            .unwrap();
            assert!(err < tol, "{name}: err = {err}");
        }

        // add / sub / mul with a broadcast second operand
        let other = random_tensor(&[3], &mut rng);
        for (name, f) in [
            ("add", 0usize),
            ("sub", 1usize),
            ("mul", 2usize),
        ] {
            let x = random_tensor(&[2, 3], &mut rng);
            let o = other.clone();
            let err = grad_check(
                |g, id| {
                    let oid = g.leaf(o.clone());
                    let y = match f {
                        0 => g.add(id, oid)?,
                        1 => g.sub(id, oid)?,
                        _ => g.mul(id, oid)?,
                    };
                    Ok(g.sum(y))
                },
                &x,
                h,
            )
            .unwrap();
            assert!(err < tol, "{name}: err = {err}");
        }

        // matmul, batched and transposed variants
        let b2 = random_tensor(&[3, 4], &mut rng);
        let x = random_tensor(&[2, 5, 3], &mut rng);
        let err = grad_check(
            |g, id| {
                let b = g.leaf(b2.clone());
                let y = g.matmul(id, b)?;
                let s = g.softplus(y);
                Ok(g.sum(s))
            },
            &x,
            h,
        )
        .unwrap();
        assert!(err < tol, "batched matmul: err = {err}");

        let bt = random_tensor(&[2, 4, 3], &mut rng);
        let err = grad_check(
            |g, id| {
                let b = g.leaf(bt.clone());
                let y = g.matmul_ext(id, b, true)?;
                Ok(g.sum(y))
            },
            &x,
            h,
        )
        .unwrap();
        assert!(err < tol, "matmul transpose_b: err = {err}");

        // the gradient w.r.t. the second operand
        let a3 = random_tensor(&[2, 5, 3], &mut rng);
        let xb = random_tensor(&[3, 4], &mut rng);
        let err = grad_check(
            |g, id| {
                let a = g.leaf(a3.clone());
                let y = g.matmul(a, id)?;
                let s = g.tanh(y);
                Ok(g.sum(s))
            },
            &xb,
            h,
        )
        .unwrap();
        assert!(err < tol, "matmul shared rhs: err = {err}");

        // reductions
        for name in ["sum", "mean", "max"] {
            let x = random_tensor(&[7], &mut rng);
            let err = grad_check(
                |g, id| {
                    let e = g.exp(id);
                    Ok(match name {
                        "sum" => g.sum(e),
                        "mean" => g.mean(e),
                        _ => g.max(e),
                    })
                },
                &x,
                h,
            )
            .unwrap();
            assert!(err < tol, "{name}: err = {err}");
        }

        // softmax along both axes of a matrix
        for axis in [0usize, 1] {
            let x = random_tensor(&[3, 4], &mut rng);
            let w = random_tensor(&[3, 4], &mut rng);
            let err = grad_check(
                |g, id| {
                    let sm = g.softmax(id, axis)?;
                    let wid = g.leaf(w.clone());
                    let weighted = g.mul(sm, wid)?;
                    Ok(g.sum(weighted))
                },
                &x,
                h,
            )
            .unwrap();
            assert!(err < tol, "softmax axis {axis}: err = {err}");
        }

        // layer_norm
        let x = random_tensor(&[2, 6], &mut rng);
        let w = random_tensor(&[2, 6], &mut rng);
        let err = grad_check(
            |g, id| {
                let ln = g.layer_norm(id, 1e-5)?;
                let wid = g.leaf(w.clone());
                let weighted = g.mul(ln, wid)?;
                Ok(g.sum(weighted))
            },
            &x,
            h,
        )
        .unwrap();
        assert!(err < tol, "layer_norm: err = {err}");

        // concat + slice + select
        let x = random_tensor(&[2, 3], &mut rng);
        let other = random_tensor(&[2, 2], &mut rng);
        let err = grad_check(
            |g, id| {
                let o = g.leaf(other.clone());
                let cat = g.concat(&[id, o], 1)?;
                let sl = g.slice(cat, 1, 1, 3)?;
                let pick = g.select(sl, 0, 1)?;
                let sq = g.mul(pick, pick)?;
                Ok(g.sum(sq))
            },
            &x,
            h,
        )
        .unwrap();
        assert!(err < tol, "concat/slice/select: err = {err}");

        // embedding lookup
        let table = random_tensor(&[5, 3], &mut rng);
        let err = grad_check(
            |g, id| {
                let rows = g.embedding_lookup(id, &[0, 3, 3, 1])?;
                let t = g.tanh(rows);
                Ok(g.sum(t))
            },
            &table,
            h,
        )
        .unwrap();
        assert!(err < tol, "embedding_lookup: err = {err}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x = random_tensor(&[4, 9], &mut rng).map(|v| v * 10.0);
            let mut g = Graph::new();
            let id = g.leaf(x);
            let sm = g.softmax(id, 1).unwrap();
            let v = g.value(sm);
            for r in 0..4 {
                let s: f64 = v.data()[r * 9..(r + 1) * 9].iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "row sum {s}");
            }
        }
    }
}
