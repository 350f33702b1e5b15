//! Reverse-mode automatic differentiation over dense row-major f64 tensors.

mod finite_diff;
mod fsum;
mod graph;
mod params;
mod tensor;

pub use finite_diff::{finite_diff_grad, max_rel_err, rel_err, DEFAULT_EPS};
pub use fsum::exact_sum;
pub use graph::{Graph, NodeId, OpKind, LOG_FLOOR};
pub use params::{Bound, GradMap, ParamSet};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vec_node(g: &mut Graph, data: &[f64]) -> NodeId {
        g.leaf(Tensor::vector(data.to_vec()))
    }

    #[test]
    fn tanh_of_zero_vector_is_zero() {
        let mut g = Graph::new();
        let x = vec_node(&mut g, &[0.0, 0.0]);
        let y = g.tanh(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = vec_node(&mut g, &[1.0, 1.0, 1.0]);
        let y = g.softmax(x).unwrap();
        for v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn max_over_time_matches_columnwise_oracle() {
        let rows: [Vec<f64>; 2] = [vec![1.0, 5.0], vec![3.0, 2.0]];
        // Direct column-wise max.
        let mut expected = rows[0].clone();
        for row in &rows[1..] {
            for (e, v) in expected.iter_mut().zip(row) {
                *e = f64::max(*e, *v);
            }
        }
        assert_eq!(expected, vec![3.0, 5.0]);

        let mut g = Graph::new();
        let steps: Vec<NodeId> = rows.iter().map(|r| vec_node(&mut g, r)).collect();
        let pooled = g.max_over_time(&steps).unwrap();
        assert_eq!(g.value(pooled).data(), expected.as_slice());

        // Same thing through the single rank-2 form.
        let m = g.leaf(Tensor::matrix(2, 2, vec![1.0, 5.0, 3.0, 2.0]).unwrap());
        let pooled2 = g.max_over_time(&[m]).unwrap();
        assert_eq!(g.value(pooled2).data(), expected.as_slice());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = vec_node(&mut g, &[0.3, -1.0, 2.0]);
        let loss = g.sum(x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_dot_with_self_is_two_x() {
        let mut g = Graph::new();
        let x = vec_node(&mut g, &[2.0, -1.0]);
        let loss = g.dot(x, x).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, -2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = vec_node(&mut g, &[1.0, 2.0]);
        let y = g.tanh(x).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn shape_mismatch_names_op_and_extents() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = g.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]"), "{err}");

        let v = vec_node(&mut g, &[1.0, 2.0]);
        let w = vec_node(&mut g, &[1.0, 2.0, 3.0]);
        let err = g.add(v, w).unwrap_err().to_string();
        assert!(err.contains("add") && err.contains('2') && err.contains('3'), "{err}");
    }

    #[test]
    fn shared_subexpression_matches_duplicated_subtree() {
        // loss = sum(s ∘ s) with s = tanh(x) shared, vs the same graph with
        // the subtree built twice. Gradients on x must agree exactly.
        let data = [0.4, -0.7, 1.3];
        let grad_shared = {
            let mut g = Graph::new();
            let x = vec_node(&mut g, &data);
            let s = g.tanh(x).unwrap();
            let prod = g.mul(s, s).unwrap();
            let loss = g.sum(prod).unwrap();
            g.backward(loss).unwrap();
            g.grad(x).unwrap().clone()
        };
        let grad_duplicated = {
            let mut g = Graph::new();
            let x = vec_node(&mut g, &data);
            let s1 = g.tanh(x).unwrap();
            let s2 = g.tanh(x).unwrap();
            let prod = g.mul(s1, s2).unwrap();
            let loss = g.sum(prod).unwrap();
            g.backward(loss).unwrap();
            g.grad(x).unwrap().clone()
        };
        assert_eq!(grad_shared, grad_duplicated);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut g = Graph::with_seed(11);
        let x = vec_node(&mut g, &[1.0, -2.0, 3.0]);
        let eval = g.dropout(x, 0.5, false).unwrap();
        assert_eq!(g.value(eval).data(), g.value(x).data());
        let p_zero = g.dropout(x, 0.0, true).unwrap();
        assert_eq!(g.value(p_zero).data(), g.value(x).data());
    }

    #[test]
    fn dropout_scales_kept_activations() {
        let mut g = Graph::with_seed(5);
        let data: Vec<f64> = (0..4000).map(|i| 1.0 + (i % 7) as f64).collect();
        let x = g.leaf(Tensor::vector(data.clone()));
        let y = g.dropout(x, 0.3, true).unwrap();
        let mut dropped = 0usize;
        for (orig, out) in data.iter().zip(g.value(y).data()) {
            if *out == 0.0 {
                dropped += 1;
            } else {
                assert!((out - orig / 0.7).abs() < 1e-12);
            }
        }
        let rate = dropped as f64 / data.len() as f64;
        assert!((rate - 0.3).abs() < 0.03, "observed drop rate {rate}");
    }

    #[test]
    fn param_names_are_unique() {
        let mut params = ParamSet::new(0);
        params.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(params.insert("w", Tensor::scalar(2.0)).is_err());
        assert_eq!(params.get("w").unwrap().item(), 1.0);
    }

    #[test]
    fn finite_diff_on_square_and_sigmoid() {
        let mut params = ParamSet::new(0);
        params.insert("theta", Tensor::scalar(3.0)).unwrap();
        let grads = finite_diff_grad(
            |p| Ok(p.get("theta").unwrap().item().powi(2)),
            &params,
            1e-5,
        )
        .unwrap();
        assert!((grads["theta"].item() - 6.0).abs() < 1e-6);

        let mut params = ParamSet::new(0);
        params.insert("theta", Tensor::scalar(0.0)).unwrap();
        let grads = finite_diff_grad(
            |p| {
                let x = p.get("theta").unwrap().item();
                Ok(1.0 / (1.0 + (-x).exp()))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!((grads["theta"].item() - 0.25).abs() < 1e-6);
    }

    #[test]
    fn analytic_gradients_match_finite_differences_per_op() {
        // One composite expression touching most primitives, checked over
        // several seeds.
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = ParamSet::new(seed);
            params
                .insert("w", Tensor::uniform(&[3, 4], -0.8, 0.8, &mut rng))
                .unwrap();
            params
                .insert("x", Tensor::uniform(&[4], -0.8, 0.8, &mut rng))
                .unwrap();
            params
                .insert("b", Tensor::uniform(&[3], -0.8, 0.8, &mut rng))
                .unwrap();

            let build = |p: &ParamSet| -> crate::error::Result<(Graph, NodeId, Bound)> {
                let mut g = Graph::new();
                let bound = g.bind(p);
                let w = bound.node("w")?;
                let x = bound.node("x")?;
                let b = bound.node("b")?;
                let wx = g.matmul(w, x)?;
                let pre = g.add(wx, b)?;
                let t = g.tanh(pre)?;
                let s = g.sigmoid(pre)?;
                let r = g.relu(pre)?;
                let cat = g.concat(&[t, s, r])?;
                let sm = g.softmax(cat)?;
                let lg = g.log(sm)?;
                let pooled = g.max_over_time(&[t, s, r])?;
                let d = g.dot(pooled, b)?;
                let part = g.mean(lg)?;
                let scaled = g.scalar_mul(d, cat)?;
                let total = g.sum(scaled)?;
                let loss = g.add(part, total)?;
                Ok((g, loss, bound))
            };

            let mut g_loss = build(&params).unwrap();
            g_loss.0.backward(g_loss.1).unwrap();
            let analytic = g_loss.0.extract_grads(&g_loss.2);
            let numeric = finite_diff_grad(
                |p| {
                    let (g, loss, _) = build(p)?;
                    Ok(g.value(loss).item())
                },
                &params,
                DEFAULT_EPS,
            )
            .unwrap();
            let (worst, at) = max_rel_err(&analytic, &numeric);
            assert!(worst < 1e-4, "seed {seed}: worst {worst:.3e} at {at}");
        }
    }

    #[test]
    fn conv_and_embedding_gradients_match_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut params = ParamSet::new(seed);
            params
                .insert("table", Tensor::uniform(&[5, 3], -0.8, 0.8, &mut rng))
                .unwrap();
            params
                .insert("cw", Tensor::uniform(&[2, 6], -0.8, 0.8, &mut rng))
                .unwrap();
            params
                .insert("cb", Tensor::uniform(&[2], -0.8, 0.8, &mut rng))
                .unwrap();
            let indices = [3usize, 0, 4, 1];

            let build = |p: &ParamSet| -> crate::error::Result<(Graph, NodeId, Bound)> {
                let mut g = Graph::new();
                let bound = g.bind(p);
                let table = bound.node("table")?;
                let cw = bound.node("cw")?;
                let cb = bound.node("cb")?;
                let words: Vec<NodeId> = indices
                    .iter()
                    .map(|&i| g.embed(table, i))
                    .collect::<crate::error::Result<_>>()?;
                let conv = g.conv1d(cw, cb, &words)?;
                let pooled = g.max_over_time(&[conv])?;
                let act = g.relu(pooled)?;
                let loss = g.sum(act)?;
                Ok((g, loss, bound))
            };

            let mut built = build(&params).unwrap();
            built.0.backward(built.1).unwrap();
            let analytic = built.0.extract_grads(&built.2);
            let numeric = finite_diff_grad(
                |p| {
                    let (g, loss, _) = build(p)?;
                    Ok(g.value(loss).item())
                },
                &params,
                DEFAULT_EPS,
            )
            .unwrap();
            let (worst, at) = max_rel_err(&analytic, &numeric);
            assert!(worst < 1e-4, "seed {seed}: worst {worst:.3e} at {at}");
        }
    }

    #[test]
    fn weighted_sum_is_exactly_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = 5;
        let d = 4;
        let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let items: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect())
            .collect();
        let run = |order: &[usize]| -> Vec<f64> {
            let mut g = Graph::new();
            let w = g.leaf(Tensor::vector(order.iter().map(|&i| weights[i]).collect()));
            let ms: Vec<NodeId> = order
                .iter()
                .map(|&i| g.leaf(Tensor::vector(items[i].clone())))
                .collect();
            let out = g.weighted_sum(w, &ms).unwrap();
            g.value(out).data().to_vec()
        };
        let base = run(&[0, 1, 2, 3, 4]);
        for order in [[4, 3, 2, 1, 0], [2, 0, 4, 1, 3], [1, 4, 0, 3, 2]] {
            assert_eq!(base, run(&order));
        }
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(xs in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::vector(xs));
            let y = g.softmax(x).unwrap();
            let data = g.value(y).data();
            prop_assert!(data.iter().all(|v| *v >= 0.0));
            let total: f64 = data.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn dropout_eval_is_identity(
            xs in proptest::collection::vec(-5.0f64..5.0, 1..20),
            p in 0.0f64..0.95,
        ) {
            let mut g = Graph::with_seed(7);
            let x = g.leaf(Tensor::vector(xs.clone()));
            let y = g.dropout(x, p, false).unwrap();
            prop_assert_eq!(g.value(y).data(), xs.as_slice());
        }
    }
}
