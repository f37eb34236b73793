//! Reverse-mode automatic differentiation over dense row-major `f64` arrays.

mod gradcheck;
mod graph;
pub(crate) mod kernels;

pub use gradcheck::{grad_check, grad_check_coords};
pub use graph::{softmax_in_place, Graph, NodeId, TensorNode};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::{CarlError, Result};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform(rng: &mut ChaCha8Rng, n: usize, lim: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-lim..lim)).collect()
    }

    /// Max grad-check error of `sum(w ⊙ op(inputs))` over 10 random points.
    /// `shapes` lists the input shapes; all inputs are trainable leaves.
    fn op_error<F>(shapes: &[&[usize]], lim: f64, build: F) -> f64
    where
        F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    {
        let sizes: Vec<usize> = shapes.iter().map(|s| s.iter().product()).collect();
        let total: usize = sizes.iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut worst: f64 = 0.0;
        for _ in 0..10 {
            let theta = uniform(&mut rng, total, lim);
            let mut weights: Option<Vec<f64>> = None;
            let mut wrng = ChaCha8Rng::seed_from_u64(99);
            let f = |t: &[f64]| -> Result<(f64, Vec<f64>)> {
                let mut g = Graph::new(5);
                let mut ids = Vec::new();
                let mut off = 0;
                for (s, &n) in shapes.iter().zip(&sizes) {
                    ids.push(g.param(t[off..off + n].to_vec(), s)?);
                    off += n;
                }
                let out = build(&mut g, &ids)?;
                let n_out = g.value(out).len();
                let w = weights.get_or_insert_with(|| uniform(&mut wrng, n_out, 1.0)).clone();
                let weighted = g.mul_const(out, w)?;
                let loss = g.sum(weighted);
                g.backward(loss)?;
                let grad = ids.iter().flat_map(|&id| g.grad(id).to_vec()).collect();
                Ok((g.scalar(loss), grad))
            };
            worst = worst.max(grad_check(f, &theta, 1e-5).unwrap());
        }
        worst
    }

    const TOL: f64 = 1e-4;

    #[test]
    fn elementwise_ops_pass_gradient_check() {
        let s: &[usize] = &[2, 3];
        assert!(op_error(&[s, s], 2.0, |g, x| g.add(x[0], x[1])) < TOL);
        assert!(op_error(&[s, s], 2.0, |g, x| g.sub(x[0], x[1])) < TOL);
        assert!(op_error(&[s, s], 2.0, |g, x| g.mul(x[0], x[1])) < TOL);
        assert!(op_error(&[s], 2.0, |g, x| Ok(g.scale(x[0], -1.7))) < TOL);
        assert!(op_error(&[s], 2.0, |g, x| Ok(g.add_scalar(x[0], 0.3))) < TOL);
        assert!(op_error(&[s], 2.0, |g, x| g.add_const(x[0], &[1.0; 6])) < TOL);
        assert!(op_error(&[s], 2.0, |g, x| g.mul_const(x[0], vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0])) < TOL);
        assert!(op_error(&[s], 2.0, |g, x| Ok(g.exp(x[0]))) < TOL);
        assert!(op_error(&[s], 2.0, |g, x| Ok(g.tanh(x[0]))) < TOL);
        assert!(op_error(&[s], 2.0, |g, x| Ok(g.gelu(x[0]))) < TOL);
        assert!(op_error(&[s], 2.0, |g, x| Ok(g.sigmoid(x[0]))) < TOL);
        // log and powf on a strictly positive argument
        assert!(
            op_error(&[s], 2.0, |g, x| {
                let e = g.exp(x[0]);
                Ok(g.log(e, 1e-12))
            }) < TOL
        );
        assert!(
            op_error(&[s], 2.0, |g, x| {
                let sg = g.sigmoid(x[0]);
                Ok(g.powf(sg, 2.5))
            }) < TOL
        );
    }

    #[test]
    fn bias_and_reduction_ops_pass_gradient_check() {
        assert!(op_error(&[&[3, 4], &[4]], 2.0, |g, x| g.add_bias(x[0], x[1])) < TOL);
        assert!(op_error(&[&[3, 4]], 2.0, |g, x| Ok(g.sum(x[0]))) < TOL);
        assert!(op_error(&[&[3, 4]], 2.0, |g, x| Ok(g.mean(x[0]))) < TOL);
    }

    #[test]
    fn matrix_ops_pass_gradient_check() {
        assert!(op_error(&[&[3, 4], &[4, 2]], 2.0, |g, x| g.matmul(x[0], x[1])) < TOL);
        assert!(op_error(&[&[2, 3, 4], &[2, 4, 5]], 2.0, |g, x| g.bmm(x[0], x[1])) < TOL);
        assert!(op_error(&[&[3, 4]], 2.0, |g, x| g.transpose(x[0])) < TOL);
        assert!(op_error(&[&[2, 3, 4]], 2.0, |g, x| g.transpose(x[0])) < TOL);
        assert!(op_error(&[&[2, 3, 4, 2]], 2.0, |g, x| g.permute_0213(x[0])) < TOL);
        assert!(op_error(&[&[2, 6]], 2.0, |g, x| g.reshape(x[0], &[3, 4])) < TOL);
        assert!(op_error(&[&[2, 3], &[1, 3]], 2.0, |g, x| g.concat_rows(&[x[0], x[1]])) < TOL);
        assert!(op_error(&[&[5, 3]], 2.0, |g, x| g.gather_rows(x[0], &[4, 0, 4, 2])) < TOL);
        assert!(op_error(&[&[2, 3, 4]], 2.0, |g, x| g.select_axis1(x[0], 1)) < TOL);
    }

    #[test]
    fn normalization_ops_pass_gradient_check() {
        assert!(op_error(&[&[3, 4]], 2.0, |g, x| g.softmax_rows(x[0], 1.0)) < TOL);
        assert!(op_error(&[&[3, 4]], 2.0, |g, x| g.softmax_rows(x[0], 0.3)) < TOL);
        assert!(op_error(&[&[3, 4]], 2.0, |g, x| Ok(g.l2_norm(x[0], 1e-12))) < TOL);
        assert!(op_error(&[&[3, 4]], 2.0, |g, x| Ok(g.l2_normalize(x[0], 1e-12))) < TOL);
        assert!(op_error(&[&[3, 4], &[4], &[4]], 2.0, |g, x| g.layer_norm(x[0], x[1], x[2], 1e-5)) < 1e-5);
    }

    #[test]
    fn dropout_passes_gradient_check_with_fixed_seed() {
        assert!(op_error(&[&[4, 5]], 2.0, |g, x| g.dropout(x[0], 0.3)) < TOL);
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new(0);
        let i2 = g.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let b = g.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let p = g.matmul(i2, b).unwrap();
        assert_eq!(g.value(p), &[1.0, 2.0, 3.0, 4.0]);

        let proj = g.constant(vec![1.0, 0.0, 0.0, 0.0], &[2, 2]).unwrap();
        let c = g.constant(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
        let p2 = g.matmul(proj, c).unwrap();
        assert_eq!(g.value(p2), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_times_b_transposed() {
        let mut g = Graph::new(0);
        let a = g.param(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let b = g.constant(vec![1.0, -1.0, 2.0, 0.5, 0.0, 3.0], &[3, 2]).unwrap();
        let p = g.matmul(a, b).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        // row sums of b, repeated for each row of a
        assert_eq!(g.grad(a), &[0.0, 2.5, 3.0, 0.0, 2.5, 3.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new(0);
        let a = g.constant(vec![0.0; 6], &[2, 3]).unwrap();
        let b = g.constant(vec![0.0; 4], &[2, 2]).unwrap();
        match g.matmul(a, b) {
            Err(CarlError::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new(0);
        let x = g.constant(vec![1.0, 1.0, 1.0], &[1, 3]).unwrap();
        let y = g.softmax_rows(x, 1.0).unwrap();
        for v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(vec![2f64.ln(), 0.0], &[1, 2]).unwrap();
        let y = g.softmax_rows(x, 1.0).unwrap();
        assert!((g.value(y)[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.value(y)[1] - 1.0 / 3.0).abs() < 1e-15);
        let x = g.constant(vec![5.0, 5.0], &[1, 2]).unwrap();
        let y = g.softmax_rows(x, 0.05).unwrap();
        assert_eq!(g.value(y), &[0.5, 0.5]);
        assert!(matches!(g.softmax_rows(x, 0.0), Err(CarlError::Parameter(_))));
        assert!(matches!(g.softmax_rows(x, -1.0), Err(CarlError::Parameter(_))));
    }

    #[test]
    fn softmax_survives_large_logits_at_low_temperature() {
        let mut g = Graph::new(0);
        let x = g.constant(vec![1000.0, 999.0, -1000.0], &[1, 3]).unwrap();
        let y = g.softmax_rows(x, 0.05).unwrap();
        assert!(g.value(y).iter().all(|v| v.is_finite()));
        assert!((g.value(y).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new(0);
        let gain = g.constant(vec![1.0; 3], &[3]).unwrap();
        let bias = g.constant(vec![0.0; 3], &[3]).unwrap();
        let x = g.constant(vec![1.0, 1.0, 1.0], &[3]).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(g.value(y), &[0.0, 0.0, 0.0]);

        let gain = g.constant(vec![1.0; 2], &[2]).unwrap();
        let bias = g.constant(vec![0.0; 2], &[2]).unwrap();
        let x = g.constant(vec![-1.0, 1.0], &[2]).unwrap();
        let y = g.layer_norm(x, gain, bias, 1e-15).unwrap();
        assert!((g.value(y)[0] + 1.0).abs() < 1e-12);
        assert!((g.value(y)[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_gradient_d4() {
        assert!(op_error(&[&[1, 4], &[4], &[4]], 2.0, |g, x| g.layer_norm(x[0], x[1], x[2], 1e-5)) < 1e-5);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new(0);
        let x = g.param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), &[2.0, 4.0, 6.0]);
        assert_eq!(g.grad(loss), &[1.0]);

        // accumulation across calls
        g.backward(loss).unwrap();
        assert_eq!(g.grad(x), &[4.0, 8.0, 12.0]);
    }

    #[test]
    fn constant_loss_leaves_everything_zero() {
        let mut g = Graph::new(0);
        let x = g.param(vec![1.0, 2.0], &[2]).unwrap();
        let c = g.constant(vec![4.0], &[1]).unwrap();
        g.backward(c).unwrap();
        assert_eq!(g.grad(x), &[0.0, 0.0]);
        assert_eq!(g.grad(c), &[0.0]);
    }

    #[test]
    fn frozen_nodes_keep_zero_grad() {
        let mut g = Graph::new(0);
        let x = g.param(vec![1.0, 2.0], &[2]).unwrap();
        let c = g.constant(vec![3.0, -1.0], &[2]).unwrap();
        let p = g.mul(x, c).unwrap();
        let loss = g.sum(p);
        g.backward(loss).unwrap();
        assert_eq!(g.grad(c), &[0.0, 0.0]);
        assert_eq!(g.grad(x), &[3.0, -1.0]);
    }

    #[test]
    fn non_scalar_backward_is_rejected() {
        let mut g = Graph::new(0);
        let x = g.param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(g.backward(x), Err(CarlError::Contract(_))));
    }

    #[test]
    fn backward_is_deterministic() {
        let run = || {
            let mut g = Graph::new(42);
            let x = g.param((0..20).map(|i| (i as f64).cos()).collect(), &[4, 5]).unwrap();
            let d = g.dropout(x, 0.5).unwrap();
            let w = g.param((0..15).map(|i| (i as f64 * 0.3).sin()).collect(), &[5, 3]).unwrap();
            let y = g.matmul(d, w).unwrap();
            let s = g.softmax_rows(y, 0.05).unwrap();
            let l = g.log(s, 1e-12);
            let loss = g.mean(l);
            g.backward(loss).unwrap();
            (g.grad(x).to_vec(), g.grad(w).to_vec())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert_eq!(a1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), a2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(b1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b2.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn gather_and_scatter_are_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let table = uniform(&mut rng, 6 * 4, 2.0);
            let idx: Vec<usize> = (0..7).map(|_| rng.random_range(0..6)).collect();
            let cot = uniform(&mut rng, 7 * 4, 2.0);
            let mut g = Graph::new(0);
            let e = g.param(table.clone(), &[6, 4]).unwrap();
            let gathered = g.gather_rows(e, &idx).unwrap();
            let lhs: f64 = g.value(gathered).iter().zip(&cot).map(|(a, b)| a * b).sum();
            // backward of <gather(E), G> writes scatter(G) into E.grad
            let w = g.mul_const(gathered, cot.clone()).unwrap();
            let loss = g.sum(w);
            g.backward(loss).unwrap();
            let rhs: f64 = table.iter().zip(g.grad(e)).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn gather_rejects_out_of_range_index() {
        let mut g = Graph::new(0);
        let e = g.param(vec![0.0; 6], &[3, 2]).unwrap();
        assert!(g.gather_rows(e, &[3]).is_err());
    }

    #[test]
    fn dropout_is_reproducible_and_scaled() {
        let draw = |seed| {
            let mut g = Graph::new(seed);
            let x = g.constant(vec![1.0; 1000], &[1000]).unwrap();
            let d = g.dropout(x, 0.25).unwrap();
            g.value(d).to_vec()
        };
        assert_eq!(draw(7), draw(7));
        assert_ne!(draw(7), draw(8));
        let v = draw(7);
        assert!(v.iter().all(|&x| x == 0.0 || (x - 1.0 / 0.75).abs() < 1e-15));
        let kept = v.iter().filter(|&&x| x > 0.0).count();
        assert!((650..850).contains(&kept));
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one_and_stay_positive(
                row in proptest::collection::vec(-5.0f64..5.0, 1..12),
                temperature in 0.05f64..5.0,
            ) {
                let mut g = Graph::new(0);
                let n = row.len();
                let x = g.constant(row, &[1, n]).unwrap();
                let y = g.softmax_rows(x, temperature).unwrap();
                let s: f64 = g.value(y).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
                prop_assert!(g.value(y).iter().all(|&v| v > 0.0));
            }
        }
    }
}
