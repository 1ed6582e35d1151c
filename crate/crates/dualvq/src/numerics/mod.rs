//! Reverse-mode differentiation substrate.
//!
//! A [`Graph`] is an eager tape: applying an op computes its value
//! immediately and records how to push gradients back. The op set is
//! exactly what the models need — dense layers, strided 1-D convolution
//! and its transpose, mean pooling, softmax/cross-entropy, and the three
//! custom-gradient nodes (stop-gradient, straight-through, gradient
//! reversal). Everything is `f64` and single-threaded per graph; identical
//! seeds give bit-identical values and gradients.

mod check;
mod graph;
mod optim;
mod tensor;

pub use check::{grad_check, BuildFn};
pub use graph::{Graph, GraphError, NodeId, Padding};
pub use optim::{OptimError, Optimizer, OptimizerKind, ParamEntry, ParamSet};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn square_forward_and_backward() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        assert_eq!(g.value(y).as_scalar(), Some(9.0));
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), &[6.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![1, 2], vec![0.0, 0.0]));
        let y = g.softmax_rows(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn valid_conv_is_a_sliding_dot_product() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![1, 3], vec![1.0, 2.0, 4.0]));
        let w = g.leaf(t(vec![1, 1, 2], vec![1.0, -1.0]));
        let b = g.leaf(t(vec![1], vec![0.0]));
        let y = g.conv1d(x, w, b, 1, Padding::Valid).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2]);
        assert_eq!(g.value(y).data(), &[-1.0, -2.0]);
    }

    #[test]
    fn same_padding_hits_ceil_arithmetic() {
        for (len, stride) in [(6400usize, 4usize), (6401, 4), (9, 2), (10, 3)] {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::zeros(vec![1, len]));
            let w = g.leaf(Tensor::zeros(vec![2, 1, 8]));
            let b = g.leaf(Tensor::zeros(vec![2]));
            let y = g.conv1d(x, w, b, stride, Padding::Same).unwrap();
            assert_eq!(g.value(y).shape(), &[2, len.div_ceil(stride)]);
        }
    }

    #[test]
    fn stop_grad_blocks_exactly() {
        // d/dx sg(x)*x at x=3 is 3: only the non-sg factor contributes.
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let sg = g.stop_grad(x).unwrap();
        let y = g.mul(sg, x).unwrap();
        assert_eq!(g.value(y).as_scalar(), Some(9.0));
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), &[3.0]);
    }

    #[test]
    fn grad_reverse_negates_and_scales() {
        // loss = (reverse(x))^2 at x=3, lambda=1 -> gradient -6.
        for (lambda, want) in [(1.0, -6.0), (0.0, 0.0), (0.5, -3.0)] {
            let mut g = Graph::new();
            let x = g.leaf(Tensor::scalar(3.0));
            let r = g.grad_reverse(x, lambda).unwrap();
            let y = g.mul(r, r).unwrap();
            assert_eq!(g.value(r).as_scalar(), Some(3.0));
            g.backward(y).unwrap();
            assert_eq!(g.grad(x), &[want]);
        }
    }

    #[test]
    fn straight_through_copies_value_and_passes_grad() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![1, 2], vec![0.3, 0.7]));
        let q = t(vec![1, 2], vec![0.0, 1.0]);
        let st = g.straight_through(x, q.clone()).unwrap();
        assert_eq!(g.value(st), &q);
        let s = g.sum_all(st).unwrap();
        let loss = g.mul(s, s).unwrap();
        g.backward(loss).unwrap();
        // d(sum^2)/d(st elements) = 2*sum = 2, handed to x unchanged.
        assert_eq!(g.grad(x), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![1, 2], vec![1.0, 2.0]));
        let y = g.scale(x, 2.0).unwrap();
        assert!(matches!(
            g.backward(y),
            Err(GraphError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn shape_mismatch_identifies_the_node() {
        let mut g = Graph::new();
        let a = g.leaf(t(vec![1, 2], vec![1.0, 2.0]));
        let b = g.leaf(t(vec![2, 2], vec![1.0; 4]));
        let err = g.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains('1'), "{msg}");
    }

    #[test]
    fn frozen_leaf_gradient_stays_zero() {
        let mut g = Graph::new();
        let x = g.frozen_leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), &[0.0]);
    }

    #[test]
    fn determinism_bitwise() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut g = Graph::new();
            let x = g.leaf(Tensor::fan_in_uniform(&mut rng, vec![3, 4], 4));
            let w = g.leaf(Tensor::fan_in_uniform(&mut rng, vec![4, 2], 4));
            let h = g.matmul(x, w).unwrap();
            let r = g.relu(h).unwrap();
            let loss = g.mean_all(r).unwrap();
            g.backward(loss).unwrap();
            (
                g.value(loss).as_scalar().unwrap(),
                g.grad(w).to_vec(),
                g.grad(x).to_vec(),
            )
        };
        assert_eq!(run(), run());
    }

    /// Every differentiable op passes central finite differences on small
    /// random instances. ReLU inputs are nudged away from the kink.
    #[test]
    fn finite_difference_all_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            assert_fd_all_ops(&mut rng, 1e-5, 1e-4);
        }
    }

    pub(crate) fn assert_fd_all_ops(rng: &mut ChaCha8Rng, eps: f64, tol: f64) {
        let rt = |rng: &mut ChaCha8Rng, shape: Vec<usize>| {
            let n = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    let v: f64 = rng.gen_range(-1.0..1.0);
                    // keep clear of the ReLU kink
                    v + 0.15 * v.signum()
                })
                .collect();
            Tensor::new(shape, data).unwrap()
        };

        // two-layer dense net with relu, bias, mean pooling
        let base = vec![
            rt(rng, vec![3, 4]),
            rt(rng, vec![4, 3]),
            rt(rng, vec![3]),
            rt(rng, vec![3, 2]),
        ];
        let build: BuildFn = &|g, ts| {
            let x = g.leaf(ts[0].clone());
            let w1 = g.leaf(ts[1].clone());
            let b1 = g.leaf(ts[2].clone());
            let w2 = g.leaf(ts[3].clone());
            let h = g.matmul(x, w1)?;
            let h = g.add_bias_rows(h, b1)?;
            let h = g.relu(h)?;
            let o = g.matmul(h, w2)?;
            let p = g.mean_rows(o)?;
            let loss = g.mean_all(p)?;
            let sq = g.mul(loss, loss)?;
            Ok((sq, vec![x, w1, b1, w2]))
        };
        for p in 0..4 {
            let err = grad_check(&base, build, p, eps).unwrap();
            assert!(err < tol, "dense param {p}: fd error {err}");
        }

        // conv -> transpose -> softmax/CE with concat + broadcast + crop
        let base = vec![
            rt(rng, vec![2, 9]),
            rt(rng, vec![3, 2, 4]),
            rt(rng, vec![3]),
            rt(rng, vec![3, 2, 4]),
            rt(rng, vec![2]),
            rt(rng, vec![1, 3]),
        ];
        let build: BuildFn = &|g, ts| {
            let x = g.leaf(ts[0].clone());
            let w = g.leaf(ts[1].clone());
            let b = g.leaf(ts[2].clone());
            let wt = g.leaf(ts[3].clone());
            let bt = g.leaf(ts[4].clone());
            let row = g.leaf(ts[5].clone());
            let h = g.conv1d(x, w, b, 2, Padding::Same)?; // [3, 5]
            let h = g.crop_cols(h, 4)?; // [3, 4]
            let u = g.conv1d_transpose(h, wt, bt, 2, 1)?; // [2, 8]
            let f = g.transpose(u)?; // [8, 2]
            let brow = g.broadcast_row(row, 8)?; // [8, 3]
            let cat = g.concat_cols(f, brow)?; // [8, 5]
            let sm = g.softmax_rows(cat)?;
            let picked = g.get_element(sm, 5)?;
            let ce = g.cross_entropy_rows(cat, &[0, 1, 2, 3, 4, 0, 1, 2])?;
            let loss = g.add(ce, picked)?;
            Ok((loss, vec![x, w, b, wt, bt, row]))
        };
        for p in 0..6 {
            let err = grad_check(&base, build, p, eps).unwrap();
            assert!(err < tol, "conv param {p}: fd error {err}");
        }

        // gather + row_normalize + replace_element
        let base = vec![rt(rng, vec![4, 3]), rt(rng, vec![2, 3])];
        let build: BuildFn = &|g, ts| {
            let table = g.leaf(ts[0].clone());
            let x = g.leaf(ts[1].clone());
            let sel = g.gather_rows(table, &[2, 0])?;
            let d = g.sub(x, sel)?;
            let r = g.scale(d, 0.7)?;
            let sq = g.mul(r, r)?;
            let nx = g.row_normalize(x)?;
            let e = g.get_element(nx, 1)?;
            let s = g.sum_all(sq)?;
            let flat = g.mean_all(nx)?;
            let rep = g.replace_element(sq, 0, e)?;
            let s2 = g.mean_all(rep)?;
            let l1 = g.add(s, flat)?;
            let loss = g.add(l1, s2)?;
            Ok((loss, vec![table, x]))
        };
        for p in 0..2 {
            let err = grad_check(&base, build, p, eps).unwrap();
            assert!(err < tol, "gather/norm param {p}: fd error {err}");
        }
    }

    #[test]
    fn grad_check_reports_zero_for_frozen() {
        let base = vec![Tensor::scalar(2.0)];
        let build: BuildFn = &|g, ts| {
            let x = g.frozen_leaf(ts[0].clone());
            let y = g.mul(x, x)?;
            Ok((y, vec![x]))
        };
        let mut graph = Graph::new();
        let (loss, leaves) = build(&mut graph, &base).unwrap();
        graph.backward(loss).unwrap();
        assert_eq!(graph.grad(leaves[0]), &[0.0]);
    }

    #[test]
    fn cross_entropy_matches_hand_value() {
        // logits [5, -5], true class 0: loss = ln(1 + e^-10)
        let mut g = Graph::new();
        let x = g.leaf(t(vec![1, 2], vec![5.0, -5.0]));
        let ce = g.cross_entropy_rows(x, &[0]).unwrap();
        let want = (1.0 + (-10.0f64).exp()).ln();
        assert!((g.value(ce).as_scalar().unwrap() - want).abs() < 1e-15);
    }

    #[test]
    fn transpose_roundtrip_shapes() {
        let mut g = Graph::new();
        let x = g.leaf(t(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let y = g.transpose(x).unwrap();
        assert_eq!(g.value(y).shape(), &[3, 2]);
        assert_eq!(g.value(y).data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
