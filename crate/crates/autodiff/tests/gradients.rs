//! Every differentiable primitive is checked against central finite
//! differences on seeded random instances (at least 100 probes per
//! primitive, all probes kept away from LeakyReLU kinks), plus the exact
//! closed-form cases the engine guarantees: slope at a negative LeakyReLU
//! input, uniform softmax of a constant row, identity convolution, all-ones
//! gradient of a plain sum, additive fan-out, zero gradient for unreachable
//! leaves, and bitwise determinism of repeated backward passes.

use std::collections::BTreeMap;
use std::sync::Arc;

use lfnet_autodiff::gradcheck::relative_error;
use lfnet_autodiff::tape::EdgeIndex;
use lfnet_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random tensor bounded away from zero, for kinked or singular ops.
fn rand_tensor_offzero(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.05..scale);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Compare analytic gradients of every input coordinate against central
/// differences of a random linear functional of the op output. Returns the
/// number of probes performed.
fn fd_check(
    label: &str,
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> lfnet_autodiff::Result<Var>,
    rng: &mut ChaCha8Rng,
) -> usize {
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| tape.leaf(t.clone()).unwrap())
            .collect();
        let out = build(&mut tape, &vars).unwrap();
        tape.value(out).shape().to_vec()
    };
    let proj = rand_tensor(&out_shape, rng, -1.0, 1.0);

    let run = |ins: &[Tensor], want_grads: bool| -> (f64, Option<Vec<Vec<f64>>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone()).unwrap()).collect();
        let out = build(&mut tape, &vars).unwrap();
        let projected = tape.mul_const(out, proj.clone()).unwrap();
        let loss = tape.sum_all(projected).unwrap();
        let value = tape.value(loss).data()[0];
        if want_grads {
            tape.backward(loss).unwrap();
            let grads = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
            (value, Some(grads))
        } else {
            (value, None)
        }
    };

    let (_, grads) = run(inputs, true);
    let grads = grads.unwrap();
    let mut work = inputs.to_vec();
    let mut probes = 0;
    for (i, input) in inputs.iter().enumerate() {
        for c in 0..input.len() {
            let orig = input.data()[c];
            work[i].data_mut()[c] = orig + STEP;
            let (plus, _) = run(&work, false);
            work[i].data_mut()[c] = orig - STEP;
            let (minus, _) = run(&work, false);
            work[i].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let analytic = grads[i][c];
            let rel = relative_error(analytic, numeric);
            assert!(
                rel < TOL,
                "{}: input {} coord {}: analytic {} vs numeric {} (rel err {})",
                label,
                i,
                c,
                analytic,
                numeric,
                rel
            );
            probes += 1;
        }
    }
    probes
}

#[test]
fn matmul_matches_finite_differences() {
    let mut r = rng(11);
    let mut probes = 0;
    for _ in 0..4 {
        let a = rand_tensor(&[4, 3], &mut r, -2.0, 2.0);
        let b = rand_tensor(&[3, 5], &mut r, -2.0, 2.0);
        probes += fd_check("matmul", &[a, b], |t, v| t.matmul(v[0], v[1]), &mut r);
    }
    // Vector right-hand side.
    for _ in 0..4 {
        let a = rand_tensor(&[5, 4], &mut r, -2.0, 2.0);
        let b = rand_tensor(&[4], &mut r, -2.0, 2.0);
        probes += fd_check("matmul-vec", &[a, b], |t, v| t.matmul(v[0], v[1]), &mut r);
    }
    assert!(probes >= 200, "only {} probes", probes);
}

#[test]
fn elementwise_arithmetic_matches_finite_differences() {
    let mut r = rng(12);
    let mut probes = 0;
    for _ in 0..2 {
        let a = rand_tensor(&[5, 6], &mut r, -2.0, 2.0);
        let b = rand_tensor(&[5, 6], &mut r, -2.0, 2.0);
        probes += fd_check("add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]), &mut r);
        probes += fd_check("sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]), &mut r);
        probes += fd_check("mul", &[a, b], |t, v| t.mul(v[0], v[1]), &mut r);
    }
    for _ in 0..4 {
        let a = rand_tensor(&[5, 6], &mut r, -2.0, 2.0);
        probes += fd_check("scale", &[a], |t, v| t.scale(v[0], -1.7), &mut r);
        let m = rand_tensor(&[7, 4], &mut r, -2.0, 2.0);
        let bias = rand_tensor(&[4], &mut r, -2.0, 2.0);
        probes += fd_check("add_bias", &[m, bias], |t, v| t.add_bias(v[0], v[1]), &mut r);
    }
    assert!(probes >= 100 * 5, "only {} probes", probes);
}

#[test]
fn pointwise_nonlinearities_match_finite_differences() {
    let mut r = rng(13);
    let mut probes = 0;
    for _ in 0..3 {
        let x = rand_tensor_offzero(&[6, 7], &mut r, 2.0);
        probes += fd_check("leaky_relu", &[x.clone()], |t, v| t.leaky_relu(v[0], 0.2), &mut r);
        probes += fd_check("sigmoid", &[x.clone()], |t, v| t.sigmoid(v[0]), &mut r);
        probes += fd_check("tanh", &[x.clone()], |t, v| t.tanh(v[0]), &mut r);
        probes += fd_check("exp", &[x], |t, v| t.exp(v[0]), &mut r);
        let pos = rand_tensor(&[6, 7], &mut r, 0.5, 3.0);
        probes += fd_check("ln", &[pos], |t, v| t.ln(v[0]), &mut r);
    }
    assert!(probes >= 100 * 5, "only {} probes", probes);
}

#[test]
fn softmax_family_matches_finite_differences() {
    let mut r = rng(14);
    let mut probes = 0;
    for _ in 0..3 {
        let x = rand_tensor(&[5, 8], &mut r, -3.0, 3.0);
        probes += fd_check("softmax", &[x.clone()], |t, v| t.softmax(v[0]), &mut r);
        probes += fd_check("log_softmax", &[x], |t, v| t.log_softmax(v[0]), &mut r);
        let vec = rand_tensor(&[9], &mut r, -3.0, 3.0);
        probes += fd_check("softmax-1d", &[vec], |t, v| t.softmax(v[0]), &mut r);
    }
    assert!(probes >= 200, "only {} probes", probes);
}

#[test]
fn reductions_match_finite_differences() {
    let mut r = rng(15);
    let mut probes = 0;
    for _ in 0..3 {
        let x = rand_tensor(&[6, 7], &mut r, -2.0, 2.0);
        probes += fd_check("mean_axis0", &[x.clone()], |t, v| t.mean_axis(v[0], 0), &mut r);
        probes += fd_check("mean_axis1", &[x.clone()], |t, v| t.mean_axis(v[0], 1), &mut r);
        probes += fd_check("mean_all", &[x.clone()], |t, v| t.mean_all(v[0]), &mut r);
        probes += fd_check("sum_all", &[x.clone()], |t, v| t.sum_all(v[0]), &mut r);
        probes += fd_check("prefix_mean", &[x], |t, v| t.prefix_mean(v[0]), &mut r);
    }
    assert!(probes >= 100 * 5, "only {} probes", probes);
}

#[test]
fn causal_conv_matches_finite_differences() {
    let mut r = rng(16);
    let mut probes = 0;
    for &dilation in &[1usize, 3, 5] {
        let x = rand_tensor(&[12, 3], &mut r, -2.0, 2.0);
        let k = rand_tensor(&[3, 3, 2], &mut r, -1.0, 1.0);
        probes += fd_check(
            "causal_conv1d",
            &[x, k],
            |t, v| t.causal_conv1d(v[0], v[1], dilation),
            &mut r,
        );
    }
    assert!(probes >= 100, "only {} probes", probes);
}

#[test]
fn shape_ops_match_finite_differences() {
    let mut r = rng(17);
    let mut probes = 0;
    for _ in 0..2 {
        let a = rand_tensor(&[4, 3], &mut r, -2.0, 2.0);
        let b = rand_tensor(&[4, 5], &mut r, -2.0, 2.0);
        probes += fd_check("concat-cols", &[a.clone(), b], |t, v| t.concat(v, 1), &mut r);
        let c = rand_tensor(&[2, 3], &mut r, -2.0, 2.0);
        probes += fd_check("concat-rows", &[a.clone(), c], |t, v| t.concat(v, 0), &mut r);
        let v1 = rand_tensor(&[6], &mut r, -2.0, 2.0);
        let v2 = rand_tensor(&[4], &mut r, -2.0, 2.0);
        probes += fd_check("concat-1d", &[v1.clone(), v2], |t, v| t.concat(v, 0), &mut r);
        probes += fd_check("row", &[a.clone(), ], |t, v| t.row(v[0], 2), &mut r);
        // Gather with a repeated row exercises additive scatter in reverse.
        probes += fd_check(
            "gather_rows",
            &[a],
            |t, v| t.gather_rows(v[0], &[3, 0, 3, 1]),
            &mut r,
        );
        let v3 = rand_tensor(&[6], &mut r, -2.0, 2.0);
        probes += fd_check("stack_rows", &[v1.clone(), v3.clone()], |t, v| t.stack_rows(v), &mut r);
        probes += fd_check("stack_cols", &[v1, v3], |t, v| t.stack_cols(v), &mut r);
    }
    // Per-row linear combination of stacked items.
    for _ in 0..2 {
        let i1 = rand_tensor(&[5, 4], &mut r, -2.0, 2.0);
        let i2 = rand_tensor(&[5, 4], &mut r, -2.0, 2.0);
        let i3 = rand_tensor(&[5, 4], &mut r, -2.0, 2.0);
        let w = rand_tensor(&[5, 3], &mut r, -1.0, 1.0);
        probes += fd_check(
            "weighted_sum_rows",
            &[i1, i2, i3, w],
            |t, v| t.weighted_sum_rows(&v[..3], v[3]),
            &mut r,
        );
    }
    assert!(probes >= 100 * 2, "only {} probes", probes);
}

fn toy_edges() -> Arc<EdgeIndex> {
    // 4 nodes on a path, self-loops included, grouped by destination.
    Arc::new(EdgeIndex::from_neighbor_lists(&[
        vec![0, 1],
        vec![0, 1, 2],
        vec![1, 2, 3],
        vec![2, 3],
    ]))
}

#[test]
fn edge_primitives_match_finite_differences() {
    let mut r = rng(18);
    let edges = toy_edges();
    let mut probes = 0;
    for _ in 0..8 {
        let s = rand_tensor(&[4], &mut r, -2.0, 2.0);
        let t_in = rand_tensor(&[4], &mut r, -2.0, 2.0);
        let e = edges.clone();
        probes += fd_check(
            "edge_pair_sum",
            &[s, t_in],
            move |t, v| t.edge_pair_sum(v[0], v[1], &e),
            &mut r,
        );
        let scores = rand_tensor(&[edges.num_edges()], &mut r, -2.0, 2.0);
        let e = edges.clone();
        probes += fd_check(
            "segment_softmax",
            &[scores],
            move |t, v| t.segment_softmax(v[0], &e),
            &mut r,
        );
        let weights = rand_tensor(&[edges.num_edges()], &mut r, -1.0, 1.0);
        let values = rand_tensor(&[4, 3], &mut r, -2.0, 2.0);
        let e = edges.clone();
        probes += fd_check(
            "segment_weighted_sum",
            &[weights, values],
            move |t, v| t.segment_weighted_sum(v[0], v[1], &e),
            &mut r,
        );
    }
    assert!(probes >= 300, "only {} probes", probes);
}

#[test]
fn composite_attention_block_matches_finite_differences() {
    // A miniature of the real usage: scores from projected embeddings, a
    // segment softmax, then aggregation, all in one differentiable chain.
    let mut r = rng(19);
    let edges = toy_edges();
    let x = rand_tensor(&[4, 3], &mut r, -1.5, 1.5);
    let w = rand_tensor(&[3, 2], &mut r, -1.0, 1.0);
    let a_src = rand_tensor(&[2], &mut r, -1.0, 1.0);
    let a_dst = rand_tensor(&[2], &mut r, -1.0, 1.0);
    let e = edges.clone();
    let probes = fd_check(
        "attention-chain",
        &[x, w, a_src, a_dst],
        move |t, v| {
            let z = t.matmul(v[0], v[1])?;
            let s = t.matmul(z, v[2])?;
            let q = t.matmul(z, v[3])?;
            let scores = t.edge_pair_sum(s, q, &e)?;
            let scores = t.leaky_relu(scores, 0.2)?;
            let attn = t.segment_softmax(scores, &e)?;
            t.segment_weighted_sum(attn, z, &e)
        },
        &mut r,
    );
    assert!(probes > 0);
}

// ── exact closed-form guarantees ───────────────────────────────────────

#[test]
fn leaky_relu_gradient_at_negative_one_is_slope() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![-1.0])).unwrap();
    let y = tape.leaky_relu(x, 0.2).unwrap();
    let loss = tape.sum_all(y).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.2]);
}

#[test]
fn softmax_of_equal_scores_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![4.2, 4.2, 4.2])).unwrap();
    let p = tape.softmax(x).unwrap();
    for &v in tape.value(p).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn identity_kernel_convolution_reproduces_input_at_any_dilation() {
    let mut tape = Tape::new();
    let x = tape
        .leaf(Tensor::new(vec![9, 1], (0..9).map(|v| v as f64).collect()).unwrap())
        .unwrap();
    let k = tape.leaf(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap()).unwrap();
    let y = tape.causal_conv1d(x, k, 5).unwrap();
    assert_eq!(tape.value(y).data(), tape.value(x).data());
}

#[test]
fn dilated_receptive_field_is_exactly_kernel_span() {
    // L = 3 taps at dilation 5 span (3 - 1) * 5 + 1 = 11 steps.
    let t_len = 16;
    let out_t = 12;
    let run = |hot: Option<usize>| -> f64 {
        let mut tape = Tape::new();
        let mut data = vec![0.0; t_len];
        if let Some(i) = hot {
            data[i] = 1.0;
        }
        let x = tape.leaf(Tensor::new(vec![t_len, 1], data).unwrap()).unwrap();
        let k = tape
            .leaf(Tensor::new(vec![3, 1, 1], vec![1.0, 1.0, 1.0]).unwrap())
            .unwrap();
        let y = tape.causal_conv1d(x, k, 5).unwrap();
        tape.value(y).data()[out_t]
    };
    let base = run(None);
    assert_eq!(run(Some(out_t - 11)), base, "outside the receptive field");
    assert_ne!(run(Some(out_t - 10)), base, "oldest tap");
    assert_ne!(run(Some(out_t)), base, "current step");
}

#[test]
fn sum_backward_is_all_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.5, -2.0, 7.0, 0.0])).unwrap();
    let loss = tape.sum_all(x).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn fan_out_accumulates_both_branch_gradients() {
    // loss = sum(w * a) + sum(w * b)  =>  dw = a + b
    let mut tape = Tape::new();
    let w = tape.leaf(Tensor::vector(vec![1.0, 2.0])).unwrap();
    let a = tape.leaf(Tensor::vector(vec![3.0, 5.0])).unwrap();
    let b = tape.leaf(Tensor::vector(vec![-1.0, 4.0])).unwrap();
    let wa = tape.mul(w, a).unwrap();
    let wb = tape.mul(w, b).unwrap();
    let sa = tape.sum_all(wa).unwrap();
    let sb = tape.sum_all(wb).unwrap();
    let loss = tape.add(sa, sb).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(w).unwrap(), &[2.0, 9.0]);
}

#[test]
fn unreachable_leaf_gets_zero_gradient() {
    let mut tape = Tape::new();
    let used = tape.leaf(Tensor::vector(vec![1.0])).unwrap();
    let unused = tape.leaf(Tensor::vector(vec![5.0, 5.0])).unwrap();
    let loss = tape.sum_all(used).unwrap();
    tape.backward(loss).unwrap();
    assert!(tape.grad(unused).is_none());
    assert_eq!(tape.grad_or_zeros(unused), vec![0.0, 0.0]);
}

#[test]
fn dropout_with_zero_probability_is_identity_and_mask_scales_gradient() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.5, -2.5, 3.5])).unwrap();
    let ones = tape.dropout(x, Tensor::vector(vec![1.0, 1.0, 1.0])).unwrap();
    assert_eq!(tape.value(ones).data(), tape.value(x).data());

    let masked = tape.dropout(x, Tensor::vector(vec![2.0, 0.0, 2.0])).unwrap();
    let loss = tape.sum_all(masked).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 0.0, 2.0]);
}

#[test]
fn rejects_inconsistent_dropout_mask() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![1.0, 1.0])).unwrap();
    assert!(tape.dropout(x, Tensor::vector(vec![2.0, 1.5])).is_err());
    assert!(tape.dropout(x, Tensor::vector(vec![0.5, 0.5])).is_err());
}

#[test]
fn identical_graphs_yield_bitwise_identical_gradients() {
    let build = || -> (Tape, Var, Var) {
        let mut r = rng(99);
        let mut tape = Tape::new();
        let x = tape.leaf(rand_tensor(&[8, 6], &mut r, -2.0, 2.0)).unwrap();
        let w = tape.leaf(rand_tensor(&[6, 4], &mut r, -1.0, 1.0)).unwrap();
        let h = tape.matmul(x, w).unwrap();
        let h = tape.tanh(h).unwrap();
        let p = tape.softmax(h).unwrap();
        let loss = tape.mean_all(p).unwrap();
        (tape, w, loss)
    };
    let (mut t1, w1, l1) = build();
    let (mut t2, w2, l2) = build();
    t1.backward(l1).unwrap();
    t2.backward(l2).unwrap();
    let g1 = t1.grad(w1).unwrap().to_vec();
    assert_eq!(g1, t2.grad(w2).unwrap());

    // Replaying backward on the same tape resets accumulators first.
    t2.backward(l2).unwrap();
    assert_eq!(g1, t2.grad(w2).unwrap());
}

#[test]
fn non_finite_values_are_hard_errors() {
    let mut tape = Tape::new();
    assert!(tape.leaf(Tensor::vector(vec![f64::NAN])).is_err());
    let big = tape.leaf(Tensor::vector(vec![1e308])).unwrap();
    assert!(tape.exp(big).is_err(), "overflowing exp must be rejected");
    let neg = tape.leaf(Tensor::vector(vec![-1.0])).unwrap();
    assert!(tape.ln(neg).is_err(), "log of a negative must be rejected");
}

#[test]
fn shape_mismatches_name_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap()).unwrap();
    let b = tape.leaf(Tensor::matrix(4, 2, vec![0.0; 8]).unwrap()).unwrap();
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{}", err);
}

#[test]
fn empty_neighborhood_is_rejected() {
    let edges = Arc::new(EdgeIndex::from_neighbor_lists(&[vec![0], vec![]]));
    let mut tape = Tape::new();
    let scores = tape.leaf(Tensor::vector(vec![1.0])).unwrap();
    assert!(tape.segment_softmax(scores, &edges).is_err());
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, seed in 0u64..500) {
            let mut r = rng(seed);
            let x = rand_tensor(&[rows, cols], &mut r, -30.0, 30.0);
            let mut tape = Tape::new();
            let v = tape.leaf(x).unwrap();
            let p = tape.softmax(v).unwrap();
            let data = tape.value(p).data();
            for i in 0..rows {
                let row = &data[i * cols..(i + 1) * cols];
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                let sum: f64 = row.iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12, "row sum {}", sum);
            }
        }

        #[test]
        fn segment_softmax_segments_are_distributions(seed in 0u64..500) {
            let edges = toy_edges();
            let mut r = rng(seed);
            let scores = rand_tensor(&[edges.num_edges()], &mut r, -50.0, 50.0);
            let mut tape = Tape::new();
            let v = tape.leaf(scores).unwrap();
            let p = tape.segment_softmax(v, &edges).unwrap();
            let data = tape.value(p).data();
            for i in 0..edges.num_nodes() {
                let sum: f64 = data[edges.segment(i)].iter().sum();
                prop_assert!((sum - 1.0).abs() < 1e-12, "segment sum {}", sum);
            }
        }

        #[test]
        fn log_softmax_exponentiates_to_softmax(seed in 0u64..200) {
            let mut r = rng(seed);
            let x = rand_tensor(&[3, 7], &mut r, -20.0, 20.0);
            let mut tape = Tape::new();
            let v = tape.leaf(x).unwrap();
            let p = tape.softmax(v).unwrap();
            let lp = tape.log_softmax(v).unwrap();
            let (pd, lpd) = (tape.value(p).data(), tape.value(lp).data());
            for (a, b) in pd.iter().zip(lpd) {
                prop_assert!((a - b.exp()).abs() < 1e-12);
            }
        }
    }
}
