use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::gradcheck::{compare, numeric_gradients};
use super::*;

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.5..1.5))
}

/// Checks `op` by weighting its output with a fixed random tensor and summing.
fn check_op(
    shapes: &[[usize; 2]],
    seed: u64,
    op: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var, TensorError>,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.register(&format!("x{i}"), random(s[0], s[1], &mut rng)).unwrap())
        .collect();
    let out_shape = {
        let mut g = Graph::new(&store);
        let vars: Vec<_> = ids.iter().map(|&id| g.param(id)).collect();
        let y = op(&mut g, &vars).unwrap();
        g.shape(y)
    };
    let weights = random(out_shape[0], out_shape[1], &mut rng);
    let loss_of = |s: &ParamStore<f64>| -> (f64, Option<Gradients<f64>>) {
        let mut g = Graph::new(s);
        let vars: Vec<_> = ids.iter().map(|&id| g.param(id)).collect();
        let y = op(&mut g, &vars).unwrap();
        let w = g.constant(weights.clone());
        let yw = g.mul(y, w).unwrap();
        let l = g.sum_all(yw);
        let v = g.value(l).item();
        (v, Some(g.backward(l).unwrap()))
    };
    let (_, analytic) = loss_of(&store);
    let numeric = numeric_gradients(&mut store, 1e-5, |s| loss_of(s).0);
    let report = compare(&store, &analytic.unwrap(), &numeric, 1e-6);
    report.max_relative_error
}

const PER_OP_TOL: f64 = 1e-6;

macro_rules! op_gradcheck {
    ($name:ident, $shapes:expr, $op:expr) => {
        #[test]
        fn $name() {
            for seed in 0..3 {
                let err = check_op(&$shapes, seed, $op);
                assert!(err < PER_OP_TOL, "seed {seed}: relative error {err:e}");
            }
        }
    };
}

op_gradcheck!(grad_matmul, [[2, 3], [3, 2]], |g, v| g.matmul(v[0], v[1]));
op_gradcheck!(grad_transpose, [[2, 3]], |g, v| Ok(g.transpose(v[0])));
op_gradcheck!(grad_add_same, [[2, 3], [2, 3]], |g, v| g.add(v[0], v[1]));
op_gradcheck!(grad_add_row_broadcast, [[3, 2], [1, 2]], |g, v| g.add(v[0], v[1]));
op_gradcheck!(grad_add_col_broadcast, [[1, 3], [2, 1]], |g, v| g.add(v[0], v[1]));
op_gradcheck!(grad_sub_scalar_broadcast, [[2, 3], [1, 1]], |g, v| g.sub(v[0], v[1]));
op_gradcheck!(grad_mul_same, [[2, 2], [2, 2]], |g, v| g.mul(v[0], v[1]));
op_gradcheck!(grad_mul_col_broadcast, [[3, 2], [3, 1]], |g, v| g.mul(v[0], v[1]));
op_gradcheck!(grad_affine, [[2, 3]], |g, v| Ok(g.affine(v[0], -0.7, 0.3)));
op_gradcheck!(grad_sigmoid, [[2, 3]], |g, v| Ok(g.sigmoid(v[0])));
op_gradcheck!(grad_tanh, [[2, 3]], |g, v| Ok(g.tanh(v[0])));
op_gradcheck!(grad_relu, [[2, 3]], |g, v| Ok(g.relu(v[0])));
op_gradcheck!(grad_exp, [[2, 3]], |g, v| Ok(g.exp(v[0])));
op_gradcheck!(grad_ln, [[2, 3]], |g, v| {
    let p = g.exp(v[0]);
    Ok(g.ln(p))
});
op_gradcheck!(grad_clamp, [[2, 3]], |g, v| Ok(g.clamp(v[0], -1.0, 1.0)));
op_gradcheck!(grad_softmax, [[2, 4]], |g, v| Ok(g.softmax(v[0])));
op_gradcheck!(grad_sum_rows, [[3, 2]], |g, v| Ok(g.sum_rows(v[0])));
op_gradcheck!(grad_mean_rows, [[3, 2]], |g, v| Ok(g.mean_rows(v[0])));
op_gradcheck!(grad_sum_cols, [[2, 3]], |g, v| Ok(g.sum_cols(v[0])));
op_gradcheck!(grad_mean_cols, [[2, 3]], |g, v| Ok(g.mean_cols(v[0])));
op_gradcheck!(grad_sum_all, [[2, 3]], |g, v| Ok(g.sum_all(v[0])));
op_gradcheck!(grad_concat_cols, [[2, 1], [2, 3]], |g, v| g.concat_cols(&[v[0], v[1], v[0]]));
op_gradcheck!(grad_concat_rows, [[1, 3], [2, 3]], |g, v| g.concat_rows(&[v[1], v[0]]));
op_gradcheck!(grad_slice_cols, [[2, 4]], |g, v| g.slice_cols(v[0], 1, 2));
op_gradcheck!(grad_slice_rows, [[4, 2]], |g, v| g.slice_rows(v[0], 1, 2));
op_gradcheck!(grad_shift_down, [[4, 2]], |g, v| Ok(g.shift_rows(v[0], 1)));
op_gradcheck!(grad_shift_up, [[4, 2]], |g, v| Ok(g.shift_rows(v[0], -1)));
op_gradcheck!(grad_repeat_rows, [[1, 3]], |g, v| g.repeat_rows(v[0], 2));
op_gradcheck!(grad_gather, [[4, 2]], |g, v| g.gather(v[0], &[3, 0, 3]));
op_gradcheck!(grad_pick, [[2, 3]], |g, v| g.pick(v[0], 1, 2));
op_gradcheck!(grad_scatter_cols, [[1, 3]], |g, v| g.scatter_cols(v[0], &[4, 1, 4], 6));
op_gradcheck!(grad_pad_cols, [[2, 3]], |g, v| g.pad_cols(v[0], 5));

fn scalar_graph() -> ParamStore<f64> {
    ParamStore::new()
}

#[test]
fn sigmoid_of_zero_is_half() {
    let s = scalar_graph();
    let mut g = Graph::new(&s);
    let x = g.constant(Tensor::scalar(0.0));
    let y = g.sigmoid(x);
    assert_eq!(g.value(y).item(), 0.5);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let s = scalar_graph();
    let mut g = Graph::new(&s);
    let x = g.constant(Tensor::row(vec![1.0, 1.0]));
    let y = g.softmax(x);
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn identity_matmul_in_graph() {
    let s = scalar_graph();
    let mut g = Graph::new(&s);
    let eye = g.constant(Tensor::from_fn(3, 3, |r, c| if r == c { 1.0 } else { 0.0 }));
    let a_t = Tensor::from_f64(3, 2, &[1.0, -2.0, 3.5, 0.0, 7.0, 1e-3]).unwrap();
    let a = g.constant(a_t.clone());
    let y = g.matmul(eye, a).unwrap();
    assert_eq!(g.value(y), &a_t);
}

#[test]
fn sigmoid_derivative_at_zero_is_quarter() {
    let mut s = ParamStore::new();
    let x = s.register("x", Tensor::scalar(0.0)).unwrap();
    let mut g = Graph::new(&s);
    let xv = g.param(x);
    let y = g.sigmoid(xv);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x, &s).item(), 0.25);
}

#[test]
fn product_rule() {
    let mut s = ParamStore::new();
    let x = s.register("x", Tensor::scalar(2.0)).unwrap();
    let y = s.register("y", Tensor::scalar(3.0)).unwrap();
    let mut g = Graph::new(&s);
    let (xv, yv) = (g.param(x), g.param(y));
    let p = g.mul(xv, yv).unwrap();
    let grads = g.backward(p).unwrap();
    assert_eq!(grads.get(x, &s).item(), 3.0);
    assert_eq!(grads.get(y, &s).item(), 2.0);
}

#[test]
fn diamond_graph_sums_both_paths() {
    // l = tanh(x) + x * x, consumed twice through different paths.
    let mut s = ParamStore::new();
    let x = s.register("x", Tensor::scalar(0.3)).unwrap();
    let mut g = Graph::new(&s);
    let xv = g.param(x);
    let t = g.tanh(xv);
    let sq = g.mul(xv, xv).unwrap();
    let l = g.add(t, sq).unwrap();
    let grads = g.backward(l).unwrap();
    let expected = (1.0 - 0.3f64.tanh().powi(2)) + 2.0 * 0.3;
    assert!((grads.get(x, &s).item() - expected).abs() < 1e-15);
}

#[test]
fn second_backward_is_an_error() {
    let mut s = ParamStore::new();
    let x = s.register("x", Tensor::scalar(1.0)).unwrap();
    let mut g = Graph::new(&s);
    let xv = g.param(x);
    let y = g.tanh(xv);
    g.backward(y).unwrap();
    assert_eq!(g.backward(y).unwrap_err(), TensorError::BackwardTwice);
}

#[test]
fn unreachable_parameter_gets_zero_gradient() {
    let mut s = ParamStore::new();
    let x = s.register("x", Tensor::scalar(1.0)).unwrap();
    let unused = s.register("unused", Tensor::row(vec![1.0, 2.0])).unwrap();
    let mut g = Graph::new(&s);
    let xv = g.param(x);
    let y = g.exp(xv);
    let grads = g.backward(y).unwrap();
    assert!(!grads.is_reached(unused));
    assert_eq!(grads.get(unused, &s).data(), &[0.0, 0.0]);
}

#[test]
fn shape_mismatch_names_op_and_shapes() {
    let s = scalar_graph();
    let mut g = Graph::new(&s);
    let a = g.zeros(2, 3);
    let b = g.zeros(2, 3);
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "matmul",
            left: [2, 3],
            right: [2, 3]
        }
    );
    let msg = err.to_string();
    assert!(msg.contains("matmul") && msg.contains("[2, 3]"));
    let c = g.zeros(3, 2);
    assert!(g.add(a, c).is_err());
}

#[test]
fn non_finite_values_are_reported() {
    let s = scalar_graph();
    let mut g = Graph::new(&s);
    let x = g.constant(Tensor::scalar(0.0));
    let y = g.ln(x);
    assert!(matches!(g.non_finite(), Some(TensorError::NonFinite { op: "ln", .. })));
    assert!(matches!(g.backward(y), Err(TensorError::NonFinite { .. })));
}

#[test]
fn floored_log_has_zero_gradient_below_floor() {
    let mut s = ParamStore::new();
    let x = s.register("x", Tensor::scalar(0.0)).unwrap();
    let mut g = Graph::new(&s);
    let xv = g.param(x);
    let y = g.ln_floored(xv, 1e-12);
    assert!((g.value(y).item() - (1e-12f64).ln()).abs() < 1e-12);
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(x, &s).item(), 0.0);
}

#[test]
fn truncate_rolls_back_param_cache() {
    let mut s = ParamStore::new();
    let w = s.register("w", Tensor::scalar(2.0)).unwrap();
    let mut g = Graph::new(&s);
    let mark = g.mark();
    let a = g.param(w);
    g.truncate(mark);
    assert_eq!(g.len(), mark);
    let b = g.param(w);
    assert_eq!(a, b);
    assert_eq!(g.value(b).item(), 2.0);
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-10.0f64..10.0, 1..8)) {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.constant(Tensor::row(values));
        let y = g.softmax(x);
        let out = g.value(y);
        prop_assert!((out.sum() - 1.0).abs() < 1e-9);
        prop_assert!(out.data().iter().all(|&p| p > 0.0 && p < 1.0 || out.len() == 1));
    }

    #[test]
    fn adagrad_accumulators_never_decrease(grads in prop::collection::vec(-20.0f64..20.0, 1..20)) {
        let mut s = ParamStore::new();
        let id = s.register("w", Tensor::scalar(0.0)).unwrap();
        let mut opt = Adagrad::new(&s, 0.1, 1e-8, (-5.0, 5.0), 0.0);
        let mut prev = 0.0;
        for g in grads {
            s.accumulate(&Gradients { grads: vec![Some(Tensor::scalar(g))] }, 1.0);
            opt.step(&mut s);
            let acc = opt.accumulators()[id.index()].item();
            prop_assert!(acc >= prev);
            prev = acc;
        }
    }
}
