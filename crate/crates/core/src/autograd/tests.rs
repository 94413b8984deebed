use rand::Rng;

use super::*;
use crate::gradcheck::{check_inputs, DEFAULT_FLOOR, DEFAULT_STEP};
use crate::init::{normal, rng};

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

/// Contracts a tensor with fixed pseudo-random weights so every output
/// element carries a distinct gradient.
fn weighted_sum(tape: &mut Tape<f64>, v: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(v).to_vec();
    let w = tape.constant(normal(&shape, 1.0, &mut rng(seed)));
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn assert_fd<F>(inputs: &[Tensor<f64>], build: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let r = check_inputs(inputs, build, DEFAULT_STEP, DEFAULT_FLOOR).unwrap();
    assert!(r.max_rel_err <= 1e-6, "finite-difference mismatch: {r:?}");
}

#[test]
fn matmul_identity_and_backward() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[5.0, 6.0, 7.0, 8.0]);

    let mut tape = Tape::new();
    let a = tape.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).with_requires_grad(true));
    let b = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let c = tape.matmul(a, b).unwrap();
    let s = tape.sum(c);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(a).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let msg = tape.matmul(a, b).unwrap_err().to_string();
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_random_fd() {
    let mut r = rng(11);
    let a = normal(&[3, 4], 1.0, &mut r);
    let b = normal(&[4, 2], 1.0, &mut r);
    assert_fd(&[a, b], |tape, v| {
        let c = tape.matmul(v[0], v[1])?;
        Ok(tape.sum(c))
    });
}

#[test]
fn layer_norm_cases() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 5], 3.25));
    let g = tape.constant(Tensor::ones(&[5]));
    let b = tape.constant(Tensor::zeros(&[5]));
    let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
    let g = tape.constant(Tensor::ones(&[2]));
    let b = tape.constant(Tensor::zeros(&[2]));
    let y = tape.layer_norm(x, g, b, 1e-12).unwrap();
    let yv = tape.value(y).data();
    assert!((yv[0] + 1.0).abs() < 1e-9 && (yv[1] - 1.0).abs() < 1e-9);

    let bad = tape.constant(Tensor::ones(&[3]));
    assert!(matches!(tape.layer_norm(x, bad, b, 1e-5), Err(Error::Dimension(_))));
}

#[test]
fn softmax_cases() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 4], 0.7));
    let y = tape.softmax(x);
    assert!(tape.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let x = tape.constant(t(&[1, 2], &[0.0, 3f64.ln()]));
    let y = tape.softmax(x);
    let yv = tape.value(y).data();
    assert!((yv[0] - 0.25).abs() < 1e-12 && (yv[1] - 0.75).abs() < 1e-12);

    // Shift invariance under max-subtraction: exact when the shift keeps
    // the differences representable.
    let base = t(&[1, 3], &[0.5, -1.25, 2.0]);
    let shifted = t(&[1, 3], &[8.5, 6.75, 10.0]);
    let a = tape.constant(base);
    let b = tape.constant(shifted);
    let (ya, yb) = (tape.softmax(a), tape.softmax(b));
    assert!(tape.value(ya).bit_eq(tape.value(yb)));
}

#[test]
fn gelu_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[3], &[0.0, 10.0, 1.0]));
    let y = tape.gelu(x);
    let yv = tape.value(y).data();
    assert_eq!(yv[0], 0.0);
    assert!((yv[1] - 10.0).abs() < 1e-6);
    // 0.5·(1 + erf(1/√2)) with erf(0.7071067811865476) = 0.6826894921370859
    assert!((yv[2] - 0.841_344_746_068_543).abs() < 1e-12);
}

#[test]
fn batch_norm_cases() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2, 2], &[1.0, -1.0, -1.0, 1.0]));
    let g = tape.constant(Tensor::ones(&[2]));
    let (y, stats) = tape.batch_norm(x, g, None, 1e-12).unwrap();
    assert!(tape.value(y).max_abs_diff(tape.value(x)) < 1e-9);
    assert_eq!(stats.mean, vec![0.0, 0.0]);
    assert_eq!(stats.var_unbiased, vec![2.0, 2.0]);

    let y = tape.normalize_fixed(x, &[0.0, 0.0], &[1.0, 1.0], g, None, 0.0).unwrap();
    assert!(tape.value(y).bit_eq(tape.value(x)));

    let xr = tape.constant(normal(&[8, 4], 3.0, &mut rng(3)));
    let g4 = g_of(&mut tape, 4);
    let (y, _) = tape.batch_norm(xr, g4, None, 1e-5).unwrap();
    let yv = tape.value(y);
    for c in 0..4 {
        let col: Vec<f64> = (0..8).map(|r| yv.data()[r * 4 + c]).collect();
        let m = col.iter().sum::<f64>() / 8.0;
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 8.0;
        assert!(m.abs() <= 1e-6);
        assert!((v - 1.0).abs() <= 1e-4);
    }

    let one = tape.constant(Tensor::ones(&[1, 4]));
    let g4 = g_of(&mut tape, 4);
    assert!(matches!(tape.batch_norm(one, g4, None, 1e-5), Err(Error::Contract(_))));
}

fn g_of(tape: &mut Tape<f64>, d: usize) -> Var {
    tape.constant(Tensor::ones(&[d]))
}

#[test]
fn backward_contract_and_simple_gradients() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true));
    let s = tape.sum(x);
    assert_eq!(tape.backward(s).unwrap().get(x).unwrap(), &[1.0, 1.0, 1.0]);

    let sq = tape.mul(x, x).unwrap();
    let s2 = tape.sum(sq);
    assert_eq!(tape.backward(s2).unwrap().get(x).unwrap(), &[2.0, 4.0, 6.0]);

    assert!(matches!(tape.backward(sq), Err(Error::Contract(_))));
}

#[test]
fn repeated_backward_accumulates_into_store() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", t(&[2], &[1.0, 2.0])).unwrap();
    store.set_trainable(id, true);
    let mut tape = Tape::new();
    let w = tape.param(&store, id);
    let sq = tape.mul(w, w).unwrap();
    let s = tape.sum(sq);
    tape.backward_into(s, &mut store).unwrap();
    tape.backward_into(s, &mut store).unwrap();
    assert_eq!(store.tensor(id).grad().unwrap(), &[4.0, 8.0]);
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("w", t(&[2], &[1.0, 2.0])).unwrap();
    let mut tape = Tape::new();
    let w = tape.param(&store, id);
    let s = tape.sum(w);
    let g = tape.backward_into(s, &mut store).unwrap();
    assert!(g.get(w).is_none());
    assert!(store.tensor(id).grad().is_none());
}

#[test]
fn backward_visits_each_node_once() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(normal(&[2, 3], 1.0, &mut rng(1)).with_requires_grad(true));
    let a = tape.gelu(x);
    let b = tape.add(a, x).unwrap();
    let c = tape.mul(b, a).unwrap();
    let s = tape.sum(c);
    let g = tape.backward(s).unwrap();
    assert!(g.visit_counts().iter().all(|&v| v <= 1));
    assert_eq!(g.visit_counts().iter().filter(|&&v| v == 1).count(), tape.len());
}

/// Twenty random draws for each primitive, certified against central
/// differences in f64.
#[test]
fn every_primitive_matches_finite_differences() {
    let mut r = rng(2024);
    for trial in 0..20u64 {
        let seed = 1000 + trial;
        let rows = r.gen_range(2..5);
        let d = 2 * r.gen_range(1..4);
        let x = normal(&[rows, d], 1.0, &mut r);
        let y = normal(&[rows, d], 1.0, &mut r);
        let w = normal(&[3, d], 1.0, &mut r);
        let bias3 = normal(&[3], 1.0, &mut r);
        let vec_d = normal(&[d], 1.0, &mut r);
        let gamma = Tensor::from_fn(&[d], |_| 1.0 + 0.3 * r.gen::<f64>());

        assert_fd(&[x.clone(), normal(&[d, 3], 1.0, &mut r)], |tp, v| {
            let c = tp.matmul(v[0], v[1])?;
            weighted_sum(tp, c, seed)
        });
        assert_fd(&[x.clone(), w.clone(), bias3.clone()], |tp, v| {
            let c = tp.linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(tp, c, seed)
        });
        assert_fd(&[x.clone(), y.clone()], |tp, v| {
            let a = tp.add(v[0], v[1])?;
            let s = tp.sub(a, v[1])?;
            let m = tp.mul(s, v[1])?;
            let sc = tp.scale(m, 0.7);
            let sh = tp.add_scalar(sc, 0.3);
            weighted_sum(tp, sh, seed)
        });
        assert_fd(&[x.clone(), vec_d.clone()], |tp, v| {
            let c = tp.add_bias(v[0], v[1])?;
            weighted_sum(tp, c, seed)
        });
        assert_fd(&[x.clone(), normal(&[1, d], 1.0, &mut r)], |tp, v| {
            let c = tp.add_group(v[0], v[1], rows)?;
            let c = tp.add_tiled(c, v[1])?;
            weighted_sum(tp, c, seed)
        });
        assert_fd(&[x.clone(), gamma.clone(), vec_d.clone()], |tp, v| {
            let c = tp.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(tp, c, seed)
        });
        assert_fd(std::slice::from_ref(&x), |tp, v| {
            let c = tp.softmax(v[0]);
            weighted_sum(tp, c, seed)
        });
        assert_fd(std::slice::from_ref(&x), |tp, v| {
            let c = tp.gelu(v[0]);
            weighted_sum(tp, c, seed)
        });
        assert_fd(&[x.clone(), gamma.clone(), vec_d.clone()], |tp, v| {
            let (c, _) = tp.batch_norm(v[0], v[1], Some(v[2]), 1e-5)?;
            weighted_sum(tp, c, seed)
        });
        assert_fd(&[x.clone(), gamma.clone()], |tp, v| {
            let c = tp.normalize_fixed(v[0], &vec![0.1; d], &vec![2.0; d], v[1], None, 1e-5)?;
            weighted_sum(tp, c, seed)
        });
        assert_fd(std::slice::from_ref(&x), |tp, v| {
            let a = tp.slice_rows(v[0], 1, rows - 1)?;
            let b = tp.concat_rows(&[a, v[0]])?;
            let c = tp.gather_rows(b, &[0, 2, 2])?;
            let e = tp.gather_elems(c, &[0, 1, d + 1])?;
            let m = tp.mean(e);
            let s = weighted_sum(tp, c, seed)?;
            let total = tp.add(m, s)?;
            Ok(total)
        });
        // Relu away from the kink.
        let xr = Tensor::from_fn(&[rows, d], |i| if i % 2 == 0 { 0.5 + i as f64 } else { -0.5 - i as f64 });
        assert_fd(&[xr], |tp, v| {
            let c = tp.relu(v[0]);
            weighted_sum(tp, c, seed)
        });
        let heads = 2;
        let tokens = 3;
        let qkv = normal(&[2 * tokens, 3 * 4], 1.0, &mut r);
        let positions: Vec<f64> = (0..tokens).map(|p| p as f64 * 1.5).collect();
        assert_fd(std::slice::from_ref(&qkv), |tp, v| {
            let c = tp.rope_qkv(v[0], &positions, heads, 100.0)?;
            weighted_sum(tp, c, seed)
        });
        assert_fd(std::slice::from_ref(&qkv), |tp, v| {
            let c = tp.attention(v[0], 2, heads)?;
            weighted_sum(tp, c, seed)
        });
        let labels: Vec<usize> = (0..rows).map(|i| i % 3).collect();
        assert_fd(&[normal(&[rows, 3], 2.0, &mut r)], |tp, v| tp.cross_entropy(v[0], &labels));
        assert_fd(std::slice::from_ref(&x), |tp, v| {
            let c = tp.pairwise_distance(v[0])?;
            weighted_sum(tp, c, seed)
        });
    }
}

#[test]
fn composite_of_many_primitives_matches_fd() {
    let mut r = rng(5);
    let x = normal(&[4, 8], 1.0, &mut r);
    let w1 = normal(&[24, 8], 0.3, &mut r);
    let w2 = normal(&[8, 8], 0.3, &mut r);
    let g = Tensor::from_fn(&[8], |i| 1.0 + 0.1 * i as f64);
    let b = normal(&[8], 0.1, &mut r);
    let r_ = check_inputs(
        &[x, w1, w2, g, b],
        |tp, v| {
            let h = tp.layer_norm(v[0], v[3], v[4], 1e-6)?;
            let qkv = tp.linear(h, v[1], None)?;
            let qkv = tp.rope_qkv(qkv, &[0.0, 1.0], 2, 10_000.0)?;
            let a = tp.attention(qkv, 2, 2)?;
            let o = tp.linear(a, v[2], None)?;
            let o = tp.gelu(o);
            let res = tp.add(o, v[0])?;
            let d = tp.pairwise_distance(res)?;
            let e = tp.gather_elems(d, &[1, 6, 11])?;
            Ok(tp.mean(e))
        },
        DEFAULT_STEP,
        DEFAULT_FLOOR,
    )
    .unwrap();
    assert!(r_.max_rel_err <= 1e-6, "{r_:?}");
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(normal(&[6, 12], 1.0, &mut rng(9)));
        let w = tape.constant(normal(&[12, 12], 0.2, &mut rng(10)));
        let q = tape.linear(x, w, None).unwrap();
        let a = tape.attention(q, 2, 2).unwrap();
        tape.value(a).clone()
    };
    assert!(run().bit_eq(&run()));
}
