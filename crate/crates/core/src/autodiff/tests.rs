use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::memory::kernels;
use crate::scalar::Scalar;

fn t64(shape: &[usize], values: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, values).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_examples() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let eye = g.constant(t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let col = g.constant(t64(&[2, 1], &[5.0, 6.0]));
    let p = g.matmul(a, eye).unwrap();
    assert_eq!(g.value(p).data(), [1.0, 2.0, 3.0, 4.0]);
    let q = g.matmul(a, col).unwrap();
    assert_eq!(g.value(q).data(), [17.0, 39.0]);
    assert!(g.matmul(col, col).is_err());
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut expected = [0.0; 9];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                expected[i * 3 + j] += a[i * 3 + k] * b[k * 3 + j];
            }
        }
    }
    let got = t64(&[3, 3], &a).matmul(&t64(&[3, 3], &b)).unwrap();
    assert!(close(got.data(), &expected, 1e-12));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[2, 2], &[0.0, 0.0, 1f64.ln(), 3f64.ln()]));
    let y = g.softmax(x);
    assert!(close(g.value(y).data(), &[0.5, 0.5, 0.25, 0.75], 1e-15));

    let raw = [0.3, -1.2, 2.5, 0.0];
    let shifted: Vec<f64> = raw.iter().map(|v| v + 123.0).collect();
    let a = g.constant(t64(&[4], &raw));
    let b = g.constant(t64(&[4], &shifted));
    let (sa, sb) = (g.softmax(a), g.softmax(b));
    assert!(close(g.value(sa).data(), g.value(sb).data(), 1e-12));

    let huge = g.constant(t64(&[2], &[1e4, -1e4]));
    let s = g.softmax(huge);
    assert!(g.value(s).all_finite());
}

#[test]
fn cross_entropy_limits() {
    let mut g = Graph::<f64>::new();
    let zeros = g.constant(Tensor::zeros(&[3, 5]));
    let l = g.cross_entropy(zeros, &[0, 4, 2], &[1.0, 1.0, 1.0]).unwrap();
    assert!((g.value(l).data()[0] - 5f64.ln()).abs() < 1e-14);

    let sharp = g.constant(t64(&[1, 3], &[0.0, 40.0, 0.0]));
    let l = g.cross_entropy(sharp, &[1], &[1.0]).unwrap();
    assert!(g.value(l).data()[0] <= 1e-6);

    assert!(g.cross_entropy(sharp, &[1], &[0.0]).is_err());
    assert!(g.cross_entropy(sharp, &[3], &[1.0]).is_err());
}

#[test]
fn cross_entropy_matches_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let logits: Vec<f64> = (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let targets = [2, 0, 3];
    let mask = [1.0, 0.0, 1.0];
    // -(1/Σm) Σ_t m_t Σ_k y_tk log softmax(logits_t)_k
    let mut total = 0.0;
    for t in 0..3 {
        let row = &logits[t * 4..(t + 1) * 4];
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for k in 0..4 {
            let y = if k == targets[t] { 1.0 } else { 0.0 };
            total -= mask[t] * y * (row[k].exp() / z).ln();
        }
    }
    let expected = total / 2.0;
    let mut g = Graph::<f64>::new();
    let x = g.constant(t64(&[3, 4], &logits));
    let l = g.cross_entropy(x, &targets, &mask).unwrap();
    assert!((g.value(l).data()[0] - expected).abs() < 1e-10);
}

#[test]
fn layer_norm_cases() {
    let mut g = Graph::<f64>::new();
    let gain = g.constant(t64(&[2], &[1.0, 1.0]));
    let bias = g.constant(t64(&[2], &[0.0, 0.0]));
    let flat = g.constant(t64(&[2], &[3.0, 3.0]));
    let y = g.layer_norm(flat, gain, bias).unwrap();
    assert_eq!(g.value(y).data(), [0.0, 0.0]);
    let pm = g.constant(t64(&[2], &[1.0, -1.0]));
    let y = g.layer_norm(pm, gain, bias).unwrap();
    assert!(close(g.value(y).data(), &[1.0, -1.0], 1e-5));

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 16;
    let data: Vec<f64> = (0..5 * d).map(|_| rng.gen_range(-4.0..4.0)).collect();
    let gain = g.constant(Tensor::filled(&[d], 1.0));
    let bias = g.constant(Tensor::zeros(&[d]));
    let x = g.constant(t64(&[5, d], &data));
    let y = g.layer_norm(x, gain, bias).unwrap();
    for row in g.value(y).data().chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        assert!(mean.abs() <= 1e-6);
        assert!((var - 1.0).abs() <= 1e-4);
    }
    let one = g.constant(t64(&[1], &[1.0]));
    assert!(g.layer_norm(one, one, one).is_err());
}

#[test]
fn backward_analytic_derivatives() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::scalar(3.0));
    let sq = g.mul(x, x).unwrap();
    let grads = g.backward(sq).unwrap();
    assert_eq!(grads.wrt(x).unwrap(), [6.0]);

    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::scalar(0.0));
    let y = g.tanh(x);
    assert_eq!(g.backward(y).unwrap().wrt(x).unwrap(), [1.0]);

    let v = g.input(Tensor::zeros(&[2]));
    assert!(g.backward(v).is_err());
    let mut inf = Graph::<f64>::inference();
    let s = inf.input(Tensor::scalar(1.0));
    assert!(inf.backward(s).is_err());
}

#[test]
fn unreachable_parameters_get_zero() {
    let mut store = ParamStore::<f64>::new();
    let used = store.insert("used", t64(&[2], &[1.0, 2.0])).unwrap();
    let unused = store.insert("unused", t64(&[2], &[1.0, 2.0])).unwrap();
    let mut g = Graph::new();
    let p = g.param(&store, used);
    let l = g.sum(p);
    let grads = g.backward(l).unwrap();
    g.accumulate_param_grads(&grads, &mut store).unwrap();
    assert_eq!(store.grad(used).data(), [1.0, 1.0]);
    assert_eq!(store.grad(unused).data(), [0.0, 0.0]);
}

#[test]
fn grad_check_quadratic_and_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f64>::new();
    let theta: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let id = store.insert("theta", t64(&[6], &theta)).unwrap();
    let report = grad_check(&mut store, 1e-5, |g, s| {
        let p = g.param(s, id);
        let sq = g.mul(p, p)?;
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(report.max_relative_error <= 1e-9, "{report:?}");

    let mut store = ParamStore::<f64>::new();
    let w: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let wid = store.insert("w", t64(&[3, 4], &w)).unwrap();
    let report = grad_check(&mut store, 1e-5, |g, s| {
        let input = g.constant(t64(&[2, 3], &x));
        let wv = g.param(s, wid);
        let logits = g.matmul(input, wv)?;
        g.cross_entropy(logits, &[1, 3], &[1.0, 1.0])
    })
    .unwrap();
    assert!(report.max_relative_error <= 1e-6, "{report:?}");
}

#[test]
fn grad_check_refines_kinks_but_not_wrong_gradients() {
    let mut store = ParamStore::<f64>::new();
    // Within one step of the ReLU kink: the first central difference is off.
    let id = store.insert("theta", t64(&[2], &[5e-5, -0.3])).unwrap();
    let report = grad_check(&mut store, 1e-4, |g, s| {
        let p = g.param(s, id);
        let r = g.relu(p);
        Ok(g.sum(r))
    })
    .unwrap();
    assert_eq!(report.refined, 1);
    assert!(report.max_relative_error <= 1e-9, "{report:?}");

    // Backprop sees p*p, every finite difference sees 3*p*p.
    let mut calls = 0;
    let report = grad_check(&mut store, 1e-4, |g, s| {
        calls += 1;
        let p = g.param(s, id);
        let sq = g.mul(p, p)?;
        let sq = if calls == 1 { sq } else { g.scale(sq, 3.0) };
        Ok(g.sum(sq))
    })
    .unwrap();
    assert!(report.max_relative_error > 0.5, "{report:?}");
}

#[test]
fn gradients_of_independent_subgraphs_separate() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xs: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ys: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let branch_x = |g: &mut Graph<f64>, x: Var| {
        let t = g.tanh(x);
        let m = g.mul(t, x).unwrap();
        g.sum(m)
    };
    let branch_y = |g: &mut Graph<f64>, y: Var| {
        let s = g.softmax(y);
        let m = g.mul(s, y).unwrap();
        g.sum(m)
    };
    let mut g = Graph::new();
    let (x, y) = (g.input(t64(&[4], &xs)), g.input(t64(&[3], &ys)));
    let (fx, fy) = (branch_x(&mut g, x), branch_y(&mut g, y));
    let total = g.add(fx, fy).unwrap();
    let joint = g.backward(total).unwrap();

    let mut gx = Graph::new();
    let x2 = gx.input(t64(&[4], &xs));
    let fx2 = branch_x(&mut gx, x2);
    let mut gy = Graph::new();
    let y2 = gy.input(t64(&[3], &ys));
    let fy2 = branch_y(&mut gy, y2);
    assert_eq!(joint.wrt(x).unwrap(), gx.backward(fx2).unwrap().wrt(x2).unwrap());
    assert_eq!(joint.wrt(y).unwrap(), gy.backward(fy2).unwrap().wrt(y2).unwrap());
}

#[test]
fn dropout_is_deterministic_and_train_only() {
    let run = |seed| {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::filled(&[64], 1.0));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = g.dropout(x, 0.5, &mut rng);
        g.value(y).data().to_vec()
    };
    assert_eq!(run(1), run(1));
    let out = run(1);
    assert!(out.iter().all(|&v| v == 0.0 || v == 2.0));
    assert!(out.contains(&0.0) && out.contains(&2.0));
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::filled(&[4], 1.0));
    let y = g.dropout(x, 0.0, &mut ChaCha8Rng::seed_from_u64(0));
    assert_eq!(x, y);
}

#[test]
fn released_values_free_memory_on_inference_graphs() {
    let mut g = Graph::<f64>::inference();
    let x = g.constant(Tensor::zeros(&[3]));
    let y = g.tanh(x);
    g.release(x);
    assert_eq!(g.value(y).data(), [0.0; 3]);
}

// ----- finite-difference checks of every primitive -----

#[derive(Clone, Copy, Debug)]
enum Prim {
    Add,
    Sub,
    Mul,
    Scale,
    AddBias,
    Tanh,
    Sigmoid,
    Relu,
    MatMul,
    BatchMatMul,
    BatchMatMulT,
    Reshape,
    Transpose,
    Permute,
    ConcatLast,
    SliceLast,
    ConcatRows,
    GatherRows,
    Embedding,
    Softmax,
    CrossEntropy,
    LayerNorm,
    Dropout,
    Mean,
    Rotary,
    RelShift,
    StackUpdate,
    TapeWrite,
    TapeMove,
    TapeRead,
}

const PRIMS: [Prim; 30] = [
    Prim::Add,
    Prim::Sub,
    Prim::Mul,
    Prim::Scale,
    Prim::AddBias,
    Prim::Tanh,
    Prim::Sigmoid,
    Prim::Relu,
    Prim::MatMul,
    Prim::BatchMatMul,
    Prim::BatchMatMulT,
    Prim::Reshape,
    Prim::Transpose,
    Prim::Permute,
    Prim::ConcatLast,
    Prim::SliceLast,
    Prim::ConcatRows,
    Prim::GatherRows,
    Prim::Embedding,
    Prim::Softmax,
    Prim::CrossEntropy,
    Prim::LayerNorm,
    Prim::Dropout,
    Prim::Mean,
    Prim::Rotary,
    Prim::RelShift,
    Prim::StackUpdate,
    Prim::TapeWrite,
    Prim::TapeMove,
    Prim::TapeRead,
];

fn input_shapes(p: Prim) -> Vec<Vec<usize>> {
    use Prim::*;
    match p {
        Add | Sub | Mul => vec![vec![2, 3], vec![2, 3]],
        Scale | Tanh | Sigmoid | Relu | Reshape | Transpose | Softmax | Dropout | Mean => vec![vec![3, 4]],
        AddBias => vec![vec![3, 4], vec![4]],
        MatMul => vec![vec![2, 3], vec![3, 4]],
        BatchMatMul => vec![vec![2, 3, 4], vec![2, 4, 2]],
        BatchMatMulT => vec![vec![2, 3, 4], vec![2, 5, 4]],
        Permute => vec![vec![2, 3, 4]],
        ConcatLast => vec![vec![2, 3], vec![2, 2]],
        SliceLast => vec![vec![3, 5]],
        ConcatRows => vec![vec![2, 3], vec![1, 3]],
        GatherRows | Embedding => vec![vec![4, 3]],
        CrossEntropy => vec![vec![3, 4]],
        LayerNorm => vec![vec![3, 5], vec![5], vec![5]],
        Rotary => vec![vec![2, 3, 4]],
        RelShift => vec![vec![2, 3, 5]],
        StackUpdate => vec![vec![2, 3, 2], vec![2, 3], vec![2, 2]],
        TapeWrite => vec![vec![2, 4, 2], vec![2, 4], vec![2, 5], vec![2, 2]],
        TapeMove => vec![vec![2, 5], vec![2, 5]],
        TapeRead => vec![vec![2, 4, 3], vec![2, 4]],
    }
}

fn apply<T: Scalar>(p: Prim, g: &mut Graph<T>, xs: &[Var]) -> Var {
    use Prim::*;
    let r = match p {
        Add => g.add(xs[0], xs[1]),
        Sub => g.sub(xs[0], xs[1]),
        Mul => g.mul(xs[0], xs[1]),
        Scale => Ok(g.scale(xs[0], T::from_float(-1.7))),
        AddBias => g.add_bias(xs[0], xs[1]),
        Tanh => Ok(g.tanh(xs[0])),
        Sigmoid => Ok(g.sigmoid(xs[0])),
        Relu => Ok(g.relu(xs[0])),
        MatMul => g.matmul(xs[0], xs[1]),
        BatchMatMul => g.batch_matmul(xs[0], xs[1], false),
        BatchMatMulT => g.batch_matmul(xs[0], xs[1], true),
        Reshape => g.reshape(xs[0], &[2, 6]),
        Transpose => g.transpose(xs[0]),
        Permute => g.permute(xs[0], &[2, 0, 1]),
        ConcatLast => g.concat_last(xs),
        SliceLast => g.slice_last(xs[0], 1, 3),
        ConcatRows => g.concat_rows(xs),
        GatherRows => g.gather_rows(xs[0], &[3, 0, 3, 1]),
        Embedding => g.embedding(xs[0], &[2, 2, 0]),
        Softmax => Ok(g.softmax(xs[0])),
        CrossEntropy => g.cross_entropy(xs[0], &[1, 0, 3], &[T::one(), T::from_float(0.5), T::zero()]),
        LayerNorm => g.layer_norm(xs[0], xs[1], xs[2]),
        Dropout => {
            let mask = (0..12).map(|i| if i % 3 == 0 { T::zero() } else { T::from_float(1.5) }).collect();
            Ok(g.dropout_with_mask(xs[0], mask))
        }
        Mean => Ok(g.mean(xs[0])),
        Rotary => g.rotary(xs[0], 10.0),
        RelShift => g.rel_shift(xs[0]),
        StackUpdate => g.stack_update(xs[0], xs[1], xs[2], 3),
        TapeWrite => g.tape_write(xs[0], xs[1], xs[2], xs[3]),
        TapeMove => g.tape_move(xs[0], xs[1], &[2, 3]),
        TapeRead => g.tape_read(xs[0], xs[1]),
    };
    r.unwrap()
}

fn random_inputs(p: Prim, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    input_shapes(p)
        .iter()
        .map(|s| {
            let n: usize = s.iter().product();
            let data: Vec<f64> = (0..n)
                .map(|_| {
                    let v: f64 = rng.gen_range(-1.5..1.5);
                    if matches!(p, Prim::Relu) {
                        v + 0.1 * v.signum()
                    } else {
                        v
                    }
                })
                .collect();
            t64(s, &data)
        })
        .collect()
}

/// `Σ w ⊙ prim(inputs)` with fixed weights, so every output coordinate
/// contributes.
fn weighted_loss<T: Scalar>(p: Prim, g: &mut Graph<T>, xs: &[Var]) -> Var {
    let out = apply(p, g, xs);
    let n = g.value(out).len();
    let w: Vec<T> = (0..n).map(|i| T::from_float(0.5 + ((i * 7) % 5) as f64 * 0.25)).collect();
    let wv = g.constant(Tensor::new(g.shape(out).to_vec(), w).unwrap());
    let m = g.mul(out, wv).unwrap();
    g.sum(m)
}

fn backprop<T: Scalar>(p: Prim, inputs: &[Tensor<f64>]) -> Vec<Vec<f64>> {
    let mut g = Graph::<T>::new();
    let xs: Vec<Var> = inputs.iter().map(|x| g.input(x.cast())).collect();
    let loss = weighted_loss(p, &mut g, &xs);
    let grads = g.backward(loss).unwrap();
    xs.iter()
        .zip(inputs)
        .map(|(&x, t)| grads.wrt(x).map_or(vec![0.0; t.len()], |d| d.iter().map(|v| v.to_f64_lossy()).collect()))
        .collect()
}

/// Central differences in 64-bit, independent of the backward rules.
fn central_differences(p: Prim, inputs: &[Tensor<f64>], h: f64) -> Vec<Vec<f64>> {
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::<f64>::inference();
        let xs: Vec<Var> = ins.iter().map(|x| g.constant(x.clone())).collect();
        let l = weighted_loss(p, &mut g, &xs);
        g.value(l).data()[0]
    };
    let mut out = Vec::new();
    for a in 0..inputs.len() {
        let mut grads = Vec::new();
        for i in 0..inputs[a].len() {
            let mut plus = inputs.to_vec();
            plus[a].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[a].data_mut()[i] -= h;
            grads.push((eval(&plus) - eval(&minus)) / (2.0 * h));
        }
        out.push(grads);
    }
    out
}

/// Largest coordinate error scaled by the largest gradient magnitude.
fn relative_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let scale = a.iter().chain(b).flatten().fold(1e-8f64, |m, v| m.max(v.abs()));
    let diff = a.iter().flatten().zip(b.iter().flatten()).fold(0f64, |m, (x, y)| m.max((x - y).abs()));
    diff / scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_primitive_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in PRIMS {
            let inputs = random_inputs(p, &mut rng);
            let fd = central_differences(p, &inputs, 1e-5);
            let err64 = relative_error(&backprop::<f64>(p, &inputs), &fd);
            prop_assert!(err64 <= 1e-6, "{:?} f64 error {}", p, err64);
            let err32 = relative_error(&backprop::<f32>(p, &inputs), &fd);
            prop_assert!(err32 <= 1e-3, "{:?} f32 error {}", p, err32);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(values in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t64(&[3, 4], &values));
        let y = g.softmax(x);
        for row in g.value(y).data().chunks(4) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn memory_kernels_agree_with_value_types() {
    // The graph primitive and the per-sequence kernel compute the same rows.
    let mut g = Graph::<f64>::new();
    let s = g.constant(t64(&[1, 2, 1], &[4.0, 0.0]));
    let a = g.constant(t64(&[1, 3], &[0.5, 0.0, 0.5]));
    let v = g.constant(t64(&[1, 1], &[2.0]));
    let out = g.stack_update(s, a, v, 8).unwrap();
    assert_eq!(g.shape(out), [1, 3, 1]);
    assert_eq!(g.value(out).data(), [3.0, 2.0, 0.0]);
    assert_eq!(kernels::stack_rows_after(8, 8), 8);
}
