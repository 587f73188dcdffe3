use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(rows: usize, cols: usize, data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(rows, cols, data)
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data)
}

/// Central finite differences of `f` w.r.t. every input entry, compared with
/// the reverse-mode gradient. Returns the worst relative error.
fn fd_check(inputs: &[Tensor<f64>], f: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId) -> f64 {
    let mut g = Graph::new();
    let ids: Vec<_> = inputs.iter().map(|x| g.variable(x.clone())).collect();
    let out = f(&mut g, &ids);
    g.backward(out).unwrap();
    let analytic: Vec<Tensor<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, x)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(x.rows(), x.cols())))
        .collect();
    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let ids: Vec<_> = xs.iter().map(|x| g.variable(x.clone())).collect();
        let out = f(&mut g, &ids);
        g.value(out).item()
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i].data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn square_gradient() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(3.0));
    let y = g.mul(x, x).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.value(y).item(), 9.0);
    assert_eq!(g.grad(x).unwrap().item(), 6.0);
}

#[test]
fn product_gradient() {
    let mut g = Graph::new();
    let x = g.variable(Tensor::scalar(2.0));
    let y = g.variable(Tensor::scalar(5.0));
    let z = g.mul(x, y).unwrap();
    g.backward(z).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 5.0);
    assert_eq!(g.grad(y).unwrap().item(), 2.0);
}

#[test]
fn non_scalar_root_rejected() {
    let mut g = Graph::new();
    let x = g.variable(t(1, 2, &[1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(AutodiffError::NonScalarRoot(_))));
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.variable(Tensor::zeros(2, 3));
    let b = g.variable(Tensor::zeros(2, 3));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
}

#[test]
fn mse_of_exact_prediction_is_zero() {
    let mut g = Graph::new();
    let p = g.variable(t(1, 2, &[1.0, 2.0]));
    let l = g.mse_loss(p, &t(1, 2, &[1.0, 2.0])).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn mse_is_batch_mean_of_squared_norms() {
    let mut g = Graph::new();
    let p = g.variable(t(2, 2, &[1.0, 1.0, 0.0, 0.0]));
    let l = g.mse_loss(p, &Tensor::zeros(2, 2)).unwrap();
    assert_eq!(g.value(l).item(), 1.0);
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let mut g = Graph::new();
    let x = g.variable(t(1, 2, &[0.0, 0.0]));
    let y = g.softmax(x);
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn layer_norm_standardises_rows() {
    let mut g = Graph::new();
    let x = g.variable(t(1, 3, &[1.0, 2.0, 3.0]));
    let gamma = g.constant(Tensor::full(1, 3, 1.0));
    let beta = g.constant(Tensor::zeros(1, 3));
    let y = g.layer_norm(x, gamma, beta).unwrap();
    let v = g.value(y).data();
    let mean = v.iter().sum::<f64>() / 3.0;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 3.0;
    assert!(mean.abs() < 1e-6);
    assert!((var - 1.0).abs() < 1e-6);
}

#[test]
fn unreachable_params_get_zero_gradient() {
    let mut store = ParamStore::<f64>::new();
    let used = store.add("used", Tensor::scalar(2.0));
    let unused = store.add("unused", Tensor::scalar(7.0));
    let mut g = Graph::new();
    let u = g.param(&store, used);
    let y = g.mul(u, u).unwrap();
    g.backward(y).unwrap();
    let grads = g.param_grads(&store);
    assert_eq!(grads[used.index()].item(), 4.0);
    assert_eq!(grads[unused.index()].item(), 0.0);
}

#[test]
fn inference_graph_tracks_no_gradients() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::scalar(2.0));
    let mut g = Graph::inference();
    let n = g.param(&store, w);
    assert!(!g.requires_grad(n));
}

#[test]
fn gradients_accumulate_across_uses() {
    // d/dx (x + x) = 2 and backward of a+b equals the sum of separate backwards
    let mut g = Graph::new();
    let x = g.variable(t(1, 3, &[0.3, -1.2, 2.0]));
    let a = g.mul(x, x).unwrap();
    let s = g.add(a, x).unwrap();
    let root = g.sum(s);
    g.backward(root).unwrap();
    let joint = g.grad(x).unwrap().clone();

    let mut sep = [0.0; 3];
    for part in 0..2 {
        let mut g = Graph::new();
        let x = g.variable(t(1, 3, &[0.3, -1.2, 2.0]));
        let y = if part == 0 { g.mul(x, x).unwrap() } else { x };
        let r = g.sum(y);
        g.backward(r).unwrap();
        for (s, v) in sep.iter_mut().zip(g.grad(x).unwrap().data()) {
            *s += v;
        }
    }
    for (a, b) in joint.data().iter().zip(sep) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn every_op_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..10 {
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let c = random(&mut rng, 3, 4);
        let row = random(&mut rng, 1, 4);
        let target = random(&mut rng, 3, 4);
        let mask: Vec<f64> = (0..12).map(|_| rng.random_range(0.0..2.0)).collect();
        let weights = vec![1.0, 0.0, 0.5];
        let checks: Vec<(&str, f64)> = vec![
            (
                "matmul",
                fd_check(&[a.clone(), b.clone()], |g, i| {
                    let m = g.matmul(i[0], i[1]).unwrap();
                    let s = g.mul(m, m).unwrap();
                    g.sum(s)
                }),
            ),
            (
                "add/sub/mul",
                fd_check(&[a.clone(), c.clone()], |g, i| {
                    let s = g.add(i[0], i[1]).unwrap();
                    let d = g.sub(i[0], i[1]).unwrap();
                    let p = g.mul(s, d).unwrap();
                    g.sum(p)
                }),
            ),
            (
                "add_row",
                fd_check(&[a.clone(), row.clone()], |g, i| {
                    let s = g.add_row(i[0], i[1]).unwrap();
                    let q = g.mul(s, s).unwrap();
                    g.mean(q)
                }),
            ),
            (
                "scale/mul_const",
                fd_check(std::slice::from_ref(&a), |g, i| {
                    let s = g.scale(i[0], 0.7);
                    let m = g.mul_const(s, mask.clone()).unwrap();
                    let q = g.mul(m, m).unwrap();
                    g.sum(q)
                }),
            ),
            (
                "relu",
                fd_check(std::slice::from_ref(&a), |g, i| {
                    let r = g.relu(i[0]);
                    let q = g.mul(r, r).unwrap();
                    g.sum(q)
                }),
            ),
            (
                "gelu",
                fd_check(std::slice::from_ref(&a), |g, i| {
                    let r = g.gelu(i[0]);
                    g.sum(r)
                }),
            ),
            (
                "layer_norm",
                fd_check(&[a.clone(), row.clone(), random(&mut rng, 1, 4)], |g, i| {
                    let y = g.layer_norm(i[0], i[1], i[2]).unwrap();
                    g.mse_loss(y, &target).unwrap()
                }),
            ),
            (
                "softmax",
                fd_check(std::slice::from_ref(&a), |g, i| {
                    let y = g.softmax(i[0]);
                    let q = g.mul(y, y).unwrap();
                    g.sum(q)
                }),
            ),
            (
                "mean_pool",
                fd_check(&[random(&mut rng, 6, 3)], |g, i| {
                    let y = g.mean_pool(i[0], 3).unwrap();
                    let q = g.mul(y, y).unwrap();
                    g.sum(q)
                }),
            ),
            (
                "masked_mse",
                fd_check(&[random(&mut rng, 3, 4)], |g, i| {
                    g.masked_mse_loss(i[0], &target, weights.clone()).unwrap()
                }),
            ),
        ];
        for (name, err) in checks {
            assert!(err < 1e-4, "{name}: relative error {err}");
        }
    }
}

#[test]
fn attention_passes_finite_differences_in_every_mode() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (heads, seq, d) = (2, 4, 8);
    let bias_data: Vec<f64> = (0..heads * seq * seq).map(|_| rng.random_range(-0.5..0.5)).collect();
    let bias = Arc::new(Tensor::from_vec(heads * seq, seq, bias_data));
    for trial in 0..10 {
        let qkv = random(&mut rng, 2 * seq, 3 * d);
        let target = random(&mut rng, 2 * seq, d);
        let layout = AttentionSpec {
            heads,
            seq_len: seq,
            rope: trial % 3 == 1,
            bias: (trial % 3 == 2).then(|| bias.clone()),
        };
        let err = fd_check(&[qkv], |g, i| {
            let y = g.attention(i[0], &layout).unwrap();
            g.mse_loss(y, &target).unwrap()
        });
        assert!(err < 1e-4, "trial {trial}: {err}");
    }
}

#[test]
fn attention_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut g = Graph::new();
    let x = g.variable(random(&mut rng, 6, 12));
    let layout = AttentionSpec {
        heads: 2,
        seq_len: 3,
        rope: true,
        bias: None,
    };
    let y = g.attention(x, &layout).unwrap();
    for row in g.attention_probs(y).unwrap().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn optimizer_zero_gradient_without_decay_is_identity() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", t(1, 2, &[0.5, -1.5]));
    let cfg = AdamConfig {
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut opt = AdamW::new(cfg, &store);
    opt.step(&mut store, &[Tensor::zeros(1, 2)]).unwrap();
    assert_eq!(store.value(w).data(), &[0.5, -1.5]);
}

#[test]
fn optimizer_step_descends_on_quadratic() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::scalar(1.0));
    let mut opt = AdamW::new(AdamConfig::default(), &store);
    // f(w) = w²/2, f'(w) = w
    let grad = store.value(w).clone();
    opt.step(&mut store, &[grad]).unwrap();
    assert!(store.value(w).item().abs() < 1.0);
}

#[test]
fn optimizer_converges_on_two_dimensional_quadratic() {
    // f(w) = (w0 - 1)² + 3 (w1 + 2)², minimiser (1, -2)
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", t(1, 2, &[0.0, 0.0]));
    let cfg = AdamConfig {
        learning_rate: 0.1,
        weight_decay: 0.0,
        ..AdamConfig::default()
    };
    let mut opt = AdamW::new(cfg, &store);
    for _ in 0..200 {
        let v = store.value(w).data().to_vec();
        let g = t(1, 2, &[2.0 * (v[0] - 1.0), 6.0 * (v[1] + 2.0)]);
        opt.step(&mut store, &[g]).unwrap();
    }
    let v = store.value(w).data();
    assert!((v[0] - 1.0).abs() < 1e-3 && (v[1] + 2.0).abs() < 1e-3, "{v:?}");
}

#[test]
fn weight_decay_is_decoupled_from_gradient() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::scalar(2.0));
    let cfg = AdamConfig {
        learning_rate: 0.1,
        weight_decay: 0.5,
        ..AdamConfig::default()
    };
    let mut opt = AdamW::new(cfg, &store);
    opt.step(&mut store, &[Tensor::zeros(1, 1)]).unwrap();
    assert!((store.value(w).item() - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
}

#[test]
fn nan_gradient_aborts_step() {
    let mut store = ParamStore::<f64>::new();
    let w = store.add("w", Tensor::scalar(2.0));
    let mut opt = AdamW::new(AdamConfig::default(), &store);
    let err = opt.step(&mut store, &[Tensor::scalar(f64::NAN)]).unwrap_err();
    assert!(matches!(err, AutodiffError::NonFiniteGradient(_)));
    assert_eq!(store.value(w).item(), 2.0);
    assert_eq!(opt.steps(), 0);
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    store.add_init("w", 3, 2, Init::XavierUniform, &mut rng);
    store.add_init("b", 1, 2, Init::Zeros, &mut rng);
    let ckpt = ParamCheckpoint::from_store(&store);
    let json = serde_json::to_string(&ckpt).unwrap();
    let back: ParamCheckpoint = serde_json::from_str(&json).unwrap();
    let mut fresh = ParamStore::<f64>::new();
    fresh.add("w", Tensor::zeros(3, 2));
    fresh.add("b", Tensor::zeros(1, 2));
    back.load_into(&mut fresh).unwrap();
    assert_eq!(fresh.checksum(), store.checksum());

    let mut wrong = ParamStore::<f64>::new();
    wrong.add("w", Tensor::zeros(2, 3));
    wrong.add("b", Tensor::zeros(1, 2));
    assert!(back.load_into(&mut wrong).is_err());
}

#[test]
fn identical_seed_gives_bit_identical_training() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut store = ParamStore::<f64>::new();
        let w = store.add_init("w", 4, 3, Init::XavierUniform, &mut rng);
        let x = random(&mut rng, 5, 4);
        let y = random(&mut rng, 5, 3);
        let mut opt = AdamW::new(AdamConfig::default(), &store);
        for _ in 0..20 {
            let mut g = Graph::new();
            let xi = g.constant(x.clone());
            let wi = g.param(&store, w);
            let p = g.matmul(xi, wi).unwrap();
            let l = g.mse_loss(p, &y).unwrap();
            g.backward(l).unwrap();
            let grads = g.param_grads(&store);
            opt.step(&mut store, &grads).unwrap();
        }
        store.checksum()
    };
    assert_eq!(run(), run());
}
