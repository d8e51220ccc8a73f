use apvt::gradcheck::{grad_check, GradCheckOptions};
use apvt::params::{ParamId, ParamStore};
use apvt::{Graph, Result, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PRIMITIVE_TOL: f64 = 1e-6;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Max relative error of `Σ f(inputs) ⊙ r` for a random projection `r`.
fn primitive_error<F>(inputs: Vec<Tensor<f64>>, seed: u64, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<ParamId> =
        inputs.into_iter().enumerate().map(|(i, t)| store.insert(format!("in{i}"), t, false).unwrap()).collect();
    let out_shape = {
        let mut g = Graph::new();
        let p = store.bind_frozen(&mut g);
        let vars: Vec<Var> = ids.iter().map(|&id| p[id]).collect();
        let y = f(&mut g, &vars).unwrap();
        g.shape(y).to_vec()
    };
    let r = random(&out_shape, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xA5));
    let report = grad_check(
        &mut store,
        |g, p| {
            let vars: Vec<Var> = ids.iter().map(|&id| p[id]).collect();
            let y = f(g, &vars)?;
            let rc = g.constant(r.clone());
            let m = g.mul(y, rc)?;
            g.sum_all(m)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    report.max_rel_err
}

fn dim() -> impl Strategy<Value = usize> {
    1usize..=5
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn elementwise_backward(a in dim(), b in dim(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (random(&[a, b], &mut rng), random(&[a, b], &mut rng));
        let bias = random(&[b], &mut rng);
        prop_assert!(primitive_error(vec![x.clone(), y.clone()], seed, |g, v| g.add(v[0], v[1])) < PRIMITIVE_TOL);
        prop_assert!(primitive_error(vec![x.clone(), y.clone()], seed, |g, v| g.sub(v[0], v[1])) < PRIMITIVE_TOL);
        prop_assert!(primitive_error(vec![x.clone(), y], seed, |g, v| g.mul(v[0], v[1])) < PRIMITIVE_TOL);
        prop_assert!(primitive_error(vec![x.clone(), bias], seed, |g, v| g.add_broadcast(v[0], v[1])) < PRIMITIVE_TOL);
        prop_assert!(primitive_error(vec![x.clone()], seed, |g, v| g.scale(v[0], -1.7)) < PRIMITIVE_TOL);
        prop_assert!(primitive_error(vec![x], seed, |g, v| g.gelu(v[0])) < PRIMITIVE_TOL);
    }

    #[test]
    fn reduction_backward(a in dim(), b in dim(), c in dim(), axis in 0usize..3, seed in any::<u64>()) {
        let x = random(&[a, b, c], &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(primitive_error(vec![x.clone()], seed, |g, v| g.sum_all(v[0])) < PRIMITIVE_TOL);
        prop_assert!(primitive_error(vec![x.clone()], seed, |g, v| g.mean_all(v[0])) < PRIMITIVE_TOL);
        prop_assert!(primitive_error(vec![x], seed, |g, v| g.mean_axis(v[0], axis)) < PRIMITIVE_TOL);
    }

    #[test]
    fn matmul_and_linear_backward(b in dim(), m in dim(), k in dim(), n in dim(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, y) = (random(&[b, m, k], &mut rng), random(&[b, k, n], &mut rng));
        let (w, bias) = (random(&[k, n], &mut rng), random(&[n], &mut rng));
        prop_assert!(primitive_error(vec![x.clone(), y], seed, |g, v| g.matmul(v[0], v[1])) < PRIMITIVE_TOL);
        prop_assert!(primitive_error(vec![x.clone(), w.clone()], seed, |g, v| g.matmul(v[0], v[1])) < PRIMITIVE_TOL);
        let e = primitive_error(vec![x, w, bias], seed, |g, v| g.linear(v[0], v[1], Some(v[2])));
        prop_assert!(e < PRIMITIVE_TOL);
    }

    #[test]
    fn layout_backward(a in dim(), b in dim(), c in dim(), seed in any::<u64>()) {
        let x = random(&[a, b, c], &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(primitive_error(vec![x.clone()], seed, |g, v| g.reshape(v[0], &[a * b, c])) < PRIMITIVE_TOL);
        prop_assert!(primitive_error(vec![x.clone()], seed, |g, v| g.permute(v[0], &[2, 0, 1])) < PRIMITIVE_TOL);
        prop_assert!(primitive_error(vec![x], seed, |g, v| g.transpose_last(v[0])) < PRIMITIVE_TOL);
    }

    #[test]
    fn space_to_depth_backward(b in 1usize..3, hp in 1usize..4, wp in 1usize..4, c in dim(), p in 1usize..4, seed in any::<u64>()) {
        let x = random(&[b, hp * p, wp * p, c], &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert!(primitive_error(vec![x], seed, |g, v| g.space_to_depth(v[0], p)) < PRIMITIVE_TOL);
    }

    #[test]
    fn resize_backward(h0 in 1usize..6, w0 in 1usize..6, h1 in 1usize..8, w1 in 1usize..8, d in dim(), seed in any::<u64>()) {
        let x = random(&[h0 * w0, d], &mut ChaCha8Rng::seed_from_u64(seed));
        let e = primitive_error(vec![x], seed, |g, v| g.resize_bilinear(v[0], (h0, w0), (h1, w1)));
        prop_assert!(e < PRIMITIVE_TOL);
    }

    #[test]
    fn normalization_backward(a in dim(), b in 2usize..=8, axis in 0usize..2, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[a, b], &mut rng);
        let (gamma, beta) = (random(&[b], &mut rng), random(&[b], &mut rng));
        prop_assert!(primitive_error(vec![x.clone()], seed, |g, v| g.softmax(v[0], axis)) < PRIMITIVE_TOL);
        let e = primitive_error(vec![x, gamma, beta], seed, |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6));
        prop_assert!(e < PRIMITIVE_TOL);
    }

    #[test]
    fn depthwise_conv_backward(b in 1usize..3, c in 1usize..4, h in dim(), w in dim(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[b, c, h, w], &mut rng);
        let (k, bias) = (random(&[c, 3, 3], &mut rng), random(&[c], &mut rng));
        let e = primitive_error(vec![x, k, bias], seed, |g, v| g.depthwise_conv2d(v[0], v[1], Some(v[2])));
        prop_assert!(e < PRIMITIVE_TOL);
    }

    #[test]
    fn cross_entropy_backward(b in dim(), k in 2usize..=8, smoothing in 0.0f64..0.3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random(&[b, k], &mut rng);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        let e = primitive_error(vec![logits], seed, |g, v| g.cross_entropy(v[0], &labels, smoothing));
        prop_assert!(e < PRIMITIVE_TOL);
    }

    #[test]
    fn softmax_rows_sum_to_one(a in dim(), b in 1usize..=8, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let x = random(&[a, b], &mut ChaCha8Rng::seed_from_u64(seed)).map(|v| v * scale);
        let mut g = Graph::<f64>::new();
        let v = g.constant(x);
        let y = g.softmax(v, 1).unwrap();
        for row in g.value(y).data().chunks(b) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(a in dim(), b in 2usize..=8, shift in -5.0f64..5.0, seed in any::<u64>()) {
        let x = random(&[a, b], &mut ChaCha8Rng::seed_from_u64(seed)).map(|v| v + shift);
        // skip near-constant rows, where eps dominates the variance
        prop_assume!(x.data().chunks(b).all(|r| {
            let m = r.iter().sum::<f64>() / b as f64;
            r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / b as f64 > 1e-2
        }));
        let mut g = Graph::<f64>::new();
        let v = g.constant(x);
        let gamma = g.constant(Tensor::ones(&[b]));
        let beta = g.constant(Tensor::zeros(&[b]));
        let y = g.layer_norm(v, gamma, beta, 1e-6).unwrap();
        for row in g.value(y).data().chunks(b) {
            let m = row.iter().sum::<f64>() / b as f64;
            let var = row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / b as f64;
            prop_assert!(m.abs() < 1e-5);
            prop_assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn depthwise_conv_is_channel_separable(c in 2usize..5, h in dim(), w in dim(), ch in 0usize..5, seed in any::<u64>()) {
        let ch = ch % c;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[c, h, w], &mut rng);
        let k = random(&[c, 3, 3], &mut rng);
        let mut x2 = x.clone();
        let plane = h * w;
        for v in &mut x2.data_mut()[ch * plane..(ch + 1) * plane] {
            *v += rng.gen_range(0.5..1.0);
        }
        let run = |input: Tensor<f64>| {
            let mut g = Graph::new();
            let xv = g.constant(input);
            let kv = g.constant(k.clone());
            let y = g.depthwise_conv2d(xv, kv, None).unwrap();
            g.value(y).clone()
        };
        let (y1, y2) = (run(x), run(x2));
        for other in (0..c).filter(|&o| o != ch) {
            prop_assert_eq!(&y1.data()[other * plane..(other + 1) * plane], &y2.data()[other * plane..(other + 1) * plane]);
        }
    }

    #[test]
    fn primitives_are_deterministic(a in dim(), b in 2usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, w) = (random(&[a, b], &mut rng), random(&[b, b], &mut rng));
        let run = || {
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let wv = g.param(w.clone());
            let h = g.linear(xv, wv, None).unwrap();
            let h = g.gelu(h).unwrap();
            let s = g.softmax(h, 1).unwrap();
            let l = g.sum_all(s).unwrap();
            let sq = g.mul(h, h).unwrap();
            let l2 = g.mean_all(sq).unwrap();
            let loss = g.add(l, l2).unwrap();
            g.backward(loss).unwrap();
            (g.value(s).clone(), g.grad(wv).unwrap().clone())
        };
        let (s1, g1) = run();
        let (s2, g2) = run();
        prop_assert!(s1.data().iter().zip(s2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert!(g1.data().iter().zip(g2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}

#[test]
fn gelu_reference_points() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::new(&[3], vec![0.0, 1.0, 10.0]).unwrap());
    let y = g.gelu(x).unwrap();
    let v = g.value(y).data();
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 0.841345).abs() < 1e-5);
    assert!((v[2] - 10.0).abs() < 1e-6);
}

#[test]
fn linear_layer_mean_square_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::<f64>::new();
    let w = store.insert("w", random(&[4, 3], &mut rng), true).unwrap();
    let b = store.insert("b", random(&[3], &mut rng), false).unwrap();
    let x = random(&[5, 4], &mut rng);
    let report = grad_check(
        &mut store,
        |g, p| {
            let xv = g.constant(x.clone());
            let y = g.linear(xv, p[w], Some(p[b]))?;
            let sq = g.mul(y, y)?;
            g.mean_all(sq)
        },
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

#[test]
fn softmax_shift_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random(&[3, 6], &mut rng);
    let run = |t: Tensor<f64>| {
        let mut g = Graph::new();
        let v = g.constant(t);
        let y = g.softmax(v, 1).unwrap();
        g.value(y).clone()
    };
    let d = run(x.clone()).max_abs_diff(&run(x.map(|v| v + 3.25)));
    assert!(d < 1e-12, "{d}");
}
