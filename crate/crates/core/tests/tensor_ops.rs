use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use residual_transformer::gradcheck::{finite_diff_check, relative_error};
use residual_transformer::{Error, Graph, Tensor, Var};

fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.get(&[i, p]) * b.get(&[p, j]);
            }
        }
    }
    Tensor::new(&[m, n], out).unwrap()
}

#[test]
fn matmul_hand_examples() {
    let eye = Tensor::<f64>::eye(2);
    let m = Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(eye.matmul(&m).unwrap(), m);
    let row = Tensor::<f64>::from_f64(&[1, 2], &[1.0, 2.0]).unwrap();
    let col = Tensor::<f64>::from_f64(&[2, 1], &[3.0, 4.0]).unwrap();
    assert_eq!(row.matmul(&col).unwrap().data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop_on_small_dims() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for m in 1..=8 {
        for k in 1..=8 {
            for n in [1, 3, 8] {
                let a = rand_t(&[m, k], &mut rng, 2.0);
                let b = rand_t(&[k, n], &mut rng, 2.0);
                let got = a.matmul(&b).unwrap();
                let want = triple_loop(&a, &b);
                for (x, y) in got.data().iter().zip(want.data()) {
                    assert!((x - y).abs() <= 1e-12 * y.abs().max(1.0), "{m}x{k}x{n}: {x} vs {y}");
                }
            }
        }
    }
}

#[test]
fn matmul_shape_mismatch_reports_both_shapes() {
    let a = Tensor::<f64>::zeros(&[2, 3]);
    let b = Tensor::<f64>::zeros(&[4, 5]);
    let err = a.matmul(&b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::ShapeMismatch { .. }));
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[2, 2], &[0.0, 0.0, 1000.0, 0.0]).unwrap());
    let p = g.softmax_rows(x);
    let v = g.value(p).data();
    assert_eq!(&v[..2], &[0.5, 0.5]);
    assert_eq!(v[2], 1.0);
    assert!(v[3] >= 0.0 && v[3] < 1e-300);
}

#[test]
fn softmax_rows_sum_to_one_at_large_magnitude() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for scale in [1.0, 10.0, 1e2, 1e3, 1e4] {
        let mut g = Graph::<f64>::new();
        let x = g.constant(rand_t(&[3, 7], &mut rng, scale));
        let p = g.softmax_rows(x);
        for row in g.value(p).data().chunks(7) {
            assert!(row.iter().all(|&v| v >= 0.0));
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() <= 1e-9, "scale {scale}: {s}");
        }
    }
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::from_f64(&[1, 4], &[3.0; 4]).unwrap());
    let one = g.constant(Tensor::full(&[4], 1.0));
    let zero = g.constant(Tensor::zeros(&[4]));
    let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0; 4]);

    let x = g.constant(Tensor::from_f64(&[2, 4], &[1.0, -2.0, 0.5, 7.0, 3.0, 3.0, 1.0, 0.0]).unwrap());
    let bias = g.constant(Tensor::from_f64(&[4], &[0.1, 0.2, 0.3, 0.4]).unwrap());
    let y = g.layer_norm(x, zero, bias, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3, 0.4, 0.1, 0.2, 0.3, 0.4]);
}

#[test]
fn layer_norm_normalizes_random_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut g = Graph::<f64>::new();
    let x = g.constant(rand_t(&[5, 16], &mut rng, 4.0));
    let one = g.constant(Tensor::full(&[16], 1.0));
    let zero = g.constant(Tensor::zeros(&[16]));
    let y = g.layer_norm(x, one, zero, 1e-12).unwrap();
    for row in g.value(y).data().chunks(16) {
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() <= 1e-10, "{mean}");
        assert!((var - 1.0).abs() <= 1e-6, "{var}");
    }
}

fn check(mut params: Vec<(String, Tensor<f64>)>, f: impl FnMut(&mut Graph<f64>, &[Var]) -> residual_transformer::Result<Var>) -> f64 {
    finite_diff_check(&mut params, 1e-4, f).unwrap().max_rel_error()
}

fn named(ts: Vec<Tensor<f64>>) -> Vec<(String, Tensor<f64>)> {
    ts.into_iter().enumerate().map(|(i, t)| (format!("p{i}"), t)).collect()
}

/// Projects an arbitrary node onto a scalar with fixed random weights.
fn probe(g: &mut Graph<f64>, y: Var, seed: u64) -> residual_transformer::Result<Var> {
    let shape = g.shape(y).to_vec();
    let w = rand_t(&shape, &mut ChaCha8Rng::seed_from_u64(seed), 1.0);
    let w = g.constant(w);
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

#[test]
fn every_primitive_passes_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_t(&[3, 4], &mut rng, 1.0);
    let b = rand_t(&[4, 2], &mut rng, 1.0);
    let c = rand_t(&[3, 4], &mut rng, 1.0);
    let row = rand_t(&[4], &mut rng, 1.0);
    let sq = rand_t(&[4, 4], &mut rng, 1.0);
    // keep relu inputs away from the kink
    let away = a.map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });

    let mut results: Vec<(&str, f64)> = Vec::new();
    results.push(("matmul", check(named(vec![a.clone(), b.clone()]), |g, v| {
        let y = g.matmul(v[0], v[1])?;
        probe(g, y, 1)
    })));
    results.push(("matmul_nt", check(named(vec![a.clone(), c.clone()]), |g, v| {
        let y = g.matmul_nt(v[0], v[1])?;
        probe(g, y, 2)
    })));
    results.push(("matmul_tn", check(named(vec![a.clone(), c.clone()]), |g, v| {
        let y = g.matmul_t(v[0], true, v[1], false)?;
        probe(g, y, 3)
    })));
    results.push(("add", check(named(vec![a.clone(), c.clone()]), |g, v| {
        let y = g.add(v[0], v[1])?;
        probe(g, y, 4)
    })));
    results.push(("add_row", check(named(vec![a.clone(), row.clone()]), |g, v| {
        let y = g.add_row(v[0], v[1])?;
        probe(g, y, 5)
    })));
    results.push(("scale", check(named(vec![a.clone()]), |g, v| {
        let y = g.scale(v[0], -1.7);
        probe(g, y, 6)
    })));
    results.push(("mul", check(named(vec![a.clone(), c.clone()]), |g, v| {
        let y = g.mul(v[0], v[1])?;
        probe(g, y, 7)
    })));
    results.push(("transpose", check(named(vec![a.clone()]), |g, v| {
        let y = g.transpose(v[0])?;
        probe(g, y, 8)
    })));
    results.push(("relu", check(named(vec![away]), |g, v| {
        let y = g.relu(v[0]);
        probe(g, y, 9)
    })));
    results.push(("gelu", check(named(vec![a.clone()]), |g, v| {
        let y = g.gelu(v[0]);
        probe(g, y, 10)
    })));
    results.push(("softmax_rows", check(named(vec![a.clone()]), |g, v| {
        let y = g.softmax_rows(v[0]);
        probe(g, y, 11)
    })));
    let allowed: Arc<[bool]> = (0..16).map(|i| i % 4 <= i / 4).collect::<Vec<_>>().into();
    results.push(("mask_fill+softmax", check(named(vec![sq.clone()]), |g, v| {
        let m = g.mask_fill(v[0], allowed.clone())?;
        let y = g.softmax_rows(m);
        probe(g, y, 12)
    })));
    results.push(("layer_norm", check(named(vec![a.clone(), row.clone(), rand_t(&[4], &mut rng, 1.0)]), |g, v| {
        let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
        probe(g, y, 13)
    })));
    results.push(("embedding", check(named(vec![a.clone()]), |g, v| {
        let y = g.embedding(v[0], &[2, 0, 2, 1, 0])?;
        probe(g, y, 14)
    })));
    results.push(("cross_entropy", check(named(vec![a.clone()]), |g, v| g.cross_entropy(v[0], &[3, 0, 1]))));
    results.push(("slice", check(named(vec![a.clone()]), |g, v| {
        let y = g.slice(v[0], 1, 2, 1, 3)?;
        probe(g, y, 15)
    })));
    results.push(("concat_cols", check(named(vec![a.clone(), c.clone()]), |g, v| {
        let y = g.concat_cols(&[v[0], v[1]])?;
        probe(g, y, 16)
    })));
    results.push(("concat_rows", check(named(vec![a.clone(), c.clone()]), |g, v| {
        let y = g.concat_rows(&[v[0], v[1]])?;
        probe(g, y, 17)
    })));
    results.push(("diag_embed", check(named(vec![a.clone(), rand_t(&[4], &mut rng, 1.0)]), |g, v| {
        let y = g.diag_embed(v[0], v[1], 6)?;
        probe(g, y, 18)
    })));

    for (op, err) in &results {
        assert!(*err < 1e-4, "{op}: {err:e}");
    }
}

#[test]
fn softmax_cross_entropy_gradient_is_tight() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = rand_t(&[6, 9], &mut rng, 3.0);
    let err = check(named(vec![logits]), |g, v| g.cross_entropy(v[0], &[0, 8, 3, 3, 5, 1]));
    assert!(err < 1e-6, "{err:e}");
}

#[test]
fn sum_of_product_gradient_is_outer_product() {
    let w = Tensor::<f64>::from_f64(&[2, 3], &[0.5, -1.0, 2.0, 0.0, 1.5, -0.5]).unwrap();
    let x = Tensor::<f64>::from_f64(&[3, 1], &[1.0, 2.0, -3.0]).unwrap();
    let mut g = Graph::new();
    let wv = g.leaf(w.clone(), true);
    let xv = g.constant(x);
    let y = g.matmul(wv, xv).unwrap();
    let loss = g.sum(y);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(wv).unwrap().data(), &[1.0, 2.0, -3.0, 1.0, 2.0, -3.0]);

    let err = finite_diff_check(&mut [("w".to_string(), w)], 1e-5, |g, v| {
        let x = g.constant(Tensor::from_f64(&[3, 1], &[1.0, 2.0, -3.0]).unwrap());
        let y = g.matmul(v[0], x)?;
        Ok(g.sum(y))
    })
    .unwrap();
    assert!(err.max_rel_error() < 1e-9);
}

#[test]
fn unreachable_leaf_keeps_zero_gradient() {
    let mut g = Graph::<f64>::new();
    let used = g.leaf(Tensor::full(&[2], 3.0), true);
    let unused = g.leaf(Tensor::full(&[2], 1.0), true);
    let loss = g.sum(used);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(unused).unwrap().data(), &[0.0, 0.0]);
}

#[test]
fn second_backward_doubles_gradients_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut g = Graph::<f64>::new();
    let a = g.leaf(rand_t(&[3, 4], &mut rng, 1.0), true);
    let b = g.leaf(rand_t(&[4, 2], &mut rng, 1.0), true);
    let y = g.matmul(a, b).unwrap();
    let y = g.softmax_rows(y);
    let loss = g.cross_entropy(y, &[0, 1, 1]).unwrap();
    g.backward(loss).unwrap();
    let once = (g.grad(a).unwrap().clone(), g.grad(b).unwrap().clone());
    g.backward(loss).unwrap();
    for (v, first) in [(a, once.0), (b, once.1)] {
        let doubled = first.map(|x| x * 2.0);
        assert_eq!(g.grad(v).unwrap(), &doubled);
    }
    g.zero_grad();
    assert!(g.grad(a).unwrap().data().iter().all(|&x| x == 0.0));
}

#[test]
fn non_scalar_loss_rejected() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::zeros(&[2, 2]), true);
    assert!(matches!(g.backward(a), Err(Error::NonScalarLoss(_))));
}

#[test]
fn relative_error_definition() {
    assert_eq!(relative_error(1.0, 1.0), 0.0);
    assert!((relative_error(1.0, 3.0) - 0.5).abs() < 1e-12);
    assert!(relative_error(0.0, 0.0) == 0.0);
}

#[test]
fn f32_and_f64_agree_on_matmul() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = rand_t(&[5, 6], &mut rng, 1.0);
    let b = rand_t(&[6, 4], &mut rng, 1.0);
    let wide = a.matmul(&b).unwrap();
    let narrow = a.cast::<f32>().matmul(&b.cast::<f32>()).unwrap().cast::<f64>();
    assert!(wide.max_abs_diff(&narrow) < 1e-5);
}
