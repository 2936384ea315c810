use connex_autodiff::gradcheck::CHECKED_OPERATORS;
use connex_autodiff::{grad_check, Graph, ParamStore, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

fn point_shape(op: &str, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match op {
        "batch_matmul" => vec![2, rng.gen_range(1..4), rng.gen_range(1..4)],
        "softmax" | "layernorm" if rng.gen_bool(0.5) => vec![rng.gen_range(2..9)],
        "slice" => vec![rng.gen_range(1..4), rng.gen_range(2..5)],
        _ => vec![rng.gen_range(1..5), rng.gen_range(1..5)],
    }
}

#[test]
fn every_operator_passes_grad_check_at_twenty_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for op in CHECKED_OPERATORS {
        let mut worst: f64 = 0.0;
        for _ in 0..20 {
            let shape = point_shape(op, &mut rng);
            let point = random_tensor(&mut rng, &shape);
            worst = worst.max(grad_check(op, &point).unwrap());
        }
        assert!(worst < 1e-4, "{op}: max relative error {worst:e}");
    }
}

#[test]
fn named_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v4 = random_tensor(&mut rng, &[4]);
    assert!(grad_check("softmax", &v4).unwrap() < 1e-4);
    let m3 = random_tensor(&mut rng, &[3, 3]);
    assert!(grad_check("matmul", &m3).unwrap() < 1e-4);
    let v8 = random_tensor(&mut rng, &[8]);
    assert!(grad_check("layernorm", &v8).unwrap() < 1e-4);
}

#[test]
fn unknown_operator_is_rejected() {
    assert!(grad_check("conv2d", &Tensor::ones(&[2, 2])).is_err());
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut bind = ParamStore::new();
    bind.insert("x", random_tensor(&mut rng, &[5, 6]));
    bind.insert("w", random_tensor(&mut rng, &[6, 4]));
    let run = |bind: &ParamStore| {
        let mut g = Graph::new();
        let x = g.input("x");
        let w = g.input("w");
        let h = g.matmul(x, w);
        let h = g.gelu(h);
        let h = g.dropout(h, 0.3, 42, true);
        let h = g.layer_norm(h, None, 1e-5);
        let z = g.softmax(h);
        let l = g.cross_entropy_labels(z, &[0, 1, 2, 3, 0], 4);
        g.forward(l, bind).unwrap();
        let grads = g.backward(l).unwrap();
        grads
            .iter()
            .flat_map(|(_, t)| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<u64>>()
    };
    assert_eq!(run(&bind), run(&bind));
}

proptest! {
    #[test]
    fn softmax_rows_are_positive_and_sum_to_one(
        rows in 1usize..6,
        vals in proptest::collection::vec(-30.0f64..30.0, 36),
    ) {
        let cols = 6;
        let t = Tensor::new(vec![rows, cols], vals[..rows * cols].to_vec()).unwrap();
        let mut g = Graph::new();
        let x = g.constant(t);
        let y = g.softmax(x);
        let out = g.forward(y, &ParamStore::new()).unwrap();
        for r in 0..rows {
            let row = out.row(r);
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layernorm_rows_have_zero_mean_unit_variance(
        vals in proptest::collection::vec(-10.0f64..10.0, 16),
        scale in 0.5f64..20.0,
    ) {
        let t = Tensor::new(vec![2, 8], vals.iter().map(|v| v * scale).collect()).unwrap();
        let spread = t.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        prop_assume!(spread > 1.0);
        let mut g = Graph::new();
        let x = g.constant(t.clone());
        let y = g.layer_norm(x, None, 1e-5);
        let out = g.forward(y, &ParamStore::new()).unwrap();
        for r in 0..2 {
            let row = out.row(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            // exact variance is var_x / (var_x + eps)
            let xr = t.row(r);
            let xm = xr.iter().sum::<f64>() / 8.0;
            let xv = xr.iter().map(|v| (v - xm) * (v - xm)).sum::<f64>() / 8.0;
            prop_assume!(xv > 1e-1);
            prop_assert!(mean.abs() < 1e-10);
            prop_assert!((var - 1.0).abs() < 1e-6 + 1e-5 / xv);
        }
    }
}
