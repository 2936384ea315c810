//! Central-difference gradient checking.
//!
//! The checked function may have any output shape; it is reduced to a
//! scalar through a fixed random projection `sum(w * f(x))` so that
//! operators whose plain sum is constant (softmax, layernorm) still get a
//! meaningful check.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{AutodiffError, Result};
use crate::graph::{Graph, NodeId};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-6;

/// Points whose ReLU inputs come closer than this to zero are resampled.
pub const KINK_TOLERANCE: f64 = 1e-5;

const MAX_RESAMPLES: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// max over entries of `|analytic - numeric| / max(1, |numeric|)`.
    pub max_rel_error: f64,
    /// How many times the point was jittered away from a kink.
    pub resamples: usize,
}

/// Compares analytic and central-difference gradients of the graph built
/// by `build` at `point`, over every bound input.
pub fn grad_check_fn<F>(build: F, point: &ParamStore, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> NodeId,
{
    let mut g = Graph::new();
    let out = build(&mut g);
    let shape = g.forward(out, point)?.shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let proj = Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let w = g.constant(proj);
    let weighted = g.mul(out, w);
    let root = g.sum(weighted);

    let mut point = point.clone();
    let mut resamples = 0;
    loop {
        g.forward(root, &point)?;
        if g.kink_margin() >= KINK_TOLERANCE {
            break;
        }
        if resamples == MAX_RESAMPLES {
            return Err(AutodiffError::State(
                "could not move the check point away from a kink".into(),
            ));
        }
        resamples += 1;
        for (_, t) in point.iter_mut() {
            for v in t.values_mut() {
                *v += rng.gen_range(-1e-2..1e-2);
            }
        }
    }
    let analytic = g.backward(root)?;

    let mut worst: f64 = 0.0;
    let names: Vec<String> = point.names().cloned().collect();
    for name in names {
        let n = point.get(&name).expect("bound").numel();
        for i in 0..n {
            let orig = point.get(&name).expect("bound").values()[i];
            point.get_mut(&name).expect("bound").values_mut()[i] = orig + STEP;
            let up = g.forward(root, &point)?.item();
            point.get_mut(&name).expect("bound").values_mut()[i] = orig - STEP;
            let down = g.forward(root, &point)?.item();
            point.get_mut(&name).expect("bound").values_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.get(&name).expect("gradient").values()[i];
            worst = worst.max((a - numeric).abs() / numeric.abs().max(1.0));
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        resamples,
    })
}

/// Names accepted by [`grad_check`].
pub const CHECKED_OPERATORS: &[&str] = &[
    "matmul",
    "batch_matmul",
    "transpose",
    "add",
    "subtract",
    "mul",
    "add_row_bias",
    "scale",
    "concat",
    "slice",
    "reshape",
    "mean",
    "sum",
    "sigmoid",
    "relu",
    "gelu",
    "softplus",
    "log",
    "softmax",
    "layernorm",
    "dropout",
    "gather_rows",
    "scatter_sum",
    "cross_entropy",
];

/// Gradient check of a single named operator at `point`.
///
/// Binary operators get a second differentiable operand derived
/// deterministically from `point` (shape-compatible). Returns the maximum
/// relative error; the caller decides what tolerance to assert.
pub fn grad_check(op: &str, point: &Tensor) -> Result<f64> {
    let seed = point
        .values()
        .iter()
        .fold(0xcbf2_9ce4_8422_2325_u64, |h, v| {
            (h ^ v.to_bits()).wrapping_mul(0x1000_0000_01b3)
        });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rand_tensor = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect())
    };

    let shape = point.shape().to_vec();
    let rows = if shape.len() >= 2 { shape[0] } else { 1 };
    let last = *shape.last().expect("rank >= 1");
    let mut bind = ParamStore::new();
    bind.insert("x", point.clone());

    let needs_rank2 = |what: &'static str| -> Result<()> {
        if shape.len() == 2 {
            Ok(())
        } else {
            Err(AutodiffError::argument("grad_check", format!("{what} needs a rank-2 point")))
        }
    };

    let report = match op {
        "matmul" => {
            needs_rank2("matmul")?;
            bind.insert("y", rand_tensor(&[last, rows])?);
            grad_check_fn(|g| { let (x, y) = (g.input("x"), g.input("y")); g.matmul(x, y) }, &bind, seed)?
        }
        "batch_matmul" => {
            let &[b, m, k] = shape.as_slice() else {
                return Err(AutodiffError::argument("grad_check", "batch_matmul needs a rank-3 point"));
            };
            bind.insert("y", rand_tensor(&[b, k, m])?);
            bind.insert("z", rand_tensor(&[b, m, k])?);
            grad_check_fn(
                |g| {
                    let (x, y, z) = (g.input("x"), g.input("y"), g.input("z"));
                    let xy = g.batch_matmul(x, y, false);
                    g.batch_matmul(xy, z, false)
                },
                &bind,
                seed,
            )?
        }
        "transpose" => {
            needs_rank2("transpose")?;
            grad_check_fn(|g| { let x = g.input("x"); g.transpose(x) }, &bind, seed)?
        }
        "add" | "subtract" | "mul" => {
            bind.insert("y", rand_tensor(&shape)?);
            bind.insert("s", rand_tensor(&[1])?);
            let op = op.to_string();
            grad_check_fn(
                |g| {
                    let (x, y, s) = (g.input("x"), g.input("y"), g.input("s"));
                    let (a, b) = match op.as_str() {
                        "add" => (g.add(x, y), g.add(x, s)),
                        "subtract" => (g.sub(x, y), g.sub(x, s)),
                        _ => (g.mul(x, y), g.mul(x, s)),
                    };
                    g.concat(&[a, b], 0)
                },
                &bind,
                seed,
            )?
        }
        "add_row_bias" => {
            bind.insert("b", rand_tensor(&[last])?);
            grad_check_fn(|g| { let (x, b) = (g.input("x"), g.input("b")); g.add_row_bias(x, b) }, &bind, seed)?
        }
        "scale" => grad_check_fn(|g| { let x = g.input("x"); g.scale(x, -1.7) }, &bind, seed)?,
        "concat" => {
            bind.insert("y", rand_tensor(&shape)?);
            let axes = shape.len();
            grad_check_fn(
                |g| {
                    let (x, y) = (g.input("x"), g.input("y"));
                    let parts: Vec<NodeId> = (0..axes).map(|a| g.concat(&[x, y, x], a)).collect();
                    let flat: Vec<NodeId> = parts
                        .into_iter()
                        .map(|p| {
                            let n = 3 * x_numel(&shape);
                            g.reshape(p, &[n])
                        })
                        .collect();
                    g.concat(&flat, 0)
                },
                &bind,
                seed,
            )?
        }
        "slice" => {
            if last < 2 {
                return Err(AutodiffError::argument("grad_check", "slice needs last axis >= 2"));
            }
            let axis = shape.len() - 1;
            grad_check_fn(|g| { let x = g.input("x"); g.slice(x, axis, 1, last - 1) }, &bind, seed)?
        }
        "reshape" => {
            let n = point.numel();
            grad_check_fn(|g| { let x = g.input("x"); g.reshape(x, &[n, 1]) }, &bind, seed)?
        }
        "mean" => {
            let axes = shape.len();
            grad_check_fn(
                |g| {
                    let x = g.input("x");
                    let ms: Vec<NodeId> = (0..axes)
                        .map(|a| {
                            let m = g.mean(x, a);
                            g.sum(m)
                        })
                        .collect();
                    g.concat(&ms, 0)
                },
                &bind,
                seed,
            )?
        }
        "sum" => grad_check_fn(|g| { let x = g.input("x"); g.sum(x) }, &bind, seed)?,
        "sigmoid" => grad_check_fn(|g| { let x = g.input("x"); g.sigmoid(x) }, &bind, seed)?,
        "relu" => grad_check_fn(|g| { let x = g.input("x"); g.relu(x) }, &bind, seed)?,
        "gelu" => grad_check_fn(|g| { let x = g.input("x"); g.gelu(x) }, &bind, seed)?,
        "softplus" => grad_check_fn(|g| { let x = g.input("x"); g.softplus(x) }, &bind, seed)?,
        "log" => grad_check_fn(
            |g| {
                let x = g.input("x");
                let sq = g.mul(x, x);
                let half = g.constant(Tensor::scalar(0.5));
                let pos = g.add(sq, half);
                g.log(pos)
            },
            &bind,
            seed,
        )?,
        "softmax" => grad_check_fn(|g| { let x = g.input("x"); g.softmax(x) }, &bind, seed)?,
        "layernorm" => {
            bind.insert("gain", rand_tensor(&[last])?);
            bind.insert("bias", rand_tensor(&[last])?);
            grad_check_fn(
                |g| {
                    let (x, gn, b) = (g.input("x"), g.input("gain"), g.input("bias"));
                    g.layer_norm(x, Some((gn, b)), 1e-5)
                },
                &bind,
                seed,
            )?
        }
        "dropout" => grad_check_fn(|g| { let x = g.input("x"); g.dropout(x, 0.5, 11, true) }, &bind, seed)?,
        "gather_rows" => {
            needs_rank2("gather_rows")?;
            let index: Arc<[usize]> = (0..2 * rows).map(|i| (i * 7 + 3) % rows).collect();
            grad_check_fn(|g| { let x = g.input("x"); g.gather_rows(x, index.clone()) }, &bind, seed)?
        }
        "scatter_sum" => {
            needs_rank2("scatter_sum")?;
            let buckets = rows / 2 + 1;
            let index: Arc<[usize]> = (0..rows).map(|i| (i * 5 + 1) % buckets).collect();
            grad_check_fn(|g| { let x = g.input("x"); g.scatter_sum(x, index.clone(), buckets) }, &bind, seed)?
        }
        "cross_entropy" => {
            needs_rank2("cross_entropy")?;
            let mut t = rand_tensor(&shape)?;
            for row in t.values_mut().chunks_mut(last) {
                crate::graph::softmax_in_place(row);
            }
            let weights: Vec<f64> = (0..rows).map(|i| 1.0 + i as f64).collect();
            grad_check_fn(
                |g| { let x = g.input("x"); g.cross_entropy(x, t.clone(), weights.clone()) },
                &bind,
                seed,
            )?
        }
        other => {
            return Err(AutodiffError::argument(
                "grad_check",
                format!("unknown operator `{other}`"),
            ))
        }
    };
    Ok(report.max_rel_error)
}

fn x_numel(shape: &[usize]) -> usize {
    shape.iter().product()
}
