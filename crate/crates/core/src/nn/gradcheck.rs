//! Central finite-difference checks for every differentiable operator.

use super::*;

/// Compare analytic gradients of `f(inputs)` with central differences.
fn check(inputs: &[Tensor], f: impl Fn(&Graph, &[Var]) -> Var) {
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&g, &vars);
    let mut grads = g.backward(loss).unwrap();
    let h = 1e-6;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.take(vars[k]).expect("gradient");
        for i in 0..t.len() {
            let eval = |delta: f64| {
                let g = Graph::new();
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| {
                        let mut t = t.clone();
                        if j == k {
                            t.data_mut()[i] += delta;
                        }
                        g.param(t)
                    })
                    .collect();
                let l = f(&g, &vars);
                g.value(l).item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (1e-6 + a.abs().max(numeric.abs()));
            assert!(
                err < 1e-4 || (a - numeric).abs() < 1e-8,
                "input {k} elem {i}: analytic {a} numeric {numeric}"
            );
        }
    }
}

fn ramp(shape: &[usize], phase: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|i| ((i as f64 + phase) * 0.731).sin()).collect(),
    )
    .unwrap()
}

/// Reduce a tensor to a scalar with non-uniform weights so every output
/// element receives a distinct upstream gradient.
fn weigh(g: &Graph, v: Var) -> Var {
    let w = ramp(&g.shape(v), 0.3);
    let w = g.constant(w);
    let p = g.mul(v, w).unwrap();
    g.sum(p)
}

#[test]
fn linear_and_relu() {
    check(
        &[ramp(&[3, 4], 0.0), ramp(&[2, 4], 1.0), ramp(&[2], 2.0)],
        |g, v| {
            let y = g.linear(v[0], v[1], v[2]).unwrap();
            let y = g.relu(y);
            weigh(g, y)
        },
    );
}

#[test]
fn conv2d_strided_padded() {
    check(
        &[ramp(&[2, 2, 5, 6], 0.0), ramp(&[3, 2, 3, 3], 0.5), ramp(&[3], 1.0)],
        |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 2, 1).unwrap();
            weigh(g, y)
        },
    );
}

#[test]
fn batch_norm_batch_and_running() {
    check(
        &[ramp(&[3, 2, 2, 3], 0.0), ramp(&[2], 1.0), ramp(&[2], 2.0)],
        |g, v| {
            let (y, _) = g
                .batch_norm(v[0], v[1], v[2], NormMode::Batch, 1e-5)
                .unwrap();
            weigh(g, y)
        },
    );
    check(
        &[ramp(&[3, 2, 2, 3], 0.0), ramp(&[2], 1.0), ramp(&[2], 2.0)],
        |g, v| {
            let (y, _) = g
                .batch_norm(
                    v[0],
                    v[1],
                    v[2],
                    NormMode::Running {
                        mean: &[0.1, -0.2],
                        var: &[0.5, 2.0],
                    },
                    1e-5,
                )
                .unwrap();
            weigh(g, y)
        },
    );
}

#[test]
fn pooling() {
    check(&[ramp(&[2, 2, 5, 5], 0.0)], |g, v| {
        let y = g.max_pool2d(v[0], 3, 2, 1).unwrap();
        let y = g.global_avg_pool(y).unwrap();
        weigh(g, y)
    });
}

#[test]
fn softmax_multilinear_and_slicing() {
    check(&[ramp(&[4, 3], 0.0), ramp(&[4, 5], 1.0)], |g, v| {
        let p = g.softmax(v[0]).unwrap();
        let h = g.multilinear(v[1], p).unwrap();
        let a = g.slice_rows(h, 1, 2).unwrap();
        let b = g.slice_rows(h, 0, 1).unwrap();
        let c = g.concat_rows(&[a, b]).unwrap();
        weigh(g, c)
    });
}

#[test]
fn cross_entropy_weighted() {
    check(&[ramp(&[4, 3], 0.0)], |g, v| {
        g.cross_entropy(v[0], &[0, 2, 1, 2], &[0.5, 1.0, 0.25, 2.0])
            .unwrap()
    });
}

#[test]
fn domain_bce_both_sides() {
    check(&[ramp(&[3, 1], 0.0), ramp(&[2, 1], 1.0)], |g, v| {
        g.domain_bce(v[0], &[0.2, 0.5, 0.9], v[1], &[1.0, 1.0], 1e-7)
            .unwrap()
    });
}

#[test]
fn coral_both_sides() {
    check(&[ramp(&[4, 3], 0.0), ramp(&[5, 3], 1.7)], |g, v| {
        g.coral(v[0], v[1]).unwrap()
    });
}

#[test]
fn mixstyle_with_detached_statistics() {
    // The statistics are constants in the backward pass, so the check runs
    // against the same function with frozen statistics.
    let x = ramp(&[3, 2, 2, 3], 0.0);
    let lambdas = [0.3, 0.8, 1.0];
    let perm = [2, 0, 1];
    let g = Graph::new();
    let v = g.param(x.clone());
    let y = g.mixstyle(v, &lambdas, &perm, 1e-6).unwrap();
    let loss = weigh(&g, y);
    let mut grads = g.backward(loss).unwrap();
    let analytic = grads.take(v).unwrap();
    let (_, sig) = instance_stats(x.data(), 6, 6, 1e-6);
    let w = ramp(&[3, 2, 2, 3], 0.3);
    for n in 0..3 {
        for c in 0..2 {
            let a = n * 2 + c;
            let b = perm[n] * 2 + c;
            let sig_mix = lambdas[n] * sig[a] + (1.0 - lambdas[n]) * sig[b];
            for k in 0..6 {
                let idx = a * 6 + k;
                let expect = w.data()[idx] * sig_mix / sig[a];
                assert!((analytic.data()[idx] - expect).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn grl_reverses_and_scales() {
    for lambda in [0.0, 0.5, 1.0, 2.0] {
        let g = Graph::new();
        let x = g.param(Tensor::new(&[1], vec![3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let r = g.grl(sq, lambda);
        assert_eq!(g.value(r).data(), g.value(sq).data());
        let l = g.sum(r);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), -lambda * 6.0);
    }
}

#[test]
fn constants_receive_no_gradient() {
    let g = Graph::new();
    let x = g.constant(ramp(&[2, 3], 0.0));
    let w = g.param(ramp(&[1, 3], 1.0));
    let b = g.param(Tensor::zeros(&[1]));
    let y = g.linear(x, w, b).unwrap();
    let l = g.sum(y);
    let grads = g.backward(l).unwrap();
    assert!(grads.get(x).is_none());
    assert!(grads.get(w).is_some());
}
