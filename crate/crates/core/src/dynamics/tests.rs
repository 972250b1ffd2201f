use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const A: [f64; 4] = [-0.1, 2.0, -2.0, -0.1];

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * (2.0 * rng.random::<f64>() - 1.0)).collect()
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
        / scale
}

fn layers() -> Vec<DynamicsLayer> {
    vec![
        DynamicsLayer::linear(3, true),
        DynamicsLayer::cubic_mlp(2, 7),
        DynamicsLayer::concatsquash_stack(ConcatsquashShape {
            dim: 2,
            hidden: 5,
            hidden_layers: 2,
            flow_steps: 1,
            gate: Activation::Tanh,
            activation: Activation::Tanh,
        })
        .unwrap(),
        DynamicsLayer::concatsquash_stack(ConcatsquashShape {
            dim: 3,
            hidden: 4,
            hidden_layers: 1,
            flow_steps: 2,
            gate: Activation::Sigmoid,
            activation: Activation::Softplus,
        })
        .unwrap(),
    ]
}

/// Central-difference oracle for `(∇_y ℓ)ᵀ z` and `(∇_θ ℓ)ᵀ z`.
fn fd_vjps(
    layer: &DynamicsLayer,
    theta: &[f64],
    y: &[f64],
    t: f64,
    z: &[f64],
    step: f64,
) -> (Vec<f64>, Vec<f64>) {
    let dot = |v: Vec<f64>| -> f64 { v.iter().zip(z).map(|(a, b)| a * b).sum() };
    let mut ys = Vec::new();
    for i in 0..y.len() {
        let mut p = y.to_vec();
        let mut m = y.to_vec();
        p[i] += step;
        m[i] -= step;
        let fp = dot(layer.forward(theta, &p, t).unwrap());
        let fm = dot(layer.forward(theta, &m, t).unwrap());
        ys.push((fp - fm) / (2.0 * step));
    }
    let mut ps = Vec::new();
    for i in 0..theta.len() {
        let mut p = theta.to_vec();
        let mut m = theta.to_vec();
        p[i] += step;
        m[i] -= step;
        let fp = dot(layer.forward(&p, y, t).unwrap());
        let fm = dot(layer.forward(&m, y, t).unwrap());
        ps.push((fp - fm) / (2.0 * step));
    }
    (ys, ps)
}

#[test]
fn linear_forward_by_hand() {
    let layer = DynamicsLayer::linear(2, false);
    let out = layer.forward(&A, &[2.0, 0.0], 0.0).unwrap();
    assert_eq!(out, vec![-0.2, -4.0]);
}

#[test]
fn zero_parameters_give_zero_field() {
    for layer in layers() {
        let theta = vec![0.0; layer.n_params()];
        let y = vec![0.3; layer.dim()];
        let out = layer.forward(&theta, &y, 0.4).unwrap();
        assert!(out.iter().all(|&v| v == 0.0), "{:?}", layer.spec());
        let bar = layer.vjp_state(&theta, &y, 0.4, &vec![1.0; layer.dim()]).unwrap();
        assert!(bar.iter().all(|&v| v == 0.0));
        assert_eq!(layer.exact_trace(&theta, &y, 0.4).unwrap().value, 0.0);
    }
}

#[test]
fn cubic_mlp_with_identity_maps_is_tanh_of_cube() {
    let layer = DynamicsLayer::cubic_mlp(2, 2);
    // D1 = I, b1 = 0, D2 = I, b2 = 0
    let theta = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
    let out = layer.forward(&theta, &[1.0, -1.0], 0.0).unwrap();
    assert!((out[0] - 0.7615941559).abs() < 1e-10);
    assert!((out[1] + 0.7615941559).abs() < 1e-10);
}

#[test]
fn linear_vjp_state_is_transpose_product() {
    let layer = DynamicsLayer::linear(2, false);
    let bar = layer.vjp_state(&A, &[0.5, 0.1], 0.0, &[1.0, 0.0]).unwrap();
    assert_eq!(bar, vec![-0.1, 2.0]);
    let zero = layer.vjp_state(&A, &[0.5, 0.1], 0.0, &[0.0, 0.0]).unwrap();
    assert_eq!(zero, vec![0.0, 0.0]);
}

#[test]
fn scalar_bilinear_vjp_params() {
    let layer = DynamicsLayer::linear(1, false);
    let g = layer.vjp_params(&[0.7], &[3.0], 0.0, &[2.0]).unwrap();
    assert_eq!(g, vec![6.0]);
    let g0 = layer.vjp_params(&[0.7], &[3.0], 0.0, &[0.0]).unwrap();
    assert_eq!(g0, vec![0.0]);
}

#[test]
fn dimension_mismatch_is_reported() {
    let layer = DynamicsLayer::cubic_mlp(2, 3);
    let theta = vec![0.0; layer.n_params()];
    match layer.forward(&theta, &[1.0, 2.0, 3.0], 0.0) {
        Err(Error::Dimension { what, expected, actual }) => {
            assert_eq!(what, "state vector");
            assert_eq!((expected, actual), (2, 3));
        }
        other => panic!("unexpected {other:?}"),
    }
    assert!(layer.forward(&theta[1..], &[1.0, 2.0], 0.0).is_err());
    assert!(layer.vjp_state(&theta, &[1.0, 2.0], 0.0, &[1.0]).is_err());
}

#[test]
fn traces_of_simple_fields() {
    let layer = DynamicsLayer::linear(2, false);
    let tr = layer.exact_trace(&A, &[1.0, 1.0], 0.0).unwrap();
    assert!((tr.value + 0.2).abs() < 1e-15);
    assert_eq!(tr.mode, TraceMode::Exact);
    let identity = [1.0, 0.0, 0.0, 1.0];
    assert_eq!(layer.exact_trace(&identity, &[3.0, -1.0], 0.0).unwrap().value, 2.0);
    let eps = [0.3, -1.2];
    let h = layer.hutchinson_trace(&identity, &[3.0, -1.0], 0.0, &eps).unwrap();
    assert!((h.value - (0.09 + 1.44)).abs() < 1e-15);
    // basis probes pick out diagonal entries
    assert_eq!(layer.hutchinson_trace(&A, &[0.0, 0.0], 0.0, &[0.0, 1.0]).unwrap().value, -0.1);
}

#[test]
fn trace_guard_points_to_hutchinson() {
    let layer = DynamicsLayer::linear(5, false);
    let theta = vec![0.0; 25];
    let err = layer.exact_trace_guarded(&theta, &[0.0; 5], 0.0, 4).unwrap_err();
    assert!(err.to_string().contains("Hutchinson"));
    assert!(layer.exact_trace_guarded(&theta, &[0.0; 5], 0.0, 5).is_ok());
}

#[test]
fn hutchinson_mean_converges_to_linear_trace() {
    use rand_distr::{Distribution, StandardNormal};
    let layer = DynamicsLayer::linear(2, false);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 100_000;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let eps: [f64; 2] = [StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)];
        // quadratic form of A by hand
        let v = eps[0] * (A[0] * eps[0] + A[1] * eps[1]) + eps[1] * (A[2] * eps[0] + A[3] * eps[1]);
        let est = layer.hutchinson_trace(&A, &[0.0, 0.0], 0.0, &eps).unwrap().value;
        assert!((est - v).abs() < 1e-14);
        sum += est;
        sum_sq += est * est;
    }
    let mean = sum / n as f64;
    let var = sum_sq / n as f64 - mean * mean;
    let stderr = (var / n as f64).sqrt();
    assert!((mean + 0.2).abs() < 3.0 * stderr, "mean {mean}, stderr {stderr}");
}

#[test]
fn squash_with_zero_time_maps_reduces_to_gated_linear() {
    // one concatsquash block, identity activation between layers
    let shape = ConcatsquashShape {
        dim: 2,
        hidden: 3,
        hidden_layers: 1,
        flow_steps: 1,
        gate: Activation::Sigmoid,
        activation: Activation::Identity,
    };
    let layer = DynamicsLayer::concatsquash_stack(shape).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut theta = random_vec(&mut rng, layer.n_params(), 1.0);
    let maps = layer.affine_maps();
    // zero D1 (weight and bias) and D0 of both concatsquash layers
    for m in maps.iter().filter(|m| m.fan_in == 1) {
        for j in 0..m.fan_out {
            theta[m.weight_offset + j] = 0.0;
            if let Some(b) = m.bias_offset {
                theta[b + j] = 0.0;
            }
        }
    }
    let y = [0.4, -1.1];
    let t = 0.37;
    let apply = |m: &AffineMap, x: &[f64]| -> Vec<f64> {
        (0..m.fan_out)
            .map(|i| {
                let mut acc = theta[m.bias_offset.unwrap() + i];
                for j in 0..m.fan_in {
                    acc += theta[m.weight_offset + i * m.fan_in + j] * x[j];
                }
                acc
            })
            .collect()
    };
    let h: Vec<f64> = apply(&maps[0], &y).iter().map(|v| 0.5 * v).collect();
    let expect: Vec<f64> = apply(&maps[3], &h).iter().map(|v| 0.5 * v).collect();
    let out = layer.forward(&theta, &y, t).unwrap();
    assert!(max_rel(&out, &expect) < 1e-14);

    // with the tanh gate, σ(0) = 0 and the layer collapses to D0 t = 0
    let tanh_layer = DynamicsLayer::concatsquash_stack(ConcatsquashShape {
        gate: Activation::Tanh,
        ..shape
    })
    .unwrap();
    let out = tanh_layer.forward(&theta, &y, t).unwrap();
    assert!(out.iter().all(|&v| v == 0.0));
}

/// Direct implementation of one concatsquash layer, independent of the op chain.
fn concatsquash(
    theta: &[f64],
    offset: usize,
    n_in: usize,
    n_out: usize,
    x: &[f64],
    t: f64,
) -> Vec<f64> {
    let w2 = &theta[offset..offset + n_in * n_out];
    let rest = &theta[offset + n_in * n_out..];
    (0..n_out)
        .map(|i| {
            let mut d2 = rest[i];
            for j in 0..n_in {
                d2 += w2[i * n_in + j] * x[j];
            }
            let gate = (rest[n_out + i] * t + rest[2 * n_out + i]).tanh();
            d2 * gate + rest[3 * n_out + i] * t
        })
        .collect()
}

#[test]
fn stack_equals_composition_of_three_layers() {
    let (dim, hid) = (2, 4);
    let layer = DynamicsLayer::concatsquash_stack(ConcatsquashShape {
        dim,
        hidden: hid,
        hidden_layers: 2,
        flow_steps: 1,
        gate: Activation::Tanh,
        activation: Activation::Tanh,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let theta = random_vec(&mut rng, layer.n_params(), 0.8);
    let (y, t) = ([0.9, -0.3], 0.6);
    let sizes = [(dim, hid), (hid, hid), (hid, dim)];
    let mut off = 0;
    let mut h = y.to_vec();
    for (i, &(n_in, n_out)) in sizes.iter().enumerate() {
        h = concatsquash(&theta, off, n_in, n_out, &h, t);
        if i + 1 < sizes.len() {
            h = h.iter().map(|v| v.tanh()).collect();
        }
        off += n_in * n_out + 4 * n_out;
    }
    assert_eq!(off, layer.n_params());
    let out = layer.forward(&theta, &y, t).unwrap();
    assert!(max_rel(&out, &h) < 1e-14);
}

#[test]
fn stack_without_activation_is_affine_in_state() {
    let layer = DynamicsLayer::concatsquash_stack(ConcatsquashShape {
        dim: 2,
        hidden: 6,
        hidden_layers: 3,
        flow_steps: 1,
        gate: Activation::Tanh,
        activation: Activation::Identity,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let theta = random_vec(&mut rng, layer.n_params(), 1.0);
    let a = layer.exact_trace(&theta, &[0.1, 0.2], 0.3).unwrap().value;
    let b = layer.exact_trace(&theta, &[-3.0, 5.0], 0.3).unwrap().value;
    assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
}

#[test]
fn exact_trace_is_sum_of_basis_probes_bitwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for layer in layers() {
        let theta = random_vec(&mut rng, layer.n_params(), 0.7);
        let y = random_vec(&mut rng, layer.dim(), 1.0);
        let exact = layer.exact_trace(&theta, &y, 0.2).unwrap().value;
        let mut sum = 0.0;
        for i in 0..layer.dim() {
            let mut e = vec![0.0; layer.dim()];
            e[i] = 1.0;
            sum += layer.hutchinson_trace(&theta, &y, 0.2, &e).unwrap().value;
        }
        assert_eq!(exact.to_bits(), sum.to_bits());
    }
}

#[test]
fn forward_batch_matches_rows() {
    let layer = &layers()[2];
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let theta = random_vec(&mut rng, layer.n_params(), 0.7);
    let ys = Array2::from_shape_vec((3, 2), random_vec(&mut rng, 6, 2.0)).unwrap();
    let out = layer.forward_batch(&theta, ys.view(), 0.1).unwrap();
    for (r, row) in ys.rows().into_iter().enumerate() {
        let single = layer.forward(&theta, row.as_slice().unwrap(), 0.1).unwrap();
        assert!(max_rel(out.row(r).as_slice().unwrap(), &single) < 1e-14);
    }
}

#[test]
fn glorot_style_maps_cover_every_parameter() {
    for layer in layers() {
        let mut covered = vec![false; layer.n_params()];
        for m in layer.affine_maps() {
            for i in 0..m.fan_in * m.fan_out {
                covered[m.weight_offset + i] = true;
            }
            if let Some(b) = m.bias_offset {
                for i in 0..m.fan_out {
                    covered[b + i] = true;
                }
            }
        }
        assert!(covered.iter().all(|&c| c), "{:?}", layer.spec());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn vjps_agree_with_central_differences(seed in any::<u64>(), which in 0usize..4, t in 0.0f64..1.0) {
        let layer = &layers()[which];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = random_vec(&mut rng, layer.n_params(), 0.8);
        let y = random_vec(&mut rng, layer.dim(), 1.2);
        let z = random_vec(&mut rng, layer.dim(), 1.0);
        let (fd_y, fd_p) = fd_vjps(layer, &theta, &y, t, &z, 1e-5);
        let vy = layer.vjp_state(&theta, &y, t, &z).unwrap();
        let vp = layer.vjp_params(&theta, &y, t, &z).unwrap();
        prop_assert!(max_rel(&vy, &fd_y) < 1e-6, "state {}", max_rel(&vy, &fd_y));
        prop_assert!(max_rel(&vp, &fd_p) < 1e-6, "params {}", max_rel(&vp, &fd_p));
    }

    #[test]
    fn parameter_count_matches_accepted_length(which in 0usize..4) {
        let layer = &layers()[which];
        let y = vec![0.0; layer.dim()];
        prop_assert!(layer.forward(&vec![0.0; layer.n_params()], &y, 0.0).is_ok());
        prop_assert!(layer.forward(&vec![0.0; layer.n_params() + 1], &y, 0.0).is_err());
        let out = layer.forward(&vec![0.1; layer.n_params()], &y, 0.0).unwrap();
        prop_assert_eq!(out.len(), layer.dim());
    }
}
