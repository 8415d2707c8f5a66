use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use stlpd::autodiff::gradcheck::{check_graph_fn, random_tensor, GradCheck};
use stlpd::autodiff::{Graph, Tensor, Var};

fn assert_all_pass(name: &str, checks: &[GradCheck]) {
    for (i, c) in checks.iter().enumerate() {
        assert!(c.passes(), "{name} input {i}: {c:?}");
    }
}

fn rand_inputs(shapes: &[&[usize]], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes.iter().map(|s| random_tensor(s, &mut rng)).collect()
}

#[test]
fn conv2d_matches_finite_differences() {
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)] {
        let inputs = rand_inputs(&[&[1, 2, 5, 5], &[3, 2, k, k], &[3]], 11 + stride as u64);
        let checks = check_graph_fn(&inputs, 1, |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, pad)).unwrap();
        assert_all_pass("conv2d", &checks);
    }
}

#[test]
fn depthwise_matches_finite_differences() {
    for stride in [1, 2] {
        let inputs = rand_inputs(&[&[2, 3, 5, 5], &[3, 1, 3, 3], &[3]], 3);
        let checks =
            check_graph_fn(&inputs, 2, |g, v| g.depthwise_conv2d(v[0], v[1], Some(v[2]), stride, 1)).unwrap();
        assert_all_pass("depthwise", &checks);
    }
}

#[test]
fn group_norm_matches_finite_differences() {
    let inputs = rand_inputs(&[&[1, 8, 4, 4], &[8], &[8]], 5);
    let checks = check_graph_fn(&inputs, 3, |g, v| g.group_norm(v[0], v[1], v[2], 4, 1e-5)).unwrap();
    assert_all_pass("group_norm", &checks);
}

#[test]
fn group_norm_statistics() {
    let mut g = Graph::new();
    let x = g.constant(rand_inputs(&[&[2, 8, 4, 4]], 9).remove(0));
    let gamma = g.constant(Tensor::full(&[8], 1.0));
    let beta = g.constant(Tensor::zeros(&[8]));
    let y = g.group_norm(x, gamma, beta, 4, 1e-5).unwrap();
    for group in g.value(y).data().chunks(32) {
        let mean = group.iter().map(|&v| v as f64).sum::<f64>() / 32.0;
        let var = group.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 32.0;
        assert!(mean.abs() <= 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() <= 1e-3, "var {var}");
    }
}

#[test]
fn pointwise_activations_match_finite_differences() {
    let inputs = rand_inputs(&[&[2, 3, 4, 4]], 7);
    assert_all_pass(
        "leaky_relu",
        &check_graph_fn(&inputs, 4, |g, v| g.leaky_relu(v[0], 0.1)).unwrap(),
    );
    assert_all_pass("sigmoid", &check_graph_fn(&inputs, 5, |g, v| g.sigmoid(v[0])).unwrap());
}

#[test]
fn pooling_matches_finite_differences() {
    // random continuous inputs have no ties almost surely
    let inputs = rand_inputs(&[&[2, 3, 4, 6]], 13);
    assert_all_pass("max_pool2", &check_graph_fn(&inputs, 6, |g, v| g.max_pool2(v[0])).unwrap());
    assert_all_pass(
        "global_avg_pool",
        &check_graph_fn(&inputs, 7, |g, v| g.global_avg_pool(v[0])).unwrap(),
    );
    assert_all_pass(
        "global_max_pool",
        &check_graph_fn(&inputs, 8, |g, v| g.global_max_pool(v[0])).unwrap(),
    );
    assert_all_pass(
        "channel_mean",
        &check_graph_fn(&inputs, 9, |g, v| g.channel_mean(v[0])).unwrap(),
    );
    assert_all_pass(
        "channel_max",
        &check_graph_fn(&inputs, 10, |g, v| g.channel_max(v[0])).unwrap(),
    );
}

#[test]
fn upsample_is_adjoint_of_block_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random_tensor(&[2, 3, 3, 4], &mut rng);
    let y = random_tensor(&[2, 3, 6, 8], &mut rng);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let up = g.upsample_nearest2(xv).unwrap();
    let lhs: f64 = g
        .value(up)
        .data()
        .iter()
        .zip(y.data())
        .map(|(a, b)| *a as f64 * *b as f64)
        .sum();
    let mut down = vec![0.0f64; x.numel()];
    for nc in 0..6 {
        for yy in 0..6 {
            for xx in 0..8 {
                down[nc * 12 + (yy / 2) * 4 + xx / 2] += y.data()[nc * 48 + yy * 8 + xx] as f64;
            }
        }
    }
    let rhs: f64 = x.data().iter().zip(&down).map(|(a, b)| *a as f64 * b).sum();
    assert!((lhs - rhs).abs() <= 1e-5, "{lhs} vs {rhs}");

    let inputs = rand_inputs(&[&[1, 2, 2, 3]], 22);
    assert_all_pass(
        "upsample",
        &check_graph_fn(&inputs, 11, |g, v| g.upsample_nearest2(v[0])).unwrap(),
    );
}

#[test]
fn linear_and_elementwise_match_finite_differences() {
    let inputs = rand_inputs(&[&[3, 5], &[4, 5], &[4]], 31);
    assert_all_pass(
        "linear",
        &check_graph_fn(&inputs, 12, |g, v| g.linear(v[0], v[1], Some(v[2]))).unwrap(),
    );
    let inputs = rand_inputs(&[&[2, 3, 2, 2], &[2, 3, 2, 2]], 32);
    assert_all_pass("add", &check_graph_fn(&inputs, 13, |g, v| g.add(v[0], v[1])).unwrap());
    let inputs = rand_inputs(&[&[2, 3, 2, 2], &[2, 3, 1, 1]], 33);
    assert_all_pass(
        "mul_channel",
        &check_graph_fn(&inputs, 14, |g, v| g.mul_broadcast(v[0], v[1])).unwrap(),
    );
    let inputs = rand_inputs(&[&[2, 3, 2, 2], &[2, 1, 2, 2]], 34);
    assert_all_pass(
        "mul_spatial",
        &check_graph_fn(&inputs, 15, |g, v| g.mul_broadcast(v[0], v[1])).unwrap(),
    );
    let inputs = rand_inputs(&[&[2, 1, 2, 3], &[2, 2, 2, 3]], 35);
    assert_all_pass(
        "concat",
        &check_graph_fn(&inputs, 16, |g, v| g.concat_channels(&[v[0], v[1]])).unwrap(),
    );
    let inputs = rand_inputs(&[&[2, 6]], 36);
    assert_all_pass(
        "reshape",
        &check_graph_fn(&inputs, 17, |g, v| {
            let r = g.reshape(v[0], &[2, 6, 1, 1])?;
            g.sigmoid(r)
        })
        .unwrap(),
    );
}

#[test]
fn composed_chain_matches_finite_differences() {
    let inputs = rand_inputs(&[&[1, 4, 4, 4], &[4, 4, 3, 3], &[4], &[4], &[4]], 41);
    let build = |g: &mut Graph, v: &[Var]| {
        let c = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        let n = g.group_norm(c, v[3], v[4], 2, 1e-5)?;
        let a = g.leaky_relu(n, 0.1)?;
        let p = g.max_pool2(a)?;
        g.upsample_nearest2(p)
    };
    assert_all_pass("chain", &check_graph_fn(&inputs, 18, build).unwrap());
}

#[test]
fn forward_is_bit_deterministic() {
    let inputs = rand_inputs(&[&[2, 3, 8, 8], &[4, 3, 3, 3]], 51);
    let run = || {
        let mut g = Graph::new();
        let x = g.constant(inputs[0].clone());
        let w = g.constant(inputs[1].clone());
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        g.value(y).data().to_vec()
    };
    assert_eq!(run(), run());
}
