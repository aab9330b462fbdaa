//! Central finite-difference checks for every differentiable engine op.
//!
//! All checks run in f64 against a scalar head so the numerical gradient is
//! trustworthy to well below the asserted tolerances.

use driftdecode::graph::{Graph, Var};
use driftdecode::rng::{stream, Domain};
use driftdecode::tensor::{rel_err, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Builds a scalar graph from leaf tensors; returns (root, leaf vars).
type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Var;

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(shape.to_vec(), data)
}

/// Compare reverse-mode gradients of `build` against central differences for
/// every coordinate of every input.
fn gradcheck(name: &str, inputs: &[Tensor<f64>], build: &Build, tol: f64) {
    let eps = 1e-6;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let root = build(&mut g, &vars);
    assert_eq!(g.value(root).numel(), 1, "{name}: root must be scalar");
    g.backward(root);
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            g.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(inputs[i].shape().to_vec()))
        })
        .collect();

    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let root = build(&mut g, &vars);
        g.value(root).item()
    };

    let mut worst = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.numel() {
            let mut plus = inputs.to_vec();
            let mut pt = t.clone();
            pt.data_mut()[i] += eps;
            plus[ti] = pt;
            let mut minus = inputs.to_vec();
            let mut mt = t.clone();
            mt.data_mut()[i] -= eps;
            minus[ti] = mt;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let an = analytic[ti].data()[i];
            let err = rel_err(an, fd, 1e-4);
            if err > worst {
                worst = err;
            }
            assert!(
                err <= tol,
                "{name}: input {ti} coord {i}: analytic {an:.9e} vs fd {fd:.9e} (rel {err:.3e})"
            );
        }
    }
    eprintln!("{name}: worst rel err {worst:.3e} over {} inputs", inputs.len());
}

fn rng_for(tag: u64) -> impl Rng {
    stream(0xD01F_7D0D, Domain::Test, tag, 0)
}

#[test]
fn grad_add_scale_silu_sigmoid_relu() {
    let mut rng = rng_for(1);
    let a = random_tensor(&[3, 4], &mut rng);
    let b = random_tensor(&[3, 4], &mut rng);
    gradcheck(
        "add+scale",
        &[a.clone(), b],
        &|g, v| {
            let s = g.add(v[0], v[1]);
            let s = g.scale(s, 1.7);
            g.sum_all(s, 0.5)
        },
        1e-7,
    );
    gradcheck("silu", &[a.clone()], &|g, v| {
        let y = g.silu(v[0]);
        g.sum_all(y, 1.0)
    }, 1e-6);
    gradcheck("sigmoid", &[a.clone()], &|g, v| {
        let y = g.sigmoid(v[0]);
        let t = Tensor::full(vec![3, 4], 0.25);
        g.sq_diff_sum(y, &t, 1.0)
    }, 1e-6);
    gradcheck("relu", &[a], &|g, v| {
        let y = g.relu(v[0]);
        let t = Tensor::full(vec![3, 4], 0.1);
        g.sq_diff_sum(y, &t, 1.0)
    }, 1e-6);
}

#[test]
fn grad_linear_and_weighted_sum() {
    let mut rng = rng_for(2);
    let x = random_tensor(&[5, 3], &mut rng);
    let w = random_tensor(&[3, 4], &mut rng);
    let b = random_tensor(&[4], &mut rng);
    gradcheck("linear", &[x, w, b], &|g, v| {
        let y = g.linear(v[0], v[1], v[2]);
        let y2 = g.silu(y);
        let a = g.sum_all(y2, 0.3);
        let bsum = g.sum_all(y, -0.2);
        g.weighted_sum_scalars(&[(a, 2.0), (bsum, 1.5)])
    }, 1e-6);
}

#[test]
fn grad_conv2d_strides() {
    let mut rng = rng_for(3);
    for (stride, hw) in [(1usize, 5usize), (2, 6), (2, 5)] {
        let x = random_tensor(&[2, 3, hw, hw], &mut rng);
        let w = random_tensor(&[4, 3, 3, 3], &mut rng);
        let b = random_tensor(&[4], &mut rng);
        gradcheck(
            &format!("conv2d s{stride} {hw}x{hw}"),
            &[x, w, b],
            &move |g, v| {
                let y = g.conv2d(v[0], v[1], v[2], stride);
                let t = Tensor::zeros(g.value(y).shape().to_vec());
                g.sq_diff_sum(y, &t, 0.5)
            },
            2e-5,
        );
    }
    // 1x1 kernel path
    let x = random_tensor(&[1, 2, 4, 4], &mut rng);
    let w = random_tensor(&[3, 2, 1, 1], &mut rng);
    let b = random_tensor(&[3], &mut rng);
    gradcheck("conv2d 1x1", &[x, w, b], &|g, v| {
        let y = g.conv2d(v[0], v[1], v[2], 1);
        g.sum_all(y, 1.0)
    }, 1e-6);
}

#[test]
fn grad_group_norm_and_film() {
    let mut rng = rng_for(4);
    let x = random_tensor(&[2, 4, 3, 3], &mut rng);
    let gn_target = random_tensor(&[2, 4, 3, 3], &mut rng);
    gradcheck("group_norm", &[x.clone()], &move |g, v| {
        let y = g.group_norm(v[0], 2, 1e-5);
        g.sq_diff_sum(y, &gn_target, 1.0)
    }, 2e-5);
    let s = random_tensor(&[2, 4], &mut rng);
    let t = random_tensor(&[2, 4], &mut rng);
    gradcheck("film", &[x, s, t], &|g, v| {
        let y = g.film(v[0], v[1], v[2]);
        let tgt = Tensor::zeros(vec![2, 4, 3, 3]);
        g.sq_diff_sum(y, &tgt, 0.25)
    }, 1e-6);
}

#[test]
fn grad_structural_ops() {
    let mut rng = rng_for(5);
    let x = random_tensor(&[2, 3, 4, 4], &mut rng);
    gradcheck("upsample2x", &[x.clone()], &|g, v| {
        let y = g.upsample2x(v[0]);
        let t = Tensor::full(vec![2, 3, 8, 8], 0.1);
        g.sq_diff_sum(y, &t, 1.0)
    }, 1e-6);
    gradcheck("maxpool2", &[x.clone()], &|g, v| {
        let y = g.maxpool2(v[0]);
        let t = Tensor::zeros(vec![2, 3, 2, 2]);
        g.sq_diff_sum(y, &t, 1.0)
    }, 1e-6);
    let b = random_tensor(&[2, 2, 4, 4], &mut rng);
    gradcheck("concat_channels", &[x.clone(), b], &|g, v| {
        let y = g.concat_channels(&[v[0], v[1], v[0]]);
        let t = Tensor::full(vec![2, 8, 4, 4], -0.2);
        g.sq_diff_sum(y, &t, 0.5)
    }, 1e-6);
    gradcheck("nchw_to_nkc+reshape", &[x.clone()], &|g, v| {
        let y = g.nchw_to_nkc(v[0]);
        let y = g.reshape(y, vec![2 * 16, 3]);
        let t = Tensor::full(vec![32, 3], 0.05);
        g.sq_diff_sum(y, &t, 1.0)
    }, 1e-6);
    let flat = random_tensor(&[3, 10], &mut rng);
    gradcheck("narrow_last", &[flat], &|g, v| {
        let y = g.narrow_last(v[0], 6);
        let t = Tensor::zeros(vec![3, 6]);
        g.sq_diff_sum(y, &t, 1.0)
    }, 1e-6);
}

#[test]
fn grad_signal_ops() {
    let mut rng = rng_for(6);
    let x = random_tensor(&[2, 8], &mut rng);
    gradcheck("normalize_power_rows", &[x.clone()], &|g, v| {
        let y = g.normalize_power_rows(v[0], 1.0).unwrap();
        let t = Tensor::full(vec![2, 8], 0.3);
        g.sq_diff_sum(y, &t, 1.0)
    }, 1e-5);
    let h = vec![(0.6, -1.1), (0.2, 0.9)];
    gradcheck("complex_scale_rows", &[x.clone()], &move |g, v| {
        let y = g.complex_scale_rows(v[0], &h);
        let t = Tensor::zeros(vec![2, 8]);
        g.sq_diff_sum(y, &t, 1.0)
    }, 1e-6);
    gradcheck("pack_complex_grid", &[x], &|g, v| {
        let y = g.pack_complex_grid(v[0], 2, 2, 2); // capacity 8 >= M=4, zero-padded
        let t = Tensor::full(vec![2, 4, 2, 2], 0.1);
        g.sq_diff_sum(y, &t, 1.0)
    }, 1e-6);
    let gamma = random_tensor(&[3, 1], &mut rng);
    let freqs: Vec<f64> = vec![0.15, 1.0, 4.0];
    gradcheck("sinusoidal", &[gamma], &move |g, v| {
        let y = g.sinusoidal(v[0], &freqs);
        let t = Tensor::full(vec![3, 6], 0.2);
        g.sq_diff_sum(y, &t, 1.0)
    }, 1e-6);
}

#[test]
fn grad_l2_normalize_rows() {
    let mut rng = rng_for(7);
    let x = random_tensor(&[6, 5], &mut rng);
    gradcheck("l2_normalize_rows", &[x], &|g, v| {
        let y = g.l2_normalize_rows(v[0], 1e-8);
        let t = Tensor::full(vec![6, 5], 0.11);
        g.sq_diff_sum(y, &t, 1.0)
    }, 1e-5);
    // 3-d variant as used on (B, K, C) feature rows
    let x3 = random_tensor(&[2, 4, 3], &mut rng);
    gradcheck("l2_normalize_rows 3d", &[x3], &|g, v| {
        let y = g.l2_normalize_rows(v[0], 1e-8);
        let t = Tensor::zeros(vec![2, 4, 3]);
        g.sq_diff_sum(y, &t, 1.0)
    }, 1e-5);
}

#[test]
fn constants_receive_no_gradient() {
    let mut rng = rng_for(8);
    let a = random_tensor(&[2, 2], &mut rng);
    let b = random_tensor(&[2, 2], &mut rng);
    let mut g = Graph::new();
    let va = g.leaf(a);
    let vb = g.constant(b);
    let sum = g.add(va, vb);
    let root = g.sum_all(sum, 1.0);
    g.backward(root);
    assert!(g.grad(va).is_some());
    assert!(g.grad(vb).is_none());
    assert!(!g.needs_grad(vb));
}

#[test]
fn constant_only_subgraphs_record_nothing() {
    let mut rng = rng_for(9);
    let a = random_tensor(&[1, 2, 4, 4], &mut rng);
    let w = random_tensor(&[2, 2, 3, 3], &mut rng);
    let bias = random_tensor(&[2], &mut rng);
    let mut g = Graph::new();
    let va = g.constant(a);
    let vw = g.constant(w);
    let vb = g.constant(bias);
    let y = g.conv2d(va, vw, vb, 1);
    assert!(!g.needs_grad(y));
}
