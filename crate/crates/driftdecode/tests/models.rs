//! Model contracts: shapes, SNR embedding gradients, FiLM behavior, and the
//! end-to-end parameter gradient check on a micro system.

use driftdecode::channel::{noise_variance, sample_noise};
use driftdecode::graph::Graph;
use driftdecode::models::{count_flops, JsccSystem, ModelConfig, P_Z};
use driftdecode::params::Binding;
use driftdecode::rng::{stream, Domain};
use driftdecode::tensor::{rel_err, Tensor};
use rand::Rng;

fn micro_config() -> ModelConfig {
    ModelConfig {
        image_channels: 1,
        image_h: 8,
        image_w: 8,
        cbr: 0.25,
        base_width: 4,
        depth: 1,
        blocks_per_level: 1,
        embed_dim: 6,
        film_hidden: 6,
        enc_width: 4,
        enc_downsamples: 2,
        stem_width: 4,
    }
}

#[test]
fn mnist_encode_produces_1024_symbols() {
    let cfg = ModelConfig::mnist();
    assert_eq!(cfg.m_symbols(), 1024);
    let sys: JsccSystem<f32> = JsccSystem::new(cfg, 5).unwrap();
    let img = Tensor::full(vec![1, 32, 32], 0.3f32);
    let z = sys.encode_image(&img).unwrap();
    assert_eq!(z.symbols.len(), 1024);
    assert!((z.average_power() - P_Z).abs() < 1e-5);
}

#[test]
fn decode_output_shape_matches_source() {
    let sys: JsccSystem<f32> = JsccSystem::new(ModelConfig::mnist(), 5).unwrap();
    let img = Tensor::full(vec![1, 32, 32], 0.3f32);
    let z = sys.encode_image(&img).unwrap();
    let eq = driftdecode::channel::EqualizedSignal { symbols: z.symbols, effective_snr_db: 12.0 };
    let out = sys.decode_signal(&eq).unwrap();
    assert_eq!(out.shape(), &[1, 32, 32]);
}

#[test]
fn snr_embedding_deterministic_sinusoids_bounded_and_differentiable() {
    let cfg = micro_config();
    let sys: JsccSystem<f64> = JsccSystem::new(cfg, 9).unwrap();
    let freqs = driftdecode::models::snr_frequencies::<f64>(6);
    // raw sinusoidal features lie in [-1, 1]
    {
        let mut g: Graph<f64> = Graph::new();
        let gamma = g.constant(Tensor::from_vec(vec![2, 1], vec![3.3, 17.0]));
        let sin = g.sinusoidal(gamma, &freqs);
        for &v in g.value(sin).data() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }
    let embed = |gamma: f64, grad: bool| -> (Vec<f64>, Option<f64>) {
        let mut g: Graph<f64> = Graph::new();
        let bind = Binding::bind(&sys.params, &mut g, false);
        let gv = if grad {
            g.leaf(Tensor::from_vec(vec![1, 1], vec![gamma]))
        } else {
            g.constant(Tensor::from_vec(vec![1, 1], vec![gamma]))
        };
        let e = sys.decoder.embed_snr(&mut g, &bind, gv);
        let vals = g.value(e).data().to_vec();
        if grad {
            let s = g.sum_all(e, 1.0);
            g.backward(s);
            (vals, Some(g.grad(gv).unwrap().item()))
        } else {
            (vals, None)
        }
    };
    // determinism
    assert_eq!(embed(7.5, false).0, embed(7.5, false).0);
    // d e_gamma / d gamma matches finite differences
    let eps = 1e-6;
    for gamma in [0.5, 9.0, 18.0] {
        let (_, an) = embed(gamma, true);
        let sum = |v: &[f64]| v.iter().sum::<f64>();
        let fd = (sum(&embed(gamma + eps, false).0) - sum(&embed(gamma - eps, false).0)) / (2.0 * eps);
        let err = rel_err(an.unwrap(), fd, 1e-6);
        assert!(err < 1e-4, "gamma {gamma}: {} vs {fd} ({err:.2e})", an.unwrap());
    }
}

#[test]
fn film_identity_and_constant_cases() {
    let mut g: Graph<f64> = Graph::new();
    let x = g.constant(Tensor::from_vec(vec![1, 2, 2, 2], (0..8).map(|i| i as f64).collect()));
    let norm = g.group_norm(x, 1, 1e-6);
    let norm_vals = g.value(norm).clone();
    // scale = 0 (alpha = 1), shift = 0: output equals Norm(h)
    let s0 = g.constant(Tensor::zeros(vec![1, 2]));
    let t0 = g.constant(Tensor::zeros(vec![1, 2]));
    let y = g.film(norm, s0, t0);
    assert_eq!(g.value(y).data(), norm_vals.data());
    // alpha = 0 (scale = -1): output is the broadcast shift, independent of h
    let sm1 = g.constant(Tensor::full(vec![1, 2], -1.0));
    let tb = g.constant(Tensor::from_vec(vec![1, 2], vec![0.25, -0.5]));
    let y2 = g.film(norm, sm1, tb);
    let d = g.value(y2).data();
    assert!(d[..4].iter().all(|&v| v == 0.25));
    assert!(d[4..].iter().all(|&v| v == -0.5));
}

#[test]
fn end_to_end_parameter_gradients_match_finite_differences() {
    // Micro system, fixed channel noise, full pipeline:
    // encode -> normalize power -> y = h z + n -> zero-forcing -> decode -> MSE.
    let cfg = micro_config();
    assert_eq!(cfg.m_symbols(), 16);
    let sys: JsccSystem<f64> = JsccSystem::new(cfg.clone(), 21).unwrap();
    let mut rng = stream(33, Domain::Test, 0, 0);
    let img: Vec<f64> = (0..64).map(|_| rng.random_range(0.05..0.95)).collect();
    let img = Tensor::from_vec(vec![1, 1, 8, 8], img);
    let m = cfg.m_symbols();
    let gamma = 8.0f64;
    let h = (0.8f64, -0.55f64); // fixed fading coefficient
    let h_norm2 = h.0 * h.0 + h.1 * h.1;
    let h_inv = (h.0 / h_norm2, -h.1 / h_norm2);
    let noise: Vec<f64> = sample_noise(m, noise_variance(gamma, P_Z), &mut rng)
        .into_iter()
        .flat_map(|z| [z.re, z.im])
        .collect();
    let gamma_eff = gamma + 10.0 * h_norm2.log10();

    let eval = |tensors: &[Tensor<f64>], grad: bool| -> (f64, Vec<Option<Tensor<f64>>>) {
        let params = sys.params.with_tensors(tensors.to_vec());
        let mut g: Graph<f64> = Graph::new();
        let bind = Binding::bind(&params, &mut g, grad);
        let x = g.constant(img.clone());
        let z = sys.encoder.forward(&mut g, &bind, &cfg, x).unwrap();
        let y = g.complex_scale_rows(z, &[h]);
        let nvar = g.constant(Tensor::from_vec(vec![1, 2 * m], noise.clone()));
        let y = g.add(y, nvar);
        let y_eq = g.complex_scale_rows(y, &[h_inv]);
        let gv = g.constant(Tensor::from_vec(vec![1, 1], vec![gamma_eff]));
        let xhat = sys.decoder.forward(&mut g, &bind, &cfg, y_eq, gv).unwrap();
        let loss = g.sq_diff_sum(xhat, &img, 1.0 / 64.0);
        let value = g.value(loss).item();
        if grad {
            g.backward(loss);
            let grads = bind.grads(&g).into_iter().map(|o| o.cloned()).collect();
            (value, grads)
        } else {
            (value, Vec::new())
        }
    };

    let base: Vec<Tensor<f64>> = sys.params.clone_tensors();
    let (_, grads) = eval(&base, true);
    let eps = 1e-5;
    let mut checked = 0usize;
    let mut worst: f64 = 0.0;
    for (ti, t) in base.iter().enumerate() {
        let g_t = grads[ti].as_ref().expect("every parameter receives gradient");
        // All coordinates for small tensors, a deterministic sample for larger.
        let coords: Vec<usize> = if t.numel() <= 24 {
            (0..t.numel()).collect()
        } else {
            let stride = t.numel() / 12;
            (0..12).map(|i| i * stride).collect()
        };
        for i in coords {
            let mut plus = base.clone();
            let mut pt = t.clone();
            pt.data_mut()[i] += eps;
            plus[ti] = pt;
            let mut minus = base.clone();
            let mut mt = t.clone();
            mt.data_mut()[i] -= eps;
            minus[ti] = mt;
            let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * eps);
            let an = g_t.data()[i];
            // absolute floor: step of 1e-5 on an O(1e-2) loss resolves ~1e-9
            let err = rel_err(an, fd, 1e-4);
            worst = worst.max(err);
            assert!(
                err < 1e-3,
                "param {ti} ({}) coord {i}: analytic {an:.6e} vs fd {fd:.6e} ({err:.2e})",
                sys.params.name(driftdecode::params::ParamId(ti))
            );
            checked += 1;
        }
    }
    eprintln!("checked {checked} coordinates across {} tensors; worst rel err {worst:.3e}", base.len());
}

#[test]
fn flops_report_examples() {
    let report = count_flops(&ModelConfig::mnist()).unwrap();
    assert!(report.decoder_gflops > 0.0);
    // the 256x256 RGB configuration logged against the paper-scale decoder
    let big = ModelConfig {
        image_channels: 3,
        image_h: 256,
        image_w: 256,
        cbr: 0.5,
        base_width: 64,
        depth: 3,
        blocks_per_level: 2,
        embed_dim: 64,
        film_hidden: 64,
        enc_width: 32,
        enc_downsamples: 4,
        stem_width: 64,
    };
    let report_big = count_flops(&big).unwrap();
    eprintln!(
        "decoder GFLOPs at (3,256,256): {:.1} (reference receiver class: ~159)",
        report_big.decoder_gflops
    );
    assert!(report_big.decoder_gflops > report.decoder_gflops * 10.0);
}

#[test]
fn gamma_conditioning_gradient_is_nonzero() {
    let cfg = micro_config();
    let sys: JsccSystem<f64> = JsccSystem::new(cfg.clone(), 2).unwrap();
    let mut g: Graph<f64> = Graph::new();
    let bind = Binding::bind(&sys.params, &mut g, false);
    let y = g.constant(Tensor::from_vec(
        vec![1, 32],
        (0..32).map(|i| ((i * 13 % 9) as f64 - 4.0) * 0.2).collect(),
    ));
    let y = g.normalize_power_rows(y, 1.0).unwrap();
    let gamma = g.leaf(Tensor::from_vec(vec![1, 1], vec![6.0]));
    let xhat = sys.decoder.forward(&mut g, &bind, &cfg, y, gamma).unwrap();
    let s = g.sum_all(xhat, 1.0);
    g.backward(s);
    let dg = g.grad(gamma).expect("gamma gradient").item();
    assert!(dg.abs() > 0.0, "d(decode)/d(gamma) = {dg}");
}
