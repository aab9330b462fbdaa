//! Channel statistics and round-trip properties.

use driftdecode::channel::{
    equalize_zf, noise_variance, normalize_power, sample_channel, sample_noise, transmit,
    ChannelKind, ChannelRealization, Complex64,
};
use driftdecode::rng::{stream, Domain};
use proptest::prelude::*;
use rand::Rng;

#[test]
fn noise_variance_calibration_over_1e6_symbols() {
    let mut rng = stream(11, Domain::Test, 0, 0);
    for (snr_db, p_z) in [(0.0, 1.0), (10.0, 1.0), (7.0, 2.0)] {
        let nv = noise_variance(snr_db, p_z);
        let samples = sample_noise(1_000_000, nv, &mut rng);
        let measured: f64 = samples.iter().map(|z| z.norm_sqr()).sum::<f64>() / samples.len() as f64;
        let rel = (measured - nv).abs() / nv;
        assert!(rel < 0.02, "snr {snr_db}: measured {measured}, expected {nv} (rel {rel:.4})");
    }
}

#[test]
fn rayleigh_statistics_over_1e6_draws() {
    let mut rng = stream(11, Domain::Test, 1, 0);
    let n = 1_000_000;
    let mut norms: Vec<f64> = (0..n)
        .map(|_| sample_channel(ChannelKind::Rayleigh, &mut rng).norm_sqr())
        .collect();
    let mean = norms.iter().sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() < 0.02, "E|h|^2 = {mean}");
    norms.sort_by(f64::total_cmp);
    let median = norms[n / 2];
    let ln2 = std::f64::consts::LN_2;
    assert!((median - ln2).abs() / ln2 < 0.02, "median {median} vs ln2 {ln2}");
    // |h|^2 ~ Exponential(1): P(|h|^2 > 1) = 1/e
    let frac = norms.iter().filter(|&&v| v > 1.0).count() as f64 / n as f64;
    let target = (-1.0f64).exp();
    assert!((frac - target).abs() < 0.01, "P(|h|^2 > 1) = {frac} vs {target}");
}

#[test]
fn transmit_noise_power_calibrated() {
    // z = 0 through a noisy channel leaves pure noise.
    let z = driftdecode::channel::ComplexSignal {
        symbols: vec![Complex64::new(0.0, 0.0); 1_000_000],
        declared_power: 1.0,
    };
    let ch = ChannelRealization {
        h: Complex64::new(1.0, 0.0),
        snr_db: 10.0,
        noise_var: 0.1,
        kind: ChannelKind::Awgn,
    };
    let mut rng = stream(11, Domain::Test, 2, 0);
    let y = transmit(&z, &ch, &mut rng);
    let p: f64 = y.iter().map(|v| v.norm_sqr()).sum::<f64>() / y.len() as f64;
    assert!((p - 0.1).abs() / 0.1 < 0.02, "noise power {p}");
}

#[test]
fn noiseless_round_trip_both_kinds() {
    let mut rng = stream(11, Domain::Test, 3, 0);
    for kind in [ChannelKind::Awgn, ChannelKind::Rayleigh] {
        for trial in 0..20 {
            let raw: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z = match normalize_power(&raw, 1.0) {
                Ok(z) => z,
                Err(_) => continue,
            };
            let mut ch = ChannelRealization::sample(kind, 10.0, 1.0, &mut rng);
            ch.noise_var = 0.0;
            if ch.is_deep_fade() {
                continue;
            }
            let y = transmit(&z, &ch, &mut rng);
            let eq = equalize_zf(&y, &ch).unwrap();
            for (a, b) in z.symbols.iter().zip(&eq.symbols) {
                let rel = (a - b).norm() / a.norm().max(1e-9);
                assert!(rel < 1e-6, "{kind:?} trial {trial}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn effective_snr_exact_on_unit_h() {
    for snr in [-3.0, 0.0, 7.5, 20.0] {
        let ch = ChannelRealization {
            h: Complex64::new(1.0, 0.0),
            snr_db: snr,
            noise_var: noise_variance(snr, 1.0),
            kind: ChannelKind::Awgn,
        };
        let eq = equalize_zf(&[Complex64::new(0.3, -0.2)], &ch).unwrap();
        assert_eq!(eq.effective_snr_db, snr);
    }
}

#[test]
fn channel_realization_derives_noise_var() {
    let mut rng = stream(11, Domain::Test, 4, 0);
    for _ in 0..100 {
        let snr: f64 = rng.random_range(-5.0..25.0);
        let p_z: f64 = rng.random_range(0.1..4.0);
        let ch = ChannelRealization::sample(ChannelKind::Rayleigh, snr, p_z, &mut rng);
        let expect = p_z * 10f64.powf(-snr / 10.0);
        assert!((ch.noise_var - expect).abs() / expect < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prop_normalize_power_exact_and_idempotent(seed in 0u64..10_000) {
        let mut rng = stream(seed, Domain::Test, 5, 0);
        let m = rng.random_range(1..64usize);
        let raw: Vec<f64> = (0..2 * m).map(|_| rng.random_range(-3.0..3.0)).collect();
        if raw.iter().all(|&v| v == 0.0) {
            return Ok(());
        }
        let p_z = rng.random_range(0.25..4.0);
        let z = normalize_power(&raw, p_z).unwrap();
        prop_assert!(((z.average_power() - p_z) / p_z).abs() < 1e-6);
        let z2 = normalize_power(&z.to_interleaved(), p_z).unwrap();
        for (a, b) in z.symbols.iter().zip(&z2.symbols) {
            prop_assert!((a - b).norm() < 1e-9 * p_z.sqrt());
        }
        // scaling the input does not change the output (single positive scalar)
        let scaled: Vec<f64> = raw.iter().map(|v| v * 3.7).collect();
        let z3 = normalize_power(&scaled, p_z).unwrap();
        for (a, b) in z.symbols.iter().zip(&z3.symbols) {
            prop_assert!((a - b).norm() < 1e-9 * p_z.sqrt());
        }
    }

    #[test]
    fn prop_equalize_restores_scale(seed in 0u64..10_000) {
        let mut rng = stream(seed, Domain::Test, 6, 0);
        let mut ch = ChannelRealization::sample(ChannelKind::Rayleigh, 10.0, 1.0, &mut rng);
        ch.noise_var = 0.0;
        prop_assume!(!ch.is_deep_fade());
        let z = normalize_power(&[0.5, -0.25, 1.0, 0.75], 1.0).unwrap();
        let y = transmit(&z, &ch, &mut rng);
        let eq = equalize_zf(&y, &ch).unwrap();
        for (a, b) in z.symbols.iter().zip(&eq.symbols) {
            prop_assert!((a - b).norm() < 1e-9);
        }
        // gamma_eff in dB reflects |h|^2
        let expect = 10.0 + 10.0 * ch.h.norm_sqr().log10();
        prop_assert!((eq.effective_snr_db - expect).abs() < 1e-9);
    }
}
