use spdfit::count_model::{p_count_closed, p_count_simple, p_photon};
use spdfit::detector_sim::*;
use spdfit::{DetectorParams, GateRate, SourceKind, SourceTerm};

fn scenario(noise_sigma: f64) -> Scenario {
    Scenario {
        rates: [100e3, 250e3, 500e3, 1e6]
            .iter()
            .zip([0.215, 0.21, 0.2, 0.177])
            .map(|(&r, eta)| RateSetting {
                rate: GateRate::new(r).unwrap(),
                eta,
                p_dc: 1e-5,
            })
            .collect(),
        q0: 0.02,
        tau_s: 3e-6,
        mu_grid: (0..10).map(|i| 3.0 + 17.0 * i as f64 / 9.0).collect(),
        source: SourceKind::PoissonSingle,
        noise_sigma,
    }
}

#[test]
fn renewal_identity_without_afterpulsing() {
    let rate = GateRate::new(5e5).unwrap();
    for p_ph in [0.01, 0.3, 0.7] {
        let params = DetectorParams::new(0.2, 1e-4, 0.0, 3e-6).unwrap();
        let simple = p_count_simple(params.p_dc, p_ph).unwrap();
        let closed = p_count_closed(params.p_dc, p_ph, 0.0, params.tau_s, rate).unwrap();
        let exact = exact_stationary(&params, p_ph, rate, DEFAULT_EXACT_EPS).unwrap();
        assert!((closed - simple).abs() <= 1e-15);
        assert!((exact - simple).abs() <= 1e-15);

        let config = SimConfig {
            n_gates: 2_000_000,
            seed: 7,
            ..SimConfig::default()
        };
        let sim = simulate(&params, p_ph, rate, &config).unwrap();
        assert!((sim.p_c_hat - simple).abs() <= 4.0 * sim.stderr);
    }
}

#[test]
fn bernoulli_case_at_ten_million_gates() {
    let params = DetectorParams::new(0.2, 0.0, 0.0, 3e-6).unwrap();
    let rate = GateRate::new(1e6).unwrap();
    let config = SimConfig {
        n_gates: 10_000_000,
        seed: 3,
        ..SimConfig::default()
    };
    let sim = simulate(&params, 0.3, rate, &config).unwrap();
    assert_eq!(sim.gates, 10_000_000);
    assert!((sim.p_c_hat - 0.3).abs() <= 4.0 * sim.stderr);
}

#[test]
fn simulation_tracks_exact_chain_with_afterpulsing() {
    let params = DetectorParams::new(0.2, 0.0, 0.02, 3e-6).unwrap();
    let rate = GateRate::new(1.0 / 3e-6).unwrap();
    let config = SimConfig {
        n_gates: 10_000_000,
        seed: 11,
        ..SimConfig::default()
    };
    let sim = simulate(&params, 0.5, rate, &config).unwrap();
    let exact = exact_stationary(&params, 0.5, rate, DEFAULT_EXACT_EPS).unwrap();
    assert!((sim.p_c_hat - exact).abs() <= 4.0 * sim.stderr);
}

#[test]
fn mean_field_gap_shrinks_with_afterpulsing() {
    let rate = GateRate::new(1e6).unwrap();
    let p_ph = p_photon(SourceTerm::single(1.0).unwrap(), 0.2).unwrap();
    let gap = |q0: f64| {
        let params = DetectorParams::new(0.2, 1e-5, q0, 2.5e-6).unwrap();
        let exact = exact_stationary(&params, p_ph, rate, DEFAULT_EXACT_EPS).unwrap();
        (exact - p_count_closed(1e-5, p_ph, q0, 2.5e-6, rate).unwrap()).abs()
    };
    let gaps: Vec<f64> = [0.1, 0.05, 0.025, 0.0125].into_iter().map(gap).collect();
    assert!(gaps.windows(2).all(|w| w[1] < w[0]), "{gaps:?}");
    assert!(gap(0.0) <= 1e-15);
}

#[test]
fn chunking_changes_the_stream_but_not_the_statistics() {
    let params = DetectorParams::new(0.2, 1e-5, 0.05, 2e-6).unwrap();
    let rate = GateRate::new(1e6).unwrap();
    let base = SimConfig {
        n_gates: 1_000_000,
        seed: 5,
        ..SimConfig::default()
    };
    let one = simulate(&params, 0.2, rate, &SimConfig { chunks: 1, ..base }).unwrap();
    let many = simulate(&params, 0.2, rate, &SimConfig { chunks: 13, ..base }).unwrap();
    assert_eq!(
        many,
        simulate(&params, 0.2, rate, &SimConfig { chunks: 13, ..base }).unwrap()
    );
    let diff = (one.p_c_hat - many.p_c_hat).abs();
    assert!(diff <= 4.0 * (one.stderr.powi(2) + many.stderr.powi(2)).sqrt());
}

#[test]
fn small_k_cap_pins_afterpulsing() {
    // With k_cap = 1 every gate after a count sees Q_1.
    let params = DetectorParams::new(0.2, 0.0, 0.1, 10e-6).unwrap();
    let rate = GateRate::new(1e6).unwrap();
    let config = SimConfig {
        n_gates: 2_000_000,
        seed: 9,
        k_cap: 1,
        ..SimConfig::default()
    };
    let sim = simulate(&params, 0.1, rate, &config).unwrap();
    let pinned = per_gate_count_prob(&params, 0.1, rate, 1).unwrap();
    assert!((sim.p_c_hat - pinned).abs() <= 4.0 * sim.stderr);
}

#[test]
fn synthetic_dataset_shape_and_exactness() {
    let records =
        synth_dataset(&scenario(0.0), Generator::ClosedForm, &SimConfig::default()).unwrap();
    assert_eq!(records.len(), 40);
    let s = scenario(0.0);
    for (i, record) in records.iter().enumerate() {
        let setting = &s.rates[i / 10];
        assert_eq!(record.rate_hz, setting.rate.hz());
        assert_eq!(record.mu, s.mu_grid[i % 10]);
        assert_eq!(record.gates, ANALYTIC_GATES);
        let p_ph = p_photon(SourceTerm::single(record.mu).unwrap(), setting.eta).unwrap();
        let p = p_count_closed(1e-5, p_ph, 0.02, 3e-6, setting.rate).unwrap();
        assert!((record.p_c() - p).abs() <= 0.5 / ANALYTIC_GATES as f64);
    }
}

#[test]
fn noisy_and_monte_carlo_datasets_are_reproducible() {
    let config = SimConfig {
        n_gates: 20_000,
        seed: 99,
        ..SimConfig::default()
    };
    let noisy = scenario(3e-4);
    let a = synth_dataset(&noisy, Generator::ClosedForm, &config).unwrap();
    assert_eq!(
        a,
        synth_dataset(&noisy, Generator::ClosedForm, &config).unwrap()
    );
    let other = synth_dataset(
        &noisy,
        Generator::ClosedForm,
        &SimConfig {
            seed: 100,
            ..config
        },
    )
    .unwrap();
    assert_ne!(a, other);

    let mc = synth_dataset(&scenario(0.0), Generator::MonteCarlo, &config).unwrap();
    assert_eq!(
        mc,
        synth_dataset(&scenario(0.0), Generator::MonteCarlo, &config).unwrap()
    );
    assert!(mc.iter().all(|r| r.gates == 20_000 && r.counts <= r.gates));

    let exact = synth_dataset(&scenario(0.0), Generator::Exact, &config).unwrap();
    let closed = synth_dataset(&scenario(0.0), Generator::ClosedForm, &config).unwrap();
    for (e, c) in exact.iter().zip(&closed) {
        // The two analytic generators differ only by the mean-field gap.
        assert!((e.p_c() - c.p_c()).abs() < 1e-3);
    }
}
