use proptest::prelude::*;
use spdfit::photon_budget::*;
use spdfit::{DetectorParams, GateRate, SourceTerm};

proptest! {
    #[test]
    fn cw_and_pulsed_count_the_same_photon_flux(
        dbm in -120.0..0.0f64,
        wavelength_nm in 400.0..2000.0f64,
        gate_ns in 0.05..10.0f64,
        rate_hz in 1e3..1e8f64,
    ) {
        let carrier = OpticalCarrier::from_nm(wavelength_nm).unwrap();
        let window = GateWindow::from_ns(gate_ns).unwrap();
        let rate = GateRate::new(rate_hz).unwrap();
        let cw_flux = mu_cw(PowerDbm(dbm), carrier, window) / window.tau_g_s;
        let pulsed_flux = mu_pulsed(PowerDbm(dbm), carrier, rate) * rate_hz;
        prop_assert!((cw_flux / pulsed_flux - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn matched_powers_invert_the_db_offset(
        gate_ns in 0.05..10.0f64,
        rate_hz in 1e3..1e8f64,
        p_cw in -90.0..-30.0f64,
    ) {
        let rate = GateRate::new(rate_hz).unwrap();
        let tau_g = gate_ns * 1e-9;
        let p_p = p_cw + 10.0 * (tau_g * rate_hz).log10();
        let w = gate_window_from_matched_powers(PowerDbm(p_p), PowerDbm(p_cw), rate).unwrap();
        prop_assert!((w.tau_g_s / tau_g - 1.0).abs() <= 1e-12);

        let carrier = OpticalCarrier::from_nm(1550.0).unwrap();
        let cw = mu_cw(PowerDbm(p_cw), carrier, w);
        let pulsed = mu_pulsed(PowerDbm(p_p), carrier, rate);
        prop_assert!((cw / pulsed - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn mu_strictly_increasing_in_power(dbm in -120.0..0.0f64, delta in 1e-3..10.0f64) {
        let carrier = OpticalCarrier::from_nm(1549.32).unwrap();
        let window = GateWindow::from_ns(0.49).unwrap();
        let rate = GateRate::new(1e5).unwrap();
        prop_assert!(mu_cw(PowerDbm(dbm + delta), carrier, window) > mu_cw(PowerDbm(dbm), carrier, window));
        prop_assert!(mu_pulsed(PowerDbm(dbm + delta), carrier, rate) > mu_pulsed(PowerDbm(dbm), carrier, rate));
    }
}

fn model_sweep(
    powers: impl Iterator<Item = f64>,
    mu_of: impl Fn(PowerDbm) -> f64,
    params: &DetectorParams,
    rate: GateRate,
) -> Sweep {
    Sweep::new(
        powers
            .map(|dbm| SweepPoint {
                power: PowerDbm(dbm),
                p_c: params
                    .p_count(SourceTerm::single(mu_of(PowerDbm(dbm))).unwrap(), rate)
                    .unwrap(),
            })
            .collect(),
    )
    .unwrap()
}

#[test]
fn noise_free_sweeps_recover_the_gate_window() {
    let carrier = OpticalCarrier::from_nm(1549.32).unwrap();
    let rate = GateRate::new(100e3).unwrap();
    let params = DetectorParams::new(0.18, 5e-5, 0.03, 4e-6).unwrap();
    for gate_ns in [0.49, 0.55, 0.59] {
        let window = GateWindow::from_ns(gate_ns).unwrap();
        let cw = model_sweep(
            (0..70).map(|i| -80.0 + 0.5 * i as f64),
            |p| mu_cw(p, carrier, window),
            &params,
            rate,
        );
        let pulsed = model_sweep(
            (0..16).map(|i| -120.0 + 2.0 * i as f64),
            |p| mu_pulsed(p, carrier, rate),
            &params,
            rate,
        );
        let est = gate_window_from_sweeps(&cw, &pulsed, rate).unwrap();
        assert!(
            (est.mean.ns() / gate_ns - 1.0).abs() < 0.01,
            "{}",
            est.mean.ns()
        );
        // Points are only taken inside the overlap.
        let (lo, hi) = (cw.points()[0].p_c, cw.points()[cw.len() - 1].p_c);
        assert!(est.points.iter().all(|p| p.p_c >= lo && p.p_c <= hi));
    }
}
