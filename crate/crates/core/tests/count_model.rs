use proptest::prelude::*;
use spdfit::count_model::*;

fn grid() -> impl Iterator<Item = (f64, f64, f64, f64)> {
    let etas = [0.05, 0.2, 0.5, 0.9];
    let mus = [0.01, 0.3, 3.0, 30.0];
    let q0s = [0.0, 0.01, 0.05, 0.2];
    let rate_taus = [0.1, 1.0, 10.0, 100.0];
    etas.into_iter().flat_map(move |eta| {
        mus.into_iter().flat_map(move |mu| {
            q0s.into_iter()
                .flat_map(move |q0| rate_taus.into_iter().map(move |rt| (eta, mu, q0, rt)))
        })
    })
}

fn closed(p_dc: f64, p_ph: f64, q0: f64, rate_tau: f64) -> f64 {
    let rate = GateRate::new(1e6).unwrap();
    p_count_closed(p_dc, p_ph, q0, rate_tau / 1e6, rate).unwrap()
}

#[test]
fn fixed_point_matches_closed_form_within_ten_tol() {
    let rate = GateRate::new(1e6).unwrap();
    let tol = DEFAULT_FIXED_POINT_TOL;
    for (eta, mu, q0, rate_tau) in grid() {
        let p_ph = p_photon(SourceTerm::single(mu).unwrap(), eta).unwrap();
        let fixed = p_count_fixed_point(
            1e-5,
            p_ph,
            q0,
            rate_tau / 1e6,
            rate,
            tol,
            DEFAULT_FIXED_POINT_MAX_ITER,
        )
        .unwrap();
        let c = closed(1e-5, p_ph, q0, rate_tau);
        assert!(
            (fixed - c).abs() <= 10.0 * tol,
            "eta={eta} mu={mu} q0={q0} R*tau={rate_tau}: {fixed} vs {c}"
        );
    }
}

#[test]
fn monotone_in_each_input() {
    for (eta, mu, q0, rate_tau) in grid() {
        let at = |eta: f64, mu: f64, p_dc: f64, q0: f64| {
            let p_ph = p_photon(SourceTerm::single(mu).unwrap(), eta).unwrap();
            closed(p_dc, p_ph, q0, rate_tau)
        };
        let base = at(eta, mu, 1e-5, q0);
        assert!(at(eta, mu * 1.01, 1e-5, q0) >= base);
        assert!(at((eta + 0.01).min(1.0), mu, 1e-5, q0) >= base);
        assert!(at(eta, mu, 2e-5, q0) >= base);
        assert!(at(eta, mu, 1e-5, q0 + 0.005) >= base);
    }
}

#[test]
fn vanishing_detrap_time_reduces_to_simple() {
    for (eta, mu, q0, _) in grid() {
        let p_ph = p_photon(SourceTerm::single(mu).unwrap(), eta).unwrap();
        let simple = p_count_simple(1e-5, p_ph).unwrap();
        assert!((closed(1e-5, p_ph, q0, 1e-3) - simple).abs() <= 1e-15);
    }
}

#[test]
fn pair_source_uses_effective_efficiency() {
    let eta: f64 = 0.2;
    let pair = p_photon(SourceTerm::pair(2.0).unwrap(), eta).unwrap();
    let single = p_photon(SourceTerm::single(2.0).unwrap(), eta * (2.0 - eta)).unwrap();
    assert!((pair - single).abs() < 1e-16);
}

proptest! {
    #[test]
    fn closed_form_is_bounded_and_solves_its_quadratic(
        p_dc in 0.0..0.1f64,
        p_ph in 0.0..1.0f64,
        q0 in 0.0..0.5f64,
        log_rate_tau in -3.0..5.0f64,
    ) {
        let rate_tau = 10f64.powf(log_rate_tau);
        let y = closed(p_dc, p_ph, q0, rate_tau);
        let simple = p_count_simple(p_dc, p_ph).unwrap();
        prop_assert!(y <= 1.0);
        prop_assert!(y >= simple - 1e-15);

        let r = (-1.0 / rate_tau).exp();
        let b_surv = (1.0 - p_dc) * (1.0 - p_ph);
        let residual = r * y * y + y * (1.0 - r * (2.0 - b_surv * (1.0 - q0)))
            - (1.0 - b_surv) * (1.0 - r);
        prop_assert!(residual.abs() < 1e-14, "residual {}", residual);
    }

    #[test]
    fn closed_form_is_self_consistent(
        p_dc in 0.0..0.01f64,
        p_ph in 1e-4..1.0f64,
        q0 in 0.0..0.2f64,
        log_rate_tau in -1.0..2.0f64,
    ) {
        let rate_tau = 10f64.powf(log_rate_tau);
        let rate = GateRate::new(1e6).unwrap();
        let tau = rate_tau / 1e6;
        let y = p_count_closed(p_dc, p_ph, q0, tau, rate).unwrap();
        let p_ap = p_afterpulse_stationary(y, q0, tau, rate).unwrap();
        prop_assert!(p_ap <= q0);
        let back = 1.0 - (1.0 - p_dc) * (1.0 - p_ph) * (1.0 - p_ap);
        prop_assert!((back - y).abs() <= 1e-12);
    }

    #[test]
    fn afterpulse_exceeds_simple_when_present(
        p_ph in 1e-3..0.99f64,
        q0 in 1e-3..0.2f64,
        log_rate_tau in -0.5..2.0f64,
    ) {
        let rate_tau = 10f64.powf(log_rate_tau);
        let simple = p_count_simple(1e-5, p_ph).unwrap();
        prop_assert!(closed(1e-5, p_ph, q0, rate_tau) > simple);
    }
}
