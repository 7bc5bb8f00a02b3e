use fnls_core::dynamics::*;
use fnls_core::gibbs::{sample_gff, Sign};
use fnls_core::rng::{complex_gaussian, stream_rng};
use fnls_core::spectral::{quartic_integral, to_physical, Dispersion, SpectralField, C64, TWO_PI};
use fnls_core::Error;
use proptest::prelude::*;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn random_field(kmax: usize, seed: u64) -> SpectralField {
    let mut rng = stream_rng(seed, 0);
    let mut u = SpectralField::zeros(kmax);
    for z in u.coeffs_mut() {
        *z = complex_gaussian(&mut rng);
    }
    u
}

/// `Π((|u|² − 2⨍|u|²)u)` by direct triple sums.
fn direct_nonlinearity(u: &SpectralField) -> SpectralField {
    let m = u.kmax() as i64;
    let shift = 2.0 * u.coeff_mass() / (TWO_PI * TWO_PI);
    let mut out = SpectralField::zeros(u.kmax());
    for k in -m..=m {
        let mut s = c(0.0, 0.0);
        for k1 in -m..=m {
            for k2 in -m..=m {
                let k3 = k - k1 + k2;
                if k3.abs() <= m {
                    s += u.get(k1) * u.get(k2).conj() * u.get(k3);
                }
            }
        }
        out.set(k, s / (TWO_PI * TWO_PI) - u.get(k) * shift);
    }
    out
}

fn gff8(seed: u64) -> SpectralField {
    sample_gff(1.5, 8.0, &mut stream_rng(seed, 0)).unwrap()
}

#[test]
fn gauge_examples() {
    let u = random_field(5, 1);
    assert_eq!(gauge_forward(&u, 0.0), u);
    let a = c(0.3, -1.1);
    let cst = SpectralField::from_modes(0, &[(0, a * TWO_PI)]);
    let g = gauge_forward(&cst, 0.7);
    let expect = C64::from_polar(1.0, 2.0 * 0.7 * a.norm_sqr()) * a * TWO_PI;
    assert!((g.get(0) - expect).norm() < 1e-14);
    let g = gauge_forward(&u, 2.3);
    for k in u.frequencies() {
        assert!((g.get(k).norm() - u.get(k).norm()).abs() < 1e-14);
    }
}

#[test]
fn resonant_split_examples() {
    let a = c(0.4, 0.9);
    let one = SpectralField::from_modes(2, &[(1, a)]);
    let (q, r) = resonant_split(&one, &one, &one).unwrap();
    assert!(q.coeffs().iter().all(|z| z.norm() == 0.0));
    assert!((r.get(1) - a * a.norm_sqr()).norm() < 1e-15);

    // Γ(−1) restricted to modes {0, 1} contains only (k1, k2, k3) = (0, 1, 0)
    let (u0, u1) = (c(1.0, 0.5), c(-0.3, 2.0));
    let two = SpectralField::from_modes(1, &[(0, u0), (1, u1)]);
    let (q, _) = resonant_split(&two, &two, &two).unwrap();
    assert!((q.get(-1) - u0 * u1.conj() * u0).norm() < 1e-15);

    let w = random_field(3, 9);
    let (_, r) = resonant_split(&w, &w, &w).unwrap();
    for k in w.frequencies() {
        assert!((r.get(k) - w.get(k) * w.get(k).norm_sqr()).norm() < 1e-14);
    }
    assert!(resonant_split(&w, &two, &w).is_err());
}

#[test]
fn nonlinearity_examples() {
    assert!(nonlinearity(&SpectralField::zeros(4))
        .coeffs()
        .iter()
        .all(|z| z.norm() == 0.0));
    let a = c(1.5, -0.5);
    let u = SpectralField::from_modes(3, &[(2, a)]);
    let n = nonlinearity(&u);
    for k in u.frequencies() {
        let expect = if k == 2 {
            -a * a.norm_sqr() / (TWO_PI * TWO_PI)
        } else {
            c(0.0, 0.0)
        };
        assert!((n.get(k) - expect).norm() < 1e-14, "k={k}");
    }
    let u = random_field(4, 2);
    let d = direct_nonlinearity(&u);
    assert!(nonlinearity(&u).max_abs_diff(&d) <= 1e-12);
}

#[test]
fn nonlinearity_is_q_minus_r() {
    for seed in 0..5 {
        let u = random_field(6, seed);
        let (q, r) = resonant_split(&u, &u, &u).unwrap();
        let expect = q
            .resized(6)
            .zip_with(&r, |a, b| (a - b) / (TWO_PI * TWO_PI));
        assert!(nonlinearity(&u).max_abs_diff(&expect) <= 1e-12);
    }
}

#[test]
fn cubic_nonlinearity_drops_the_mass_term() {
    let u = random_field(5, 4);
    let shift = 2.0 * mean_density(&u);
    let expect = nonlinearity(&u).zip_with(&u, |a, b| a + b * shift);
    assert!(cubic_nonlinearity(&u).max_abs_diff(&expect) <= 1e-12);
}

#[test]
fn energies() {
    let d = Dispersion::new(2.0).unwrap();
    let z = SpectralField::zeros(3);
    assert_eq!(hamiltonian(&z, Sign::Defocusing, &d), 0.0);
    assert_eq!(mass(&z), 0.0);
    let a = c(0.8, 1.3);
    let u = SpectralField::from_modes(1, &[(1, a)]);
    let kin = a.norm_sqr() / TWO_PI;
    let quart = a.norm_sqr().powi(2) / TWO_PI.powi(3);
    assert!((kinetic_energy(&u, &d) - kin).abs() < 1e-15);
    assert!((quartic_integral(&u) - quart).abs() < 1e-15);
    let h = hamiltonian(&u, Sign::Defocusing, &d);
    assert!((h - (kin + 0.5 * quart)).abs() < 1e-15);
    let h = hamiltonian(&u, Sign::Focusing, &d);
    assert!((h - (kin - 0.5 * quart)).abs() < 1e-15);
    assert!((mass(&u) - kin).abs() < 1e-15);
}

#[test]
fn zero_data_stays_zero() {
    let cfg = FlowConfig::new(1.5, 8.0, 1e-2, 0.5, Sign::Defocusing);
    let (u, diag) = evolve(&SpectralField::zeros(7), &cfg).unwrap();
    assert!(u.coeffs().iter().all(|z| z.norm() == 0.0));
    assert_eq!(diag.max_mass_drift, 0.0);
    assert_eq!(diag.max_hamiltonian_drift, 0.0);
    assert_eq!(diag.times.len(), 51);
}

#[test]
fn linear_flow_single_mode() {
    let a = c(0.2, 0.7);
    let u0 = SpectralField::from_modes(3, &[(3, a)]);
    let t = 0.9;
    for scheme in [Scheme::Rk4, Scheme::StrangSplit] {
        let mut cfg = FlowConfig::new(1.5, 4.0, 1e-3, t, Sign::Defocusing).with_scheme(scheme);
        cfg.nonlinear = false;
        let (u, _) = evolve(&u0, &cfg).unwrap();
        let expect = a * C64::from_polar(1.0, -t * 3f64.powf(1.5));
        let tol = if scheme == Scheme::Rk4 { 1e-10 } else { 1e-12 };
        assert!((u.get(3) - expect).norm() < tol, "{scheme:?}");
    }
}

#[test]
fn rk4_conserves_mass_and_hamiltonian() {
    let cfg = FlowConfig::new(1.5, 8.0, 1e-3, 1.0, Sign::Defocusing);
    let (_, diag) = evolve(&gff8(0), &cfg).unwrap();
    assert!(diag.max_mass_drift <= 1e-10, "{}", diag.max_mass_drift);
    assert!(diag.max_hamiltonian_drift <= 1e-8, "{}", diag.max_hamiltonian_drift);
    assert_eq!(diag.times.len(), diag.mass_series.len());
    assert_eq!(diag.times.len(), diag.hamiltonian_series.len());
}

#[test]
fn rk4_is_fourth_order() {
    let u0 = gff8(3);
    let run = |dt: f64| evolve(&u0, &FlowConfig::new(1.5, 8.0, dt, 0.5, Sign::Defocusing)).unwrap().0;
    let reference = run(1.25e-4);
    let e1 = run(4e-3).l2_diff(&reference);
    let e2 = run(2e-3).l2_diff(&reference);
    let ratio = e1 / e2;
    assert!(ratio > 12.0 && ratio < 20.0, "{ratio}");
}

#[test]
fn gauge_equivalence() {
    // G_t(solution of the cubic equation) solves the renormalized equation
    let u0 = gff8(7);
    let t = 0.5;
    let renorm = FlowConfig::new(1.5, 8.0, 1e-3, t, Sign::Defocusing);
    let mut plain = renorm;
    plain.renormalized = false;
    let (u, _) = evolve(&u0, &renorm).unwrap();
    let (v, _) = evolve(&u0, &plain).unwrap();
    let g = gauge_forward(&v, t);
    let scale = u.coeffs().iter().map(|z| z.norm()).fold(0.0, f64::max);
    assert!(g.max_abs_diff(&u) <= 1e-9 * scale, "{}", g.max_abs_diff(&u));
    assert!(g.max_abs_diff(&v) > 1e-3 * scale);
}

#[test]
fn strang_rotation_is_unimodular_on_the_grid() {
    let u = gff8(2);
    let mut ws = NonlinearWorkspace::new(u.kmax());
    let m = ws.gridsize();
    let grid = to_physical(&u, m).unwrap();
    let shift = 2.0 * mean_density(&u);
    let before: f64 = grid.iter().map(|z| z.norm_sqr()).sum();
    let after: f64 = grid
        .iter()
        .map(|z| (z * C64::from_polar(1.0, -0.1 * (z.norm_sqr() - shift))).norm_sqr())
        .sum();
    assert!((before - after).abs() <= 1e-13 * before);
    // projection can only remove mass
    let mut c = u.coeffs().to_vec();
    ws.rotate(&mut c, 0.1, 1.0, true);
    let s1: f64 = c.iter().map(|z| z.norm_sqr()).sum();
    assert!(s1 <= u.coeff_mass() * (1.0 + 1e-14));
}

#[test]
fn strang_conserves_mass_approximately() {
    let cfg = FlowConfig::new(1.5, 8.0, 1e-3, 1.0, Sign::Defocusing).with_scheme(Scheme::StrangSplit);
    let u0 = gff8(0);
    let (_, diag) = evolve(&u0, &cfg).unwrap();
    assert!(diag.max_mass_drift < 1e-3 * mass(&u0));
}

#[test]
fn flow_config_guards() {
    let base = FlowConfig::new(1.5, 8.0, 1e-3, 1.0, Sign::Defocusing);
    let mut bad = base;
    bad.dt = 0.0;
    assert!(evolve(&SpectralField::zeros(7), &bad).is_err());
    let mut bad = base;
    bad.t_final = 1e7;
    bad.dt = 1e-3;
    assert!(matches!(bad.validate(), Err(Error::InvalidParameter(_))));
    let mut bad = base;
    bad.diag_stride = 0;
    assert!(bad.validate().is_err());
    // data outside the band
    let u = SpectralField::from_modes(9, &[(9, c(1.0, 0.0))]);
    assert!(evolve(&u, &base).is_err());
    assert_eq!(FlowConfig::new(1.5, 8.0, 0.3, 1.0, Sign::Defocusing).steps(), 4);
    assert_eq!(FlowConfig::new(1.5, 8.0, 1e-3, 1.0, Sign::Defocusing).steps(), 1000);
}

#[test]
fn focusing_blow_up_is_reported() {
    let cfg = FlowConfig::new(1.5, 4.0, 0.5, 200.0, Sign::Focusing);
    let u0 = sample_gff(1.5, 4.0, &mut stream_rng(1, 0)).unwrap().scale(c(300.0, 0.0));
    match evolve(&u0, &cfg) {
        Err(e @ Error::BlowUp { last_finite_time }) => {
            assert!(e.is_numerical());
            assert!(last_finite_time < 200.0);
        }
        other => panic!("expected blow-up, got {other:?}"),
    }
}

#[test]
fn scheme_names() {
    assert_eq!("rk4".parse::<Scheme>().unwrap(), Scheme::Rk4);
    assert_eq!("strang_split".parse::<Scheme>().unwrap(), Scheme::StrangSplit);
    assert!("euler".parse::<Scheme>().is_err());
}

proptest! {
    #[test]
    fn gauge_round_trip(seed in any::<u64>(), t in -10.0f64..10.0) {
        let u = random_field(6, seed);
        let back = gauge_inverse(&gauge_forward(&u, t), t);
        prop_assert!(back.max_abs_diff(&u) <= 1e-14 * 4.0);
    }

    #[test]
    fn hamiltonian_gauge_invariant(seed in any::<u64>(), t in -10.0f64..10.0) {
        let d = Dispersion::new(1.3).unwrap();
        let u = random_field(5, seed);
        let h0 = hamiltonian(&u, Sign::Defocusing, &d);
        let h1 = hamiltonian(&gauge_forward(&u, t), Sign::Defocusing, &d);
        prop_assert!((h0 - h1).abs() <= 1e-12 * h0.abs().max(1.0));
    }

    #[test]
    fn nonlinearity_matches_oracle(seed in any::<u64>(), kmax in 0usize..6) {
        let u = random_field(kmax, seed);
        prop_assert!(nonlinearity(&u).max_abs_diff(&direct_nonlinearity(&u)) <= 1e-12);
    }
}
