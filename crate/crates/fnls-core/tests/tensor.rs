use fnls_core::counting::{enumerate_S, standard_sweep, CountingQuery, Quad};
use fnls_core::rng::{complex_gaussian, real_gaussian, stream_rng, SimRng};
use fnls_core::spectral::C64;
use fnls_core::stats::ls_slope;
use fnls_core::tensor::*;
use fnls_core::Error;
use nalgebra::DMatrix;
use rand::Rng;

const TOL: f64 = 1e-9;

fn random_sparse(axes: &[&str], range: (i64, i64), density: f64, rng: &mut SimRng) -> SparseTensor {
    let r = axes.len();
    let width = (range.1 - range.0 + 1) as usize;
    let total = width.pow(r as u32);
    let mut entries = Vec::new();
    for flat in 0..total {
        if rng.random::<f64>() >= density {
            continue;
        }
        let mut key = Vec::with_capacity(r);
        let mut f = flat;
        for _ in 0..r {
            key.push(range.0 + (f % width) as i64);
            f /= width;
        }
        entries.push((key, complex_gaussian(rng)));
    }
    SparseTensor::from_entries(axes, &vec![range; r], entries).unwrap()
}

fn exact(t: &SparseTensor, b: &[&str], c: &[&str]) -> f64 {
    unfold_norm_exact(t, b, c).unwrap()
}

/// All ordered splits of `labels` into two lists.
fn splits<'a>(labels: &[&'a str]) -> Vec<(Vec<&'a str>, Vec<&'a str>)> {
    (0u32..1 << labels.len())
        .map(|mask| {
            let mut x = Vec::new();
            let mut y = Vec::new();
            for (i, l) in labels.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    x.push(*l);
                } else {
                    y.push(*l);
                }
            }
            (x, y)
        })
        .collect()
}

#[test]
fn identity_has_norm_one() {
    let id = SparseTensor::identity("k", "kp", (-10, 10)).unwrap();
    assert!((unfold_norm(&id, &["k"], &["kp"]).unwrap() - 1.0).abs() < 1e-12);
    assert!((id.hs_norm() - 21f64.sqrt()).abs() < 1e-12);
}

#[test]
fn construction_rules() {
    let b = [(0, 3), (0, 3)];
    let t = SparseTensor::from_entries(
        &["a", "b"],
        &b,
        vec![
            (vec![1, 2], C64::new(1.0, 0.0)),
            (vec![1, 2], C64::new(-1.0, 0.0)),
            (vec![0, 0], C64::new(2.0, 1.0)),
        ],
    )
    .unwrap();
    assert_eq!(t.nnz(), 1);
    assert_eq!(t.get(&[0, 0]), C64::new(2.0, 1.0));
    assert_eq!(t.get(&[1, 2]), C64::new(0.0, 0.0));
    assert!(SparseTensor::from_entries(&["a", "a"], &b, vec![]).is_err());
    assert!(SparseTensor::from_entries(&["a", "b"], &b, vec![(vec![4, 0], C64::new(1.0, 0.0))]).is_err());
    assert!(matches!(t.unfold(&["a"], &["c"]), Err(Error::AxisMismatch(_))));
    assert!(matches!(t.unfold(&["a"], &["a", "b"]), Err(Error::AxisMismatch(_))));
}

#[test]
fn unfold_symmetry_and_frobenius_domination() {
    let mut rng = stream_rng(1, 0);
    let labels = ["k", "k1", "k2", "k3"];
    for _ in 0..20 {
        let t = random_sparse(&labels, (-3, 3), 0.05, &mut rng);
        let f = t.hs_norm();
        for (x, y) in splits(&labels) {
            let a = unfold_norm(&t, &x, &y).unwrap();
            let b = unfold_norm(&t, &y, &x).unwrap();
            assert!((a - b).abs() <= 1e-6 * a.max(1e-300), "{x:?}|{y:?}: {a} vs {b}");
            assert!(a <= f * (1.0 + 1e-12));
        }
    }
}

#[test]
fn power_iteration_matches_svd() {
    let mut rng = stream_rng(2, 0);
    for _ in 0..10 {
        let t = random_sparse(&["a", "b", "c"], (0, 7), 0.2, &mut rng);
        for (x, y) in [(vec!["a"], vec!["b", "c"]), (vec!["a", "b"], vec!["c"])] {
            let p = unfold_norm(&t, &x, &y).unwrap();
            let e = exact(&t, &x, &y);
            assert!((p - e).abs() <= 1e-6 * e, "{p} vs {e}");
        }
    }
}

#[test]
fn non_convergence_carries_a_bracket() {
    let mut rng = stream_rng(3, 0);
    let t = random_sparse(&["a", "b"], (0, 40), 0.5, &mut rng);
    let u = t.unfold(&["a"], &["b"]).unwrap();
    let exact = u.exact_norm().unwrap();
    match u.spectral_norm(&PowerIteration { tol: 1e-15, max_iter: 2 }) {
        Err(e @ Error::NonConvergence { lower, upper, iterations }) => {
            assert!(e.is_numerical());
            assert_eq!(iterations, 2);
            assert!(lower <= exact * (1.0 + 1e-12) && exact <= upper * (1.0 + 1e-12));
        }
        other => panic!("expected non-convergence, got {other:?}"),
    }
}

#[test]
fn base_tensor_support() {
    let q = CountingQuery::uniform(12, 1, 1.5);
    let s = enumerate_S(&q).unwrap();
    let t = base_tensor(&q).unwrap();
    assert_eq!(t.nnz(), s.len());
    assert!((t.hs_norm().powi(2) - s.len() as f64).abs() < 1e-9);
    for quad in &s.quads {
        assert_eq!(t.get(&[quad.k, quad.k1, quad.k2, quad.k3]), C64::new(1.0, 0.0));
    }
    // α = 2: support matches Φ = −2(k1−k2)(k3−k2)
    let q = CountingQuery::uniform(5, -6, 2.0);
    let t = base_tensor(&q).unwrap();
    let mut count = 0;
    for k1 in -5i64..=5 {
        for k2 in -5i64..=5 {
            for k3 in -5i64..=5 {
                let k = k1 - k2 + k3;
                if k.abs() > 5 || k2 == k1 || k2 == k3 {
                    continue;
                }
                let member = -2 * (k1 - k2) * (k3 - k2) == -6;
                assert_eq!(t.get(&[k, k1, k2, k3]) != C64::new(0.0, 0.0), member);
                count += member as usize;
            }
        }
    }
    assert_eq!(count, t.nnz());
}

#[test]
fn empty_support() {
    let q = CountingQuery::uniform(1, 10, 1.5);
    let t = base_tensor(&q).unwrap();
    assert!(t.is_empty());
    assert_eq!(t.hs_norm(), 0.0);
    assert_eq!(unfold_norm(&t, &["k", "k1"], &["k2", "k3"]).unwrap(), 0.0);
    let s = enumerate_S(&q).unwrap();
    for lemma in [TensorLemma::Tensor1, TensorLemma::Tensor2, TensorLemma::Tensor3, TensorLemma::Tensor4] {
        for r in audit_tensor_set(lemma, &s).unwrap() {
            assert_eq!(r.count, 0.0);
            assert_eq!(r.ratio, 0.0);
        }
    }
}

#[test]
fn semiproduct_with_identity() {
    let mut rng = stream_rng(4, 0);
    let h = random_sparse(&["a", "j"], (-4, 4), 0.5, &mut rng);
    let id = SparseTensor::identity("j", "k", (-4, 4)).unwrap();
    let p = semiproduct(&h, &id, &["j"]).unwrap();
    assert_eq!(p.axes(), &["a".to_string(), "k".to_string()]);
    assert_eq!(p.nnz(), h.nnz());
    for (key, v) in h.entries() {
        assert_eq!(p.get(key), v);
    }
}

#[test]
fn semiproduct_is_matrix_product() {
    let mut rng = stream_rng(5, 0);
    let a = DMatrix::from_fn(32, 32, |_, _| complex_gaussian(&mut rng));
    let b = DMatrix::from_fn(32, 32, |_, _| complex_gaussian(&mut rng));
    let ta = SparseTensor::from_matrix("i", "j", &a).unwrap();
    let tb = SparseTensor::from_matrix("j", "k", &b).unwrap();
    let p = semiproduct(&ta, &tb, &["j"]).unwrap();
    let ab = &a * &b;
    for i in 0..32 {
        for k in 0..32 {
            assert!((p.get(&[i, k]) - ab[(i as usize, k as usize)]).norm() < 1e-12);
        }
    }
}

#[test]
fn semiproduct_axis_checks() {
    let a = SparseTensor::identity("i", "j", (0, 3)).unwrap();
    let b = SparseTensor::identity("j", "k", (0, 4)).unwrap();
    assert!(matches!(semiproduct(&a, &b, &["j"]), Err(Error::AxisMismatch(_))));
    let c = SparseTensor::identity("j", "k", (0, 3)).unwrap();
    assert!(matches!(semiproduct(&a, &c, &[]), Err(Error::AxisMismatch(_))));
    assert!(matches!(semiproduct(&a, &c, &["i"]), Err(Error::AxisMismatch(_))));
}

#[test]
fn semiproduct_inequality_all_partitions() {
    // h1 on (a, b, c), h2 on (c, d, e), contraction over c
    let mut rng = stream_rng(6, 0);
    let mut checked = 0;
    for _ in 0..100 {
        let h1 = random_sparse(&["a", "b", "c"], (0, 4), 0.3, &mut rng);
        let h2 = random_sparse(&["c", "d", "e"], (0, 4), 0.3, &mut rng);
        let h = semiproduct(&h1, &h2, &["c"]).unwrap();
        for (x1, y1) in splits(&["a", "b"]) {
            for (x2, y2) in splits(&["d", "e"]) {
                let x: Vec<&str> = x1.iter().chain(&x2).copied().collect();
                let y: Vec<&str> = y1.iter().chain(&y2).copied().collect();
                let lhs = exact(&h, &x, &y);
                let mut b1 = x1.clone();
                b1.push("c");
                let mut c2 = vec!["c"];
                c2.extend(&y2);
                let rhs = exact(&h1, &b1, &y1) * exact(&h2, &x2, &c2);
                assert!(lhs <= rhs * (1.0 + TOL), "{x:?}->{y:?}: {lhs} > {rhs}");
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 1600);
}

#[test]
fn fiber_product_bound() {
    // ‖h1_{k1k1'} h2_{k2k1'}‖_{k1'→k1k2} ≤ ‖h1‖_{k1'→k1} ‖h2‖_{k1'→k2}
    let mut rng = stream_rng(7, 0);
    for _ in 0..100 {
        let h1 = random_sparse(&["k1", "k1p"], (-4, 4), 0.4, &mut rng);
        let h2 = random_sparse(&["k2", "k1p"], (-4, 4), 0.4, &mut rng);
        let f = fiber_product(&h1, &h2, &["k1p"]).unwrap();
        let lhs = exact(&f, &["k1p"], &["k1", "k2"]);
        let rhs = exact(&h1, &["k1p"], &["k1"]) * exact(&h2, &["k1p"], &["k2"]);
        assert!(lhs <= rhs * (1.0 + TOL));
    }
}

#[test]
fn weighted_product_bound() {
    // h1 ≥ 0 supported in |k − k'| ≤ L; weight (1 + |k − k''|/L)^κ with κ = 2
    let (l, kappa) = (3.0, 2.0);
    let c = weighted_product_constant(kappa);
    assert_eq!(c, 4.0);
    let mut rng = stream_rng(8, 0);
    for _ in 0..100 {
        let mut e1 = Vec::new();
        for k in -8i64..=8 {
            for kp in -8i64..=8 {
                if (k - kp).abs() as f64 <= l && rng.random::<f64>() < 0.6 {
                    e1.push((vec![k, kp], C64::new(real_gaussian(&mut rng).abs(), 0.0)));
                }
            }
        }
        let h1 = SparseTensor::from_entries(&["k", "kp"], &[(-8, 8), (-8, 8)], e1).unwrap();
        let h2 = random_sparse(&["kp", "kpp"], (-8, 8), 0.3, &mut rng);
        let h = semiproduct(&h1, &h2, &["kp"]).unwrap();
        let lhs = weighted_frobenius(&h, l, kappa).unwrap();
        let rhs = c * exact(&h1, &["kp"], &["k"]) * weighted_frobenius(&h2, l, kappa).unwrap();
        assert!(lhs <= rhs * (1.0 + TOL), "{lhs} > {rhs}");
    }
    let r3 = SparseTensor::zeros(&["a", "b", "c"], &[(0, 1); 3]).unwrap();
    assert!(weighted_frobenius(&r3, 1.0, 1.0).is_err());
}

#[test]
fn single_point_contraction() {
    // H = 2g, so the 99th percentile of ‖H‖/2 is that of |g|: √(ln 100) for E|g|² = 1
    let h = SparseTensor::from_entries(
        &["b", "c", "a"],
        &[(0, 0), (0, 0), (3, 3)],
        vec![(vec![0, 0, 3], C64::new(2.0, 0.0))],
    )
    .unwrap();
    let mut rng = stream_rng(9, 0);
    let r = random_contraction_check(&h, &["b"], &["c"], &[("a", Conj::Plain)], 40_000, &mut rng).unwrap();
    assert!((r.max_partition_norm - 2.0).abs() < 1e-12);
    let expect = 100f64.ln().sqrt();
    assert!((r.ratio - expect).abs() < 0.04, "{} vs {expect}", r.ratio);
    assert!((r.median - 2.0 * 2f64.ln().sqrt()).abs() < 0.03);
}

#[test]
fn zero_tensor_contraction() {
    let h = SparseTensor::zeros(&["b", "c", "a"], &[(0, 2); 3]).unwrap();
    let mut rng = stream_rng(10, 0);
    let r = random_contraction_check(&h, &["b"], &["c"], &[("a", Conj::Bar)], 50, &mut rng).unwrap();
    assert_eq!(r.percentile_99, 0.0);
    assert_eq!(r.max_partition_norm, 0.0);
    assert_eq!(r.ratio, 0.0);
}

#[test]
fn pairing_is_rejected() {
    let h = SparseTensor::from_entries(
        &["b", "c", "a1", "a2"],
        &[(0, 1), (0, 1), (0, 3), (0, 3)],
        vec![
            (vec![0, 0, 1, 2], C64::new(1.0, 0.0)),
            (vec![0, 1, 2, 2], C64::new(1.0, 0.0)),
        ],
    )
    .unwrap();
    let mut rng = stream_rng(11, 0);
    let signs = [("a1", Conj::Plain), ("a2", Conj::Bar)];
    assert!(matches!(
        random_contraction_check(&h, &["b"], &["c"], &signs, 10, &mut rng),
        Err(Error::Pairing(_))
    ));
    // equal signs are not a pairing
    let same = [("a1", Conj::Plain), ("a2", Conj::Plain)];
    assert!(random_contraction_check(&h, &["b"], &["c"], &same, 10, &mut rng).is_ok());
    assert!(random_contraction_check(&h, &["b"], &["c"], &[], 10, &mut rng).is_err());
    assert!(random_contraction_check(&h, &["b"], &["a1"], &same, 10, &mut rng).is_err());
}

#[test]
fn dense_contraction_growth() {
    let mut ratios = Vec::new();
    let ms = [8i64, 16, 32];
    for &m in &ms {
        let mut rng = stream_rng(12, m as u64);
        let h = random_sparse(&["b", "c", "a1", "a2"], (0, m - 1), 1.0, &mut rng);
        let r = random_contraction_check(
            &h,
            &["b"],
            &["c"],
            &[("a1", Conj::Plain), ("a2", Conj::Plain)],
            100,
            &mut rng,
        )
        .unwrap();
        ratios.push(r.ratio);
    }
    let x: Vec<f64> = ms.iter().map(|&m| (m as f64).ln()).collect();
    let y: Vec<f64> = ratios.iter().map(|r| r.ln()).collect();
    let slope = ls_slope(&x, &y);
    assert!(slope < 0.5, "ratios {ratios:?}, exponent {slope}");
}

#[test]
fn percentile_nearest_rank() {
    let v: Vec<f64> = (1..=100).map(f64::from).collect();
    assert_eq!(percentile(&v, 0.99), 99.0);
    assert_eq!(percentile(&v, 0.5), 50.0);
    assert_eq!(percentile(&v, 1.0), 100.0);
    assert_eq!(percentile(&[3.0], 0.99), 3.0);
    assert!(percentile(&[], 0.5).is_nan());
}

#[test]
fn lemma_names() {
    for l in TensorLemma::ALL {
        assert_eq!(l.name().parse::<TensorLemma>().unwrap(), l);
    }
    assert!(matches!("tensor9".parse::<TensorLemma>(), Err(Error::UnknownLemma(_))));
}

#[test]
fn tensor_audits_on_small_sweep() {
    let sweep = standard_sweep(1.5, &[8, 16, 32], &[0, 2], true, 0.125);
    let reports = tensor_audit_many(&TensorLemma::ALL, 1.5, &sweep).unwrap();
    for r in &reports {
        assert!(r.max_constant.is_finite() && r.max_constant <= 64.0, "{}: {}", r.lemma, r.max_constant);
        assert!(!r.flagged, "{}: {:?}", r.lemma, r.per_scale);
    }
    // norms reported by the audit are exact up to the iteration tolerance
    let q = CountingQuery::uniform(16, 0, 1.5);
    let s = enumerate_S(&q).unwrap();
    let t = base_tensor_of(&s);
    let rows = audit_tensor_set(TensorLemma::Tensor2, &s).unwrap();
    let e = exact(&t, &["k", "k1"], &["k2", "k3"]).powi(2);
    assert!((rows[0].count - e).abs() <= 1e-6 * e);
    let r4 = t.restrict(|k| (k[1] + k[3]).abs() < k[2].abs());
    assert!(r4.entries().all(|(k, _)| (k[1] + k[3]).abs() < k[2].abs()));
    let _ = Quad { k: 0, k1: 0, k2: 0, k3: 0 };
    assert!(tensor_lemma_audit(TensorLemma::Tensor1, 1.5, &standard_sweep(1.5, &[8, 16], &[0], false, 0.125)).is_err());
}
