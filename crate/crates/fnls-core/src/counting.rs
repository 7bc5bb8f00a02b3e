//! Exhaustive enumeration of the resonant quadruple sets
//! `S = {k = k1−k2+k3, k2 ∉ {k1,k3}, floor(Φ) = m, |k| ≤ N, |k_j| ≤ N_j}`
//! and empirical audits of the counting bounds they satisfy.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::spectral::{abs_pow, bracket, Dispersion};

pub const MAX_ENUMERATION_N: u32 = 4096;
pub const DEFAULT_BAD_CONSTANT: f64 = 0.125;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountingQuery {
    pub n: u32,
    pub n1: u32,
    pub n2: u32,
    pub n3: u32,
    pub m: i64,
    pub alpha: f64,
    pub bad_constant: f64,
    pub gamma: Option<f64>,
}

impl CountingQuery {
    pub fn new(n: u32, n1: u32, n2: u32, n3: u32, m: i64, alpha: f64) -> Self {
        CountingQuery {
            n,
            n1,
            n2,
            n3,
            m,
            alpha,
            bad_constant: DEFAULT_BAD_CONSTANT,
            gamma: None,
        }
    }

    pub fn uniform(n: u32, m: i64, alpha: f64) -> Self {
        Self::new(n, n, n, n, m, alpha)
    }

    pub fn with_bad_constant(mut self, c: f64) -> Self {
        self.bad_constant = c;
        self
    }

    pub fn with_gamma(mut self, gamma: f64) -> Self {
        self.gamma = Some(gamma);
        self
    }

    pub fn validate(&self) -> Result<()> {
        Dispersion::new(self.alpha)?;
        for (name, v) in [("N1", self.n1), ("N2", self.n2), ("N3", self.n3)] {
            if v < 1 || v > self.n {
                return invalid(format!("{name} = {v} must lie in [1, N = {}]", self.n));
            }
        }
        if !(self.bad_constant > 0.0 && self.bad_constant <= 0.5) {
            return invalid(format!(
                "bad constant must lie in (0, 1/2], got {}",
                self.bad_constant
            ));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0) {
                return invalid(format!("Gamma must be positive, got {g}"));
            }
        }
        Ok(())
    }

    /// Caps `[N1, N2, N3]`.
    pub fn caps(&self) -> [u32; 3] {
        [self.n1, self.n2, self.n3]
    }

    /// `(N_min, N_med, N_max)` of `N1, N2, N3`.
    pub fn sorted_caps(&self) -> (f64, f64, f64) {
        let mut c = self.caps();
        c.sort_unstable();
        (c[0] as f64, c[1] as f64, c[2] as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Quad {
    pub k: i64,
    pub k1: i64,
    pub k2: i64,
    pub k3: i64,
}

impl Quad {
    pub fn coord(&self, axis: Axis) -> i64 {
        match axis {
            Axis::K => self.k,
            Axis::K1 => self.k1,
            Axis::K2 => self.k2,
            Axis::K3 => self.k3,
        }
    }

    pub fn phi(&self, alpha: f64) -> f64 {
        crate::picard::resonance(alpha, self.k, self.k1, self.k2, self.k3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    K,
    K1,
    K2,
    K3,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::K, Axis::K1, Axis::K2, Axis::K3];

    pub fn label(self) -> &'static str {
        match self {
            Axis::K => "k",
            Axis::K1 => "k1",
            Axis::K2 => "k2",
            Axis::K3 => "k3",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuadSet {
    pub query: CountingQuery,
    /// Sorted lexicographically by `(k, k1, k2, k3)`.
    pub quads: Vec<Quad>,
}

impl QuadSet {
    pub fn len(&self) -> usize {
        self.quads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.quads.is_empty()
    }

    fn filtered(&self, keep: impl Fn(&Quad) -> bool) -> QuadSet {
        QuadSet {
            query: self.query,
            quads: self.quads.iter().copied().filter(|q| keep(q)).collect(),
        }
    }
}

/// Enumerates quads within the query's bounds whose resonance satisfies `accept`.
///
/// Only the positivity of the caps is required, so relabeled queries with
/// caps exceeding `N` can be enumerated as well.
pub fn enumerate_where(q: &CountingQuery, accept: impl Fn(f64) -> bool + Sync) -> Result<QuadSet> {
    let biggest = q.n.max(q.n1).max(q.n2).max(q.n3);
    if biggest > MAX_ENUMERATION_N {
        let cost = (2 * q.n as u128 + 1) * (2 * q.n1 as u128 + 1) * (2 * q.n3 as u128 + 1);
        return Err(Error::SizeGuard {
            estimated_cost: cost,
            limit: {
                let l = 2 * MAX_ENUMERATION_N as u128 + 1;
                l * l * l
            },
        });
    }
    if q.n1 == 0 || q.n2 == 0 || q.n3 == 0 {
        return invalid("frequency caps must be positive");
    }
    Dispersion::new(q.alpha)?;
    let alpha = q.alpha;
    let top = (2 * biggest + 1) as usize * 2;
    let pw: Vec<f64> = (0..=top).map(|x| abs_pow(x as f64, alpha)).collect();
    let p = |x: i64| pw[x.unsigned_abs() as usize];
    let (n, n1, n2, n3) = (q.n as i64, q.n1 as i64, q.n2 as i64, q.n3 as i64);
    let quads: Vec<Quad> = (-n..=n)
        .into_par_iter()
        .flat_map_iter(|k| {
            let mut out = Vec::new();
            let pk = p(k);
            for k1 in -n1..=n1 {
                let p1 = p(k1);
                for k3 in -n3..=n3 {
                    let k2 = k1 + k3 - k;
                    if k2.abs() > n2 || k2 == k1 || k2 == k3 {
                        continue;
                    }
                    // same evaluation order as `Quad::phi`
                    let phi = p1 - p(k2) + p(k3) - pk;
                    if accept(phi) {
                        out.push(Quad { k, k1, k2, k3 });
                    }
                }
            }
            out
        })
        .collect();
    Ok(QuadSet { query: *q, quads })
}

/// The set `S` of the query, with window `floor(Φ) = m`.
#[allow(non_snake_case)]
pub fn enumerate_S(q: &CountingQuery) -> Result<QuadSet> {
    q.validate()?;
    let m = q.m as f64;
    enumerate_where(q, move |phi| phi.floor() == m)
}

/// Alias of [`enumerate_S`].
pub fn enumerate_s(q: &CountingQuery) -> Result<QuadSet> {
    enumerate_S(q)
}

/// `|S_fixed|`: quads agreeing with every given coordinate.
pub fn slice_count(s: &QuadSet, fixed: &[(Axis, i64)]) -> usize {
    s.quads
        .iter()
        .filter(|q| fixed.iter().all(|&(a, v)| q.coord(a) == v))
        .count()
}

/// Sizes of all nonempty slices obtained by fixing `axes`.
pub fn slice_counts(s: &QuadSet, axes: &[Axis]) -> HashMap<Vec<i64>, usize> {
    let mut map = HashMap::new();
    for q in &s.quads {
        let key: Vec<i64> = axes.iter().map(|&a| q.coord(a)).collect();
        *map.entry(key).or_insert(0) += 1;
    }
    map
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pair {
    /// Slices `S_{k k2}`; bad means `|2k1 − (k+k2)| < c|k+k2|`.
    KK2,
    /// Slices `S_{k1 k3}`; bad means `|2k − (k1+k3)| < c|k1+k3|`.
    K1K3,
}

pub fn is_bad(q: &Quad, pair: Pair, c: f64) -> bool {
    let (lhs, rhs) = match pair {
        Pair::KK2 => (2 * q.k1 - (q.k + q.k2), q.k + q.k2),
        Pair::K1K3 => (2 * q.k - (q.k1 + q.k3), q.k1 + q.k3),
    };
    (lhs.abs() as f64) < c * rhs.abs() as f64
}

/// Splits `s` into (good, bad) with the query's bad constant.
pub fn classify_good_bad(s: &QuadSet, pair: Pair) -> (QuadSet, QuadSet) {
    let c = s.query.bad_constant;
    (
        s.filtered(|q| !is_bad(q, pair, c)),
        s.filtered(|q| is_bad(q, pair, c)),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TieBreak {
    /// Among indices sharing the largest cap, take the largest `|k_j|`.
    LargestAbs,
    /// Among indices sharing the largest cap, take the first.
    FirstIndex,
}

/// `k_max`: the frequency among `(k1,k2,k3)` whose cap is `N_max`.
pub fn k_max(q: &Quad, caps: [u32; 3], tie: TieBreak) -> i64 {
    let ks = [q.k1, q.k2, q.k3];
    let top = *caps.iter().max().unwrap();
    let mut best: Option<i64> = None;
    for j in 0..3 {
        if caps[j] != top {
            continue;
        }
        best = match (best, tie) {
            (None, _) => Some(ks[j]),
            (Some(b), TieBreak::LargestAbs) if ks[j].abs() > b.abs() => Some(ks[j]),
            (b, _) => b,
        };
    }
    best.unwrap()
}

/// `B_Γ ∩ S = {|k_max| ≤ Γ < |k|}`.
pub fn gamma_restrict(s: &QuadSet, gamma: f64) -> Result<QuadSet> {
    gamma_restrict_with(s, gamma, TieBreak::LargestAbs)
}

pub fn gamma_restrict_with(s: &QuadSet, gamma: f64, tie: TieBreak) -> Result<QuadSet> {
    if !(gamma > 0.0) {
        return invalid(format!("Gamma must be positive, got {gamma}"));
    }
    let caps = s.query.caps();
    let (_, nmed, _) = s.query.sorted_caps();
    let out = s.filtered(|q| {
        let km = k_max(q, caps, tie).abs() as f64;
        km <= gamma && gamma < q.k.abs() as f64
    });
    for q in &out.quads {
        let k = q.k.abs() as f64;
        let km = k_max(q, caps, tie).abs() as f64;
        assert!(
            gamma <= k && k <= gamma + 2.0 * nmed && gamma - 2.0 * nmed <= km && km <= gamma,
            "interval confinement violated by {q:?}"
        );
    }
    Ok(out)
}

/// Counting statements that can be audited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LemmaId {
    /// Two-index slices `S_{kk1}, S_{kk3}, S_{k1k2}, S_{k2k3}`.
    Counting1,
    /// One-index slices `S_k, S_{k1}, S_{k2}, S_{k3}`.
    CountingCor,
    /// Good/bad parts of `S_{kk2}` and `S_{k1k3}`.
    Counting2,
    /// Cap-dependent bounds on the bad parts and on the full slices.
    CorBad,
    /// The total count `|S|`.
    LemS,
    /// Counts under the Γ condition.
    Gamma,
}

impl LemmaId {
    pub const ALL: [LemmaId; 6] = [
        LemmaId::Counting1,
        LemmaId::CountingCor,
        LemmaId::Counting2,
        LemmaId::CorBad,
        LemmaId::LemS,
        LemmaId::Gamma,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LemmaId::Counting1 => "counting1",
            LemmaId::CountingCor => "counting_cor",
            LemmaId::Counting2 => "counting2",
            LemmaId::CorBad => "cor_bad",
            LemmaId::LemS => "lem_s",
            LemmaId::Gamma => "gamma",
        }
    }
}

impl std::str::FromStr for LemmaId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace([':', '-', '.'], "_");
        Ok(match norm.as_str() {
            "counting1" | "lma_counting1" => LemmaId::Counting1,
            "counting_cor" | "cor_counting" => LemmaId::CountingCor,
            "counting2" | "lem_counting2" => LemmaId::Counting2,
            "cor_bad" => LemmaId::CorBad,
            "lem_s" | "s" => LemmaId::LemS,
            "gamma" | "lma_gamma" => LemmaId::Gamma,
            _ => return Err(Error::UnknownLemma(s.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditRow {
    pub lemma_id: String,
    pub alpha: f64,
    pub n: u32,
    pub n1: u32,
    pub n2: u32,
    pub n3: u32,
    pub m: i64,
    pub gamma: Option<f64>,
    /// Count (or squared norm) and bound at the slice attaining the largest ratio.
    pub count: f64,
    pub bound: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleConstant {
    pub n: u32,
    pub constant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub lemma: String,
    pub alpha: f64,
    pub rows: Vec<AuditRow>,
    /// Largest ratio per scale `N`, ascending in `N`.
    pub per_scale: Vec<ScaleConstant>,
    pub max_constant: f64,
    /// Largest `C(N_b)/C(N_a)` over scales `N_a < N_b ≤ 8 N_a`.
    pub max_growth: f64,
    /// Set when `max_growth ≥ 2`.
    pub flagged: bool,
}

impl AuditReport {
    pub fn from_rows(lemma: &str, alpha: f64, rows: Vec<AuditRow>) -> Self {
        let mut scales: Vec<u32> = rows.iter().map(|r| r.n).collect();
        scales.sort_unstable();
        scales.dedup();
        let per_scale: Vec<ScaleConstant> = scales
            .iter()
            .map(|&n| ScaleConstant {
                n,
                constant: rows
                    .iter()
                    .filter(|r| r.n == n)
                    .map(|r| r.ratio)
                    .fold(0.0, f64::max),
            })
            .collect();
        let max_constant = per_scale.iter().map(|s| s.constant).fold(0.0, f64::max);
        let mut max_growth: f64 = 1.0;
        for (i, a) in per_scale.iter().enumerate() {
            for b in &per_scale[i + 1..] {
                if b.n as u64 <= 8 * a.n as u64 && a.constant > 0.0 {
                    max_growth = max_growth.max(b.constant / a.constant);
                }
            }
        }
        AuditReport {
            lemma: lemma.to_string(),
            alpha,
            rows,
            per_scale,
            max_constant,
            max_growth,
            flagged: max_growth >= 2.0,
        }
    }
}

pub(crate) fn ln(x: f64) -> f64 {
    x.ln()
}

/// Largest `count/bound` over slices along `axes`, with the attaining pair.
fn worst_slice(
    s: &QuadSet,
    axes: &[Axis],
    bound: impl Fn(&[i64]) -> f64,
) -> (f64, f64, f64) {
    let counts = slice_counts(s, axes);
    let mut keys: Vec<&Vec<i64>> = counts.keys().collect();
    keys.sort();
    let mut best = (0.0, bound(&vec![0; axes.len()]).max(f64::MIN_POSITIVE), 0.0);
    for key in keys {
        let c = counts[key] as f64;
        let b = bound(key);
        let r = c / b;
        if r > best.2 {
            best = (c, b, r);
        }
    }
    best
}

pub(crate) fn row(lemma: &str, q: &CountingQuery, (count, bound, ratio): (f64, f64, f64)) -> AuditRow {
    AuditRow {
        lemma_id: lemma.to_string(),
        alpha: q.alpha,
        n: q.n,
        n1: q.n1,
        n2: q.n2,
        n3: q.n3,
        m: q.m,
        gamma: q.gamma,
        count,
        bound,
        ratio,
    }
}

/// Rows for one lemma on one enumerated set.
pub fn audit_set(lemma: LemmaId, s: &QuadSet) -> Result<Vec<AuditRow>> {
    let q = &s.query;
    let a = q.alpha;
    let (n, n1, n2, n3) = (q.n as f64, q.n1 as f64, q.n2 as f64, q.n3 as f64);
    let e = 2.0 - a;
    let h = 1.0 - a / 2.0;
    let mut rows = Vec::new();
    match lemma {
        LemmaId::Counting1 => {
            let c23 = n2.min(n3).powf(e);
            let c12 = n1.min(n2).powf(e);
            rows.push(row("counting1:S_kk1", q, worst_slice(s, &[Axis::K, Axis::K1], |v| {
                c23 / bracket(v[1] - v[0]) + 1.0
            })));
            rows.push(row("counting1:S_kk3", q, worst_slice(s, &[Axis::K, Axis::K3], |v| {
                c12 / bracket(v[0] - v[1]) + 1.0
            })));
            rows.push(row("counting1:S_k1k2", q, worst_slice(s, &[Axis::K1, Axis::K2], |v| {
                n3.powf(e) / bracket(v[0] - v[1]) + 1.0
            })));
            rows.push(row("counting1:S_k2k3", q, worst_slice(s, &[Axis::K2, Axis::K3], |v| {
                n1.powf(e) / bracket(v[0] - v[1]) + 1.0
            })));
        }
        LemmaId::CountingCor => {
            let bk = (n2.min(n3).powf(e) * ln(n1) + n1).min(n1.min(n2).powf(e) * ln(n3) + n3);
            let bk1 = (n3.powf(e) * ln(n2) + n2).min(n2.powf(e) * ln(n3) + n3);
            let bk2 = (n3.powf(e) * ln(n1) + n1).min(n1.powf(e) * ln(n3) + n3);
            let bk3 = (n1.powf(e) * ln(n2) + n2).min(n2.powf(e) * ln(n1) + n1);
            for (name, axis, b) in [
                ("counting_cor:S_k", Axis::K, bk),
                ("counting_cor:S_k1", Axis::K1, bk1),
                ("counting_cor:S_k2", Axis::K2, bk2),
                ("counting_cor:S_k3", Axis::K3, bk3),
            ] {
                rows.push(row(name, q, worst_slice(s, &[axis], |_| b)));
            }
        }
        LemmaId::Counting2 => {
            let (good_kk2, bad_kk2) = classify_good_bad(s, Pair::KK2);
            let (good_k1k3, bad_k1k3) = classify_good_bad(s, Pair::K1K3);
            rows.push(row("counting2:good_kk2", q, worst_slice(&good_kk2, &[Axis::K, Axis::K2], |_| 1.0)));
            rows.push(row("counting2:good_k1k3", q, worst_slice(&good_k1k3, &[Axis::K1, Axis::K3], |_| 1.0)));
            rows.push(row("counting2:bad_kk2", q, worst_slice(&bad_kk2, &[Axis::K, Axis::K2], |v| {
                ((v[0] + v[1]).abs() as f64).powf(h) + 1.0
            })));
            rows.push(row("counting2:bad_k1k3", q, worst_slice(&bad_k1k3, &[Axis::K1, Axis::K3], |v| {
                ((v[0] + v[1]).abs() as f64).powf(h) + 1.0
            })));
        }
        LemmaId::CorBad => {
            let (_, bad_kk2) = classify_good_bad(s, Pair::KK2);
            let (_, bad_k1k3) = classify_good_bad(s, Pair::K1K3);
            let b13 = n1.min(n3).powf(h);
            let b02 = n.min(n2).powf(h);
            rows.push(row("cor_bad:bad_kk2", q, worst_slice(&bad_kk2, &[Axis::K, Axis::K2], |_| b13)));
            rows.push(row("cor_bad:bad_k1k3", q, worst_slice(&bad_k1k3, &[Axis::K1, Axis::K3], |_| b02)));
            rows.push(row("cor_bad:S_kk2", q, worst_slice(s, &[Axis::K, Axis::K2], |_| b13)));
            rows.push(row("cor_bad:S_k1k3", q, worst_slice(s, &[Axis::K1, Axis::K3], |_| b02)));
        }
        LemmaId::LemS => {
            let b = (n3.powf(e) * ln(n1.max(n2)) * n1.min(n2) + n1 * n2)
                .min(n1.powf(e) * ln(n2.max(n3)) * n2.min(n3) + n2 * n3);
            rows.push(row("lem_s:S", q, worst_slice(s, &[], |_| b)));
        }
        LemmaId::Gamma => {
            let gamma = q
                .gamma
                .ok_or_else(|| Error::InvalidParameter("Gamma audit requires Gamma".into()))?;
            let bg = gamma_restrict(s, gamma)?;
            let (nmin, nmed, _) = q.sorted_caps();
            rows.push(row("gamma:B_S", q, worst_slice(&bg, &[], |_| nmin * nmed)));
            for (name, axes) in [
                ("gamma:B_S_k", &[Axis::K][..]),
                ("gamma:B_S_k1", &[Axis::K1][..]),
                ("gamma:B_S_k2", &[Axis::K2][..]),
                ("gamma:B_S_k3", &[Axis::K3][..]),
                ("gamma:B_S_kk2", &[Axis::K, Axis::K2][..]),
                ("gamma:B_S_k1k3", &[Axis::K1, Axis::K3][..]),
            ] {
                rows.push(row(name, q, worst_slice(&bg, axes, |_| nmed)));
            }
        }
    }
    Ok(rows)
}

/// Audits `lemma` over `sweep`, which must span at least three scales `N`.
pub fn lemma_audit(lemma: LemmaId, alpha: f64, sweep: &[CountingQuery]) -> Result<AuditReport> {
    Ok(audit_many(&[lemma], alpha, sweep)?.remove(0))
}

/// Audits several lemmas, enumerating each query once.
pub fn audit_many(
    lemmas: &[LemmaId],
    alpha: f64,
    sweep: &[CountingQuery],
) -> Result<Vec<AuditReport>> {
    let mut scales: Vec<u32> = sweep.iter().map(|q| q.n).collect();
    scales.sort_unstable();
    scales.dedup();
    if scales.len() < 3 {
        return invalid("audit sweep must cover at least three scales");
    }
    let mut rows: Vec<Vec<AuditRow>> = vec![Vec::new(); lemmas.len()];
    for q in sweep {
        if q.alpha != alpha {
            return invalid("sweep query alpha differs from audit alpha");
        }
        let s = enumerate_S(q)?;
        for (i, &l) in lemmas.iter().enumerate() {
            if l == LemmaId::Gamma && q.gamma.is_none() {
                continue;
            }
            rows[i].extend(audit_set(l, &s)?);
        }
    }
    Ok(lemmas
        .iter()
        .zip(rows)
        .map(|(l, r)| AuditReport::from_rows(l.name(), alpha, r))
        .collect())
}

/// Standard dyadic sweep: shapes `(N,N,N)`, and one cap lowered to `N/4`,
/// windows `m ∈ ms`, optionally each with `Γ ∈ {N/4, N/2, 3N/4}`.
pub fn standard_sweep(alpha: f64, scales: &[u32], ms: &[i64], with_gamma: bool, c: f64) -> Vec<CountingQuery> {
    let mut out = Vec::new();
    for &n in scales {
        let low = (n / 4).max(1);
        let shapes = [(n, n, n), (low, n, n), (n, low, n), (n, n, low)];
        for &(a, b, d) in &shapes {
            for &m in ms {
                let q = CountingQuery::new(n, a, b, d, m, alpha).with_bad_constant(c);
                if with_gamma {
                    for g in [0.25, 0.5, 0.75] {
                        out.push(q.with_gamma(g * n as f64));
                    }
                } else {
                    out.push(q);
                }
            }
        }
    }
    out
}

/// `φ'_{b,±}(x) = α(sgn(x)|x|^{α−1} ± sgn(x−b)|x−b|^{α−1})`.
pub fn phi_prime(alpha: f64, b: f64, x: f64, plus: bool) -> f64 {
    let s = |y: f64| y.signum() * abs_pow(y, alpha - 1.0);
    let sgn = if plus { 1.0 } else { -1.0 };
    alpha * (s(x) + sgn * s(x - b))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DerivativeRegime {
    /// `|φ'_{b,−}(x)| ≳ min(|b||x|^{α−2}, |b|^{α−1})`.
    Minus,
    /// `|φ'_{b,+}(x)| ≳ |b|^{α−1}` where `|2x − b| ≥ c|b|`.
    PlusFar,
    /// `|φ'_{b,+}(x)| ≳ |b|^{α/2−1}` where `|b|^{1−α/2} ≤ |2x − b| < c|b|`.
    PlusSharp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivativeViolation {
    pub regime: DerivativeRegime,
    pub b: i64,
    pub x: i64,
    pub ratio: f64,
    pub constant: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeScan {
    /// Calibrated constants for `Minus`, `PlusFar`, `PlusSharp`.
    pub constants: [f64; 3],
    /// Smallest ratio `|φ'|/bound` over the full grid, per regime.
    pub min_ratios: [f64; 3],
    pub points: [usize; 3],
    pub violations: Vec<DerivativeViolation>,
}

/// Half-width of the reference grid used to calibrate constants.
pub const REFERENCE_B: i64 = 32;
/// Threshold `c` separating `|2x − b| ≳ |b|` from `|2x − b| ≪ |b|`.
pub const FAR_CONSTANT: f64 = 0.125;
/// Safety factor applied to the calibrated minimum ratio.
pub const CALIBRATION_MARGIN: f64 = 0.5;

fn regime_ratio(alpha: f64, b: i64, x: i64, regime: DerivativeRegime) -> Option<f64> {
    if b == 0 || x == 0 {
        return None;
    }
    let bf = b as f64;
    let xf = x as f64;
    let ab = bf.abs();
    match regime {
        DerivativeRegime::Minus => {
            let bound = (ab * abs_pow(xf, alpha - 2.0)).min(abs_pow(bf, alpha - 1.0));
            Some(phi_prime(alpha, bf, xf, false).abs() / bound)
        }
        DerivativeRegime::PlusFar => {
            let d = (2 * x - b).abs() as f64;
            (d >= FAR_CONSTANT * ab)
                .then(|| phi_prime(alpha, bf, xf, true).abs() / abs_pow(bf, alpha - 1.0))
        }
        DerivativeRegime::PlusSharp => {
            let d = (2 * x - b).abs() as f64;
            (d < FAR_CONSTANT * ab && d >= abs_pow(bf, 1.0 - alpha / 2.0))
                .then(|| phi_prime(alpha, bf, xf, true).abs() / abs_pow(bf, alpha / 2.0 - 1.0))
        }
    }
}

/// Evaluates the derivative lower bounds on `b ∈ b_range\{0}`, `x ∈ x_range\{0}`.
///
/// The constant for each regime is `CALIBRATION_MARGIN` times the smallest
/// ratio on the reference grid `|b| ≤ 32`, `|x| ≤ 64` (the sharp regime is
/// empty for `|b| ≤ 16` at α = 3/2); points of the full grid
/// falling below it are reported.
pub fn phi_derivative_scan(
    alpha: f64,
    b_range: (i64, i64),
    x_range: (i64, i64),
) -> Result<DerivativeScan> {
    if !(alpha > 1.0 && alpha < 2.0) {
        return invalid(format!("alpha must lie in (1,2), got {alpha}"));
    }
    let regimes = [
        DerivativeRegime::Minus,
        DerivativeRegime::PlusFar,
        DerivativeRegime::PlusSharp,
    ];
    let mut constants = [0.0; 3];
    for (i, &r) in regimes.iter().enumerate() {
        let mut min = f64::INFINITY;
        for b in -REFERENCE_B..=REFERENCE_B {
            for x in -2 * REFERENCE_B..=2 * REFERENCE_B {
                if let Some(v) = regime_ratio(alpha, b, x, r) {
                    min = min.min(v);
                }
            }
        }
        constants[i] = if min.is_finite() { CALIBRATION_MARGIN * min } else { 0.0 };
    }
    let mut min_ratios = [f64::INFINITY; 3];
    let mut points = [0usize; 3];
    let mut violations = Vec::new();
    for b in b_range.0..=b_range.1 {
        for x in x_range.0..=x_range.1 {
            for (i, &r) in regimes.iter().enumerate() {
                if let Some(v) = regime_ratio(alpha, b, x, r) {
                    points[i] += 1;
                    min_ratios[i] = min_ratios[i].min(v);
                    if v < constants[i] {
                        violations.push(DerivativeViolation {
                            regime: r,
                            b,
                            x,
                            ratio: v,
                            constant: constants[i],
                        });
                    }
                }
            }
        }
    }
    Ok(DerivativeScan {
        constants,
        min_ratios,
        points,
        violations,
    })
}
