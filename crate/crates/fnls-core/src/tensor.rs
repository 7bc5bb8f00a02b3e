//! Sparse tensors on labeled integer axes, their unfolded operator norms,
//! semi-products and random contractions.
//!
//! `‖h‖_{k_B → k_C}` is the spectral norm of the matrix with rows `k_C` and
//! columns `k_B`; it equals `‖h‖_{k_C → k_B}` and is at most the Frobenius norm.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::counting::{
    enumerate_S, gamma_restrict, ln, row, AuditReport, AuditRow, CountingQuery, QuadSet,
};
use crate::error::{invalid, Error, Result};
use crate::rng::{complex_gaussian, SimRng};
use crate::spectral::C64;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// Exact SVD is used up to this many rows and columns.
pub const DENSE_LIMIT: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseTensor {
    axes: Vec<String>,
    bounds: Vec<(i64, i64)>,
    /// Flattened index tuples, `rank` integers per entry, lexicographically sorted.
    keys: Vec<i64>,
    vals: Vec<C64>,
}

/// The four-index tensors of the counting module are the main use.
pub type SparseTensor4 = SparseTensor;

impl SparseTensor {
    /// Builds a tensor, summing duplicate indices and dropping zeros.
    pub fn from_entries(
        axes: &[&str],
        bounds: &[(i64, i64)],
        entries: impl IntoIterator<Item = (Vec<i64>, C64)>,
    ) -> Result<Self> {
        let axes: Vec<String> = axes.iter().map(|s| s.to_string()).collect();
        let uniq: BTreeSet<&String> = axes.iter().collect();
        if uniq.len() != axes.len() {
            return Err(Error::AxisMismatch(format!("repeated axis label in {axes:?}")));
        }
        if bounds.len() != axes.len() {
            return Err(Error::AxisMismatch("one bound per axis required".into()));
        }
        if bounds.iter().any(|(lo, hi)| lo > hi) {
            return invalid("empty axis range");
        }
        let mut map: BTreeMap<Vec<i64>, C64> = BTreeMap::new();
        for (key, v) in entries {
            if key.len() != axes.len() {
                return Err(Error::AxisMismatch(format!(
                    "index {key:?} has wrong rank for axes {axes:?}"
                )));
            }
            for (i, (&x, &(lo, hi))) in key.iter().zip(bounds).enumerate() {
                if x < lo || x > hi {
                    return invalid(format!("index {x} outside [{lo},{hi}] on axis {}", axes[i]));
                }
            }
            *map.entry(key).or_insert(ZERO) += v;
        }
        let mut keys = Vec::new();
        let mut vals = Vec::new();
        for (k, v) in map {
            if v != ZERO {
                keys.extend_from_slice(&k);
                vals.push(v);
            }
        }
        Ok(SparseTensor {
            axes,
            bounds: bounds.to_vec(),
            keys,
            vals,
        })
    }

    pub fn zeros(axes: &[&str], bounds: &[(i64, i64)]) -> Result<Self> {
        Self::from_entries(axes, bounds, std::iter::empty())
    }

    /// `δ_{ab}` on two axes over a common range.
    pub fn identity(a: &str, b: &str, range: (i64, i64)) -> Result<Self> {
        Self::from_entries(
            &[a, b],
            &[range, range],
            (range.0..=range.1).map(|i| (vec![i, i], C64::new(1.0, 0.0))),
        )
    }

    /// Dense matrix `rows × cols` as a two-axis tensor with indices from 0.
    pub fn from_matrix(row_axis: &str, col_axis: &str, m: &DMatrix<C64>) -> Result<Self> {
        let (r, c) = m.shape();
        let mut entries = Vec::new();
        for i in 0..r {
            for j in 0..c {
                entries.push((vec![i as i64, j as i64], m[(i, j)]));
            }
        }
        Self::from_entries(
            &[row_axis, col_axis],
            &[(0, r as i64 - 1), (0, c as i64 - 1)],
            entries,
        )
    }

    pub fn rank(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[String] {
        &self.axes
    }

    pub fn bounds(&self) -> &[(i64, i64)] {
        &self.bounds
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vals.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&[i64], C64)> + '_ {
        let r = self.rank();
        self.vals
            .iter()
            .enumerate()
            .map(move |(i, &v)| (&self.keys[i * r..(i + 1) * r], v))
    }

    pub fn get(&self, key: &[i64]) -> C64 {
        let r = self.rank();
        let mut lo = 0usize;
        let mut hi = self.vals.len();
        while lo < hi {
            let mid = (lo + hi) / 2;
            match self.keys[mid * r..(mid + 1) * r].cmp(key) {
                std::cmp::Ordering::Less => lo = mid + 1,
                std::cmp::Ordering::Greater => hi = mid,
                std::cmp::Ordering::Equal => return self.vals[mid],
            }
        }
        ZERO
    }

    pub fn axis_index(&self, label: &str) -> Result<usize> {
        self.axes
            .iter()
            .position(|a| a == label)
            .ok_or_else(|| Error::AxisMismatch(format!("no axis {label:?} in {:?}", self.axes)))
    }

    /// `‖h‖_{k_A}`, the Frobenius norm.
    pub fn hs_norm(&self) -> f64 {
        self.vals.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Entries whose index satisfies `keep` (axis order as in [`Self::axes`]).
    pub fn restrict(&self, keep: impl Fn(&[i64]) -> bool) -> SparseTensor {
        let r = self.rank();
        let mut keys = Vec::new();
        let mut vals = Vec::new();
        for (k, v) in self.entries() {
            if keep(k) {
                keys.extend_from_slice(k);
                vals.push(v);
            }
        }
        debug_assert!(keys.len() == vals.len() * r);
        SparseTensor {
            axes: self.axes.clone(),
            bounds: self.bounds.clone(),
            keys,
            vals,
        }
    }

    /// Entrywise map; zeros produced by `f` are dropped.
    pub fn map_entries(&self, f: impl Fn(&[i64], C64) -> C64) -> SparseTensor {
        let entries: Vec<(Vec<i64>, C64)> = self.entries().map(|(k, v)| (k.to_vec(), f(k, v))).collect();
        let axes: Vec<&str> = self.axes.iter().map(String::as_str).collect();
        SparseTensor::from_entries(&axes, &self.bounds, entries).expect("indices unchanged")
    }

    fn positions(&self, labels: &[&str]) -> Result<Vec<usize>> {
        labels.iter().map(|l| self.axis_index(l)).collect()
    }

    fn check_partition(&self, b: &[&str], c: &[&str]) -> Result<(Vec<usize>, Vec<usize>)> {
        let pb = self.positions(b)?;
        let pc = self.positions(c)?;
        let mut all: Vec<usize> = pb.iter().chain(&pc).copied().collect();
        all.sort_unstable();
        all.dedup();
        if all.len() != self.rank() || pb.len() + pc.len() != self.rank() {
            return Err(Error::AxisMismatch(format!(
                "{b:?} and {c:?} do not partition {:?}",
                self.axes
            )));
        }
        Ok((pb, pc))
    }

    /// Matrix with rows indexed by `c` and columns by `b`.
    pub fn unfold(&self, b: &[&str], c: &[&str]) -> Result<Unfolding> {
        let (pb, pc) = self.check_partition(b, c)?;
        let mut rows: HashMap<Vec<i64>, u32> = HashMap::new();
        let mut cols: HashMap<Vec<i64>, u32> = HashMap::new();
        let mut trip = Vec::with_capacity(self.nnz());
        for (k, v) in self.entries() {
            let rk: Vec<i64> = pc.iter().map(|&i| k[i]).collect();
            let ck: Vec<i64> = pb.iter().map(|&i| k[i]).collect();
            let nr = rows.len() as u32;
            let r = *rows.entry(rk).or_insert(nr);
            let nc = cols.len() as u32;
            let cidx = *cols.entry(ck).or_insert(nc);
            trip.push((r, cidx, v));
        }
        Ok(Unfolding {
            n_rows: rows.len(),
            n_cols: cols.len(),
            triplets: trip,
        })
    }
}

/// Sparse matrix in triplet form over compressed row/column indices.
#[derive(Debug, Clone)]
pub struct Unfolding {
    pub n_rows: usize,
    pub n_cols: usize,
    pub triplets: Vec<(u32, u32, C64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerIteration {
    /// Stop when the Rayleigh quotient changes by less than this, relatively.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PowerIteration {
    fn default() -> Self {
        PowerIteration {
            tol: 1e-8,
            max_iter: 10_000,
        }
    }
}

const START_SEED: u64 = 0x5EED_0F_7E45;

impl Unfolding {
    pub fn frobenius(&self) -> f64 {
        self.triplets.iter().map(|t| t.2.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `(max row abs-sum · max column abs-sum)^{1/2}`, an upper bound on the norm.
    pub fn schur_bound(&self) -> f64 {
        let mut r = vec![0.0; self.n_rows];
        let mut c = vec![0.0; self.n_cols];
        for &(i, j, v) in &self.triplets {
            r[i as usize] += v.norm();
            c[j as usize] += v.norm();
        }
        let mr = r.iter().copied().fold(0.0, f64::max);
        let mc = c.iter().copied().fold(0.0, f64::max);
        (mr * mc).sqrt()
    }

    pub fn apply(&self, x: &[C64], y: &mut [C64]) {
        y.iter_mut().for_each(|v| *v = ZERO);
        for &(i, j, v) in &self.triplets {
            y[i as usize] += v * x[j as usize];
        }
    }

    pub fn apply_adjoint(&self, y: &[C64], x: &mut [C64]) {
        x.iter_mut().for_each(|v| *v = ZERO);
        for &(i, j, v) in &self.triplets {
            x[j as usize] += v.conj() * y[i as usize];
        }
    }

    /// Spectral norm by power iteration on `M*M`.
    pub fn spectral_norm(&self, cfg: &PowerIteration) -> Result<f64> {
        if self.triplets.is_empty() {
            return Ok(0.0);
        }
        let mut rng = SimRng::seed_from_u64(START_SEED);
        let mut x: Vec<C64> = (0..self.n_cols).map(|_| complex_gaussian(&mut rng)).collect();
        let mut y = vec![ZERO; self.n_rows];
        let norm = |v: &[C64]| v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        let mut rho_prev = 0.0;
        let mut rho = 0.0;
        for _ in 0..cfg.max_iter {
            let nx = norm(&x);
            x.iter_mut().for_each(|v| *v /= nx);
            self.apply(&x, &mut y);
            rho = y.iter().map(|z| z.norm_sqr()).sum::<f64>();
            if rho == 0.0 {
                // start vector orthogonal to the row space; perturb deterministically
                x.iter_mut().for_each(|v| *v += complex_gaussian(&mut rng));
                continue;
            }
            if (rho - rho_prev).abs() <= cfg.tol * rho {
                return Ok(rho.sqrt());
            }
            rho_prev = rho;
            self.apply_adjoint(&y, &mut x);
        }
        Err(Error::NonConvergence {
            lower: rho.sqrt(),
            upper: self.frobenius().min(self.schur_bound()),
            iterations: cfg.max_iter,
        })
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let mut m = DMatrix::from_element(self.n_rows, self.n_cols, ZERO);
        for &(i, j, v) in &self.triplets {
            m[(i as usize, j as usize)] += v;
        }
        m
    }

    /// Largest singular value by dense SVD.
    pub fn exact_norm(&self) -> Result<f64> {
        if self.triplets.is_empty() {
            return Ok(0.0);
        }
        if self.n_rows > DENSE_LIMIT || self.n_cols > DENSE_LIMIT {
            return invalid(format!(
                "dense SVD limited to {DENSE_LIMIT}×{DENSE_LIMIT}, got {}×{}",
                self.n_rows, self.n_cols
            ));
        }
        let sv = self.to_dense().singular_values();
        Ok(sv.iter().copied().fold(0.0, f64::max))
    }
}

/// `‖T‖_{k_B → k_C}` with default power-iteration settings.
pub fn unfold_norm(t: &SparseTensor, b: &[&str], c: &[&str]) -> Result<f64> {
    unfold_norm_with(t, b, c, &PowerIteration::default())
}

pub fn unfold_norm_with(
    t: &SparseTensor,
    b: &[&str],
    c: &[&str],
    cfg: &PowerIteration,
) -> Result<f64> {
    t.unfold(b, c)?.spectral_norm(cfg)
}

/// `‖T‖_{k_B → k_C}` by dense SVD (at most 512 rows and columns).
pub fn unfold_norm_exact(t: &SparseTensor, b: &[&str], c: &[&str]) -> Result<f64> {
    t.unfold(b, c)?.exact_norm()
}

/// Frobenius norm, free-function form.
pub fn hs_norm(t: &SparseTensor) -> f64 {
    t.hs_norm()
}

fn shared_layout(
    h1: &SparseTensor,
    h2: &SparseTensor,
    shared: &[&str],
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>, Vec<usize>)> {
    let set1: BTreeSet<&str> = h1.axes.iter().map(String::as_str).collect();
    let set2: BTreeSet<&str> = h2.axes.iter().map(String::as_str).collect();
    let inter: BTreeSet<&str> = set1.intersection(&set2).copied().collect();
    let given: BTreeSet<&str> = shared.iter().copied().collect();
    if inter != given {
        return Err(Error::AxisMismatch(format!(
            "shared axes {given:?} differ from the common labels {inter:?}"
        )));
    }
    let s1 = h1.positions(shared)?;
    let s2 = h2.positions(shared)?;
    for (&i, &j) in s1.iter().zip(&s2) {
        if h1.bounds[i] != h2.bounds[j] {
            return Err(Error::AxisMismatch(format!(
                "bounds differ on shared axis {}",
                h1.axes[i]
            )));
        }
    }
    let f1: Vec<usize> = (0..h1.rank()).filter(|i| !s1.contains(i)).collect();
    let f2: Vec<usize> = (0..h2.rank()).filter(|i| !s2.contains(i)).collect();
    Ok((s1, s2, f1, f2))
}

fn pick(key: &[i64], idx: &[usize]) -> Vec<i64> {
    idx.iter().map(|&i| key[i]).collect()
}

/// `H_{k_A} = Σ_{k_C} h1_{k_{A1}} h2_{k_{A2}}`, `C` the shared axes and `A` the
/// remaining axes of `h1` followed by those of `h2`.
pub fn semiproduct(h1: &SparseTensor, h2: &SparseTensor, shared: &[&str]) -> Result<SparseTensor> {
    let (s1, s2, f1, f2) = shared_layout(h1, h2, shared)?;
    let mut by_shared: HashMap<Vec<i64>, Vec<(Vec<i64>, C64)>> = HashMap::new();
    for (k, v) in h2.entries() {
        by_shared.entry(pick(k, &s2)).or_default().push((pick(k, &f2), v));
    }
    let mut acc: HashMap<Vec<i64>, C64> = HashMap::new();
    for (k, v) in h1.entries() {
        if let Some(list) = by_shared.get(&pick(k, &s1)) {
            let head = pick(k, &f1);
            for (tail, w) in list {
                let mut key = head.clone();
                key.extend_from_slice(tail);
                *acc.entry(key).or_insert(ZERO) += v * w;
            }
        }
    }
    let axes: Vec<&str> = f1
        .iter()
        .map(|&i| h1.axes[i].as_str())
        .chain(f2.iter().map(|&i| h2.axes[i].as_str()))
        .collect();
    let bounds: Vec<(i64, i64)> = f1
        .iter()
        .map(|&i| h1.bounds[i])
        .chain(f2.iter().map(|&i| h2.bounds[i]))
        .collect();
    SparseTensor::from_entries(&axes, &bounds, acc)
}

/// `h1_{k_{A1}} h2_{k_{A2}}` without summation: axes of `h1` followed by the
/// non-shared axes of `h2`.
pub fn fiber_product(h1: &SparseTensor, h2: &SparseTensor, shared: &[&str]) -> Result<SparseTensor> {
    let (s1, s2, _, f2) = shared_layout(h1, h2, shared)?;
    let mut by_shared: HashMap<Vec<i64>, Vec<(Vec<i64>, C64)>> = HashMap::new();
    for (k, v) in h2.entries() {
        by_shared.entry(pick(k, &s2)).or_default().push((pick(k, &f2), v));
    }
    let mut entries = Vec::new();
    for (k, v) in h1.entries() {
        if let Some(list) = by_shared.get(&pick(k, &s1)) {
            for (tail, w) in list {
                let mut key = k.to_vec();
                key.extend_from_slice(tail);
                entries.push((key, v * w));
            }
        }
    }
    let axes: Vec<&str> = h1
        .axes
        .iter()
        .map(String::as_str)
        .chain(f2.iter().map(|&i| h2.axes[i].as_str()))
        .collect();
    let bounds: Vec<(i64, i64)> = h1
        .bounds
        .iter()
        .copied()
        .chain(f2.iter().map(|&i| h2.bounds[i]))
        .collect();
    SparseTensor::from_entries(&axes, &bounds, entries)
}

/// `‖(1 + |k − k''|/L)^κ h_{kk''}‖_{ℓ²}` for a two-axis tensor.
pub fn weighted_frobenius(h: &SparseTensor, l: f64, kappa: f64) -> Result<f64> {
    if h.rank() != 2 {
        return invalid("weighted Frobenius norm needs a two-axis tensor");
    }
    Ok(h.entries()
        .map(|(k, v)| (1.0 + (k[0] - k[1]).abs() as f64 / l).powf(2.0 * kappa) * v.norm_sqr())
        .sum::<f64>()
        .sqrt())
}

/// Constant in the weighted product bound when `h1` is supported in `|k − k'| ≤ L`
/// and has nonnegative entries: `(1+|k−k''|/L) ≤ 2(1+|k'−k''|/L)` there.
pub fn weighted_product_constant(kappa: f64) -> f64 {
    2f64.powf(kappa)
}

/// The base tensor `1_S(k,k1,k2,k3)` on axes `k, k1, k2, k3`.
pub fn base_tensor(q: &CountingQuery) -> Result<SparseTensor> {
    Ok(base_tensor_of(&enumerate_S(q)?))
}

pub fn base_tensor_of(s: &QuadSet) -> SparseTensor {
    let q = &s.query;
    let b = |n: u32| (-(n as i64), n as i64);
    let mut keys = Vec::with_capacity(4 * s.len());
    for d in &s.quads {
        keys.extend_from_slice(&[d.k, d.k1, d.k2, d.k3]);
    }
    SparseTensor {
        axes: ["k", "k1", "k2", "k3"].iter().map(|s| s.to_string()).collect(),
        bounds: vec![b(q.n), b(q.n1), b(q.n2), b(q.n3)],
        keys,
        vals: vec![C64::new(1.0, 0.0); s.len()],
    }
}

/// Sign of a Gaussian factor: `+` for `g`, `−` for `ḡ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Conj {
    Plain,
    Bar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub trials: usize,
    pub percentile_99: f64,
    pub median: f64,
    /// `max_{(B,C)} ‖h‖_{b k_B → c k_C}` over partitions of the contracted axes.
    pub max_partition_norm: f64,
    pub ratio: f64,
}

/// Samples `H_{bc} = Σ_{k_A} h_{bck_A} Π_j g_{k_j}^{ζ_j}` and compares the 99th
/// percentile of `‖H‖_{b → c}` with the deterministic partition norms.
///
/// The same Gaussian `g_k` is used on every axis taking the value `k`; the
/// support must contain no pairing (`k_i = k_j` with opposite signs).
pub fn random_contraction_check<R: Rng + ?Sized>(
    h: &SparseTensor,
    b_axes: &[&str],
    c_axes: &[&str],
    signs: &[(&str, Conj)],
    trials: usize,
    rng: &mut R,
) -> Result<ContractionReport> {
    if signs.is_empty() {
        return invalid("contracted axis set must be nonempty");
    }
    if trials == 0 {
        return invalid("trials must be positive");
    }
    let a_labels: Vec<&str> = signs.iter().map(|s| s.0).collect();
    let mut all: Vec<&str> = b_axes.iter().chain(c_axes).chain(&a_labels).copied().collect();
    all.sort_unstable();
    all.dedup();
    if all.len() != h.rank() || b_axes.len() + c_axes.len() + a_labels.len() != h.rank() {
        return Err(Error::AxisMismatch(
            "b, c and the signed axes must partition the tensor axes".into(),
        ));
    }
    let pa = h.positions(&a_labels)?;
    let pb = h.positions(b_axes)?;
    let pc = h.positions(c_axes)?;
    for (k, _) in h.entries() {
        for i in 0..pa.len() {
            for j in i + 1..pa.len() {
                if k[pa[i]] == k[pa[j]] && signs[i].1 != signs[j].1 {
                    return Err(Error::Pairing(format!(
                        "axes {} and {} pair at index {k:?}",
                        signs[i].0, signs[j].0
                    )));
                }
            }
        }
    }

    let mut max_partition: f64 = 0.0;
    for mask in 0u32..(1 << a_labels.len()) {
        let mut bset: Vec<&str> = b_axes.to_vec();
        let mut cset: Vec<&str> = c_axes.to_vec();
        for (i, l) in a_labels.iter().enumerate() {
            if mask & (1 << i) != 0 {
                bset.push(l);
            } else {
                cset.push(l);
            }
        }
        max_partition = max_partition.max(matrix_norm(&h.unfold(&bset, &cset)?)?);
    }

    let freqs: BTreeSet<i64> = h.entries().flat_map(|(k, _)| pa.iter().map(move |&i| k[i])).collect();
    let freq_index: HashMap<i64, usize> = freqs.iter().enumerate().map(|(i, &f)| (f, i)).collect();
    let mut rows: HashMap<Vec<i64>, u32> = HashMap::new();
    let mut cols: HashMap<Vec<i64>, u32> = HashMap::new();
    let mut layout = Vec::with_capacity(h.nnz());
    for (k, v) in h.entries() {
        let nr = rows.len() as u32;
        let r = *rows.entry(pick(k, &pc)).or_insert(nr);
        let nc = cols.len() as u32;
        let c = *cols.entry(pick(k, &pb)).or_insert(nc);
        let g: Vec<usize> = pa.iter().map(|&i| freq_index[&k[i]]).collect();
        layout.push((r, c, v, g));
    }
    let mut norms = Vec::with_capacity(trials);
    let mut g = vec![ZERO; freqs.len()];
    for _ in 0..trials {
        g.iter_mut().for_each(|z| *z = complex_gaussian(rng));
        let triplets: Vec<(u32, u32, C64)> = layout
            .iter()
            .map(|(r, c, v, gi)| {
                let mut w = *v;
                for (idx, s) in gi.iter().zip(signs) {
                    w *= match s.1 {
                        Conj::Plain => g[*idx],
                        Conj::Bar => g[*idx].conj(),
                    };
                }
                (*r, *c, w)
            })
            .collect();
        let m = Unfolding {
            n_rows: rows.len(),
            n_cols: cols.len(),
            triplets,
        };
        norms.push(matrix_norm(&m)?);
    }
    norms.sort_by(f64::total_cmp);
    let p99 = percentile(&norms, 0.99);
    Ok(ContractionReport {
        trials,
        percentile_99: p99,
        median: percentile(&norms, 0.5),
        max_partition_norm: max_partition,
        ratio: if max_partition > 0.0 { p99 / max_partition } else { 0.0 },
    })
}

fn matrix_norm(m: &Unfolding) -> Result<f64> {
    if m.n_rows <= DENSE_LIMIT && m.n_cols <= DENSE_LIMIT && m.n_rows * m.n_cols <= 1 << 16 {
        m.exact_norm()
    } else {
        m.spectral_norm(&PowerIteration {
            tol: 1e-12,
            max_iter: 100_000,
        })
    }
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = (p * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Tensor norm statements that can be audited.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TensorLemma {
    /// Frobenius norm of the base tensor.
    Tensor1,
    /// Two-to-two unfoldings.
    Tensor2,
    /// One-to-three unfoldings.
    Tensor3,
    /// Unfoldings restricted to `|k1 + k3| < |k2|`.
    Tensor4,
    /// Unfoldings restricted to the Γ condition.
    GammaT,
}

impl TensorLemma {
    pub const ALL: [TensorLemma; 5] = [
        TensorLemma::Tensor1,
        TensorLemma::Tensor2,
        TensorLemma::Tensor3,
        TensorLemma::Tensor4,
        TensorLemma::GammaT,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TensorLemma::Tensor1 => "tensor1",
            TensorLemma::Tensor2 => "tensor2",
            TensorLemma::Tensor3 => "tensor3",
            TensorLemma::Tensor4 => "tensor4",
            TensorLemma::GammaT => "gamma_t",
        }
    }
}

impl std::str::FromStr for TensorLemma {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace([':', '-', '.'], "_");
        Ok(match norm.as_str() {
            "tensor1" | "lem_tensor" | "tensor" => TensorLemma::Tensor1,
            "tensor2" | "lem_tensor2" => TensorLemma::Tensor2,
            "tensor3" | "lem_tensor3" => TensorLemma::Tensor3,
            "tensor4" | "lem_tensor4" => TensorLemma::Tensor4,
            "gamma_t" | "gammat" | "cor_gammat" => TensorLemma::GammaT,
            _ => return Err(Error::UnknownLemma(s.to_string())),
        })
    }
}

fn norm_sq(t: &SparseTensor, b: &[&str], c: &[&str]) -> Result<f64> {
    let n = unfold_norm(t, b, c)?;
    Ok(n * n)
}

fn ratio_row(name: &str, q: &CountingQuery, value: f64, bound: f64) -> AuditRow {
    row(name, q, (value, bound, value / bound))
}

/// Rows for one tensor lemma on one enumerated set.
pub fn audit_tensor_set(lemma: TensorLemma, s: &QuadSet) -> Result<Vec<AuditRow>> {
    let q = &s.query;
    let a = q.alpha;
    let (n, n1, n2, n3) = (q.n as f64, q.n1 as f64, q.n2 as f64, q.n3 as f64);
    let e = 2.0 - a;
    let h = 1.0 - a / 2.0;
    let t = base_tensor_of(s);
    let mut rows = Vec::new();
    match lemma {
        TensorLemma::Tensor1 => {
            let b = (n3.powf(e) * ln(n1.max(n2)) * n1.min(n2) + n1 * n2)
                .min(n1.powf(e) * ln(n2.max(n3)) * n2.min(n3) + n2 * n3);
            rows.push(ratio_row("tensor1:kk1k2k3", q, t.hs_norm().powi(2), b));
        }
        TensorLemma::Tensor2 => {
            rows.push(ratio_row(
                "tensor2:kk1->k2k3",
                q,
                norm_sq(&t, &["k", "k1"], &["k2", "k3"])?,
                n2.min(n3).powf(e) * n1.powf(e),
            ));
            rows.push(ratio_row(
                "tensor2:kk3->k1k2",
                q,
                norm_sq(&t, &["k", "k3"], &["k1", "k2"])?,
                n1.min(n2).powf(e) * n3.powf(e),
            ));
            rows.push(ratio_row(
                "tensor2:kk2->k1k3",
                q,
                norm_sq(&t, &["k", "k2"], &["k1", "k3"])?,
                n1.min(n3).powf(h) * n.min(n2).powf(h),
            ));
        }
        TensorLemma::Tensor3 => {
            let bk = (n2.min(n3).powf(e) * ln(n1) + n1).min(n1.min(n2).powf(e) * ln(n3) + n3);
            let bk1 = (n3.powf(e) * ln(n2) + n2).min(n3 * n1.min(n3).powf(h) + n3);
            let bk2 = (n3.powf(e) * ln(n1) + n1).min(n1.powf(e) * ln(n3) + n3);
            let bk3 = (n1.powf(e) * ln(n2) + n2).min(n1 * n.min(n2).powf(h) + n1);
            rows.push(ratio_row("tensor3:k->k1k2k3", q, norm_sq(&t, &["k"], &["k1", "k2", "k3"])?, bk));
            rows.push(ratio_row("tensor3:k1->kk2k3", q, norm_sq(&t, &["k1"], &["k", "k2", "k3"])?, bk1));
            rows.push(ratio_row("tensor3:k2->kk1k3", q, norm_sq(&t, &["k2"], &["k", "k1", "k3"])?, bk2));
            rows.push(ratio_row("tensor3:k3->kk1k2", q, norm_sq(&t, &["k3"], &["k", "k1", "k2"])?, bk3));
        }
        TensorLemma::Tensor4 => {
            let r = t.restrict(|k| (k[1] + k[3]).abs() < k[2].abs());
            rows.push(ratio_row("tensor4:kk1k2k3", q, r.hs_norm().powi(2), n1 * n3));
            rows.push(ratio_row(
                "tensor4:kk2->k1k3",
                q,
                norm_sq(&r, &["k", "k2"], &["k1", "k3"])?,
                n1.min(n3).powf(h),
            ));
            rows.push(ratio_row("tensor4:k1->kk2k3", q, norm_sq(&r, &["k1"], &["k", "k2", "k3"])?, n3));
            rows.push(ratio_row("tensor4:k3->kk1k2", q, norm_sq(&r, &["k3"], &["k", "k1", "k2"])?, n1));
        }
        TensorLemma::GammaT => {
            let gamma = q
                .gamma
                .ok_or_else(|| Error::InvalidParameter("Γ audit requires Gamma".into()))?;
            let r = base_tensor_of(&gamma_restrict(s, gamma)?);
            let (nmin, nmed, _) = q.sorted_caps();
            rows.push(ratio_row("gamma_t:kk1k2k3", q, r.hs_norm().powi(2), nmin * nmed));
            rows.push(ratio_row("gamma_t:k1->kk2k3", q, norm_sq(&r, &["k1"], &["k", "k2", "k3"])?, nmed));
            rows.push(ratio_row("gamma_t:k3->kk1k2", q, norm_sq(&r, &["k3"], &["k", "k1", "k2"])?, nmed));
            rows.push(ratio_row("gamma_t:k2->kk1k3", q, norm_sq(&r, &["k2"], &["k", "k1", "k3"])?, nmed));
        }
    }
    Ok(rows)
}

/// Audits `lemma` over `sweep` (at least three scales).
pub fn tensor_lemma_audit(lemma: TensorLemma, alpha: f64, sweep: &[CountingQuery]) -> Result<AuditReport> {
    Ok(tensor_audit_many(&[lemma], alpha, sweep)?.remove(0))
}

/// Audits several tensor lemmas, enumerating each query once.
pub fn tensor_audit_many(
    lemmas: &[TensorLemma],
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
            if l == TensorLemma::GammaT && q.gamma.is_none() {
                continue;
            }
            rows[i].extend(audit_tensor_set(l, &s)?);
        }
    }
    Ok(lemmas
        .iter()
        .zip(rows)
        .map(|(l, r)| AuditReport::from_rows(l.name(), alpha, r))
        .collect())
}
