//! Random averaging operator: the kernel of the linear flow
//! `∂_t Ψ = −2i Π_N M(u_L, u_L, Ψ)` around a low-frequency solution `u_L`.
//!
//! Everything is in the interaction picture `v_k(t) = e^{it|k|^α} u_k(t)`, in
//! which the generator is
//! `G_{k k3}(t) = −2i (2π)^{−2} Σ_{k1−k2 = k−k3, k2 ∉ {k1,k3}} e^{−itΦ} v_{k1} v̄_{k2}`
//! with `Φ = |k1|^α − |k2|^α + |k3|^α − |k|^α`. `G` is anti-Hermitian, so the
//! exact kernel is unitary.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Flow, FlowConfig};
use crate::error::{invalid, Error, Result};
use crate::gibbs::Sign;
use crate::spectral::{band_limit, bracket, Dispersion, SpectralField, C64, TWO_PI};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

/// Interaction-picture low-frequency solution sampled every `dt/2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub alpha: f64,
    pub l: f64,
    pub dt: f64,
    pub t_final: f64,
    /// `v(j·dt/2)` for `j = 0..=2·steps`.
    pub nodes: Vec<SpectralField>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        (self.nodes.len() - 1) / 2
    }

    /// Step length actually used, `t_final / steps`.
    pub fn h(&self) -> f64 {
        if self.steps() == 0 {
            0.0
        } else {
            self.t_final / self.steps() as f64
        }
    }

    pub fn time(&self, j: usize) -> f64 {
        0.5 * self.h() * j as f64
    }

    pub fn kmax(&self) -> usize {
        self.nodes[0].kmax()
    }

    pub fn is_zero(&self) -> bool {
        self.nodes.iter().all(|v| v.coeffs().iter().all(|z| *z == ZERO))
    }
}

fn step_count(dt: f64, t_final: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return invalid(format!("dt must be positive, got {dt}"));
    }
    if !(t_final >= 0.0 && t_final.is_finite()) {
        return invalid(format!("t_final must be finite and nonnegative, got {t_final}"));
    }
    // same rounding rule as the flow integrator
    Ok(FlowConfig::new(1.0, 1.0, dt, t_final, Sign::Defocusing).steps() as usize)
}

/// Solves the truncated defocusing flow on `⟨k⟩ ≤ L` and stores `v = e^{it|k|^α}u`
/// at every half step.
pub fn low_freq_trajectory(
    l: f64,
    alpha: f64,
    dt: f64,
    t_final: f64,
    data: &SpectralField,
) -> Result<Trajectory> {
    let d = Dispersion::new(alpha)?;
    if !(l >= 0.5) {
        return invalid(format!("L must be at least 1/2, got {l}"));
    }
    let steps = step_count(dt, t_final)?;
    let kmax_l = band_limit(l);
    if let Some(s) = data.support_limit() {
        if kmax_l.map_or(true, |km| s > km) {
            return invalid("data is not band-limited by L");
        }
    }
    let kmax = kmax_l.unwrap_or(0);
    let u0 = data.resized(kmax);
    if kmax_l.is_none() || steps == 0 {
        return Ok(Trajectory {
            alpha,
            l,
            dt,
            t_final,
            nodes: vec![u0; 2 * steps + 1],
        });
    }
    let h = t_final / steps as f64;
    let cfg = FlowConfig::new(alpha, l, 0.5 * h, 0.5 * h, Sign::Defocusing);
    let mut flow = Flow::new(cfg)?;
    let omega: Vec<f64> = (-(kmax as i64)..=kmax as i64).map(|k| d.multiplier(k)).collect();
    let mut u = u0.clone();
    let mut nodes = Vec::with_capacity(2 * steps + 1);
    nodes.push(u0);
    for j in 1..=2 * steps {
        flow.advance(u.coeffs_mut(), false)?;
        let t = 0.5 * h * j as f64;
        let mut v = u.clone();
        for (z, w) in v.coeffs_mut().iter_mut().zip(&omega) {
            *z *= C64::from_polar(1.0, t * w);
        }
        nodes.push(v);
    }
    Ok(Trajectory {
        alpha,
        l,
        dt,
        t_final,
        nodes,
    })
}

/// `H̃_{kk'}(t)` on `⟨k⟩, ⟨k'⟩ ≤ N`, row-major over `k` then `k'`, both from `−kmax`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMatrix {
    pub t: f64,
    pub n: f64,
    pub l: f64,
    kmax: usize,
    entries: Vec<C64>,
}

impl KernelMatrix {
    /// `Π_N` as a matrix.
    pub fn identity(n: f64, l: f64) -> Result<Self> {
        let kmax = band_limit(n).ok_or_else(|| Error::InvalidParameter("empty band".into()))?;
        let dim = 2 * kmax + 1;
        let mut entries = vec![ZERO; dim * dim];
        for i in 0..dim {
            entries[i * dim + i] = ONE;
        }
        Ok(KernelMatrix {
            t: 0.0,
            n,
            l,
            kmax,
            entries,
        })
    }

    pub fn from_dense(t: f64, n: f64, l: f64, m: &DMatrix<C64>) -> Result<Self> {
        let kmax = band_limit(n).ok_or_else(|| Error::InvalidParameter("empty band".into()))?;
        let dim = 2 * kmax + 1;
        if m.shape() != (dim, dim) {
            return invalid(format!("matrix must be {dim}×{dim} for N={n}"));
        }
        let mut entries = Vec::with_capacity(dim * dim);
        for i in 0..dim {
            for j in 0..dim {
                entries.push(m[(i, j)]);
            }
        }
        Ok(KernelMatrix {
            t,
            n,
            l,
            kmax,
            entries,
        })
    }

    pub fn kmax(&self) -> usize {
        self.kmax
    }

    pub fn dim(&self) -> usize {
        2 * self.kmax + 1
    }

    pub fn entries(&self) -> &[C64] {
        &self.entries
    }

    fn idx(&self, k: i64) -> Option<usize> {
        let km = self.kmax as i64;
        (k.abs() <= km).then(|| (k + km) as usize)
    }

    /// Entry `(k, k')`; zero outside the band.
    pub fn get(&self, k: i64, kp: i64) -> C64 {
        match (self.idx(k), self.idx(kp)) {
            (Some(i), Some(j)) => self.entries[i * self.dim() + j],
            _ => ZERO,
        }
    }

    pub fn to_dense(&self) -> DMatrix<C64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.entries)
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// `(H f)_k = Σ_{k'} H_{kk'} f_{k'}` on the band.
    pub fn apply(&self, f: &SpectralField) -> SpectralField {
        let d = self.dim();
        let km = self.kmax as i64;
        let mut out = SpectralField::zeros(self.kmax);
        for (i, o) in out.coeffs_mut().iter_mut().enumerate() {
            let row = &self.entries[i * d..(i + 1) * d];
            *o = row
                .iter()
                .enumerate()
                .map(|(j, h)| h * f.get(j as i64 - km))
                .sum();
        }
        out
    }

    /// `self − other` entrywise (same band), keeping this kernel's `t` and `L`.
    pub fn sub(&self, other: &KernelMatrix) -> Result<KernelMatrix> {
        if self.kmax != other.kmax {
            return invalid("kernel bands differ");
        }
        Ok(KernelMatrix {
            entries: self.entries.iter().zip(&other.entries).map(|(a, b)| a - b).collect(),
            ..self.clone()
        })
    }

    pub fn add(&self, other: &KernelMatrix) -> Result<KernelMatrix> {
        if self.kmax != other.kmax {
            return invalid("kernel bands differ");
        }
        Ok(KernelMatrix {
            entries: self.entries.iter().zip(&other.entries).map(|(a, b)| a + b).collect(),
            ..self.clone()
        })
    }

    pub fn frobenius(&self) -> f64 {
        self.entries.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &KernelMatrix) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Dense generator at one trajectory node, row-major.
fn generator(v: &SpectralField, t: f64, kmax: usize, d: &Dispersion, out: &mut [C64]) {
    let dim = 2 * kmax + 1;
    let kl = v.kmax() as i64;
    let km = kmax as i64;
    let c = C64::new(0.0, -2.0 / (TWO_PI * TWO_PI));
    out.iter_mut().for_each(|z| *z = ZERO);
    if v.coeffs().iter().all(|z| *z == ZERO) {
        return;
    }
    let w = |k: i64| d.multiplier(k);
    for k in -km..=km {
        for k3 in -km..=km {
            if k == k3 {
                // k2 = k1 is excluded for every term
                continue;
            }
            let p = k - k3;
            let mut acc = ZERO;
            for k1 in (-kl).max(p - kl)..=kl.min(p + kl) {
                if k1 == k {
                    continue;
                }
                let k2 = k1 - p;
                let phi = w(k1) - w(k2) + w(k3) - w(k);
                acc += C64::from_polar(1.0, -t * phi) * v.get(k1) * v.get(k2).conj();
            }
            out[((k + km) as usize) * dim + (k3 + km) as usize] = c * acc;
        }
    }
}

fn matvec(g: &[C64], x: &[C64], y: &mut [C64]) {
    let dim = x.len();
    for (i, yi) in y.iter_mut().enumerate() {
        *yi = g[i * dim..(i + 1) * dim].iter().zip(x).map(|(a, b)| a * b).sum();
    }
}

/// Result of a kernel integration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelEvolution {
    pub kernel: KernelMatrix,
    pub snapshots: Vec<KernelMatrix>,
}

/// Integrates the kernel ODE with classical RK4 at step `t_final/steps`;
/// column `k'` starts from the `k'`-th basis vector.
pub fn evolve_kernel(n: f64, l: f64, traj: &Trajectory, dt: f64, t_final: f64) -> Result<KernelMatrix> {
    Ok(evolve_kernel_with_snapshots(n, l, traj, dt, t_final, &[])?.kernel)
}

/// As [`evolve_kernel`], also recording the kernel at the grid times nearest to
/// each of `snapshot_times`.
pub fn evolve_kernel_with_snapshots(
    n: f64,
    l: f64,
    traj: &Trajectory,
    dt: f64,
    t_final: f64,
    snapshot_times: &[f64],
) -> Result<KernelEvolution> {
    if !(l < n) {
        return invalid(format!("L must be below N, got L={l}, N={n}"));
    }
    if (traj.l - l).abs() > 0.0 {
        return invalid("trajectory was computed for a different L");
    }
    let steps = step_count(dt, t_final)?;
    if steps != traj.steps() || (traj.t_final - t_final).abs() > 1e-12 * t_final.max(1.0) {
        return invalid("trajectory does not cover [0, t_final] at this step");
    }
    let d = Dispersion::new(traj.alpha)?;
    let mut kernel = KernelMatrix::identity(n, l)?;
    let kmax = kernel.kmax;
    let dim = kernel.dim();
    let h = traj.h();
    let mut snap_steps: Vec<(usize, usize)> = snapshot_times
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let j = if h > 0.0 { (s / h).round().clamp(0.0, steps as f64) as usize } else { 0 };
            (j, i)
        })
        .collect();
    snap_steps.sort_unstable();
    let mut snapshots = vec![None; snapshot_times.len()];
    let mut next = 0;
    let mut record = |step: usize, kernel: &KernelMatrix, next: &mut usize| {
        while *next < snap_steps.len() && snap_steps[*next].0 == step {
            snapshots[snap_steps[*next].1] = Some(kernel.clone());
            *next += 1;
        }
    };
    record(0, &kernel, &mut next);
    if traj.is_zero() || steps == 0 {
        for s in 1..=steps {
            kernel.t = h * s as f64;
            record(s, &kernel, &mut next);
        }
        kernel.t = t_final;
        return Ok(KernelEvolution {
            kernel,
            snapshots: snapshots.into_iter().map(|s| s.expect("recorded")).collect(),
        });
    }

    // columns stored contiguously: cols[j*dim + i] = H_{i j}
    let mut cols = vec![ZERO; dim * dim];
    for j in 0..dim {
        cols[j * dim + j] = ONE;
    }
    let mut g = [vec![ZERO; dim * dim], vec![ZERO; dim * dim], vec![ZERO; dim * dim]];
    for s in 0..steps {
        let t0 = h * s as f64;
        generator(&traj.nodes[2 * s], t0, kmax, &d, &mut g[0]);
        generator(&traj.nodes[2 * s + 1], t0 + 0.5 * h, kmax, &d, &mut g[1]);
        generator(&traj.nodes[2 * s + 2], t0 + h, kmax, &d, &mut g[2]);
        let g = &g;
        cols.par_chunks_mut(dim).for_each_init(
            || (vec![ZERO; dim], vec![ZERO; dim], vec![ZERO; dim]),
            |(stage, k, acc), x| {
                matvec(&g[0], x, k);
                for i in 0..dim {
                    acc[i] = k[i];
                    stage[i] = x[i] + k[i] * (0.5 * h);
                }
                matvec(&g[1], stage, k);
                for i in 0..dim {
                    acc[i] += k[i] * 2.0;
                    stage[i] = x[i] + k[i] * (0.5 * h);
                }
                matvec(&g[1], stage, k);
                for i in 0..dim {
                    acc[i] += k[i] * 2.0;
                    stage[i] = x[i] + k[i] * h;
                }
                matvec(&g[2], stage, k);
                for i in 0..dim {
                    x[i] += (acc[i] + k[i]) * (h / 6.0);
                }
            },
        );
        if !cols.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
            let t = h * (s + 1) as f64;
            return Err(Error::Instability {
                time: t,
                defect: f64::NAN,
            });
        }
        if next < snap_steps.len() && snap_steps[next].0 == s + 1 {
            write_rows(&cols, dim, &mut kernel.entries);
            kernel.t = h * (s + 1) as f64;
            record(s + 1, &kernel, &mut next);
        }
    }
    write_rows(&cols, dim, &mut kernel.entries);
    kernel.t = t_final;
    Ok(KernelEvolution {
        kernel,
        snapshots: snapshots.into_iter().map(|s| s.expect("recorded")).collect(),
    })
}

fn write_rows(cols: &[C64], dim: usize, rows: &mut [C64]) {
    for j in 0..dim {
        for i in 0..dim {
            rows[i * dim + j] = cols[j * dim + i];
        }
    }
}

/// `‖H H* − I‖_F` on the band.
pub fn unitarity_defect(h: &KernelMatrix) -> f64 {
    let d = h.dim();
    let e = &h.entries;
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            let mut z: C64 = (0..d).map(|k| e[i * d + k] * e[j * d + k].conj()).sum();
            if i == j {
                z -= ONE;
            }
            s += z.norm_sqr();
        }
    }
    s.sqrt()
}

/// `ψ = H̃^{N,L} F_N` and `ζ = (H̃^{N,L} − H̃^{N,L/2}) F_N`.
pub fn psi_zeta(
    n: f64,
    l: f64,
    f_n: &SpectralField,
    h_l: &KernelMatrix,
    h_half_l: &KernelMatrix,
) -> Result<(SpectralField, SpectralField)> {
    for k in f_n.frequencies() {
        let b = bracket(k);
        if f_n.get(k) != ZERO && !(b > n / 2.0 && b <= n) {
            return invalid(format!("F_N has mode {k} outside the shell N/2 < ⟨k⟩ ≤ N"));
        }
    }
    if h_l.n != n || h_half_l.n != n {
        return invalid("kernel band differs from N");
    }
    if h_l.l != l || h_half_l.l * 2.0 != l {
        return invalid("kernels must be computed at L and L/2");
    }
    let psi = h_l.apply(f_n);
    let psi_half = h_half_l.apply(f_n);
    let zeta = psi.zip_with(&psi_half, |a, b| a - b);
    Ok((psi, zeta))
}

/// Near-diagonal concentration of a kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayProfile {
    /// `Σ (1 + |k−k'|/L)^{2κ} |h_{kk'}|²`.
    pub weighted_mass: f64,
    /// `Σ |h_{kk'}|²`.
    pub mass: f64,
    /// `(C, fraction of mass with |k−k'| ≤ C·L)` for `C ∈ {1,2,4,8}`; a zero kernel
    /// reports fraction 1.
    pub fractions: Vec<(f64, f64)>,
}

pub const DECAY_MULTIPLES: [f64; 4] = [1.0, 2.0, 4.0, 8.0];

pub fn kernel_decay_profile(h: &KernelMatrix, l: f64, kappa: f64) -> DecayProfile {
    let km = h.kmax as i64;
    let d = h.dim();
    let mut weighted = 0.0;
    let mut mass = 0.0;
    let mut within = [0.0; 4];
    for i in 0..d {
        for j in 0..d {
            let a = h.entries[i * d + j].norm_sqr();
            if a == 0.0 {
                continue;
            }
            let dist = ((i as i64 - km) - (j as i64 - km)).abs() as f64;
            weighted += (1.0 + dist / l).powf(2.0 * kappa) * a;
            mass += a;
            for (w, c) in within.iter_mut().zip(DECAY_MULTIPLES) {
                if dist <= c * l {
                    *w += a;
                }
            }
        }
    }
    DecayProfile {
        weighted_mass: weighted,
        mass,
        fractions: DECAY_MULTIPLES
            .iter()
            .zip(within)
            .map(|(&c, w)| (c, if mass > 0.0 { w / mass } else { 1.0 }))
            .collect(),
    }
}

/// Kernels `H̃^{N,L'}` for `L' = 1/2, 1, 2, …, L` (L a power of two), each driven
/// by the trajectory from `Π_{L'} data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DyadicKernels {
    pub levels: Vec<f64>,
    pub kernels: Vec<KernelMatrix>,
}

impl DyadicKernels {
    pub fn compute(
        n: f64,
        l: f64,
        alpha: f64,
        dt: f64,
        t_final: f64,
        data: &SpectralField,
    ) -> Result<Self> {
        if !(l >= 1.0 && (l.log2().fract() == 0.0)) {
            return invalid(format!("L must be a power of two ≥ 1, got {l}"));
        }
        let mut levels = vec![0.5];
        let mut x = 1.0;
        while x <= l {
            levels.push(x);
            x *= 2.0;
        }
        let kernels = levels
            .iter()
            .map(|&lv| {
                let traj = low_freq_trajectory(lv, alpha, dt, t_final, &data.project(lv))?;
                evolve_kernel(n, lv, &traj, dt, t_final)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DyadicKernels { levels, kernels })
    }

    pub fn top(&self) -> &KernelMatrix {
        self.kernels.last().expect("nonempty")
    }

    /// `h^{N,L'} = H̃^{N,L'} − H̃^{N,L'/2}` for `L' ≥ 1`.
    pub fn differences(&self) -> Result<Vec<KernelMatrix>> {
        self.kernels.windows(2).map(|w| w[1].sub(&w[0])).collect()
    }

    /// Max entry of `Σ_{L'} h^{N,L'} − (H̃^{N,L} − Π_N)`.
    pub fn telescoping_defect(&self) -> Result<f64> {
        let diffs = self.differences()?;
        let mut sum = diffs[0].clone();
        for d in &diffs[1..] {
            sum = sum.add(d)?;
        }
        let id = KernelMatrix::identity(self.top().n, self.top().l)?;
        Ok(sum.max_abs_diff(&self.top().sub(&id)?))
    }
}

/// Both sides of the weighted cancellation identity, for one pair `k1 ≠ k2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CancelCheck {
    pub k1: i64,
    pub k2: i64,
    /// `Σ_k H_{k1k} H̄_{k2k} / ⟪k1⟫^{α/2}`.
    pub lhs: C64,
    /// `Σ_k H_{k1k} H̄_{k2k} (1/⟪k1⟫^{α/2} − 1/⟪k⟫^{α/2})`.
    pub rhs: C64,
    /// `Σ_k H_{k1k} H̄_{k2k}`, which unitarity makes zero.
    pub gram: C64,
}

/// Evaluates the cancellation identity with `Σ_{L1,L2 ≤ L} h^{N,L1} ⊗ h̄^{N,L2}`
/// summed to `H̃ ⊗ H̃̄` (the base level `h^{N,1/2} = Π_N` included).
pub fn cancellation_check(h: &KernelMatrix, alpha: f64) -> Result<Vec<CancelCheck>> {
    let d = Dispersion::new(alpha)?;
    let km = h.kmax as i64;
    let w = |k: i64| d.jbb(k).powf(-alpha / 2.0);
    let mut out = Vec::new();
    for k1 in -km..=km {
        for k2 in -km..=km {
            if k1 == k2 {
                continue;
            }
            let (mut lhs, mut rhs, mut gram) = (ZERO, ZERO, ZERO);
            for k in -km..=km {
                let p = h.get(k1, k) * h.get(k2, k).conj();
                gram += p;
                lhs += p * w(k1);
                rhs += p * (w(k1) - w(k));
            }
            out.push(CancelCheck { k1, k2, lhs, rhs, gram });
        }
    }
    Ok(out)
}
