//! Band-limited Fourier fields on the torus.
//!
//! Convention: `f_k = ∫ f e^{-ikx} dx` and `f(x) = (2π)^{-1} Σ f_k e^{ikx}`,
//! so `∫|f|² = (2π)^{-1} Σ|f_k|²` and `(fg)_k = (2π)^{-1} Σ f_{k1} g_{k-k1}`.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type C64 = Complex64;

pub const TWO_PI: f64 = 2.0 * PI;

/// `|x|^alpha` with exact evaluation for the exponents used most.
#[inline]
pub fn abs_pow(x: f64, alpha: f64) -> f64 {
    let a = x.abs();
    if alpha == 2.0 {
        a * a
    } else if alpha == 1.0 {
        a
    } else if alpha == 1.5 {
        a * a.sqrt()
    } else if a == 0.0 {
        0.0
    } else {
        a.powf(alpha)
    }
}

/// `⟨k⟩ = (1 + k²)^{1/2}`.
#[inline]
pub fn bracket(k: i64) -> f64 {
    let k = k as f64;
    (1.0 + k * k).sqrt()
}

/// Largest `|k|` with `⟨k⟩ ≤ n`, or `None` when no frequency survives.
pub fn band_limit(n: f64) -> Option<usize> {
    if !(n >= 1.0) {
        return None;
    }
    let mut k = (n * n - 1.0).max(0.0).sqrt().floor() as i64;
    while k > 0 && bracket(k) > n {
        k -= 1;
    }
    while bracket(k + 1) <= n {
        k += 1;
    }
    Some(k as usize)
}

/// The dispersion exponent and its multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dispersion {
    alpha: f64,
}

impl Dispersion {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 2.0) {
            return invalid(format!("alpha must lie in (0, 2], got {alpha}"));
        }
        Ok(Dispersion { alpha })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `|k|^α`.
    #[inline]
    pub fn multiplier(&self, k: i64) -> f64 {
        abs_pow(k as f64, self.alpha)
    }

    /// `⟪k⟫ = (1 + |k|^α)^{1/α}`.
    #[inline]
    pub fn jbb(&self, k: i64) -> f64 {
        (1.0 + self.multiplier(k)).powf(1.0 / self.alpha)
    }

    /// `⟪k⟫^{-α} = 1/(1 + |k|^α)`.
    #[inline]
    pub fn jbb_neg_alpha(&self, k: i64) -> f64 {
        1.0 / (1.0 + self.multiplier(k))
    }
}

/// Free-function form of [`Dispersion::jbb`].
pub fn jbb(k: i64, d: &Dispersion) -> f64 {
    d.jbb(k)
}

/// Fourier coefficients `u_k`, `|k| ≤ kmax`, stored at index `k + kmax`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralField {
    kmax: usize,
    coeffs: Vec<C64>,
}

impl SpectralField {
    pub fn zeros(kmax: usize) -> Self {
        SpectralField {
            kmax,
            coeffs: vec![C64::new(0.0, 0.0); 2 * kmax + 1],
        }
    }

    pub fn from_coeffs(kmax: usize, coeffs: Vec<C64>) -> Result<Self> {
        if coeffs.len() != 2 * kmax + 1 {
            return invalid(format!(
                "expected {} coefficients for kmax {kmax}, got {}",
                2 * kmax + 1,
                coeffs.len()
            ));
        }
        Ok(SpectralField { kmax, coeffs })
    }

    /// Field with the given modes set; `kmax` grows to fit them.
    pub fn from_modes(kmax: usize, modes: &[(i64, C64)]) -> Self {
        let need = modes.iter().map(|(k, _)| k.unsigned_abs() as usize).max().unwrap_or(0);
        let mut u = SpectralField::zeros(kmax.max(need));
        for &(k, c) in modes {
            u.set(k, c);
        }
        u
    }

    pub fn kmax(&self) -> usize {
        self.kmax
    }

    pub fn coeffs(&self) -> &[C64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [C64] {
        &mut self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<C64> {
        self.coeffs
    }

    pub fn frequencies(&self) -> impl Iterator<Item = i64> {
        let m = self.kmax as i64;
        -m..=m
    }

    /// `u_k`, zero outside the band.
    #[inline]
    pub fn get(&self, k: i64) -> C64 {
        let m = self.kmax as i64;
        if k.abs() > m {
            C64::new(0.0, 0.0)
        } else {
            self.coeffs[(k + m) as usize]
        }
    }

    /// Panics if `|k| > kmax`.
    #[inline]
    pub fn set(&mut self, k: i64, value: C64) {
        let m = self.kmax as i64;
        assert!(k.abs() <= m, "frequency {k} outside band {m}");
        self.coeffs[(k + m) as usize] = value;
    }

    /// Same coefficients on a different band, truncating or zero-padding.
    pub fn resized(&self, kmax: usize) -> SpectralField {
        let mut out = SpectralField::zeros(kmax);
        let m = kmax.min(self.kmax) as i64;
        for k in -m..=m {
            out.set(k, self.get(k));
        }
        out
    }

    /// `Σ_k |u_k|²`.
    pub fn coeff_mass(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.coeffs.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    /// Largest `|k|` carrying a nonzero coefficient.
    pub fn support_limit(&self) -> Option<usize> {
        self.frequencies()
            .filter(|&k| self.get(k) != C64::new(0.0, 0.0))
            .map(|k| k.unsigned_abs() as usize)
            .max()
    }

    /// `Π_N u`: keeps `u_k` with `⟨k⟩ ≤ n`.
    pub fn project(&self, n: f64) -> SpectralField {
        let mut out = self.clone();
        let lim = band_limit(n).map(|l| l as i64).unwrap_or(-1);
        for k in self.frequencies() {
            if k.abs() > lim {
                out.set(k, C64::new(0.0, 0.0));
            }
        }
        out
    }

    /// `Δ_N u = Π_N u − Π_{N/2} u`.
    pub fn delta(&self, n: f64) -> SpectralField {
        let a = self.project(n);
        let b = self.project(n / 2.0);
        a.zip_with(&b, |x, y| x - y)
    }

    /// `(Σ_k ⟨k⟩^{2s} |u_k|²)^{1/2}`.
    pub fn sobolev_norm(&self, s: f64) -> f64 {
        self.frequencies()
            .map(|k| (1.0 + (k * k) as f64).powf(s) * self.get(k).norm_sqr())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&self, lambda: C64) -> SpectralField {
        SpectralField {
            kmax: self.kmax,
            coeffs: self.coeffs.iter().map(|c| c * lambda).collect(),
        }
    }

    /// Entrywise combination on the larger of the two bands.
    pub fn zip_with(&self, other: &SpectralField, f: impl Fn(C64, C64) -> C64) -> SpectralField {
        let kmax = self.kmax.max(other.kmax);
        let mut out = SpectralField::zeros(kmax);
        let m = kmax as i64;
        for k in -m..=m {
            out.set(k, f(self.get(k), other.get(k)));
        }
        out
    }

    /// `max_k |u_k − v_k|`.
    pub fn max_abs_diff(&self, other: &SpectralField) -> f64 {
        let m = self.kmax.max(other.kmax) as i64;
        (-m..=m)
            .map(|k| (self.get(k) - other.get(k)).norm())
            .fold(0.0, f64::max)
    }

    /// `(Σ_k |u_k − v_k|²)^{1/2}`.
    pub fn l2_diff(&self, other: &SpectralField) -> f64 {
        self.zip_with(other, |a, b| a - b).coeff_mass().sqrt()
    }
}

/// Free-function form of [`SpectralField::project`].
pub fn project(u: &SpectralField, n: f64) -> SpectralField {
    u.project(n)
}

/// Smallest length `2^a 3^b ≥ required`.
pub fn friendly_length(required: usize) -> usize {
    let required = required.max(1);
    let mut best = usize::MAX;
    let mut p3 = 1usize;
    while p3 < 2 * required {
        let mut v = p3;
        while v < required {
            v *= 2;
        }
        best = best.min(v);
        p3 *= 3;
    }
    best
}

/// Grid size used for cubic and quartic products on band `kmax`.
pub fn dealiased_gridsize(kmax: usize) -> usize {
    friendly_length(4 * kmax + 1)
}

/// Planned forward/inverse transforms of one length.
#[derive(Clone)]
pub struct GridTransform {
    m: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for GridTransform {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GridTransform").field("m", &self.m).finish()
    }
}

impl GridTransform {
    pub fn new(m: usize) -> Self {
        let mut planner = FftPlanner::new();
        GridTransform {
            m,
            forward: planner.plan_fft_forward(m),
            inverse: planner.plan_fft_inverse(m),
        }
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    /// Writes `u(x_j) = (2π)^{-1} Σ u_k e^{ikx_j}`, `x_j = 2πj/m`, into `grid`.
    pub fn synthesize(&self, coeffs: &[C64], kmax: usize, grid: &mut [C64], scratch: &mut [C64]) {
        let m = self.m;
        debug_assert!(m > 2 * kmax && grid.len() == m);
        grid.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
        let s = 1.0 / TWO_PI;
        let km = kmax as i64;
        for (i, c) in coeffs.iter().enumerate() {
            let k = i as i64 - km;
            grid[k.rem_euclid(m as i64) as usize] = c * s;
        }
        self.inverse.process_with_scratch(grid, scratch);
    }

    /// Reads `u_k = ∫ u e^{-ikx}` (trapezoid rule) for `|k| ≤ kmax` out of `grid`,
    /// scaled by `factor`. The grid is overwritten.
    pub fn analyze(
        &self,
        grid: &mut [C64],
        kmax: usize,
        out: &mut [C64],
        factor: f64,
        scratch: &mut [C64],
    ) {
        let m = self.m;
        self.forward.process_with_scratch(grid, scratch);
        let s = factor * TWO_PI / m as f64;
        let km = kmax as i64;
        for (i, o) in out.iter_mut().enumerate() {
            let k = i as i64 - km;
            *o = grid[k.rem_euclid(m as i64) as usize] * s;
        }
    }

    pub fn scratch_len(&self) -> usize {
        self.forward
            .get_inplace_scratch_len()
            .max(self.inverse.get_inplace_scratch_len())
    }
}

fn check_grid(kmax: usize, gridsize: usize) -> Result<()> {
    let required = 2 * kmax + 1;
    if gridsize < required {
        return Err(Error::Dealiasing {
            gridsize,
            kmax,
            required,
        });
    }
    Ok(())
}

/// Values `u(2πj/gridsize)`, `j = 0..gridsize`.
pub fn to_physical(u: &SpectralField, gridsize: usize) -> Result<Vec<C64>> {
    check_grid(u.kmax, gridsize)?;
    let t = GridTransform::new(gridsize);
    let mut grid = vec![C64::new(0.0, 0.0); gridsize];
    let mut scratch = vec![C64::new(0.0, 0.0); t.scratch_len()];
    t.synthesize(&u.coeffs, u.kmax, &mut grid, &mut scratch);
    Ok(grid)
}

/// Coefficients `|k| ≤ kmax` of a sampled periodic function.
pub fn from_physical(grid: &[C64], kmax: usize) -> Result<SpectralField> {
    check_grid(kmax, grid.len())?;
    let t = GridTransform::new(grid.len());
    let mut work = grid.to_vec();
    let mut scratch = vec![C64::new(0.0, 0.0); t.scratch_len()];
    let mut out = SpectralField::zeros(kmax);
    t.analyze(&mut work, kmax, &mut out.coeffs, 1.0, &mut scratch);
    Ok(out)
}

/// `∫|u|²` by trapezoid quadrature on `gridsize` points.
pub fn l2_quadrature(u: &SpectralField, gridsize: usize) -> Result<f64> {
    let grid = to_physical(u, gridsize)?;
    Ok(grid.iter().map(|z| z.norm_sqr()).sum::<f64>() * TWO_PI / gridsize as f64)
}

/// Band-limited `|u|²u` on band `out_kmax`, computed on a grid of `gridsize` points.
///
/// Exact when `gridsize ≥ 3·kmax + out_kmax + 1`, in particular for
/// `gridsize ≥ 4·kmax + 1` and `out_kmax ≤ kmax`.
pub fn cubic_product(u: &SpectralField, gridsize: usize, out_kmax: usize) -> Result<SpectralField> {
    let required = 3 * u.kmax + out_kmax + 1;
    if gridsize < required {
        return Err(Error::Dealiasing {
            gridsize,
            kmax: u.kmax,
            required,
        });
    }
    let t = GridTransform::new(gridsize);
    let mut grid = vec![C64::new(0.0, 0.0); gridsize];
    let mut scratch = vec![C64::new(0.0, 0.0); t.scratch_len()];
    t.synthesize(&u.coeffs, u.kmax, &mut grid, &mut scratch);
    for z in grid.iter_mut() {
        *z *= z.norm_sqr();
    }
    let mut out = SpectralField::zeros(out_kmax);
    t.analyze(&mut grid, out_kmax, &mut out.coeffs, 1.0, &mut scratch);
    Ok(out)
}

/// `∫|u|⁴`, exact by quadrature on the dealiased grid.
pub fn quartic_integral(u: &SpectralField) -> f64 {
    let m = dealiased_gridsize(u.kmax);
    let grid = to_physical(u, m).expect("dealiased grid is large enough");
    let s: f64 = grid.iter().map(|z| z.norm_sqr() * z.norm_sqr()).sum();
    s * TWO_PI / m as f64
}

/// Reusable buffers for repeated quartic evaluations on one band.
#[derive(Debug, Clone)]
pub struct QuarticEvaluator {
    kmax: usize,
    transform: GridTransform,
    grid: Vec<C64>,
    scratch: Vec<C64>,
}

impl QuarticEvaluator {
    pub fn new(kmax: usize) -> Self {
        let transform = GridTransform::new(dealiased_gridsize(kmax));
        let grid = vec![C64::new(0.0, 0.0); transform.len()];
        let scratch = vec![C64::new(0.0, 0.0); transform.scratch_len()];
        QuarticEvaluator {
            kmax,
            transform,
            grid,
            scratch,
        }
    }

    pub fn eval(&mut self, u: &SpectralField) -> f64 {
        assert_eq!(u.kmax, self.kmax, "band mismatch");
        self.eval_coeffs(&u.coeffs)
    }

    pub fn eval_coeffs(&mut self, coeffs: &[C64]) -> f64 {
        self.transform
            .synthesize(coeffs, self.kmax, &mut self.grid, &mut self.scratch);
        let s: f64 = self.grid.iter().map(|z| z.norm_sqr() * z.norm_sqr()).sum();
        s * TWO_PI / self.transform.len() as f64
    }
}
