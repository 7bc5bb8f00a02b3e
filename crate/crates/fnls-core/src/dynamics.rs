//! Gauge transform, the truncated renormalized flow and its conserved quantities.
//!
//! The Galerkin system on `⟨k⟩ ≤ N` reads
//! `i ∂_t u − D^α u = ± Π_N((|u|² − 2⨍|u|²) u)`, i.e. in coefficients
//! `∂_t u_k = −i(|k|^α u_k ± (2π)^{-2}(Q(u)_k − R(u)_k))`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gibbs::Sign;
use crate::spectral::{
    band_limit, dealiased_gridsize, Dispersion, GridTransform, QuarticEvaluator, SpectralField,
    C64, TWO_PI,
};

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };

/// `⨍|u|² = (2π)^{-1}∫|u|² = (2π)^{-2}Σ|u_k|²`.
pub fn mean_density(u: &SpectralField) -> f64 {
    u.coeff_mass() / (TWO_PI * TWO_PI)
}

/// `G_t(u) = e^{2it⨍|u|²} u`.
pub fn gauge_forward(u: &SpectralField, t: f64) -> SpectralField {
    let phase = 2.0 * t * mean_density(u);
    u.scale(C64::from_polar(1.0, phase))
}

/// Inverse of [`gauge_forward`]; the mean density is unchanged by the gauge.
pub fn gauge_inverse(u: &SpectralField, t: f64) -> SpectralField {
    let phase = -2.0 * t * mean_density(u);
    u.scale(C64::from_polar(1.0, phase))
}

fn common_kmax(fields: &[&SpectralField]) -> Result<usize> {
    let k = fields[0].kmax();
    if fields.iter().any(|f| f.kmax() != k) {
        return invalid("trilinear forms need a common band limit");
    }
    Ok(k)
}

/// Raw coefficient sums
/// `Q_k = Σ_{k=k1−k2+k3, k2∉{k1,k3}} u_{k1} v̄_{k2} w_{k3}` (on `|k| ≤ 3·kmax`)
/// and `R_k = u_k v̄_k w_k`.
pub fn resonant_split(
    u: &SpectralField,
    v: &SpectralField,
    w: &SpectralField,
) -> Result<(SpectralField, SpectralField)> {
    let m = common_kmax(&[u, v, w])?;
    let mi = m as i64;
    let mut q = SpectralField::zeros(3 * m);
    for k1 in -mi..=mi {
        for k2 in -mi..=mi {
            if k2 == k1 {
                continue;
            }
            let a = u.get(k1) * v.get(k2).conj();
            for k3 in -mi..=mi {
                if k3 == k2 {
                    continue;
                }
                let k = k1 - k2 + k3;
                let cur = q.get(k);
                q.set(k, cur + a * w.get(k3));
            }
        }
    }
    let mut r = SpectralField::zeros(m);
    for k in -mi..=mi {
        r.set(k, u.get(k) * v.get(k).conj() * w.get(k));
    }
    Ok((q, r))
}

/// `Π_N((|u|² − 2⨍|u|²) u)` on the band of `u`, by dealiased quadrature.
pub fn nonlinearity(u: &SpectralField) -> SpectralField {
    let mut ws = NonlinearWorkspace::new(u.kmax());
    let mut out = SpectralField::zeros(u.kmax());
    ws.apply(u.coeffs(), out.coeffs_mut(), true);
    out
}

/// `Π_N(|u|²u)` on the band of `u`.
pub fn cubic_nonlinearity(u: &SpectralField) -> SpectralField {
    let mut ws = NonlinearWorkspace::new(u.kmax());
    let mut out = SpectralField::zeros(u.kmax());
    ws.apply(u.coeffs(), out.coeffs_mut(), false);
    out
}

/// `M(u) = ∫|u|² = (2π)^{-1}Σ|u_k|²`.
pub fn mass(u: &SpectralField) -> f64 {
    u.coeff_mass() / TWO_PI
}

/// `∫|D^{α/2}u|² = (2π)^{-1}Σ|k|^α|u_k|²`.
pub fn kinetic_energy(u: &SpectralField, d: &Dispersion) -> f64 {
    u.frequencies()
        .map(|k| d.multiplier(k) * u.get(k).norm_sqr())
        .sum::<f64>()
        / TWO_PI
}

/// `H(u) = ∫|D^{α/2}u|² ± ½∫|u|⁴`.
pub fn hamiltonian(u: &SpectralField, sign: Sign, d: &Dispersion) -> f64 {
    kinetic_energy(u, d) + sign.factor() * 0.5 * crate::spectral::quartic_integral(u)
}

/// Grid buffers for `(|u|² − 2⨍|u|²)u` on a fixed band.
#[derive(Debug, Clone)]
pub struct NonlinearWorkspace {
    kmax: usize,
    transform: GridTransform,
    grid: Vec<C64>,
    scratch: Vec<C64>,
}

impl NonlinearWorkspace {
    pub fn new(kmax: usize) -> Self {
        let transform = GridTransform::new(dealiased_gridsize(kmax));
        NonlinearWorkspace {
            kmax,
            grid: vec![ZERO; transform.len()],
            scratch: vec![ZERO; transform.scratch_len()],
            transform,
        }
    }

    pub fn gridsize(&self) -> usize {
        self.transform.len()
    }

    /// Writes the projected nonlinearity of `c` into `out`; returns `Σ|c_k|²`.
    pub fn apply(&mut self, c: &[C64], out: &mut [C64], renormalized: bool) -> f64 {
        let s: f64 = c.iter().map(|z| z.norm_sqr()).sum();
        let shift = if renormalized {
            2.0 * s / (TWO_PI * TWO_PI)
        } else {
            0.0
        };
        self.transform
            .synthesize(c, self.kmax, &mut self.grid, &mut self.scratch);
        for z in self.grid.iter_mut() {
            *z *= z.norm_sqr() - shift;
        }
        self.transform
            .analyze(&mut self.grid, self.kmax, out, 1.0, &mut self.scratch);
        s
    }

    /// Strang nonlinear substep `u ← Π(u e^{−i h s (|u|² − 2⨍|u|²)})`.
    pub fn rotate(&mut self, c: &mut [C64], h: f64, sign: f64, renormalized: bool) {
        let s: f64 = c.iter().map(|z| z.norm_sqr()).sum();
        let shift = if renormalized {
            2.0 * s / (TWO_PI * TWO_PI)
        } else {
            0.0
        };
        self.transform
            .synthesize(c, self.kmax, &mut self.grid, &mut self.scratch);
        for z in self.grid.iter_mut() {
            *z *= C64::from_polar(1.0, -h * sign * (z.norm_sqr() - shift));
        }
        self.transform
            .analyze(&mut self.grid, self.kmax, c, 1.0, &mut self.scratch);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Rk4,
    StrangSplit,
}

impl std::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rk4" => Ok(Scheme::Rk4),
            "strang_split" | "strang" => Ok(Scheme::StrangSplit),
            _ => invalid(format!("unknown scheme {s:?}")),
        }
    }
}

pub const MAX_STEPS: f64 = 1e9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub alpha: f64,
    pub n: f64,
    pub dt: f64,
    pub scheme: Scheme,
    pub t_final: f64,
    pub sign: Sign,
    /// Test hook: `false` drops the nonlinearity.
    pub nonlinear: bool,
    /// Test hook: `false` integrates the un-renormalized equation (no `−2⨍|u|²` term).
    pub renormalized: bool,
    /// Diagnostics every `diag_stride` steps (the final time is always recorded).
    pub diag_stride: usize,
}

impl FlowConfig {
    pub fn new(alpha: f64, n: f64, dt: f64, t_final: f64, sign: Sign) -> Self {
        FlowConfig {
            alpha,
            n,
            dt,
            scheme: Scheme::Rk4,
            t_final,
            sign,
            nonlinear: true,
            renormalized: true,
            diag_stride: 1,
        }
    }

    pub fn with_scheme(mut self, scheme: Scheme) -> Self {
        self.scheme = scheme;
        self
    }

    pub fn with_diag_stride(mut self, stride: usize) -> Self {
        self.diag_stride = stride;
        self
    }

    pub fn validate(&self) -> Result<()> {
        Dispersion::new(self.alpha)?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return invalid(format!("dt must be positive, got {}", self.dt));
        }
        if !self.t_final.is_finite() {
            return invalid("t_final must be finite");
        }
        if self.t_final.abs() / self.dt > MAX_STEPS {
            return invalid(format!(
                "|t_final|/dt = {:e} exceeds the step guard {MAX_STEPS:e}",
                self.t_final.abs() / self.dt
            ));
        }
        if !(self.n >= 0.5) {
            return invalid(format!("band parameter must be at least 1/2, got {}", self.n));
        }
        if self.diag_stride == 0 {
            return invalid("diag_stride must be positive");
        }
        Ok(())
    }

    /// Number of steps; the step actually used is `t_final / steps`, which is
    /// at most `dt` in magnitude.
    pub fn steps(&self) -> u64 {
        let r = self.t_final.abs() / self.dt;
        let n = if (r - r.round()).abs() <= 1e-9 * r.max(1.0) {
            r.round()
        } else {
            r.ceil()
        };
        n as u64
    }

    pub fn kmax(&self) -> usize {
        band_limit(self.n).unwrap_or(0)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FlowDiagnostics {
    pub times: Vec<f64>,
    pub mass_series: Vec<f64>,
    pub hamiltonian_series: Vec<f64>,
    pub max_mass_drift: f64,
    pub max_hamiltonian_drift: f64,
}

impl FlowDiagnostics {
    fn push(&mut self, t: f64, m: f64, h: f64) {
        if let (Some(&m0), Some(&h0)) = (self.mass_series.first(), self.hamiltonian_series.first()) {
            self.max_mass_drift = self.max_mass_drift.max((m - m0).abs());
            self.max_hamiltonian_drift = self.max_hamiltonian_drift.max((h - h0).abs());
        }
        self.times.push(t);
        self.mass_series.push(m);
        self.hamiltonian_series.push(h);
    }
}

/// Reusable integrator for one configuration.
#[derive(Debug, Clone)]
pub struct Flow {
    cfg: FlowConfig,
    disp: Dispersion,
    kmax: usize,
    omega: Vec<f64>,
    nl: NonlinearWorkspace,
    quartic: QuarticEvaluator,
    k: [Vec<C64>; 4],
    stage: Vec<C64>,
}

impl Flow {
    pub fn new(cfg: FlowConfig) -> Result<Self> {
        cfg.validate()?;
        let disp = Dispersion::new(cfg.alpha)?;
        let kmax = cfg.kmax();
        let len = 2 * kmax + 1;
        let omega = (0..len)
            .map(|i| disp.multiplier(i as i64 - kmax as i64))
            .collect();
        Ok(Flow {
            cfg,
            disp,
            kmax,
            omega,
            nl: NonlinearWorkspace::new(kmax),
            quartic: QuarticEvaluator::new(kmax),
            k: std::array::from_fn(|_| vec![ZERO; len]),
            stage: vec![ZERO; len],
        })
    }

    pub fn config(&self) -> &FlowConfig {
        &self.cfg
    }

    pub fn kmax(&self) -> usize {
        self.kmax
    }

    /// Brings data onto the band `⟨k⟩ ≤ N`, rejecting energy outside it.
    pub fn prepare(&self, u0: &SpectralField) -> Result<SpectralField> {
        let outside = u0
            .frequencies()
            .any(|k| k.unsigned_abs() as usize > self.kmax && u0.get(k) != ZERO);
        if outside || (band_limit(self.cfg.n).is_none() && u0.support_limit().is_some()) {
            return invalid("initial data is not band-limited by N");
        }
        Ok(u0.resized(self.kmax))
    }

    fn energies(&mut self, c: &[C64]) -> (f64, f64) {
        let mut kin = 0.0;
        let mut s = 0.0;
        for (z, w) in c.iter().zip(&self.omega) {
            let a = z.norm_sqr();
            kin += w * a;
            s += a;
        }
        let q4 = self.quartic.eval_coeffs(c);
        (s / TWO_PI, kin / TWO_PI + self.cfg.sign.factor() * 0.5 * q4)
    }

    /// `out = −i(ω c ± N(c))`.
    fn rhs(&mut self, c: &[C64], out: &mut [C64]) {
        let s = self.cfg.sign.factor();
        if self.cfg.nonlinear {
            self.nl.apply(c, out, self.cfg.renormalized);
            for ((o, z), w) in out.iter_mut().zip(c).zip(&self.omega) {
                let v = z * w + *o * s;
                *o = C64::new(v.im, -v.re);
            }
        } else {
            for ((o, z), w) in out.iter_mut().zip(c).zip(&self.omega) {
                *o = C64::new(z.im * w, -z.re * w);
            }
        }
    }

    fn rk4_step(&mut self, c: &mut [C64], h: f64) {
        let mut k = std::mem::take(&mut self.k);
        let mut stage = std::mem::take(&mut self.stage);
        self.rhs(c, &mut k[0]);
        for i in 0..c.len() {
            stage[i] = c[i] + k[0][i] * (0.5 * h);
        }
        self.rhs(&stage, &mut k[1]);
        for i in 0..c.len() {
            stage[i] = c[i] + k[1][i] * (0.5 * h);
        }
        self.rhs(&stage, &mut k[2]);
        for i in 0..c.len() {
            stage[i] = c[i] + k[2][i] * h;
        }
        self.rhs(&stage, &mut k[3]);
        let h6 = h / 6.0;
        for i in 0..c.len() {
            c[i] += (k[0][i] + (k[1][i] + k[2][i]) * 2.0 + k[3][i]) * h6;
        }
        self.k = k;
        self.stage = stage;
    }

    fn linear_phase(&self, c: &mut [C64], h: f64) {
        for (z, w) in c.iter_mut().zip(&self.omega) {
            *z *= C64::from_polar(1.0, -h * w);
        }
    }

    fn strang_step(&mut self, c: &mut [C64], h: f64) {
        self.linear_phase(c, 0.5 * h);
        if self.cfg.nonlinear {
            self.nl
                .rotate(c, h, self.cfg.sign.factor(), self.cfg.renormalized);
        }
        self.linear_phase(c, 0.5 * h);
    }

    /// Advances coefficients in place by `t_final`; diagnostics are collected
    /// only when `diagnostics` is set.
    pub fn advance(&mut self, c: &mut [C64], diagnostics: bool) -> Result<FlowDiagnostics> {
        assert_eq!(c.len(), 2 * self.kmax + 1, "band mismatch");
        let steps = self.cfg.steps();
        let h = if steps == 0 {
            0.0
        } else {
            self.cfg.t_final / steps as f64
        };
        let mut diag = FlowDiagnostics::default();
        if diagnostics {
            let (m, e) = self.energies(c);
            diag.push(0.0, m, e);
        }
        for step in 1..=steps {
            match self.cfg.scheme {
                Scheme::Rk4 => self.rk4_step(c, h),
                Scheme::StrangSplit => self.strang_step(c, h),
            }
            if !c.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
                return Err(Error::BlowUp {
                    last_finite_time: h * (step - 1) as f64,
                });
            }
            if diagnostics && (step % self.cfg.diag_stride as u64 == 0 || step == steps) {
                let (m, e) = self.energies(c);
                diag.push(h * step as f64, m, e);
            }
        }
        Ok(diag)
    }

    pub fn run(&mut self, u0: &SpectralField) -> Result<(SpectralField, FlowDiagnostics)> {
        let mut u = self.prepare(u0)?;
        let diag = self.advance(u.coeffs_mut(), true)?;
        Ok((u, diag))
    }

    pub fn dispersion(&self) -> &Dispersion {
        &self.disp
    }
}

/// Integrates the truncated flow from `u0` per `cfg`.
pub fn evolve(u0: &SpectralField, cfg: &FlowConfig) -> Result<(SpectralField, FlowDiagnostics)> {
    Flow::new(*cfg)?.run(u0)
}
