//! The second Picard iterate of band-limited Gaussian data, sampled and in
//! expectation.
//!
//! With `a_n = g_n ⟪n⟫^{-α/2}` on the band `N^{1−δ} < |n| < N`,
//! `Z_k(t) = −i e^{−it|k|^α} [Σ_{Γ(k)} Θ(t,Φ) a_{k1} ā_{k2} a_{k3} − t|a_k|²a_k]`
//! for `⟨k⟩ ≤ N`, where `Γ(k) = {k1−k2+k3 = k, k2 ∉ {k1,k3}}` with all three in the band.
//! Sums carry no `2π` factors and `‖Z‖² = Σ_k |Z_k|²`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::rng::{complex_gaussian, stream_rng};
use crate::spectral::{abs_pow, band_limit, Dispersion, SpectralField, C64};
use crate::stats::{ls_slope, mean_stderr, Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PicardQuery {
    pub n: u32,
    pub delta: f64,
    pub alpha: f64,
    pub t: f64,
}

impl PicardQuery {
    pub fn new(n: u32, delta: f64, alpha: f64, t: f64) -> Result<Self> {
        let q = PicardQuery { n, delta, alpha, t };
        q.validate()?;
        Ok(q)
    }

    pub fn validate(&self) -> Result<()> {
        Dispersion::new(self.alpha)?;
        if self.n < 4 {
            return invalid(format!("N must be at least 4, got {}", self.n));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return invalid(format!("delta must lie in (0,1), got {}", self.delta));
        }
        if !self.t.is_finite() {
            return invalid("t must be finite");
        }
        if self.band().is_empty() {
            return invalid("frequency band is empty");
        }
        Ok(())
    }

    /// `{n : N^{1−δ} < |n| < N}`, ascending.
    pub fn band(&self) -> Vec<i64> {
        // relative slack so that an exact integer N^{1−δ} (e.g. 32^{0.6} = 8) stays excluded
        let lo = (self.n as f64).powf(1.0 - self.delta) * (1.0 + 1e-12);
        let n = self.n as i64;
        (-n + 1..n).filter(|&k| (k.abs() as f64) > lo).collect()
    }

    /// Output frequencies `⟨k⟩ ≤ N`.
    pub fn output_kmax(&self) -> usize {
        band_limit(self.n as f64).unwrap_or(0)
    }
}

/// `Θ(t,Φ) = ∫_0^t e^{it'Φ} dt'`.
pub fn theta(t: f64, phi: f64) -> C64 {
    let x = t * phi;
    if x.abs() < 1e-6 {
        // t(1 + ix/2 − x²/6 − ix³/24)
        C64::new(t * (1.0 - x * x / 6.0), t * (x / 2.0 - x * x * x / 24.0))
    } else {
        // (e^{ix} − 1)/(iΦ) without the cancellation in e^{ix} − 1
        let s = (0.5 * x).sin();
        C64::new(x.sin(), 2.0 * s * s) / phi
    }
}

/// `|Θ(t,x)|² = 4 sin²(tx/2)/x²`.
#[inline]
pub fn theta_sq(t: f64, x: f64) -> f64 {
    let y = t * x;
    if y.abs() < 1e-3 {
        let y2 = y * y;
        t * t * (1.0 - y2 / 12.0 + y2 * y2 / 360.0)
    } else {
        let s = (0.5 * y).sin();
        4.0 * s * s / (x * x)
    }
}

/// `Φ = |k1|^α − |k2|^α + |k3|^α − |k|^α`.
#[inline]
pub fn resonance(alpha: f64, k: i64, k1: i64, k2: i64, k3: i64) -> f64 {
    abs_pow(k1 as f64, alpha) - abs_pow(k2 as f64, alpha) + abs_pow(k3 as f64, alpha)
        - abs_pow(k as f64, alpha)
}

#[derive(Debug, Clone, Copy)]
struct Triple {
    i1: u32,
    i2: u32,
    i3: u32,
    coeff: C64,
}

/// Precomputed interaction coefficients for repeated sampling.
#[derive(Debug, Clone)]
pub struct PicardSampler {
    t: f64,
    alpha: f64,
    band: Vec<i64>,
    amp: Vec<f64>,
    kout: usize,
    /// Triples per output frequency, `k = −kout..=kout`.
    triples: Vec<Vec<Triple>>,
    /// Band index of `k`, when `k` is in the band.
    diag: Vec<Option<u32>>,
}

impl PicardSampler {
    pub fn new(q: &PicardQuery) -> Result<Self> {
        q.validate()?;
        Self::with_band(q.alpha, q.t, q.band(), q.output_kmax())
    }

    /// Sampler over an arbitrary symmetric or asymmetric frequency set.
    pub fn with_band(alpha: f64, t: f64, band: Vec<i64>, kout: usize) -> Result<Self> {
        let d = Dispersion::new(alpha)?;
        if band.is_empty() {
            return invalid("frequency band is empty");
        }
        let mut band = band;
        band.sort_unstable();
        band.dedup();
        let lo = band[0];
        let hi = *band.last().unwrap();
        let mut index = vec![u32::MAX; (hi - lo + 1) as usize];
        for (i, &n) in band.iter().enumerate() {
            index[(n - lo) as usize] = i as u32;
        }
        let lookup = |n: i64| -> Option<u32> {
            if n < lo || n > hi {
                None
            } else {
                let i = index[(n - lo) as usize];
                (i != u32::MAX).then_some(i)
            }
        };
        let amp: Vec<f64> = band.iter().map(|&n| d.jbb_neg_alpha(n).sqrt()).collect();
        let ko = kout as i64;
        let mut triples = Vec::with_capacity(2 * kout + 1);
        let mut diag = Vec::with_capacity(2 * kout + 1);
        for k in -ko..=ko {
            let mut list = Vec::new();
            for (i1, &k1) in band.iter().enumerate() {
                for (i3, &k3) in band.iter().enumerate() {
                    let k2 = k1 + k3 - k;
                    if k2 == k1 || k2 == k3 {
                        continue;
                    }
                    if let Some(i2) = lookup(k2) {
                        let phi = resonance(alpha, k, k1, k2, k3);
                        let w = amp[i1] * amp[i2 as usize] * amp[i3];
                        list.push(Triple {
                            i1: i1 as u32,
                            i2,
                            i3: i3 as u32,
                            coeff: theta(t, phi) * w,
                        });
                    }
                }
            }
            triples.push(list);
            diag.push(lookup(k));
        }
        Ok(PicardSampler {
            t,
            alpha,
            band,
            amp,
            kout,
            triples,
            diag,
        })
    }

    pub fn band(&self) -> &[i64] {
        &self.band
    }

    pub fn triple_count(&self) -> usize {
        self.triples.iter().map(Vec::len).sum()
    }

    /// `Z` for the given band Gaussians `g` (same order as [`Self::band`]).
    pub fn evaluate(&self, g: &[C64], with_phase: bool) -> SpectralField {
        assert_eq!(g.len(), self.band.len());
        let ko = self.kout as i64;
        let mut z = SpectralField::zeros(self.kout);
        for (idx, k) in (-ko..=ko).enumerate() {
            let mut acc = C64::new(0.0, 0.0);
            for tr in &self.triples[idx] {
                acc += tr.coeff
                    * g[tr.i1 as usize]
                    * g[tr.i2 as usize].conj()
                    * g[tr.i3 as usize];
            }
            if let Some(i) = self.diag[idx] {
                let a = g[i as usize] * self.amp[i as usize];
                acc -= a * a.norm_sqr() * self.t;
            }
            if with_phase {
                let w = abs_pow(k as f64, self.alpha);
                acc *= C64::new(0.0, -1.0) * C64::from_polar(1.0, -self.t * w);
            }
            z.set(k, acc);
        }
        z
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, with_phase: bool) -> SpectralField {
        let g: Vec<C64> = self.band.iter().map(|_| complex_gaussian(rng)).collect();
        self.evaluate(&g, with_phase)
    }

    /// Monte Carlo mean of `‖Z‖²` over `samples` draws, draw `i` seeded by `(seed, i)`.
    pub fn mc_norm_sq(&self, samples: usize, seed: u64) -> Estimate {
        let values: Vec<f64> = (0..samples as u64)
            .into_par_iter()
            .map(|i| self.sample(&mut stream_rng(seed, i), true).coeff_mass())
            .collect();
        mean_stderr(&values)
    }
}

/// One draw of `Z` (with the outer phase).
pub fn picard2_sample<R: Rng + ?Sized>(q: &PicardQuery, rng: &mut R) -> Result<SpectralField> {
    Ok(PicardSampler::new(q)?.sample(rng, true))
}

/// Exact `E‖Z‖²` by Gaussian contraction:
/// `Σ_k 2Σ_{Γ(k)} |Θ|² ⟪k1⟫^{-α}⟪k2⟫^{-α}⟪k3⟫^{-α} + Σ_{k ∈ band} 6t²⟪k⟫^{-3α}`.
///
/// The sum over `Γ(k)` is organized by `p = k1 − k = k2 − k3 ≠ 0`, for which
/// `Φ = A_p(k) − A_p(k3)` with `A_p(x) = |x+p|^α − |x|^α`; the `±p` halves agree
/// by the reflection symmetry of the band.
pub fn picard2_wick_norm(q: &PicardQuery) -> Result<f64> {
    q.validate()?;
    let d = Dispersion::new(q.alpha)?;
    let n = q.n as i64;
    let band = q.band();
    let kout = q.output_kmax() as i64;
    let span = 4 * n;
    let in_band = {
        let mut v = vec![false; (2 * span + 1) as usize];
        for &b in &band {
            v[(b + span) as usize] = true;
        }
        v
    };
    let inb = |x: i64| x.abs() <= span && in_band[(x + span) as usize];
    let w = |x: i64| d.jbb_neg_alpha(x);
    let t = q.t;
    let half_t = 0.5 * t;
    let alpha = q.alpha;
    let ap = |x: i64, p: i64| abs_pow((x + p) as f64, alpha) - abs_pow(x as f64, alpha);

    let partial: Vec<f64> = (1..2 * n)
        .into_par_iter()
        .map(|p| {
            let mut a3 = Vec::new();
            let mut s3 = Vec::new();
            let mut c3 = Vec::new();
            let mut w3 = Vec::new();
            for &k3 in &band {
                if inb(k3 + p) {
                    let a = ap(k3, p);
                    let (s, c) = (half_t * a).sin_cos();
                    a3.push(a);
                    s3.push(s);
                    c3.push(c);
                    w3.push(w(k3) * w(k3 + p));
                }
            }
            if a3.is_empty() {
                return 0.0;
            }
            let mut total = 0.0;
            for k in -kout..=kout {
                if !inb(k + p) {
                    continue;
                }
                let a = ap(k, p);
                let (s, c) = (half_t * a).sin_cos();
                let mut inner = 0.0;
                for j in 0..a3.len() {
                    let x = a - a3[j];
                    let y = t * x;
                    let f = if y.abs() < 1e-3 {
                        let y2 = y * y;
                        t * t * (1.0 - y2 / 12.0 + y2 * y2 / 360.0)
                    } else {
                        let sn = s * c3[j] - c * s3[j];
                        4.0 * sn * sn / (x * x)
                    };
                    inner += w3[j] * f;
                }
                if inb(k) {
                    inner -= w(k) * w(k + p) * t * t;
                }
                total += w(k + p) * inner;
            }
            total
        })
        .collect();
    let q_part: f64 = partial.iter().sum::<f64>() * 2.0;
    let r_part: f64 = band
        .iter()
        .filter(|&&k| k.abs() <= kout)
        .map(|&k| 6.0 * t * t * w(k).powi(3))
        .sum();
    Ok(2.0 * q_part + r_part)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    pub alpha: f64,
    pub n: u32,
    pub wick_norm: f64,
    pub mc_norm: Option<f64>,
    pub mc_stderr: Option<f64>,
    /// Slope of `log wick_norm` against `log N` over this and all smaller `N`.
    pub slope_so_far: Option<f64>,
    /// `wick_norm / (log N)³`.
    pub log_cubed_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingStudy {
    pub delta: f64,
    pub t: f64,
    pub records: Vec<ScalingRecord>,
}

impl ScalingStudy {
    pub fn for_alpha(&self, alpha: f64) -> Vec<&ScalingRecord> {
        self.records.iter().filter(|r| r.alpha == alpha).collect()
    }

    /// Least-squares slope over all scales for `alpha`.
    pub fn slope(&self, alpha: f64) -> Option<f64> {
        self.for_alpha(alpha).last().and_then(|r| r.slope_so_far)
    }

    pub fn log_cubed_ratios(&self, alpha: f64) -> Vec<f64> {
        self.for_alpha(alpha).iter().map(|r| r.log_cubed_ratio).collect()
    }
}

/// Monte Carlo settings for [`scaling_study`]; MC runs only for `N ≤ max_n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McSettings {
    pub samples: usize,
    pub seed: u64,
    pub max_n: u32,
}

/// Wick norms across `ns` for every `alpha`, with running log-log slopes.
pub fn scaling_study(
    alphas: &[f64],
    ns: &[u32],
    delta: f64,
    t: f64,
    mc: Option<McSettings>,
) -> Result<ScalingStudy> {
    if ns.len() < 3 {
        return invalid("scaling study needs at least three scales");
    }
    if ns.windows(2).any(|w| w[0] >= w[1]) {
        return invalid("scales must be strictly increasing");
    }
    let mut records = Vec::new();
    for &alpha in alphas {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for &n in ns {
            let q = PicardQuery::new(n, delta, alpha, t)?;
            let wick = picard2_wick_norm(&q)?;
            let (mc_norm, mc_stderr) = match mc {
                Some(m) if n <= m.max_n => {
                    let seed = crate::rng::keyed_seed(m.seed, &format!("alpha={alpha};n={n}"));
                    let e = PicardSampler::new(&q)?.mc_norm_sq(m.samples, seed);
                    (Some(e.mean), Some(e.stderr))
                }
                _ => (None, None),
            };
            xs.push((n as f64).ln());
            ys.push(wick.ln());
            let slope = (xs.len() >= 2).then(|| ls_slope(&xs, &ys));
            records.push(ScalingRecord {
                alpha,
                n,
                wick_norm: wick,
                mc_norm,
                mc_stderr,
                slope_so_far: slope,
                log_cubed_ratio: wick / (n as f64).ln().powi(3),
            });
        }
    }
    Ok(ScalingStudy { delta, t, records })
}
