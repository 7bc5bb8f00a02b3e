//! Gaussian free field sampling, Gibbs reweighting and Gaussian-chaos moments.
//!
//! Coefficients are drawn as `u_n = (2π)^{1/2} g_n ⟪n⟫^{-α/2}` with `E|g_n|² = 1`,
//! i.e. the Gaussian measure with density `exp(−∫ |D^{α/2}u|² + |u|² dx)` in the
//! Fourier convention of [`crate::spectral`]. Together with the weight
//! `exp(∓½∫|u|⁴)` this is exactly invariant under the truncated gauged flow.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{complex_gaussian, real_gaussian, stream_rng};
use crate::spectral::{band_limit, Dispersion, QuarticEvaluator, SpectralField, TWO_PI};
use crate::stats::{normalized_weights, weighted_mean, Estimate};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sign {
    Defocusing,
    Focusing,
}

impl Sign {
    /// `+1` defocusing, `−1` focusing.
    pub fn factor(self) -> f64 {
        match self {
            Sign::Defocusing => 1.0,
            Sign::Focusing => -1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Sign::Defocusing => "defocusing",
            Sign::Focusing => "focusing",
        }
    }
}

impl std::str::FromStr for Sign {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "defocusing" => Ok(Sign::Defocusing),
            "focusing" => Ok(Sign::Focusing),
            _ => invalid(format!("unknown sign {s:?}")),
        }
    }
}

/// `E|u_k|²` under the sampled Gaussian measure.
pub fn gff_variance(k: i64, d: &Dispersion) -> f64 {
    TWO_PI * d.jbb_neg_alpha(k)
}

/// One draw of the band-limited Gaussian free field on `⟨n⟩ ≤ n_band`.
///
/// Draw order is `k = −kmax..=kmax`, real then imaginary part. An empty band
/// gives the zero field on `kmax = 0`.
pub fn sample_gff<R: Rng + ?Sized>(alpha: f64, n_band: f64, rng: &mut R) -> Result<SpectralField> {
    let d = Dispersion::new(alpha)?;
    if !(n_band >= 0.5) {
        return invalid(format!("band parameter must be at least 1/2, got {n_band}"));
    }
    let Some(kmax) = band_limit(n_band) else {
        return Ok(SpectralField::zeros(0));
    };
    let mut u = SpectralField::zeros(kmax);
    for (i, c) in u.coeffs_mut().iter_mut().enumerate() {
        let k = i as i64 - kmax as i64;
        *c = complex_gaussian(rng) * gff_variance(k, &d).sqrt();
    }
    Ok(u)
}

/// `‖u‖_{L²} = ((2π)^{-1} Σ|u_k|²)^{1/2}`.
pub fn l2_norm(u: &SpectralField) -> f64 {
    (u.coeff_mass() / TWO_PI).sqrt()
}

fn log_weight_from_quartic(q4: f64, l2: f64, sign: Sign, cutoff: Option<f64>) -> Result<f64> {
    match sign {
        Sign::Defocusing => Ok(-0.5 * q4),
        Sign::Focusing => {
            let k = cutoff.ok_or_else(|| {
                Error::Configuration("focusing Gibbs weight requires cutoff_K".into())
            })?;
            if l2 <= k {
                Ok(0.5 * q4)
            } else {
                Ok(f64::NEG_INFINITY)
            }
        }
    }
}

/// Log density of the Gibbs measure relative to the Gaussian free measure.
pub fn gibbs_log_weight(u: &SpectralField, sign: Sign, cutoff: Option<f64>) -> Result<f64> {
    validate_cutoff(sign, cutoff)?;
    log_weight_from_quartic(crate::spectral::quartic_integral(u), l2_norm(u), sign, cutoff)
}

fn validate_cutoff(sign: Sign, cutoff: Option<f64>) -> Result<()> {
    match (sign, cutoff) {
        (Sign::Focusing, None) => Err(Error::Configuration(
            "focusing Gibbs weight requires cutoff_K".into(),
        )),
        (_, Some(k)) if !(k > 0.0) => invalid(format!("cutoff_K must be positive, got {k}")),
        _ => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GibbsParams {
    pub alpha: f64,
    pub n: f64,
    pub sign: Sign,
    pub cutoff: Option<f64>,
}

impl GibbsParams {
    pub fn validate(&self) -> Result<()> {
        Dispersion::new(self.alpha)?;
        if !(self.n >= 0.5) {
            return invalid(format!("band parameter must be at least 1/2, got {}", self.n));
        }
        validate_cutoff(self.sign, self.cutoff)
    }

    pub fn kmax(&self) -> usize {
        band_limit(self.n).unwrap_or(0)
    }
}

/// Draws sample `index` of the stream `seed` together with its log weight.
pub fn draw_weighted(
    params: &GibbsParams,
    seed: u64,
    index: u64,
    quartic: &mut QuarticEvaluator,
) -> Result<(SpectralField, f64)> {
    let mut rng = stream_rng(seed, index);
    let u = sample_gff(params.alpha, params.n, &mut rng)?;
    let w = log_weight_from_quartic(quartic.eval(&u), l2_norm(&u), params.sign, params.cutoff)?;
    Ok((u, w))
}

/// Importance-weighted GFF samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsEnsemble {
    pub params: GibbsParams,
    pub seed: u64,
    pub samples: Vec<SpectralField>,
    pub log_weights: Vec<f64>,
}

impl GibbsEnsemble {
    /// Draws `count` samples; sample `i` uses the generator `stream_rng(seed, i)`
    /// so the result does not depend on the thread pool.
    pub fn draw(params: GibbsParams, count: usize, seed: u64) -> Result<Self> {
        params.validate()?;
        if count == 0 {
            return invalid("ensemble must contain at least one sample");
        }
        let kmax = params.kmax();
        let drawn: Result<Vec<(SpectralField, f64)>> = (0..count as u64)
            .into_par_iter()
            .map_init(
                || QuarticEvaluator::new(kmax),
                |q, i| draw_weighted(&params, seed, i, q),
            )
            .collect();
        let (samples, log_weights) = drawn?.into_iter().unzip();
        Ok(GibbsEnsemble {
            params,
            seed,
            samples,
            log_weights,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn normalized_weights(&self) -> Result<Vec<f64>> {
        normalized_weights(&self.log_weights)
    }

    /// Self-normalized estimate of `E_ρ f` with a delta-method standard error.
    pub fn weighted_expectation(&self, f: impl Fn(&SpectralField) -> f64) -> Result<Estimate> {
        let w = self.normalized_weights()?;
        let values: Vec<f64> = self.samples.iter().map(f).collect();
        Ok(weighted_mean(&w, &values))
    }
}

/// Real polynomial in i.i.d. standard real Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPolynomial {
    pub n_vars: usize,
    pub terms: Vec<(Vec<u32>, f64)>,
}

impl GaussianPolynomial {
    pub fn monomial(n_vars: usize, exponents: Vec<u32>, coeff: f64) -> Self {
        assert_eq!(exponents.len(), n_vars);
        GaussianPolynomial {
            n_vars,
            terms: vec![(exponents, coeff)],
        }
    }

    /// Every monomial of total degree in `1..=degree`, with Gaussian coefficients.
    pub fn random<R: Rng + ?Sized>(n_vars: usize, degree: u32, rng: &mut R) -> Self {
        let mut terms = Vec::new();
        let mut exps = vec![0u32; n_vars];
        loop {
            let total: u32 = exps.iter().sum();
            if total >= 1 && total <= degree {
                terms.push((exps.clone(), real_gaussian(rng)));
            }
            let mut i = 0;
            loop {
                if i == n_vars {
                    return GaussianPolynomial { n_vars, terms };
                }
                exps[i] += 1;
                if exps[i] <= degree {
                    break;
                }
                exps[i] = 0;
                i += 1;
            }
        }
    }

    pub fn degree(&self) -> u32 {
        self.terms
            .iter()
            .map(|(e, _)| e.iter().sum())
            .max()
            .unwrap_or(0)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|(e, c)| {
                c * e
                    .iter()
                    .zip(x)
                    .map(|(&p, &v)| v.powi(p as i32))
                    .product::<f64>()
            })
            .sum()
    }
}

/// Monte Carlo `‖P‖_{L^p} / ‖P‖_{L²}`.
pub fn moment_ratio<R: Rng + ?Sized>(
    poly: &GaussianPolynomial,
    p: u32,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    if p < 2 || p % 2 != 0 {
        return invalid(format!("p must be an even integer ≥ 2, got {p}"));
    }
    if trials == 0 {
        return invalid("trials must be positive");
    }
    let mut x = vec![0.0; poly.n_vars];
    let (mut sp, mut s2) = (0.0, 0.0);
    for _ in 0..trials {
        x.iter_mut().for_each(|v| *v = real_gaussian(rng));
        let v = poly.eval(&x);
        s2 += v * v;
        sp += v.abs().powi(p as i32);
    }
    let n = trials as f64;
    Ok((sp / n).powf(1.0 / p as f64) / (s2 / n).sqrt())
}

/// Moment ratio of a random polynomial of degree at most `degree` in three
/// Gaussians; hypercontractivity bounds it by `(p−1)^{degree/2}`.
pub fn chaos_moment_check<R: Rng + ?Sized>(
    degree: u32,
    p: u32,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    if degree < 1 {
        return invalid("degree must be at least 1");
    }
    let poly = GaussianPolynomial::random(3, degree, rng);
    moment_ratio(&poly, p, trials, rng)
}
