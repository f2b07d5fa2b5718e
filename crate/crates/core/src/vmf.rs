//! von Mises–Fisher densities on the unit sphere `S^{D-1}`.
//!
//! The normalizer is `Z(σ) = (2π)^{D/2} I_{D/2-1}(σ) / σ^{D/2-1}`. It is
//! evaluated in the log domain: a power series below [`ASYMPTOTIC_SWITCH`]
//! (whose `σ → 0` limit is the sphere's surface area) and an asymptotic
//! Bessel expansion above it.

use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};

/// Concentration at which [`log_normalizer`] switches from the series to the asymptotic expansion.
pub const ASYMPTOTIC_SWITCH: f64 = 50.0;

/// Default cap on estimated concentrations.
pub const DEFAULT_SIGMA_MAX: f64 = 1e4;

/// Tolerance on `‖f‖ = 1` accepted by density evaluation.
pub const UNIT_TOLERANCE: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Natural log of the gamma function for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * LN_2PI + (x + 0.5) * t.ln() - t + a.ln()
}

/// `log Σ_k (x²/4)^k / (k! (ν+1)_k)`, i.e. `log I_ν(x) − ν log(x/2) + lnΓ(ν+1)`.
fn log_bessel_series_scaled(nu: f64, x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    let mut k = 1.0f64;
    loop {
        term *= q / (k * (nu + k));
        sum += term;
        if term < sum * 1e-17 && k > q.sqrt() {
            break;
        }
        k += 1.0;
        if k > 10_000.0 {
            break;
        }
    }
    sum.ln()
}

/// `log I_ν(x)` for large `x` by the Hankel expansion (used for small orders).
fn log_bessel_hankel(nu: f64, x: f64) -> f64 {
    let mu = 4.0 * nu * nu;
    let mut term = 1.0f64;
    let mut sum = 1.0f64;
    let mut prev = f64::INFINITY;
    for k in 1..200 {
        let kf = k as f64;
        let odd = 2.0 * kf - 1.0;
        term *= -(mu - odd * odd) / (kf * 8.0 * x);
        if term == 0.0 {
            break;
        }
        if term.abs() >= prev {
            break;
        }
        sum += term;
        prev = term.abs();
        if term.abs() < 1e-17 * sum.abs() {
            break;
        }
    }
    x - 0.5 * (2.0 * std::f64::consts::PI * x).ln() + sum.ln()
}

/// `log I_ν(νz)` by the uniform (Debye) expansion, accurate for large order or argument.
fn log_bessel_debye(nu: f64, x: f64) -> f64 {
    let z = x / nu;
    let s = (1.0 + z * z).sqrt();
    let t = 1.0 / s;
    let eta = s + (z / (1.0 + s)).ln();
    let t2 = t * t;
    let u1 = t * (3.0 - 5.0 * t2) / 24.0;
    let u2 = t2 * (81.0 - 462.0 * t2 + 385.0 * t2 * t2) / 1152.0;
    let u3 = t * t2 * (30375.0 - 369603.0 * t2 + 765765.0 * t2 * t2 - 425425.0 * t2 * t2 * t2) / 414720.0;
    let t4 = t2 * t2;
    let u4 = t4
        * (4465125.0 - 94121676.0 * t2 + 349922430.0 * t4 - 446185740.0 * t4 * t2
            + 185910725.0 * t4 * t4)
        / 39813120.0;
    let u5 = t4
        * t
        * (1519035525.0 - 49286948607.0 * t2 + 284499769554.0 * t4 - 614135872350.0 * t4 * t2
            + 566098157625.0 * t4 * t4
            - 188699385875.0 * t4 * t4 * t2)
        / 6688604160.0;
    let inv = 1.0 / nu;
    let series = 1.0 + inv * (u1 + inv * (u2 + inv * (u3 + inv * (u4 + inv * u5))));
    nu * eta - 0.5 * (2.0 * std::f64::consts::PI * nu).ln() - 0.5 * s.ln() + series.ln()
}

/// `log I_ν(x) − ν log x` for `x > 0`, valid across the full range.
fn log_bessel_over_power(nu: f64, x: f64) -> f64 {
    if x < ASYMPTOTIC_SWITCH {
        -nu * std::f64::consts::LN_2 - ln_gamma(nu + 1.0) + log_bessel_series_scaled(nu, x)
    } else if nu < 2.0 {
        log_bessel_hankel(nu, x) - nu * x.ln()
    } else {
        log_bessel_debye(nu, x) - nu * x.ln()
    }
}

/// Natural log of the modified Bessel function of the first kind, `log I_ν(x)`, `x ≥ 0`.
pub fn log_bessel_i(nu: f64, x: f64) -> f64 {
    if x == 0.0 {
        return if nu == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    log_bessel_over_power(nu, x) + nu * x.ln()
}

/// `log` of the surface area of the unit sphere in `R^D`.
pub fn log_sphere_area(dim: usize) -> f64 {
    let h = dim as f64 / 2.0;
    std::f64::consts::LN_2 + h * std::f64::consts::PI.ln() - ln_gamma(h)
}

/// `log Z(σ)` for the vMF distribution on the unit sphere in `R^D`.
pub fn log_normalizer(sigma: f64, dim: usize) -> f64 {
    debug_assert!(sigma >= 0.0 && dim >= 2);
    let nu = dim as f64 / 2.0 - 1.0;
    if sigma == 0.0 {
        return log_sphere_area(dim);
    }
    0.5 * dim as f64 * LN_2PI + log_bessel_over_power(nu, sigma)
}

/// One mixture component: mean direction and concentration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmfComponent {
    pub mu: Vec<f64>,
    pub sigma: f64,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Scales `v` to unit length in place; returns the original norm.
pub fn normalize(v: &mut [f64]) -> f64 {
    let n = norm(v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// `log p(f | μ, σ) = σ μᵀf − log Z(σ)`.
pub fn vmf_log_density(f: &[f64], component: &VmfComponent) -> Result<f64> {
    ensure!(
        f.len() == component.mu.len(),
        DimensionMismatch,
        "vector has dimension {}, component {}",
        f.len(),
        component.mu.len()
    );
    let n = norm(f);
    ensure!(
        (n - 1.0).abs() <= UNIT_TOLERANCE,
        InvalidArgument,
        "feature vector is not unit norm (‖f‖ = {n})"
    );
    Ok(component.sigma * dot(&component.mu, f) - log_normalizer(component.sigma, f.len()))
}

/// The shared dictionary of `K` vMF components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DictionaryParts")]
pub struct VmfDictionary {
    components: Vec<VmfComponent>,
    dim: usize,
    #[serde(skip)]
    log_z: Vec<f64>,
}

#[derive(Deserialize)]
struct DictionaryParts {
    components: Vec<VmfComponent>,
}

impl TryFrom<DictionaryParts> for VmfDictionary {
    type Error = crate::Error;

    fn try_from(p: DictionaryParts) -> Result<Self> {
        Self::new(p.components)
    }
}

impl VmfDictionary {
    pub fn new(components: Vec<VmfComponent>) -> Result<Self> {
        ensure!(!components.is_empty(), Empty, "dictionary needs at least one component");
        let dim = components[0].mu.len();
        ensure!(dim >= 2, InvalidArgument, "dimension must be >= 2");
        for (k, c) in components.iter().enumerate() {
            ensure!(c.mu.len() == dim, DimensionMismatch, "component {k} has dimension {}", c.mu.len());
            ensure!(
                (norm(&c.mu) - 1.0).abs() <= 1e-8,
                InvalidArgument,
                "component {k} mean is not unit norm"
            );
            ensure!(
                c.sigma >= 0.0 && c.sigma.is_finite(),
                InvalidArgument,
                "component {k} has invalid concentration {}",
                c.sigma
            );
        }
        let log_z = components.iter().map(|c| log_normalizer(c.sigma, dim)).collect();
        Ok(Self {
            components,
            dim,
            log_z,
        })
    }

    pub fn components(&self) -> &[VmfComponent] {
        &self.components
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Writes `log p(f | λ_k)` for every component into `out`. `f` must be unit norm.
    pub fn log_densities_into(&self, f: &[f64], out: &mut [f64]) {
        for ((o, c), lz) in out.iter_mut().zip(&self.components).zip(&self.log_z) {
            *o = c.sigma * dot(&c.mu, f) - lz;
        }
    }

    pub fn log_densities(&self, f: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.len()];
        self.log_densities_into(f, &mut out);
        out
    }

    /// Posterior over components under a uniform prior.
    pub fn posterior(&self, f: &[f64]) -> Vec<f64> {
        let mut l = self.log_densities(f);
        let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in l.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        l.iter_mut().for_each(|v| *v /= s);
        l
    }

    /// Index of the component whose mean is closest in cosine similarity.
    pub fn nearest(&self, f: &[f64]) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (k, c) in self.components.iter().enumerate() {
            let s = dot(&c.mu, f);
            if s > best.1 {
                best = (k, s);
            }
        }
        best.0
    }
}

/// Banerjee-style concentration estimate from the mean resultant length, clamped to `[0, sigma_max]`.
pub fn estimate_kappa(vectors: &[&[f64]], sigma_max: f64) -> Result<f64> {
    ensure!(!vectors.is_empty(), Empty, "cannot estimate concentration of an empty cluster");
    let d = vectors[0].len();
    let mut mean = vec![0.0; d];
    for v in vectors {
        mean.iter_mut().zip(v.iter()).for_each(|(m, x)| *m += x);
    }
    let r = norm(&mean) / vectors.len() as f64;
    if r >= 1.0 - 1e-12 {
        return Ok(sigma_max);
    }
    let k = r * (d as f64 - r * r) / (1.0 - r * r);
    Ok(k.clamp(0.0, sigma_max))
}

/// Draws one sample from vMF(μ, κ) with Wood's rejection sampler.
pub fn sample_vmf<R: Rng + ?Sized>(mu: &[f64], kappa: f64, rng: &mut R) -> Vec<f64> {
    let d = mu.len();
    let dm1 = (d - 1) as f64;
    let b = dm1 / ((4.0 * kappa * kappa + dm1 * dm1).sqrt() + 2.0 * kappa);
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
    let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).expect("valid beta parameters");
    let w = loop {
        let z: f64 = beta.sample(rng);
        let w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
        let u: f64 = rng.random();
        if kappa * w + dm1 * (1.0 - x0 * w).ln() - c >= u.ln() {
            break w;
        }
    };
    // random direction orthogonal to mu
    let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let p = dot(&v, mu);
    v.iter_mut().zip(mu).for_each(|(a, m)| *a -= p * m);
    normalize(&mut v);
    let s = (1.0 - w * w).max(0.0).sqrt();
    let mut out: Vec<f64> = mu.iter().zip(&v).map(|(m, a)| w * m + s * a).collect();
    normalize(&mut out);
    out
}

/// Uniform sample on the unit sphere.
pub fn sample_uniform_sphere<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if normalize(&mut v) > 1e-12 {
            return v;
        }
    }
}
