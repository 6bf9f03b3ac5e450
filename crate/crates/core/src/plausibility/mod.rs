//! Latent plausibility: the hypersphere radius `C_{n_z}`, the regularizers
//! used during explanation search, annulus masses under the standard
//! Gaussian prior, and the closed-form region objective together with its
//! grid-search verification.
//!
//! An annulus `{z : ‖z‖₂ ∈ [a, b]}` is scored by the expected squared
//! distance of a prior sample to the region plus `η` times its volume. For a
//! standard Gaussian in `n` dimensions, writing `P`/`Q` for the regularized
//! incomplete gamma functions and `C` for the chi mean,
//!
//! ```text
//! E[d²] = a²P(n/2, a²/2) + b²Q(n/2, b²/2)
//!       − 2C [a P((n+1)/2, a²/2) + b Q((n+1)/2, b²/2)]
//!       + n [P(n/2+1, a²/2) + Q(n/2+1, b²/2)]
//! vol   = π^{n/2} / Γ(n/2 + 1) · (bⁿ − aⁿ)
//! ```

mod special;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use special::{ln_gamma, reg_gamma_p, reg_gamma_pq, reg_gamma_q};

use crate::error::{Error, Result};

/// `E‖z‖₂` for `z ~ N(0, I_{n_z})`, i.e. `√2 Γ((n_z+1)/2) / Γ(n_z/2)`.
pub fn chi_mean(n_z: usize) -> Result<f64> {
    if n_z == 0 {
        return Err(Error::Input("latent dimension must be positive".into()));
    }
    let n = n_z as f64;
    Ok(std::f64::consts::SQRT_2 * (ln_gamma((n + 1.0) / 2.0) - ln_gamma(n / 2.0)).exp())
}

/// `{z ∈ ℝⁿ : ‖z‖₂ ∈ [inner, outer]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnulusRegion {
    inner: f64,
    outer: f64,
    dim: usize,
}

impl AnnulusRegion {
    pub fn new(inner: f64, outer: f64, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("region dimension must be positive".into()));
        }
        if !(inner >= 0.0) || !(outer >= inner) || inner.is_infinite() {
            return Err(Error::Input(format!(
                "annulus radii must satisfy 0 ≤ a ≤ b, got a={inner}, b={outer}"
            )));
        }
        Ok(Self { inner, outer, dim })
    }

    /// The thickened hypersphere `[C − κ, C + κ]` (inner radius clipped at 0).
    pub fn hypersphere_band(dim: usize, kappa: f64) -> Result<Self> {
        if !(kappa >= 0.0) {
            return Err(Error::Input("band half-width must be nonnegative".into()));
        }
        let c = chi_mean(dim)?;
        Self::new((c - kappa).max(0.0), c + kappa, dim)
    }

    pub fn inner(&self) -> f64 {
        self.inner
    }

    pub fn outer(&self) -> f64 {
        self.outer
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        let r = norm(z);
        r >= self.inner && r <= self.outer
    }
}

fn norm(z: &[f64]) -> f64 {
    z.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Standard-Gaussian mass of the annulus.
pub fn prior_mass(region: &AnnulusRegion) -> Result<f64> {
    let s = region.dim as f64 / 2.0;
    let hi = reg_gamma_p(s, region.outer * region.outer / 2.0)?;
    let lo = reg_gamma_p(s, region.inner * region.inner / 2.0)?;
    Ok((hi - lo).max(0.0))
}

/// Fraction of latent rows whose norm falls inside the annulus.
pub fn empirical_mass(latents: &[Vec<f64>], region: &AnnulusRegion) -> Result<f64> {
    if latents.is_empty() {
        return Err(Error::Input("empirical mass needs at least one latent".into()));
    }
    let inside = latents.iter().filter(|z| region.contains(z)).count();
    Ok(inside as f64 / latents.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerKind {
    /// `β (‖z‖₂ − c)²`
    Hypersphere,
    /// `β ‖z‖₂²`
    Loglik,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerSpec {
    pub kind: RegularizerKind,
    pub beta: f64,
    /// Target radius; only read for the hypersphere kind.
    pub radius: f64,
}

impl RegularizerSpec {
    pub fn none() -> Self {
        Self {
            kind: RegularizerKind::None,
            beta: 0.0,
            radius: 0.0,
        }
    }

    /// Hypersphere regularizer at radius `C_{n_z}`.
    pub fn hypersphere(beta: f64, n_z: usize) -> Result<Self> {
        Self {
            kind: RegularizerKind::Hypersphere,
            beta,
            radius: chi_mean(n_z)?,
        }
        .validated()
    }

    pub fn loglik(beta: f64) -> Result<Self> {
        Self {
            kind: RegularizerKind::Loglik,
            beta,
            radius: 0.0,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Input(format!("regularizer weight must be ≥ 0, got {}", self.beta)));
        }
        if self.kind == RegularizerKind::Hypersphere && !(self.radius > 0.0) {
            return Err(Error::Input("hypersphere radius must be positive".into()));
        }
        Ok(self)
    }
}

/// Regularizer value and gradient at `z`. The hypersphere gradient is taken
/// as 0 at the origin.
pub fn omega(z: &[f64], spec: &RegularizerSpec) -> (f64, Vec<f64>) {
    match spec.kind {
        RegularizerKind::None => (0.0, vec![0.0; z.len()]),
        RegularizerKind::Loglik => {
            let sq: f64 = z.iter().map(|v| v * v).sum();
            (spec.beta * sq, z.iter().map(|v| 2.0 * spec.beta * v).collect())
        }
        RegularizerKind::Hypersphere => {
            let r = norm(z);
            let gap = r - spec.radius;
            let value = spec.beta * gap * gap;
            let grad = if r > 0.0 {
                let f = 2.0 * spec.beta * gap / r;
                z.iter().map(|v| f * v).collect()
            } else {
                vec![0.0; z.len()]
            };
            (value, grad)
        }
    }
}

/// Radius-only pieces of the expected-distance formula, so a grid search can
/// evaluate each endpoint once.
#[derive(Debug, Clone, Copy)]
struct DistanceTerms {
    n: f64,
    chi: f64,
}

impl DistanceTerms {
    fn new(dim: usize) -> Result<Self> {
        Ok(Self {
            n: dim as f64,
            chi: chi_mean(dim)?,
        })
    }

    /// Contribution of prior mass inside radius `a`.
    fn inner(&self, a: f64) -> Result<f64> {
        let x = a * a / 2.0;
        let p0 = reg_gamma_p(self.n / 2.0, x)?;
        let p1 = reg_gamma_p((self.n + 1.0) / 2.0, x)?;
        let p2 = reg_gamma_p(self.n / 2.0 + 1.0, x)?;
        Ok(a * a * p0 - 2.0 * self.chi * a * p1 + self.n * p2)
    }

    /// Contribution of prior mass outside radius `b`.
    fn outer(&self, b: f64) -> Result<f64> {
        let x = b * b / 2.0;
        let q0 = reg_gamma_q(self.n / 2.0, x)?;
        let q1 = reg_gamma_q((self.n + 1.0) / 2.0, x)?;
        let q2 = reg_gamma_q(self.n / 2.0 + 1.0, x)?;
        Ok(b * b * q0 - 2.0 * self.chi * b * q1 + self.n * q2)
    }
}

/// `E_{z∼N(0,I)} [min_{z'∈D} ‖z − z'‖²]` for the annulus `D`.
pub fn expected_region_distance(region: &AnnulusRegion) -> Result<f64> {
    let t = DistanceTerms::new(region.dim)?;
    Ok(t.inner(region.inner)? + t.outer(region.outer)?)
}

/// `ln` of the volume of the unit ball in `dim` dimensions.
fn ln_unit_ball(dim: usize) -> f64 {
    let n = dim as f64;
    0.5 * n * std::f64::consts::PI.ln() - ln_gamma(n / 2.0 + 1.0)
}

/// `scale · vol(annulus)` evaluated through logarithms; `+∞` on overflow.
fn scaled_volume(scale: f64, inner: f64, outer: f64, dim: usize) -> f64 {
    if outer <= 0.0 || scale == 0.0 || inner == outer {
        return 0.0;
    }
    let n = dim as f64;
    let ln_outer = scale.ln() + ln_unit_ball(dim) + n * outer.ln();
    let shell = if inner > 0.0 {
        -(n * (inner.ln() - outer.ln())).exp_m1()
    } else {
        1.0
    };
    ln_outer.exp() * shell
}

/// Lebesgue volume of the annulus.
pub fn region_volume(region: &AnnulusRegion) -> Result<f64> {
    let v = scaled_volume(1.0, region.inner, region.outer, region.dim);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("region volume"))
    }
}

/// Expected squared distance plus `η` times volume.
pub fn region_objective(region: &AnnulusRegion, eta: f64) -> Result<f64> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::Input(format!("volume weight must be positive, got {eta}")));
    }
    let vol = scaled_volume(eta, region.inner, region.outer, region.dim);
    if !vol.is_finite() {
        return Err(Error::NonFinite("region objective volume term"));
    }
    Ok(expected_region_distance(region)? + vol)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionSearch {
    pub inner: f64,
    pub outer: f64,
    pub objective: f64,
    /// Spacing between neighbouring grid radii.
    pub step: f64,
}

/// Grid search of [`region_objective`] over `0 ≤ a ≤ b ≤ radius_max` with
/// `grid_points` evenly spaced radii per axis. Ties resolve to the
/// lexicographically smallest `(a, b)`.
pub fn verify_optimal_region(
    dim: usize,
    eta: f64,
    grid_points: usize,
    radius_max: f64,
) -> Result<RegionSearch> {
    if grid_points < 100 {
        return Err(Error::Input(format!("grid search needs ≥ 100 points, got {grid_points}")));
    }
    if !(radius_max > 0.0) || !radius_max.is_finite() {
        return Err(Error::Input("radius_max must be positive".into()));
    }
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::Input(format!("volume weight must be positive, got {eta}")));
    }
    let step = radius_max / (grid_points - 1) as f64;
    let radii: Vec<f64> = (0..grid_points).map(|i| i as f64 * step).collect();
    let terms = DistanceTerms::new(dim)?;
    let inner: Vec<f64> = radii.iter().map(|&a| terms.inner(a)).collect::<Result<_>>()?;
    let outer: Vec<f64> = radii.iter().map(|&b| terms.outer(b)).collect::<Result<_>>()?;

    let row_minima: Vec<(f64, usize, usize)> = (0..grid_points)
        .into_par_iter()
        .map(|i| {
            let mut best = (f64::INFINITY, i, i);
            for j in i..grid_points {
                let v = inner[i] + outer[j] + scaled_volume(eta, radii[i], radii[j], dim);
                if v < best.0 {
                    best = (v, i, j);
                }
            }
            best
        })
        .collect();
    let mut best = row_minima[0];
    for &row in &row_minima[1..] {
        if row.0 < best.0 {
            best = row;
        }
    }
    if !best.0.is_finite() {
        return Err(Error::NonFinite("region grid search"));
    }
    Ok(RegionSearch {
        inner: radii[best.1],
        outer: radii[best.2],
        objective: best.0,
        step,
    })
}

/// One row of the prior-versus-encoded mass comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MassRow {
    pub kappa: f64,
    pub prior: f64,
    pub empirical: Option<f64>,
}

/// Masses of the bands `[C − κ, C + κ]` for each `κ`, under the prior and
/// optionally under a sample of encoded latents.
pub fn mass_table(dim: usize, kappas: &[f64], latents: Option<&[Vec<f64>]>) -> Result<Vec<MassRow>> {
    kappas
        .iter()
        .map(|&kappa| {
            let region = AnnulusRegion::hypersphere_band(dim, kappa)?;
            let empirical = latents.map(|l| empirical_mass(l, &region)).transpose()?;
            Ok(MassRow {
                kappa,
                prior: prior_mass(&region)?,
                empirical,
            })
        })
        .collect()
}

/// Band half-widths `0, 0.25, …, 2.0`.
pub fn default_kappas() -> Vec<f64> {
    (0..=8).map(|i| i as f64 * 0.25).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chi_mean_closed_forms() {
        assert!((chi_mean(1).unwrap() - (2.0 / std::f64::consts::PI).sqrt()).abs() < 1e-14);
        // E‖z‖ in 2-D is √(π/2)
        assert!((chi_mean(2).unwrap() - (std::f64::consts::PI / 2.0).sqrt()).abs() < 1e-14);
        assert!((chi_mean(64).unwrap() - 7.97).abs() < 0.01);
        assert!(chi_mean(0).is_err());
    }

    #[test]
    fn chi_mean_large_dimension_asymptotics() {
        let c = chi_mean(10_000).unwrap();
        let approx = (10_000f64 - 0.5).sqrt();
        assert!((c - approx).abs() / approx < 1e-4);
    }

    #[test]
    fn total_mass_is_one() {
        let r = AnnulusRegion::new(0.0, 1e3, 8).unwrap();
        assert!((prior_mass(&r).unwrap() - 1.0).abs() < 1e-14);
        let empty = AnnulusRegion::new(2.0, 2.0, 8).unwrap();
        assert_eq!(prior_mass(&empty).unwrap(), 0.0);
    }

    #[test]
    fn invalid_regions_rejected() {
        assert!(AnnulusRegion::new(2.0, 1.0, 3).is_err());
        assert!(AnnulusRegion::new(-1.0, 1.0, 3).is_err());
        assert!(AnnulusRegion::new(0.0, 1.0, 0).is_err());
    }

    #[test]
    fn empirical_mass_cases() {
        let zeros = vec![vec![0.0; 4]; 10];
        let r = AnnulusRegion::new(0.0, 1.0, 4).unwrap();
        assert_eq!(empirical_mass(&zeros, &r).unwrap(), 1.0);
        let rows = vec![vec![1.0, 0.0], vec![3.0, 4.0], vec![0.0, 0.5]];
        let band = AnnulusRegion::new(0.9, 5.0, 2).unwrap();
        assert!((empirical_mass(&rows, &band).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(empirical_mass(&[], &band).is_err());
    }

    #[test]
    fn omega_cases() {
        let spec = RegularizerSpec {
            kind: RegularizerKind::Hypersphere,
            beta: 2.0,
            radius: 5.0,
        };
        let (v, g) = omega(&[3.0, 4.0], &spec);
        assert_eq!(v, 0.0);
        assert_eq!(g, vec![0.0, 0.0]);
        let (v, g) = omega(&[0.0, 0.0], &spec);
        assert_eq!(v, 50.0);
        assert_eq!(g, vec![0.0, 0.0]);
        let ll = RegularizerSpec::loglik(3.0).unwrap();
        assert_eq!(omega(&[0.0, 0.0, 0.0], &ll), (0.0, vec![0.0; 3]));
        assert_eq!(omega(&[1.0, 2.0], &RegularizerSpec::none()).0, 0.0);
        assert!(RegularizerSpec::loglik(-1.0).is_err());
    }

    #[test]
    fn point_regions() {
        // a = b = 0: second moment n
        let r = AnnulusRegion::new(0.0, 0.0, 7).unwrap();
        assert!((region_objective(&r, 1.0).unwrap() - 7.0).abs() < 1e-12);
        // a = b = C: variance of the chi distribution, n − C²
        for &n in &[2usize, 8, 64] {
            let c = chi_mean(n).unwrap();
            let r = AnnulusRegion::new(c, c, n).unwrap();
            let var = n as f64 - c * c;
            assert!((expected_region_distance(&r).unwrap() - var).abs() < 1e-10);
            assert_eq!(region_volume(&r).unwrap(), 0.0);
        }
    }

    #[test]
    fn volume_matches_direct_formula_in_low_dimension() {
        let r = AnnulusRegion::new(1.0, 2.0, 2).unwrap();
        let direct = std::f64::consts::PI * (4.0 - 1.0);
        assert!((region_volume(&r).unwrap() - direct).abs() < 1e-12);
        let r3 = AnnulusRegion::new(0.0, 1.5, 3).unwrap();
        let ball = 4.0 / 3.0 * std::f64::consts::PI * 1.5f64.powi(3);
        assert!((region_volume(&r3).unwrap() - ball).abs() < 1e-12);
    }

    #[test]
    fn vanishing_volume_weight_pushes_outer_radius_to_edge() {
        let s = verify_optimal_region(8, 1e-300, 200, 6.0).unwrap();
        assert_eq!(s.outer, 6.0);
    }

    #[test]
    fn default_kappa_grid() {
        assert_eq!(default_kappas(), vec![0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0]);
    }
}
