//! Linear-manifold testbeds: a `k`-dimensional affine subspace of `R^D` with
//! an exact encoder/decoder pair, Gaussian latent data, the closed-form score
//! of the diffused marginal, and the concentration geometry of noisy samples
//! around the scaled manifold.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{normal, normal_vector, seeded};
use crate::schedule::{NoiseSchedule, ScheduleError};

const ORTHONORMAL_TOL: f64 = 1e-10;
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ManifoldError {
    #[error("intrinsic dimension {k} must satisfy 1 <= k < D = {ambient}")]
    InvalidDimensions { ambient: usize, k: usize },
    #[error("basis columns are not orthonormal (max deviation {0:e})")]
    NotOrthonormal(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("latent covariance is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("sample count must be at least 1")]
    NoSamples,
    #[error("scale must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("delta must lie in (0, 1), got {0}")]
    InvalidDelta(f64),
    #[error("noise covariance is singular at t = {0}")]
    SingularCovariance(usize),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

/// Affine subspace `{basis·z + offset}` with orthonormal basis columns.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearManifold {
    basis: DMatrix<f64>,
    offset: DVector<f64>,
}

impl LinearManifold {
    pub fn new(basis: DMatrix<f64>, offset: DVector<f64>) -> Result<Self, ManifoldError> {
        let m = Self::from_parts_unchecked(basis, offset)?;
        let gram = m.basis.transpose() * &m.basis;
        let dev = (gram - DMatrix::identity(m.intrinsic_dim(), m.intrinsic_dim())).amax();
        if dev > ORTHONORMAL_TOL {
            return Err(ManifoldError::NotOrthonormal(dev));
        }
        Ok(m)
    }

    /// Checks dimensions only. A non-orthonormal basis breaks the exact
    /// autoencoder property; this exists to construct counterexamples.
    pub fn from_parts_unchecked(
        basis: DMatrix<f64>,
        offset: DVector<f64>,
    ) -> Result<Self, ManifoldError> {
        let (ambient, k) = basis.shape();
        if k == 0 || k >= ambient {
            return Err(ManifoldError::InvalidDimensions { ambient, k });
        }
        if offset.len() != ambient {
            return Err(ManifoldError::DimensionMismatch {
                expected: ambient,
                got: offset.len(),
            });
        }
        Ok(Self { basis, offset })
    }

    /// Orthonormal basis from the QR factor of a seeded Gaussian `D × k`
    /// matrix, zero offset.
    pub fn random(ambient: usize, k: usize, seed: u64) -> Result<Self, ManifoldError> {
        if k == 0 || k >= ambient {
            return Err(ManifoldError::InvalidDimensions { ambient, k });
        }
        let mut rng = seeded(seed);
        let g = DMatrix::from_fn(ambient, k, |_, _| normal(&mut rng));
        let q = g.qr().q();
        Self::new(q, DVector::zeros(ambient))
    }

    pub fn with_offset(mut self, offset: DVector<f64>) -> Result<Self, ManifoldError> {
        if offset.len() != self.ambient_dim() {
            return Err(ManifoldError::DimensionMismatch {
                expected: self.ambient_dim(),
                got: offset.len(),
            });
        }
        self.offset = offset;
        Ok(self)
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.nrows()
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.basis.ncols()
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn offset(&self) -> &DVector<f64> {
        &self.offset
    }

    /// Component of `v` orthogonal to the basis column space.
    pub fn normal_component(&self, v: &DVector<f64>) -> DVector<f64> {
        v - &self.basis * (self.basis.transpose() * v)
    }

    fn check_ambient(&self, x: &DVector<f64>) -> Result<(), ManifoldError> {
        if x.len() != self.ambient_dim() {
            return Err(ManifoldError::DimensionMismatch {
                expected: self.ambient_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }
}

/// Encoder/decoder pair backed by a [`LinearManifold`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearAutoencoder {
    manifold: LinearManifold,
}

impl LinearAutoencoder {
    pub fn new(manifold: LinearManifold) -> Self {
        Self { manifold }
    }

    pub fn manifold(&self) -> &LinearManifold {
        &self.manifold
    }

    /// `z = basisᵀ (x − offset)`.
    pub fn encode(&self, x: &DVector<f64>) -> DVector<f64> {
        self.manifold.basis.transpose() * (x - &self.manifold.offset)
    }

    /// `x = basis · z + offset`.
    pub fn decode(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.manifold.basis * z + &self.manifold.offset
    }

    /// Pushes a latent tangent vector to ambient space (no offset).
    pub fn decode_direction(&self, dz: &DVector<f64>) -> DVector<f64> {
        &self.manifold.basis * dz
    }

    /// Pulls an ambient cotangent back to latent coordinates (`basisᵀ g`).
    pub fn pullback(&self, g: &DVector<f64>) -> DVector<f64> {
        self.manifold.basis.transpose() * g
    }
}

/// Gaussian over latent coordinates. A degenerate instance (zero covariance)
/// is allowed only through [`LatentGaussian::degenerate`].
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGaussian {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
    factor: DMatrix<f64>,
}

impl LatentGaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, ManifoldError> {
        let k = mean.len();
        if cov.shape() != (k, k) {
            return Err(ManifoldError::DimensionMismatch {
                expected: k,
                got: cov.nrows(),
            });
        }
        if (&cov - cov.transpose()).amax() > SYMMETRY_TOL {
            return Err(ManifoldError::NotPositiveDefinite);
        }
        let factor = cov
            .clone()
            .cholesky()
            .ok_or(ManifoldError::NotPositiveDefinite)?
            .l();
        Ok(Self { mean, cov, factor })
    }

    pub fn standard(k: usize) -> Self {
        Self::new(DVector::zeros(k), DMatrix::identity(k, k)).expect("identity is PD")
    }

    /// Point mass at `mean`.
    pub fn degenerate(mean: DVector<f64>) -> Self {
        let k = mean.len();
        Self {
            mean,
            cov: DMatrix::zeros(k, k),
            factor: DMatrix::zeros(k, k),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn sample<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let e = normal_vector(rng, self.dim());
        &self.mean + &self.factor * e
    }
}

/// `n` ambient points `decode(z)`, `z ~ g`, deterministic per seed.
pub fn sample_manifold_data(
    m: &LinearManifold,
    g: &LatentGaussian,
    n: usize,
    seed: u64,
) -> Result<Vec<DVector<f64>>, ManifoldError> {
    if n == 0 {
        return Err(ManifoldError::NoSamples);
    }
    if g.dim() != m.intrinsic_dim() {
        return Err(ManifoldError::DimensionMismatch {
            expected: m.intrinsic_dim(),
            got: g.dim(),
        });
    }
    let ae = LinearAutoencoder::new(m.clone());
    let mut rng = seeded(seed);
    Ok((0..n).map(|_| ae.decode(&g.sample(&mut rng))).collect())
}

/// Closed-form `∇ log p_t(x_t)` of the diffused testbed marginal
/// `N(μ_t, Σ_t)`, `μ_t = √ᾱ_t (B m + o)`, `Σ_t = ᾱ_t B C Bᵀ + (1 − ᾱ_t) I`.
///
/// `Σ_t⁻¹` is applied through the split into the normal space, where it acts
/// as `1/(1 − ᾱ_t)`, and the tangent space, where it is the inverse of the
/// `k × k` matrix `ᾱ_t C + (1 − ᾱ_t) I`.
pub fn analytic_score(
    m: &LinearManifold,
    g: &LatentGaussian,
    s: &NoiseSchedule,
    x_t: &DVector<f64>,
    t: usize,
) -> Result<DVector<f64>, ManifoldError> {
    m.check_ambient(x_t)?;
    let a = s.alpha_bar(t)?;
    let noise_var = 1.0 - a;
    if noise_var <= 0.0 {
        return Err(ManifoldError::SingularCovariance(t));
    }
    let k = m.intrinsic_dim();
    let mu = (&m.basis * &g.mean + &m.offset) * a.sqrt();
    let r = x_t - mu;
    let tangent = m.basis.transpose() * &r;
    let normal = &r - &m.basis * &tangent;
    let inner = &g.cov * a + DMatrix::identity(k, k) * noise_var;
    let solved = inner
        .cholesky()
        .ok_or(ManifoldError::SingularCovariance(t))?
        .solve(&tangent);
    Ok(-(normal / noise_var + &m.basis * solved))
}

/// Distance from `x` to the affine set `scale · M`, i.e.
/// `‖(I − P)(x − scale·offset)‖`.
pub fn distance_to_manifold(
    x: &DVector<f64>,
    m: &LinearManifold,
    scale: f64,
) -> Result<f64, ManifoldError> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(ManifoldError::InvalidScale(scale));
    }
    m.check_ambient(x)?;
    Ok(m.normal_component(&(x - &m.offset * scale)).norm())
}

fn check_dims(ambient: usize, k: usize) -> Result<usize, ManifoldError> {
    if k == 0 || k >= ambient {
        return Err(ManifoldError::InvalidDimensions { ambient, k });
    }
    Ok(ambient - k)
}

/// `r_t = √((1 − ᾱ_t)(D − k))`.
pub fn concentration_radius(
    s: &NoiseSchedule,
    t: usize,
    ambient: usize,
    k: usize,
) -> Result<f64, ManifoldError> {
    let codim = check_dims(ambient, k)?;
    Ok(radius_from_alpha_bar(s.alpha_bar(t)?, codim))
}

pub(crate) fn radius_from_alpha_bar(alpha_bar: f64, codim: usize) -> f64 {
    ((1.0 - alpha_bar) * codim as f64).sqrt()
}

/// Relative width `ε_{t,D−k}` of the shell around `M_t` that holds noisy
/// samples with probability at least `1 − δ`:
///
/// `ε′ = −ln(δ/2)/(D − k)`,
/// `ε = min{1, √max{0, 1 − 2√ε′} + (2√ε′ + 2ε′)/(√(1 − ᾱ_t)·(D − k))}`.
pub fn epsilon_band(
    delta: f64,
    s: &NoiseSchedule,
    t: usize,
    ambient: usize,
    k: usize,
) -> Result<f64, ManifoldError> {
    if !(delta > 0.0 && delta < 1.0) {
        return Err(ManifoldError::InvalidDelta(delta));
    }
    let codim = check_dims(ambient, k)? as f64;
    let a = s.alpha_bar(t)?;
    let eps_prime = -(delta / 2.0).ln() / codim;
    let root = eps_prime.sqrt();
    let first = (1.0 - 2.0 * root).max(0.0).sqrt();
    let second = (2.0 * root + 2.0 * eps_prime) / ((1.0 - a).sqrt() * codim);
    Ok(1.0f64.min(first + second))
}

/// Norm of the decoded latent direction's component outside the basis
/// column space. Zero (to rounding) for any orthonormal basis.
pub fn tangent_residual(ae: &LinearAutoencoder, latent_grad: &DVector<f64>) -> f64 {
    let v = ae.decode_direction(latent_grad);
    ae.manifold.normal_component(&v).norm()
}

/// Covariance given as the literal `"identity"`, a single variance `v`
/// (meaning `v·I`) or a dense row list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovarianceSpec {
    Named(String),
    Isotropic(f64),
    Dense(Vec<Vec<f64>>),
}

/// JSON description of a testbed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestbedSpec {
    #[serde(rename = "D")]
    pub ambient_dim: usize,
    pub k: usize,
    pub seed: u64,
    pub latent_mean: Vec<f64>,
    pub latent_cov: CovarianceSpec,
    /// Ambient offset; empty means the origin.
    #[serde(default)]
    pub offset: Vec<f64>,
}

impl TestbedSpec {
    pub fn standard(ambient_dim: usize, k: usize, seed: u64) -> Self {
        Self {
            ambient_dim,
            k,
            seed,
            latent_mean: vec![0.0; k],
            latent_cov: CovarianceSpec::Named("identity".into()),
            offset: Vec::new(),
        }
    }

    pub fn build(&self) -> Result<(LinearManifold, LatentGaussian), ManifoldError> {
        let mut m = LinearManifold::random(self.ambient_dim, self.k, self.seed)?;
        if !self.offset.is_empty() {
            m = m.with_offset(DVector::from_vec(self.offset.clone()))?;
        }
        if self.latent_mean.len() != self.k {
            return Err(ManifoldError::DimensionMismatch {
                expected: self.k,
                got: self.latent_mean.len(),
            });
        }
        let mean = DVector::from_vec(self.latent_mean.clone());
        let cov = match &self.latent_cov {
            CovarianceSpec::Named(name) if name == "identity" => DMatrix::identity(self.k, self.k),
            CovarianceSpec::Named(_) => return Err(ManifoldError::NotPositiveDefinite),
            CovarianceSpec::Isotropic(v) => DMatrix::identity(self.k, self.k) * *v,
            CovarianceSpec::Dense(rows) => {
                if rows.len() != self.k || rows.iter().any(|r| r.len() != self.k) {
                    return Err(ManifoldError::DimensionMismatch {
                        expected: self.k,
                        got: rows.len(),
                    });
                }
                DMatrix::from_fn(self.k, self.k, |i, j| rows[i][j])
            }
        };
        Ok((m, LatentGaussian::new(mean, cov)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::build_linear_schedule;

    #[test]
    fn random_basis_is_orthonormal() {
        let m = LinearManifold::random(10, 3, 5).unwrap();
        let gram = m.basis().transpose() * m.basis();
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-12);
        assert!(LinearManifold::random(1, 1, 0).is_err());
        assert!(LinearManifold::random(3, 3, 0).is_err());
    }

    #[test]
    fn rejects_non_orthonormal_basis() {
        let b = DMatrix::from_row_slice(3, 1, &[2.0, 0.0, 0.0]);
        assert!(matches!(
            LinearManifold::new(b, DVector::zeros(3)),
            Err(ManifoldError::NotOrthonormal(_))
        ));
    }

    #[test]
    fn autoencoder_round_trips() {
        let m = LinearManifold::random(8, 3, 1)
            .unwrap()
            .with_offset(DVector::from_fn(8, |i, _| i as f64 * 0.1))
            .unwrap();
        let ae = LinearAutoencoder::new(m);
        let z = DVector::from_vec(vec![0.3, -1.2, 2.0]);
        let x = ae.decode(&z);
        assert!((ae.encode(&x) - &z).amax() < 1e-12);
        assert!((ae.decode(&ae.encode(&x)) - &x).amax() < 1e-12);
    }

    #[test]
    fn degenerate_gaussian_gives_offset() {
        let offset = DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]);
        let m = LinearManifold::random(4, 2, 2).unwrap().with_offset(offset.clone()).unwrap();
        let g = LatentGaussian::degenerate(DVector::zeros(2));
        for x in sample_manifold_data(&m, &g, 5, 9).unwrap() {
            assert!((x - &offset).amax() < 1e-15);
        }
        assert_eq!(
            sample_manifold_data(&m, &g, 0, 9),
            Err(ManifoldError::NoSamples)
        );
    }

    #[test]
    fn samples_lie_on_manifold() {
        let m = LinearManifold::random(6, 2, 3)
            .unwrap()
            .with_offset(DVector::from_element(6, 0.5))
            .unwrap();
        let g = LatentGaussian::standard(2);
        for x in sample_manifold_data(&m, &g, 50, 1).unwrap() {
            assert!(distance_to_manifold(&x, &m, 1.0).unwrap() < 1e-10);
        }
    }

    #[test]
    fn non_pd_covariance_rejected() {
        let cov = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert_eq!(
            LatentGaussian::new(DVector::zeros(2), cov),
            Err(ManifoldError::NotPositiveDefinite)
        );
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(LatentGaussian::new(DVector::zeros(2), asym).is_err());
    }

    #[test]
    fn distance_simple_cases() {
        let m = LinearManifold::new(
            DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            DVector::zeros(2),
        )
        .unwrap();
        let x = DVector::from_vec(vec![5.0, 3.0]);
        for scale in [0.1, 1.0, 7.0] {
            assert_eq!(distance_to_manifold(&x, &m, scale).unwrap(), 3.0);
        }
        assert!(distance_to_manifold(&x, &m, 0.0).is_err());
        assert_eq!(
            distance_to_manifold(&DVector::from_vec(vec![-2.0, 0.0]), &m, 1.0).unwrap(),
            0.0
        );
    }

    #[test]
    fn radius_values() {
        let s = build_linear_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(concentration_radius(&s, 0, 10, 3).unwrap(), 0.0);
        let a = s.alpha_bar(40).unwrap();
        assert!((concentration_radius(&s, 40, 5, 4).unwrap() - (1.0 - a).sqrt()).abs() < 1e-15);
        assert!(concentration_radius(&s, 40, 5, 5).is_err());
        // D = 100, k = 2, ᾱ = 0.5 → √(0.5·98) = 7
        let half = NoiseSchedule::from_betas(vec![0.5]).unwrap();
        assert!((concentration_radius(&half, 1, 100, 2).unwrap() - 7.0).abs() < 1e-14);
    }

    #[test]
    fn epsilon_band_hand_value() {
        // δ = 2e^{-(D−k)} makes ε′ = 1: first term 0, second 4/(√(1−ᾱ)(D−k)).
        let s = NoiseSchedule::from_betas(vec![0.36]).unwrap();
        let codim = 20.0f64;
        let delta = 2.0 * (-codim).exp();
        let eps = epsilon_band(delta, &s, 1, 22, 2).unwrap();
        let expected = 4.0 / (0.6 * 20.0);
        assert!((eps - expected).abs() < 1e-12, "{eps} vs {expected}");
        assert!(epsilon_band(0.0, &s, 1, 22, 2).is_err());
        assert!(epsilon_band(1.0, &s, 1, 22, 2).is_err());
    }

    #[test]
    fn tangent_residual_zero_for_orthonormal() {
        let ae = LinearAutoencoder::new(LinearManifold::random(9, 4, 7).unwrap());
        assert_eq!(tangent_residual(&ae, &DVector::zeros(4)), 0.0);
        let g = DVector::from_vec(vec![1.0, -3.0, 0.5, 2.0]);
        assert!(tangent_residual(&ae, &g) < 1e-10);
    }

    #[test]
    fn testbed_spec_json() {
        let text = r#"{"D":6,"k":2,"seed":4,"latent_mean":[0.0,1.0],"latent_cov":[[2.0,0.5],[0.5,1.0]],"offset":[]}"#;
        let spec: TestbedSpec = serde_json::from_str(text).unwrap();
        let (m, g) = spec.build().unwrap();
        assert_eq!((m.ambient_dim(), m.intrinsic_dim()), (6, 2));
        assert_eq!(g.cov()[(0, 1)], 0.5);
        let named = TestbedSpec::standard(6, 2, 4);
        let json = serde_json::to_string(&named).unwrap();
        assert!(json.contains(r#""latent_cov":"identity""#));
        assert_eq!(named.build().unwrap().0, m);
        let iso: TestbedSpec = serde_json::from_str(r#"{"D":6,"k":2,"seed":4,"latent_mean":[0.0,0.0],"latent_cov":4.0}"#).unwrap();
        assert_eq!(iso.build().unwrap().1.cov(), &(DMatrix::identity(2, 2) * 4.0));
        let bad: TestbedSpec = serde_json::from_str(r#"{"D":6,"k":2,"seed":4,"latent_mean":[0.0,0.0],"latent_cov":-1.0}"#).unwrap();
        assert!(bad.build().is_err());
    }

    use crate::rng::{normal_vector, seeded};
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn chart_round_trip_and_tangency(d in 2usize..40, k_frac in 0.0f64..1.0, seed in 0u64..100_000) {
            let k = 1 + ((d - 2) as f64 * k_frac) as usize;
            let mut rng = seeded(seed);
            let m = LinearManifold::random(d, k, seed).unwrap().with_offset(normal_vector(&mut rng, d)).unwrap();
            let ae = LinearAutoencoder::new(m);
            let z = normal_vector(&mut rng, k) * 3.0;
            prop_assert!((ae.encode(&ae.decode(&z)) - &z).amax() < 1e-10);
            let g = normal_vector(&mut rng, k);
            prop_assert!(tangent_residual(&ae, &g) <= 1e-10 * g.norm().max(1.0));
            let x = normal_vector(&mut rng, d);
            let projected = ae.decode(&ae.encode(&x));
            prop_assert!(distance_to_manifold(&projected, ae.manifold(), 1.0).unwrap() < 1e-10);
        }
    }
}
