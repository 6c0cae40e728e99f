//! Synthetic no-reference quality benchmark: clean manifold contents,
//! distorted measurements and severity-derived quality labels.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::BenchError;
use crate::manifold::{LatentGaussian, LinearAutoencoder, LinearManifold};
use crate::rng::{derive_seed, normal_vector, seeded};

/// Synthetic distortion families. These are vector-space stand-ins, not
/// models of image distortions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// `x + σ·n`, `n ~ N(0, I)`.
    AdditiveNoise,
    /// Circular Gaussian smoothing across coordinates with the level as
    /// kernel width.
    CoordinateBlur,
    /// `x + m·u` with `u` a random unit vector normal to the manifold.
    OffManifoldPush,
}

impl Family {
    pub fn label(self) -> &'static str {
        match self {
            Family::AdditiveNoise => "additive-noise",
            Family::CoordinateBlur => "coordinate-blur",
            Family::OffManifoldPush => "off-manifold-push",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub family: Family,
    /// Strictly increasing positive severities.
    pub levels: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    /// Clean contents; each yields one item per family level plus an
    /// optional undistorted control.
    pub n_contents: usize,
    pub families: Vec<FamilySpec>,
    #[serde(default = "default_true")]
    pub include_control: bool,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        Self {
            n_contents: 100,
            families: vec![
                FamilySpec {
                    family: Family::AdditiveNoise,
                    levels: vec![0.5, 1.0, 4.0],
                },
                FamilySpec {
                    family: Family::CoordinateBlur,
                    levels: vec![0.5, 0.6, 0.95],
                },
                FamilySpec {
                    family: Family::OffManifoldPush,
                    levels: vec![1.0, 3.0, 15.0],
                },
            ],
            include_control: true,
            seed: 11,
        }
    }
}

impl BenchmarkSpec {
    pub fn items_per_content(&self) -> usize {
        usize::from(self.include_control) + self.families.iter().map(|f| f.levels.len()).sum::<usize>()
    }

    pub fn n_items(&self) -> usize {
        self.n_contents * self.items_per_content()
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        if self.families.is_empty() {
            return Err(BenchError::Config("benchmark needs at least one distortion family".into()));
        }
        if self.n_contents == 0 {
            return Err(BenchError::Config("benchmark needs at least one content".into()));
        }
        for f in &self.families {
            if f.levels.is_empty() {
                return Err(BenchError::Config(format!("family {} has no levels", f.family.label())));
            }
            if f.levels.iter().any(|l| !(l.is_finite() && *l > 0.0)) || f.levels.windows(2).any(|w| w[1] <= w[0]) {
                return Err(BenchError::Config(format!(
                    "family {} levels must be positive and strictly increasing",
                    f.family.label()
                )));
            }
        }
        let mut seen: Vec<Family> = self.families.iter().map(|f| f.family).collect();
        seen.sort();
        seen.dedup();
        if seen.len() != self.families.len() {
            return Err(BenchError::Config("duplicate distortion family".into()));
        }
        Ok(())
    }
}

/// `100·exp(−severity/τ)` with `τ = s_max / ln 5`, so a family spans
/// `[20, 100]` from control to its strongest level.
pub fn true_quality(severity: f64, max_severity: f64) -> f64 {
    if severity == 0.0 {
        return 100.0;
    }
    let tau = max_severity / 5f64.ln();
    100.0 * (-severity / tau).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchItem {
    pub id: usize,
    pub content_id: usize,
    /// `None` for the undistorted control.
    pub family: Option<Family>,
    /// 1-based level index; 0 for the control.
    pub level: usize,
    pub severity: f64,
    pub measurement: DVector<f64>,
    pub true_quality: f64,
}

impl BenchItem {
    pub fn family_label(&self) -> &'static str {
        self.family.map_or("control", Family::label)
    }
}

/// Items plus the withheld clean references, indexed by content id.
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub items: Vec<BenchItem>,
    references: Vec<DVector<f64>>,
}

impl Benchmark {
    /// Clean content behind an item. Not used by the prediction pipeline.
    pub fn reference(&self, content_id: usize) -> Option<&DVector<f64>> {
        self.references.get(content_id)
    }

    pub fn n_contents(&self) -> usize {
        self.references.len()
    }
}

fn blur(x: &DVector<f64>, width: f64) -> DVector<f64> {
    let d = x.len();
    let weights: Vec<f64> = (0..d)
        .map(|offset| {
            let dist = offset.min(d - offset) as f64;
            (-0.5 * (dist / width).powi(2)).exp()
        })
        .collect();
    let total: f64 = weights.iter().sum();
    DVector::from_fn(d, |i, _| {
        (0..d).map(|j| weights[(j + d - i) % d] * x[j]).sum::<f64>() / total
    })
}

fn distort<R: rand::Rng>(
    family: Family,
    severity: f64,
    x: &DVector<f64>,
    m: &LinearManifold,
    rng: &mut R,
) -> Result<DVector<f64>, BenchError> {
    Ok(match family {
        Family::AdditiveNoise => x + normal_vector(rng, x.len()) * severity,
        Family::CoordinateBlur => blur(x, severity),
        Family::OffManifoldPush => {
            let mut dir = m.normal_component(&normal_vector(rng, x.len()));
            let norm = dir.norm();
            if norm == 0.0 {
                return Err(BenchError::Numerical("degenerate push direction".into()));
            }
            dir /= norm;
            x + dir * severity
        }
    })
}

/// Deterministic benchmark per `spec.seed`. Contents are manifold samples;
/// item `i` draws its distortion from sub-stream `i`.
pub fn generate_benchmark(
    spec: &BenchmarkSpec,
    manifold: &LinearManifold,
    latent: &LatentGaussian,
) -> Result<Benchmark, BenchError> {
    spec.validate()?;
    let ae = LinearAutoencoder::new(manifold.clone());
    let mut content_rng = seeded(derive_seed(spec.seed, u64::MAX));
    let references: Vec<DVector<f64>> = (0..spec.n_contents)
        .map(|_| ae.decode(&latent.sample(&mut content_rng)))
        .collect();
    let mut items = Vec::with_capacity(spec.n_items());
    for (content_id, x) in references.iter().enumerate() {
        if spec.include_control {
            items.push(BenchItem {
                id: items.len(),
                content_id,
                family: None,
                level: 0,
                severity: 0.0,
                measurement: x.clone(),
                true_quality: 100.0,
            });
        }
        for f in &spec.families {
            let s_max = *f.levels.last().expect("validated");
            for (li, &severity) in f.levels.iter().enumerate() {
                let id = items.len();
                let mut rng = seeded(derive_seed(spec.seed, id as u64));
                items.push(BenchItem {
                    id,
                    content_id,
                    family: Some(f.family),
                    level: li + 1,
                    severity,
                    measurement: distort(f.family, severity, x, manifold, &mut rng)?,
                    true_quality: true_quality(severity, s_max),
                });
            }
        }
    }
    Ok(Benchmark { items, references })
}

/// Content-grouped train/validation/test partition, repeated with
/// independent shuffles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub fractions: [f64; 3],
    pub repeats: usize,
    pub seed: u64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            fractions: [0.7, 0.1, 0.2],
            repeats: 10,
            seed: 0,
        }
    }
}

/// Item indices of one repeat.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl SplitPlan {
    pub fn validate(&self) -> Result<(), BenchError> {
        let sum: f64 = self.fractions.iter().sum();
        if self.fractions.iter().any(|f| !(f.is_finite() && *f > 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(BenchError::Config(format!(
                "split fractions {:?} must be positive and sum to 1",
                self.fractions
            )));
        }
        if self.repeats == 0 {
            return Err(BenchError::Config("split repeats must be positive".into()));
        }
        Ok(())
    }

    /// Content counts per split for `n` contents: train and validation are
    /// rounded, the test split takes the rest.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let train = (self.fractions[0] * n as f64).round() as usize;
        let val = ((self.fractions[1] * n as f64).round() as usize).min(n - train.min(n));
        let train = train.min(n);
        (train, val, n - train - val)
    }

    /// Split of `content_ids` (one per item) for repeat `r`.
    pub fn split(&self, content_ids: &[usize], r: usize) -> Result<Split, BenchError> {
        self.validate()?;
        let mut contents: Vec<usize> = content_ids.to_vec();
        contents.sort_unstable();
        contents.dedup();
        let (n_train, n_val, _) = self.sizes(contents.len());
        contents.shuffle(&mut seeded(derive_seed(self.seed, r as u64)));
        let mut role = std::collections::HashMap::new();
        for (i, c) in contents.iter().enumerate() {
            role.insert(*c, if i < n_train { 0 } else if i < n_train + n_val { 1 } else { 2 });
        }
        let mut split = Split {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        };
        for (item, c) in content_ids.iter().enumerate() {
            match role[c] {
                0 => split.train.push(item),
                1 => split.val.push(item),
                _ => split.test.push(item),
            }
        }
        Ok(split)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifold::TestbedSpec;

    fn testbed() -> (LinearManifold, LatentGaussian) {
        TestbedSpec::standard(8, 2, 7).build().unwrap()
    }

    #[test]
    fn default_counts() {
        let spec = BenchmarkSpec::default();
        assert_eq!(spec.items_per_content(), 10);
        assert_eq!(spec.n_items(), 1000);
        let (m, g) = testbed();
        let b = generate_benchmark(&spec, &m, &g).unwrap();
        assert_eq!(b.items.len(), 1000);
        assert!(b.items.iter().enumerate().all(|(i, it)| it.id == i));
    }

    #[test]
    fn control_items_are_clean() {
        let (m, g) = testbed();
        let b = generate_benchmark(&BenchmarkSpec::default(), &m, &g).unwrap();
        for it in b.items.iter().filter(|i| i.family.is_none()) {
            assert_eq!(&it.measurement, b.reference(it.content_id).unwrap());
            assert_eq!(it.true_quality, 100.0);
        }
    }

    #[test]
    fn quality_decreases_with_severity() {
        let (m, g) = testbed();
        let b = generate_benchmark(&BenchmarkSpec::default(), &m, &g).unwrap();
        for c in 0..3 {
            let mine: Vec<&BenchItem> = b.items.iter().filter(|i| i.content_id == c).collect();
            for fam in [Family::AdditiveNoise, Family::CoordinateBlur, Family::OffManifoldPush] {
                let q: Vec<f64> = mine.iter().filter(|i| i.family == Some(fam)).map(|i| i.true_quality).collect();
                assert!(q.windows(2).all(|w| w[1] < w[0]));
                assert!((q.last().unwrap() - 20.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (m, g) = testbed();
        let a = generate_benchmark(&BenchmarkSpec::default(), &m, &g).unwrap();
        let b = generate_benchmark(&BenchmarkSpec::default(), &m, &g).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn push_is_normal_and_blur_preserves_mean() {
        let (m, _) = testbed();
        let x = DVector::from_fn(8, |i, _| i as f64);
        let mut rng = seeded(1);
        let pushed = distort(Family::OffManifoldPush, 0.5, &x, &m, &mut rng).unwrap();
        let delta = pushed - &x;
        assert!((delta.norm() - 0.5).abs() < 1e-12);
        assert!((m.basis().transpose() * delta).amax() < 1e-12);
        let b = blur(&x, 1.0);
        assert!((b.sum() - x.sum()).abs() < 1e-9);
        assert!((blur(&DVector::from_element(8, 2.0), 3.0).add_scalar(-2.0)).amax() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        let mut spec = BenchmarkSpec {
            families: vec![],
            ..BenchmarkSpec::default()
        };
        assert!(spec.validate().is_err());
        spec.families = vec![FamilySpec {
            family: Family::AdditiveNoise,
            levels: vec![0.2, 0.1],
        }];
        assert!(spec.validate().is_err());
    }

    #[test]
    fn split_sizes_and_grouping() {
        let plan = SplitPlan::default();
        assert_eq!(plan.sizes(100), (70, 10, 20));
        let singles: Vec<usize> = (0..100).collect();
        let s = plan.split(&singles, 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 10, 20));
        let grouped: Vec<usize> = (0..1000).map(|i| i / 10).collect();
        for r in 0..plan.repeats {
            let s = plan.split(&grouped, r).unwrap();
            assert_eq!((s.train.len(), s.val.len(), s.test.len()), (700, 100, 200));
            let content = |v: &Vec<usize>| v.iter().map(|&i| grouped[i]).collect::<std::collections::BTreeSet<_>>();
            let (a, b, c) = (content(&s.train), content(&s.val), content(&s.test));
            assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        }
        assert_ne!(plan.split(&grouped, 0).unwrap(), plan.split(&grouped, 1).unwrap());
    }
}
