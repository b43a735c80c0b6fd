//! Seeded linear synthetic datasets with known coefficient signs.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::categorizer::{Category, CategoryAssignment};
use crate::data::{DataError, FeatureModuleMeta, RegionTable, Registry};

pub const MIN_REGIONS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticFeature {
    pub name: String,
    pub coefficient: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub features: Vec<SyntheticFeature>,
    #[serde(default)]
    pub intercept: f64,
    /// Noise standard deviation as a fraction of the clean label std.
    #[serde(default)]
    pub noise_fraction: f64,
    pub n_regions: usize,
    pub seed: u64,
    #[serde(default = "default_indicator")]
    pub indicator: String,
    #[serde(default = "default_range")]
    pub feature_range: (f64, f64),
}

fn default_indicator() -> String {
    "y".into()
}

fn default_range() -> (f64, f64) {
    (0.0, 10.0)
}

impl SyntheticSpec {
    pub fn new(features: &[(&str, f64)], n_regions: usize, seed: u64) -> Self {
        SyntheticSpec {
            features: features
                .iter()
                .map(|(n, c)| SyntheticFeature {
                    name: n.to_string(),
                    coefficient: *c,
                })
                .collect(),
            intercept: 0.0,
            noise_fraction: 0.0,
            n_regions,
            seed,
            indicator: default_indicator(),
            feature_range: default_range(),
        }
    }

    pub fn with_noise(mut self, fraction: f64) -> Self {
        self.noise_fraction = fraction;
        self
    }

    pub fn with_intercept(mut self, intercept: f64) -> Self {
        self.intercept = intercept;
        self
    }

    pub fn coefficients(&self) -> Vec<f64> {
        self.features.iter().map(|f| f.coefficient).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub table: RegionTable,
    /// Category implied by each coefficient's sign.
    pub truth: Vec<CategoryAssignment>,
    pub registry: Registry,
}

pub fn sign_category(c: f64) -> Category {
    if c > 0.0 {
        Category::Positive
    } else if c < 0.0 {
        Category::Negative
    } else {
        Category::Irrelevant
    }
}

/// Noise-free label of one row.
pub fn clean_label(spec: &SyntheticSpec, row: &[f64]) -> f64 {
    spec.features
        .iter()
        .zip(row)
        .fold(spec.intercept, |acc, (f, x)| acc + f.coefficient * x)
}

/// Features are uniform on `feature_range`; labels are the linear
/// combination plus Gaussian noise.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData, DataError> {
    let n = spec.n_regions;
    let p = spec.features.len();
    if n < MIN_REGIONS {
        return Err(DataError::Synthetic(format!(
            "need at least {MIN_REGIONS} regions, got {n}"
        )));
    }
    if p == 0 {
        return Err(DataError::Synthetic("no features declared".into()));
    }
    let (lo, hi) = spec.feature_range;
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(DataError::Synthetic(format!("bad feature range [{lo}, {hi}]")));
    }
    if !(spec.noise_fraction.is_finite() && spec.noise_fraction >= 0.0) {
        return Err(DataError::Synthetic(format!(
            "bad noise fraction {}",
            spec.noise_fraction
        )));
    }
    if spec.features.iter().any(|f| !f.coefficient.is_finite()) {
        return Err(DataError::Synthetic("coefficients must be finite".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..p).map(|_| rng.gen_range(lo..hi)).collect())
        .collect();
    let mut labels: Vec<f64> = rows.iter().map(|r| clean_label(spec, r)).collect();

    if spec.noise_fraction > 0.0 {
        let mean = labels.iter().sum::<f64>() / n as f64;
        let sd = (labels.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let sigma = spec.noise_fraction * sd;
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).map_err(|e| DataError::Synthetic(e.to_string()))?;
            for y in &mut labels {
                *y += normal.sample(&mut rng);
            }
        }
    }

    let values = DMatrix::from_fn(n, p, |i, j| rows[i][j]);
    let width = (n - 1).to_string().len();
    let table = RegionTable::new(
        (0..n).map(|i| format!("r{i:0width$}")).collect(),
        spec.features.iter().map(|f| f.name.clone()).collect(),
        values,
        Some(labels),
        spec.indicator.clone(),
    )?;
    let registry = Registry::new(
        spec.features
            .iter()
            .map(|f| FeatureModuleMeta::new(f.name.clone(), format!("synthetic feature {}", f.name)).with_range(lo, hi))
            .collect(),
    )?;
    let truth = spec
        .features
        .iter()
        .map(|f| {
            let mut a = CategoryAssignment::new(f.name.clone(), sign_category(f.coefficient));
            a.context = "synthetic ground truth".into();
            a
        })
        .collect();
    Ok(SyntheticData { table, truth, registry })
}
