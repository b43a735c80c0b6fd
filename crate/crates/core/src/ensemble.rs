//! Candidate pool generation, leave-p-out validation scoring, best-k
//! selection and prediction averaging.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::categorizer::{categorize_all, CategorizeError, Category, CategoryAssignment};
use crate::data::{DataError, RegionTable, Registry};
use crate::features::{
    augment, AugmentOptions, DiscoveredFeature, DiscoveryContext, FeatureError, FeatureRecipe, DEFAULT_K_PERCENT,
};
use crate::gateway::Gateway;
use crate::metrics::rmse;
use crate::prompts::{IndicatorMeta, PromptTemplates};
use crate::solver::{fit, ConstrainedFit, FitRecord, SignConstraint, SolverError};

pub const DEFAULT_POOL: usize = 10;
pub const DEFAULT_ENSEMBLE_SIZE: usize = 5;
pub const DEFAULT_LAMBDA: f64 = 1.0;
/// Above this many leave-p-out combinations, k-fold splits are used instead.
pub const MAX_COMBINATIONS: usize = 64;
const FALLBACK_FOLDS: usize = 5;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("need at least 3 shots for validation, got {0}")]
    TooFewShots(usize),
    #[error("only {finite} of {needed} required candidates could be scored")]
    NotEnoughCandidates { finite: usize, needed: usize },
    #[error("invalid ensemble config: {0}")]
    Config(String),
    #[error("unknown variant {0:?}")]
    UnknownVariant(String),
    #[error("shot index {0} out of range")]
    ShotOutOfRange(usize),
    #[error(transparent)]
    Categorize(#[from] CategorizeError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Pipeline variants used for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Every base module, unconstrained, no discovery.
    SimpleLinear,
    /// Irrelevant modules dropped, unconstrained.
    SelectionOnly,
    /// Sign constraints on base modules only.
    NoNonlinear,
    /// Discovery and transforms, unconstrained.
    NoConstraints,
    #[default]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::SimpleLinear,
        Variant::SelectionOnly,
        Variant::NoNonlinear,
        Variant::NoConstraints,
        Variant::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::SimpleLinear => "simple_linear",
            Variant::SelectionOnly => "selection_only",
            Variant::NoNonlinear => "no_nonlinear",
            Variant::NoConstraints => "no_constraints",
            Variant::Full => "full",
        }
    }

    pub fn constrained(self) -> bool {
        matches!(self, Variant::NoNonlinear | Variant::Full)
    }

    pub fn expands(self) -> bool {
        matches!(self, Variant::NoConstraints | Variant::Full)
    }

    pub fn augment_options(self, k_percent: f64) -> AugmentOptions {
        AugmentOptions {
            k_percent,
            discovery: self.expands(),
            transforms: self.expands(),
            include_irrelevant: self == Variant::SimpleLinear,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = EnsembleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| EnsembleError::UnknownVariant(s.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub pool: usize,
    pub size: usize,
    pub lambda: f64,
    pub k_percent: f64,
    pub variant: Variant,
    /// Negate every sign constraint (misspecification check).
    pub flip_signs: bool,
    /// Categorize once and re-sample only discovery per candidate.
    pub share_categorization: bool,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            pool: DEFAULT_POOL,
            size: DEFAULT_ENSEMBLE_SIZE,
            lambda: DEFAULT_LAMBDA,
            k_percent: DEFAULT_K_PERCENT,
            variant: Variant::Full,
            flip_signs: false,
            share_categorization: false,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.size == 0 {
            return Err(EnsembleError::Config("ensemble size must be >= 1".into()));
        }
        if self.pool < self.size {
            return Err(EnsembleError::Config(format!(
                "candidate pool {} is smaller than ensemble size {}",
                self.pool, self.size
            )));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(EnsembleError::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.k_percent > 0.0 && self.k_percent <= 100.0) {
            return Err(EnsembleError::Config(format!(
                "k_percent {} not in (0, 100]",
                self.k_percent
            )));
        }
        Ok(())
    }

    /// Constraint for a column of the given category under this config.
    pub fn constraint_for(&self, category: Category) -> SignConstraint {
        let c = if self.variant.constrained() {
            SignConstraint::from_category(category).unwrap_or(SignConstraint::Free)
        } else {
            SignConstraint::Free
        };
        if self.flip_signs {
            c.flipped()
        } else {
            c
        }
    }

    pub fn constraints(&self, recipe: &FeatureRecipe) -> Vec<SignConstraint> {
        recipe.columns.iter().map(|c| self.constraint_for(c.category)).collect()
    }
}

pub type Split = (Vec<usize>, Vec<usize>);

/// Validation splits over positions `0..shot_count` of the shot list.
///
/// Every leave-p-out combination: leave-1-out for 3 shots (3 splits),
/// leave-2-out for 5 shots (10 splits), `p = floor(shot_count / 3)` for other
/// counts. When there would be more than [`MAX_COMBINATIONS`], contiguous
/// 5-fold splits are used instead.
pub fn validation_splits(shot_count: usize) -> Result<Vec<Split>, EnsembleError> {
    if shot_count < 3 {
        return Err(EnsembleError::TooFewShots(shot_count));
    }
    let holdout = match shot_count {
        5 => 2,
        n => n / 3,
    };
    let combos = n_choose_k(shot_count, holdout);
    if combos <= MAX_COMBINATIONS as u128 {
        return Ok((0..shot_count)
            .combinations(holdout)
            .map(|val| {
                let train = (0..shot_count).filter(|i| !val.contains(i)).collect();
                (train, val)
            })
            .collect());
    }
    let folds = FALLBACK_FOLDS.min(shot_count);
    Ok((0..folds)
        .map(|f| {
            let lo = f * shot_count / folds;
            let hi = (f + 1) * shot_count / folds;
            let val: Vec<usize> = (lo..hi).collect();
            let train = (0..shot_count).filter(|i| *i < lo || *i >= hi).collect();
            (train, val)
        })
        .collect())
}

fn n_choose_k(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc.saturating_mul((n - i) as u128) / (i as u128 + 1))
}

fn check_shots(table: &RegionTable, shots: &[usize]) -> Result<(), EnsembleError> {
    match shots.iter().find(|&&s| s >= table.n_rows()) {
        Some(&s) => Err(EnsembleError::ShotOutOfRange(s)),
        None => Ok(()),
    }
}

/// Mean validation RMSE (label units) of a recipe over all splits, or
/// `+inf` when any split fails to fit or evaluate.
pub fn score_candidate(
    recipe: &FeatureRecipe,
    constraints: &[SignConstraint],
    table: &RegionTable,
    shots: &[usize],
    lambda: f64,
) -> f64 {
    match try_score(recipe, constraints, table, shots, lambda) {
        Ok(v) if v.is_finite() => v,
        Ok(_) => f64::INFINITY,
        Err(e) => {
            log::warn!("candidate disqualified: {e}");
            f64::INFINITY
        }
    }
}

fn try_score(
    recipe: &FeatureRecipe,
    constraints: &[SignConstraint],
    table: &RegionTable,
    shots: &[usize],
    lambda: f64,
) -> Result<f64, EnsembleError> {
    check_shots(table, shots)?;
    let y = table.require_labels()?;
    let aug = recipe.evaluate(table)?;
    let splits = validation_splits(shots.len())?;
    let mut total = 0.0;
    for (train, val) in &splits {
        let tr: Vec<usize> = train.iter().map(|&i| shots[i]).collect();
        let va: Vec<usize> = val.iter().map(|&i| shots[i]).collect();
        let ytr: Vec<f64> = tr.iter().map(|&i| y[i]).collect();
        let yva: Vec<f64> = va.iter().map(|&i| y[i]).collect();
        let f = fit(&aug.rows(&tr), &ytr, constraints, lambda)?;
        let pred = f.predict(&aug.rows(&va))?;
        total += rmse(&pred, &yva).map_err(|e| EnsembleError::Config(e.to_string()))?;
    }
    Ok(total / splits.len() as f64)
}

/// Indices of the `k` lowest finite scores; ties go to the lower index.
pub fn select_lowest(scores: &[f64], k: usize) -> Result<Vec<usize>, EnsembleError> {
    let mut finite: Vec<usize> = (0..scores.len()).filter(|&i| scores[i].is_finite()).collect();
    if finite.len() < k {
        return Err(EnsembleError::NotEnoughCandidates {
            finite: finite.len(),
            needed: k,
        });
    }
    finite.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    finite.truncate(k);
    Ok(finite)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub index: usize,
    pub assignments: Vec<CategoryAssignment>,
    pub recipe: FeatureRecipe,
    pub discovered: Vec<DiscoveredFeature>,
    pub validation_rmse: f64,
    pub selected: bool,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMember {
    pub candidate: usize,
    pub recipe: FeatureRecipe,
    pub fit: ConstrainedFit,
}

impl EnsembleMember {
    pub fn predict(&self, table: &RegionTable) -> Result<Vec<f64>, EnsembleError> {
        let aug = self.recipe.evaluate(table)?;
        Ok(self.fit.predict(&aug.values)?)
    }

    pub fn record(&self) -> FitRecord {
        self.fit.to_record(&self.recipe.names(), &self.recipe.categories())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleModel {
    pub members: Vec<EnsembleMember>,
    pub shots: Vec<usize>,
}

impl EnsembleModel {
    /// Arithmetic mean of member predictions for every table row.
    pub fn predict(&self, table: &RegionTable) -> Result<Vec<f64>, EnsembleError> {
        let preds: Vec<Vec<f64>> = self
            .members
            .iter()
            .map(|m| m.predict(table))
            .collect::<Result<_, _>>()?;
        Ok(average(&preds))
    }
}

pub fn average(preds: &[Vec<f64>]) -> Vec<f64> {
    let n = preds.first().map_or(0, Vec::len);
    let m = preds.len() as f64;
    (0..n).map(|i| preds.iter().map(|p| p[i]).sum::<f64>() / m).collect()
}

/// LLM inputs shared by all candidates.
pub struct LlmContext<'a> {
    pub registry: &'a Registry,
    pub indicator: &'a IndicatorMeta,
    pub country: &'a str,
    pub gateway: &'a Gateway,
    pub templates: &'a PromptTemplates,
}

impl<'a> LlmContext<'a> {
    fn discovery(&self, session: u32) -> DiscoveryContext<'a> {
        DiscoveryContext {
            registry: self.registry,
            indicator: self.indicator,
            country: self.country,
            gateway: self.gateway,
            session,
            templates: self.templates,
        }
    }
}

/// Where candidate categorizations come from.
pub enum CategorySource<'a> {
    /// Five-vote LLM categorization per candidate.
    Llm(&'a LlmContext<'a>),
    /// Fixed assignments (oracle or ground truth); discovery still uses the
    /// context when one is given.
    Given(Vec<CategoryAssignment>, Option<&'a LlmContext<'a>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutcome {
    pub model: EnsembleModel,
    pub candidates: Vec<Candidate>,
    pub split_count: usize,
}

/// Generates `pool` candidates (LLM sessions `session_base + i`), scores
/// them on the shot rows, keeps the best `size`, and refits those on all
/// shots.
pub fn build_ensemble(
    table: &RegionTable,
    shots: &[usize],
    source: &CategorySource<'_>,
    cfg: &EnsembleConfig,
    session_base: u32,
) -> Result<EnsembleOutcome, EnsembleError> {
    cfg.validate()?;
    check_shots(table, shots)?;
    let splits = validation_splits(shots.len())?;
    let y = table.require_labels()?;
    let opts = cfg.variant.augment_options(cfg.k_percent);

    let shared = match source {
        CategorySource::Llm(ctx) if cfg.share_categorization => Some(categorize_all(
            ctx.registry,
            ctx.indicator,
            ctx.country,
            ctx.gateway,
            session_base,
            ctx.templates,
        )?),
        _ => None,
    };

    let mut candidates: Vec<Candidate> = (0..cfg.pool)
        .into_par_iter()
        .map(|index| {
            let session = session_base + index as u32;
            let (assignments, mut warnings, ctx) = match source {
                CategorySource::Llm(ctx) => {
                    let outcome = match &shared {
                        Some(o) => o.clone(),
                        None => categorize_all(
                            ctx.registry,
                            ctx.indicator,
                            ctx.country,
                            ctx.gateway,
                            session,
                            ctx.templates,
                        )?,
                    };
                    (outcome.assignments, outcome.warnings, Some(*ctx))
                }
                CategorySource::Given(a, ctx) => (a.clone(), Vec::new(), *ctx),
            };
            let disc = ctx.map(|c| c.discovery(session));
            let aug = augment(table, &assignments, disc.as_ref(), &opts)?;
            warnings.extend(aug.warnings);
            let constraints = cfg.constraints(&aug.recipe);
            let validation_rmse = score_candidate(&aug.recipe, &constraints, table, shots, cfg.lambda);
            Ok(Candidate {
                index,
                assignments,
                recipe: aug.recipe,
                discovered: aug.discovered,
                validation_rmse,
                selected: false,
                warnings,
            })
        })
        .collect::<Result<_, EnsembleError>>()?;

    let scores: Vec<f64> = candidates.iter().map(|c| c.validation_rmse).collect();
    let chosen = select_lowest(&scores, cfg.size)?;
    for &i in &chosen {
        candidates[i].selected = true;
    }
    let ys: Vec<f64> = shots.iter().map(|&i| y[i]).collect();
    let members = chosen
        .par_iter()
        .map(|&i| {
            let c = &candidates[i];
            let aug = c.recipe.evaluate(table)?;
            let f = fit(&aug.rows(shots), &ys, &cfg.constraints(&c.recipe), cfg.lambda)?;
            Ok(EnsembleMember {
                candidate: i,
                recipe: c.recipe.clone(),
                fit: f,
            })
        })
        .collect::<Result<Vec<_>, EnsembleError>>()?;
    Ok(EnsembleOutcome {
        model: EnsembleModel {
            members,
            shots: shots.to_vec(),
        },
        candidates,
        split_count: splits.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub index: usize,
    /// `None` when disqualified.
    pub validation_rmse: Option<f64>,
    pub selected: bool,
    pub columns: Vec<String>,
    pub categories: BTreeMap<String, Category>,
    pub discovered: Vec<DiscoveredFeature>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub shots: Vec<usize>,
    pub split_count: usize,
    pub candidates: Vec<CandidateRecord>,
    pub members: Vec<usize>,
    #[serde(default)]
    pub member_fits: Vec<String>,
}

impl EnsembleOutcome {
    /// Manifest with `member_fits` naming the files the member fits are
    /// written to.
    pub fn manifest(&self, member_fits: Vec<String>) -> EnsembleManifest {
        EnsembleManifest {
            shots: self.model.shots.clone(),
            split_count: self.split_count,
            candidates: self
                .candidates
                .iter()
                .map(|c| CandidateRecord {
                    index: c.index,
                    validation_rmse: Some(c.validation_rmse).filter(|v| v.is_finite()),
                    selected: c.selected,
                    columns: c.recipe.names(),
                    categories: c.assignments.iter().map(|a| (a.module.clone(), a.category)).collect(),
                    discovered: c.discovered.clone(),
                    warnings: c.warnings.clone(),
                })
                .collect(),
            members: self.model.members.iter().map(|m| m.candidate).collect(),
            member_fits,
        }
    }
}
