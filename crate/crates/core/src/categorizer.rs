//! Module categorization by five-fold LLM self-consistency voting, plus a
//! Pearson-threshold categorizer used as ground truth in reliability checks.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::OnceLock;

use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{FeatureModuleMeta, RegionTable, Registry};
use crate::gateway::{Gateway, GatewayError, RequestTag};
use crate::metrics::pearson;
use crate::prompts::{check_description, fill, IndicatorMeta, PromptError, PromptTemplates};

pub const VOTES_PER_MODULE: usize = 5;

#[derive(Debug, Error)]
pub enum CategorizeError {
    #[error("expected {VOTES_PER_MODULE} votes, got {0}")]
    VoteCount(usize),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("module {module:?}: {source}")]
    Gateway {
        module: String,
        #[source]
        source: GatewayError,
    },
    #[error("table has no labels")]
    MissingLabels,
    #[error("threshold must be a non-negative number, got {0}")]
    InvalidTau(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VoteValue {
    /// Type A
    #[serde(rename = "A")]
    Pos,
    /// Type B
    #[serde(rename = "B")]
    Neg,
    /// Type C
    #[serde(rename = "C")]
    Zero,
}

impl VoteValue {
    pub fn sign(self) -> i8 {
        match self {
            VoteValue::Pos => 1,
            VoteValue::Neg => -1,
            VoteValue::Zero => 0,
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            VoteValue::Pos => VoteValue::Neg,
            VoteValue::Neg => VoteValue::Pos,
            VoteValue::Zero => VoteValue::Zero,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseStatus {
    Parsed,
    Failed,
    TransportFailed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrelationVote {
    #[serde(rename = "type")]
    pub value: Option<VoteValue>,
    pub status: ParseStatus,
    pub raw_hash: String,
    #[serde(skip)]
    pub raw: String,
}

impl CorrelationVote {
    fn transport_failure(message: &str) -> Self {
        CorrelationVote {
            value: None,
            status: ParseStatus::TransportFailed,
            raw_hash: text_hash(message),
            raw: message.to_owned(),
        }
    }
}

fn text_hash(s: &str) -> String {
    hex::encode(Sha256::digest(s.as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Positive,
    Negative,
    Mixed,
    Irrelevant,
}

impl Category {
    pub const SIGNED: [Category; 3] = [Category::Positive, Category::Negative, Category::Mixed];

    pub fn flipped(self) -> Self {
        match self {
            Category::Positive => Category::Negative,
            Category::Negative => Category::Positive,
            other => other,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Category::Positive => "P",
            Category::Negative => "N",
            Category::Mixed => "M",
            Category::Irrelevant => "IR",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::Positive => "positive",
            Category::Negative => "negative",
            Category::Mixed => "mixed",
            Category::Irrelevant => "irrelevant",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAssignment {
    pub module: String,
    pub category: Category,
    #[serde(default)]
    pub votes: Vec<CorrelationVote>,
    #[serde(default)]
    pub context: String,
    /// Set when the category could not be derived normally: all transport
    /// calls failed, or (oracle) the Pearson correlation was undefined.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degenerate: bool,
}

impl CategoryAssignment {
    pub fn new(module: impl Into<String>, category: Category) -> Self {
        CategoryAssignment {
            module: module.into(),
            category,
            votes: Vec::new(),
            context: String::new(),
            degenerate: false,
        }
    }
}

pub fn build_categorization_prompt(
    module: &FeatureModuleMeta,
    indicator: &IndicatorMeta,
    country: &str,
    templates: &PromptTemplates,
) -> Result<String, CategorizeError> {
    check_description(&format!("module {:?}", module.name), &module.description)?;
    check_description(&format!("indicator {:?}", indicator.name), &indicator.description)?;
    Ok(fill(
        &templates.categorize,
        &[
            ("<Module Definition>", module.description.trim()),
            ("<Indicator Definition>", indicator.description.trim()),
            ("<Module>", &module.name),
            ("<Indicator>", &indicator.name),
            ("<Country>", country),
        ],
    ))
}

fn answer_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\banswer\b.*?\btype\W{0,3}([abc])\b").expect("valid regex"))
}

/// Reads the last `Answer: ... Type A|B|C` line of a response.
pub fn parse_vote(response: &str) -> CorrelationVote {
    let value = response
        .lines()
        .rev()
        .find_map(|line| answer_regex().captures(line))
        .map(|c| match c[1].to_ascii_lowercase().as_str() {
            "a" => VoteValue::Pos,
            "b" => VoteValue::Neg,
            _ => VoteValue::Zero,
        });
    CorrelationVote {
        value,
        status: if value.is_some() {
            ParseStatus::Parsed
        } else {
            ParseStatus::Failed
        },
        raw_hash: text_hash(response),
        raw: response.to_owned(),
    }
}

/// Five-slot majority rule. `None` marks a vote that failed to parse or
/// arrive; it supports no category.
pub fn majority_vote(votes: &[Option<VoteValue>]) -> Result<Category, CategorizeError> {
    if votes.len() != VOTES_PER_MODULE {
        return Err(CategorizeError::VoteCount(votes.len()));
    }
    let count = |v: VoteValue| votes.iter().filter(|x| **x == Some(v)).count();
    let (pos, neg, zero) = (count(VoteValue::Pos), count(VoteValue::Neg), count(VoteValue::Zero));
    Ok(if pos >= 3 {
        Category::Positive
    } else if neg >= 3 {
        Category::Negative
    } else if (pos, neg, zero) == (2, 2, 1) {
        Category::Mixed
    } else {
        Category::Irrelevant
    })
}

pub fn majority_of(votes: &[CorrelationVote]) -> Result<Category, CategorizeError> {
    let values: Vec<_> = votes.iter().map(|v| v.value).collect();
    majority_vote(&values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategorizationOutcome {
    pub assignments: Vec<CategoryAssignment>,
    pub warnings: Vec<String>,
}

/// Categorizes every registry module with five LLM calls each. Calls run in
/// parallel; votes are kept in repetition order.
pub fn categorize_all(
    registry: &Registry,
    indicator: &IndicatorMeta,
    country: &str,
    gateway: &Gateway,
    session: u32,
    templates: &PromptTemplates,
) -> Result<CategorizationOutcome, CategorizeError> {
    let prompts: Vec<String> = registry
        .modules()
        .iter()
        .map(|m| build_categorization_prompt(m, indicator, country, templates))
        .collect::<Result<_, _>>()?;

    let jobs: Vec<(usize, u32)> = (0..prompts.len())
        .flat_map(|m| (0..VOTES_PER_MODULE as u32).map(move |r| (m, r)))
        .collect();
    let results: Vec<Result<CorrelationVote, CategorizeError>> = jobs
        .par_iter()
        .map(|&(m, rep)| {
            let req = gateway
                .request(RequestTag::Categorize, prompts[m].clone())
                .repetition(rep)
                .session(session);
            match gateway.complete(&req) {
                Ok(text) => Ok(parse_vote(&text)),
                Err(GatewayError::Transport { message, .. }) => Ok(CorrelationVote::transport_failure(&message)),
                Err(source) => Err(CategorizeError::Gateway {
                    module: registry.modules()[m].name.clone(),
                    source,
                }),
            }
        })
        .collect();

    let mut votes_iter = results.into_iter();
    let mut assignments = Vec::with_capacity(prompts.len());
    let mut warnings = Vec::new();
    for module in registry.modules() {
        let votes: Vec<CorrelationVote> = votes_iter.by_ref().take(VOTES_PER_MODULE).collect::<Result<_, _>>()?;
        let all_transport = votes.iter().all(|v| v.status == ParseStatus::TransportFailed);
        let category = majority_of(&votes)?;
        if all_transport {
            let msg = format!(
                "module {:?}: all {VOTES_PER_MODULE} categorization calls failed; treated as irrelevant",
                module.name
            );
            log::warn!("{msg}");
            warnings.push(msg);
        }
        let failed = votes.iter().filter(|v| v.status == ParseStatus::Failed).count();
        if failed > 0 {
            warnings.push(format!(
                "module {:?}: {failed} unparsable categorization response(s)",
                module.name
            ));
        }
        assignments.push(CategoryAssignment {
            module: module.name.clone(),
            category,
            votes,
            context: country.to_owned(),
            degenerate: all_transport,
        });
    }
    Ok(CategorizationOutcome { assignments, warnings })
}

/// Three-way ground truth from Pearson correlation with the labels:
/// above `tau` positive, below `-tau` negative, otherwise mixed.
pub fn oracle_categorize(table: &RegionTable, tau: f64) -> Result<Vec<CategoryAssignment>, CategorizeError> {
    if tau.is_nan() || tau < 0.0 {
        return Err(CategorizeError::InvalidTau(tau));
    }
    let y = table.labels().ok_or(CategorizeError::MissingLabels)?;
    Ok(table
        .feature_names()
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let (category, degenerate) = match pearson(&table.column(j), y) {
                Ok(r) if r > tau => (Category::Positive, false),
                Ok(r) if r < -tau => (Category::Negative, false),
                Ok(_) => (Category::Mixed, false),
                Err(_) => (Category::Mixed, true),
            };
            CategoryAssignment {
                module: name.clone(),
                category,
                votes: Vec::new(),
                context: format!("oracle tau={tau}"),
                degenerate,
            }
        })
        .collect())
}

/// Module names per category, in assignment order.
pub fn category_subsets(assignments: &[CategoryAssignment]) -> BTreeMap<Category, Vec<String>> {
    let mut out: BTreeMap<Category, Vec<String>> = BTreeMap::new();
    for a in assignments {
        out.entry(a.category).or_default().push(a.module.clone());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockProvider, MockRule};

    use VoteValue::*;

    fn v(xs: &[i8]) -> Vec<Option<VoteValue>> {
        xs.iter()
            .map(|x| {
                Some(match x {
                    1 => Pos,
                    -1 => Neg,
                    _ => Zero,
                })
            })
            .collect()
    }

    #[test]
    fn majority_examples() {
        assert_eq!(majority_vote(&v(&[1, 1, 1, -1, 0])).unwrap(), Category::Positive);
        assert_eq!(majority_vote(&v(&[1, 1, -1, -1, 0])).unwrap(), Category::Mixed);
        assert_eq!(majority_vote(&v(&[1, 1, -1, 0, 0])).unwrap(), Category::Irrelevant);
        assert_eq!(majority_vote(&v(&[0, 0, 0, 0, 0])).unwrap(), Category::Irrelevant);
        assert_eq!(majority_vote(&v(&[-1, -1, -1, 1, 1])).unwrap(), Category::Negative);
        assert!(matches!(
            majority_vote(&v(&[1, 1, 1])),
            Err(CategorizeError::VoteCount(3))
        ));
    }

    #[test]
    fn failed_parses_only_push_toward_irrelevant() {
        let votes = vec![Some(Pos), Some(Pos), Some(Neg), Some(Neg), None];
        assert_eq!(majority_vote(&votes).unwrap(), Category::Irrelevant);
        let votes = vec![Some(Pos), Some(Pos), Some(Pos), None, None];
        assert_eq!(majority_vote(&votes).unwrap(), Category::Positive);
    }

    #[test]
    fn parse_vote_examples() {
        let r = parse_vote("Explanation: brighter means richer.\nAnswer: Type A");
        assert_eq!((r.value, r.status), (Some(Pos), ParseStatus::Parsed));
        assert_eq!(parse_vote("Answer: Type C").value, Some(Zero));
        let r = parse_vote("I cannot determine this.");
        assert_eq!((r.value, r.status), (None, ParseStatus::Failed));
    }

    #[test]
    fn parse_vote_takes_last_answer_and_tolerates_markup() {
        let text = "Answer: Type A would be naive.\nExplanation: ...\n**Answer:** type (b) - negatively correlated";
        assert_eq!(parse_vote(text).value, Some(Neg));
        assert_eq!(parse_vote("answer: TYPE:C").value, Some(Zero));
        // "cannot" must not read as Type C.
        assert_eq!(parse_vote("Answer: the type cannot be decided").value, None);
        assert_eq!(parse_vote("Answer: [Type]").value, None);
    }

    #[test]
    fn prompt_matches_template_phrasing() {
        let m = FeatureModuleMeta::new(
            "nightlight",
            "the brightness of artificial lights visible from satellite imagery",
        );
        let ind = IndicatorMeta::new("GRDP", "the total economic output of a region");
        let p = build_categorization_prompt(&m, &ind, "Vietnam", &PromptTemplates::default()).unwrap();
        assert!(p.contains("Assign the correlation type between \"nightlight\" and \"GRDP\" in Vietnam"));
        for line in ["Type A", "Type B", "Type C", "Think step by step"] {
            assert!(p.contains(line), "missing {line}");
        }
        assert!(!p.contains('<'));
        let empty = FeatureModuleMeta::new("nightlight", "  ");
        assert!(matches!(
            build_categorization_prompt(&empty, &ind, "Vietnam", &PromptTemplates::default()),
            Err(CategorizeError::Prompt(PromptError::EmptyDescription(_)))
        ));
    }

    fn two_module_registry() -> Registry {
        Registry::new(vec![
            FeatureModuleMeta::new("area", "the area size of a region"),
            FeatureModuleMeta::new("water", "the ratio of water pixels"),
        ])
        .unwrap()
    }

    #[test]
    fn categorize_all_applies_majority_to_script() {
        let mut rules = Vec::new();
        for rep in 0..5 {
            let text = if rep < 3 { "Answer: Type A" } else { "Answer: Type B" };
            rules.push(
                MockRule::reply(RequestTag::Categorize, text)
                    .when_contains("\"area\"")
                    .at_repetition(rep),
            );
        }
        rules.push(MockRule::failure(RequestTag::Categorize, "connection reset").when_contains("\"water\""));
        let gw = Gateway::new(Box::new(MockProvider::new(rules)));
        let ind = IndicatorMeta::new("POP", "the number of residents");
        let out = categorize_all(
            &two_module_registry(),
            &ind,
            "Cambodia",
            &gw,
            0,
            &PromptTemplates::default(),
        )
        .unwrap();
        assert_eq!(out.assignments[0].category, Category::Positive);
        assert_eq!(out.assignments[0].votes.len(), 5);
        assert_eq!(out.assignments[0].votes[3].value, Some(Neg));
        assert_eq!(out.assignments[1].category, Category::Irrelevant);
        assert!(out.assignments[1].degenerate);
        assert!(out.warnings.iter().any(|w| w.contains("water")));
    }

    #[test]
    fn categorize_all_propagates_non_transport_errors() {
        let gw = Gateway::new(Box::new(MockProvider::new(vec![])));
        let ind = IndicatorMeta::new("POP", "the number of residents");
        let err = categorize_all(&two_module_registry(), &ind, "KHM", &gw, 0, &PromptTemplates::default()).unwrap_err();
        assert!(matches!(err, CategorizeError::Gateway { .. }));
    }

    #[test]
    fn oracle_follows_threshold() {
        use nalgebra::DMatrix;
        let y = vec![1.0, 2.0, 4.0, 3.0];
        let mut cols = Vec::new();
        cols.extend(&y);
        cols.extend(y.iter().map(|v| -v));
        cols.extend([7.0, 7.0, 7.0, 7.0]);
        let values = DMatrix::from_column_slice(4, 3, &cols);
        let t = RegionTable::new(
            (0..4).map(|i| format!("r{i}")).collect(),
            vec!["same".into(), "neg".into(), "flat".into()],
            values,
            Some(y),
            "y",
        )
        .unwrap();
        let a = oracle_categorize(&t, 0.2).unwrap();
        assert_eq!(a[0].category, Category::Positive);
        assert_eq!(a[1].category, Category::Negative);
        assert_eq!((a[2].category, a[2].degenerate), (Category::Mixed, true));
        assert!(matches!(
            oracle_categorize(&t, -0.1),
            Err(CategorizeError::InvalidTau(_))
        ));
    }
}
