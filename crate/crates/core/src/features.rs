//! Interaction discovery, expression parsing and evaluation, nonlinear
//! transforms and top-k% correlation filtering.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::OnceLock;

use nalgebra::DMatrix;
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::categorizer::{category_subsets, Category, CategoryAssignment};
use crate::data::{DataError, FeatureModuleMeta, RegionTable, Registry, SCALE_EPSILON};
use crate::gateway::{Gateway, GatewayError, RequestTag};
use crate::metrics::pearson;
use crate::prompts::{check_description, fill, module_line, IndicatorMeta, PromptError, PromptTemplates};

/// Clip applied to z-scores before `exp`.
pub const EXP_CLIP: f64 = 30.0;
pub const DEFAULT_K_PERCENT: f64 = 25.0;
const MAX_NESTING: usize = 64;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("operand {0:?} not found in table")]
    MissingOperand(String),
    #[error("k_percent must be in (0, 100], got {0}")]
    InvalidK(f64),
    #[error("malformed expression: {0}")]
    Malformed(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("discovery for {category} subset: {source}")]
    Gateway {
        category: Category,
        #[source]
        source: GatewayError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExprKind {
    Base,
    Product,
    Transform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    None,
    Log,
    Sqrt,
    Exp,
}

impl Transform {
    pub const APPLIED: [Transform; 3] = [Transform::Log, Transform::Sqrt, Transform::Exp];

    fn prefix(self) -> &'static str {
        match self {
            Transform::None => "",
            Transform::Log => "log",
            Transform::Sqrt => "sqrt",
            Transform::Exp => "exp",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureExpr {
    pub kind: ExprKind,
    pub operands: Vec<String>,
    pub transform: Transform,
    pub category: Category,
    pub name: String,
}

impl FeatureExpr {
    pub fn base(name: impl Into<String>, category: Category) -> Self {
        let name = name.into();
        FeatureExpr {
            kind: ExprKind::Base,
            operands: vec![name.clone()],
            transform: Transform::None,
            category,
            name,
        }
    }

    /// Product of the operands, sorted for a canonical name. A single
    /// operand gives the base feature itself.
    pub fn product(mut operands: Vec<String>, category: Category) -> Self {
        if operands.len() == 1 {
            return Self::base(operands.remove(0), category);
        }
        operands.sort();
        FeatureExpr {
            kind: ExprKind::Product,
            name: operands.join("*"),
            operands,
            transform: Transform::None,
            category,
        }
    }

    pub fn transformed(base: impl Into<String>, transform: Transform, category: Category) -> Self {
        let base = base.into();
        if transform == Transform::None {
            return Self::base(base, category);
        }
        FeatureExpr {
            kind: ExprKind::Transform,
            name: format!("{}({base})", transform.prefix()),
            operands: vec![base],
            transform,
            category,
        }
    }
}

impl fmt::Display for FeatureExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

// ---------------------------------------------------------------------------
// Prompt

/// Builds the discovery prompt for one category subset. Returns `None` for an
/// empty subset.
pub fn build_discovery_prompt(
    subset: &[FeatureModuleMeta],
    indicator: &IndicatorMeta,
    country: &str,
    templates: &PromptTemplates,
) -> Result<Option<String>, FeatureError> {
    if subset.is_empty() {
        return Ok(None);
    }
    check_description(&format!("indicator {:?}", indicator.name), &indicator.description)?;
    let mut lines = Vec::with_capacity(subset.len());
    for m in subset {
        check_description(&format!("module {:?}", m.name), &m.description)?;
        lines.push(module_line(m));
    }
    let count = subset.len().to_string();
    Ok(Some(fill(
        &templates.discover,
        &[
            ("<Module List>", &lines.join("\n")),
            ("<Module Count>", &count),
            ("<Indicator Definition>", indicator.description.trim()),
            ("<Indicator>", &indicator.name),
            ("<Country>", country),
        ],
    )))
}

/// Registry metadata for `names`, with missing ranges taken from the table's
/// column min/max.
pub fn subset_meta(registry: &Registry, table: &RegionTable, names: &[String]) -> Vec<FeatureModuleMeta> {
    names
        .iter()
        .map(|n| {
            let mut meta = registry
                .get(n)
                .cloned()
                .unwrap_or_else(|| FeatureModuleMeta::new(n.clone(), ""));
            if meta.value_range.is_none() {
                if let Some(col) = table.column_by_name(n) {
                    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if lo.is_finite() && hi.is_finite() {
                        meta.value_range = Some((lo, hi));
                    }
                }
            }
            meta
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Response parsing

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedLine {
    pub line_number: usize,
    pub text: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DiscoveryParse {
    pub exprs: Vec<FeatureExpr>,
    pub skipped: Vec<SkippedLine>,
    pub duplicates: usize,
}

fn column_line_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^[\s>*#_\-•]*new\s+column\s*(\d+)\s*(?:\*\*|__)?\s*[:.)]\s*(.*)$").expect("valid regex")
    })
}

fn normalize_name(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut last_us = false;
    for c in s.trim().chars() {
        let c = if c == ' ' || c == '-' || c == '_' { '_' } else { c };
        if c == '_' {
            if !last_us {
                out.push('_');
            }
            last_us = true;
        } else {
            out.extend(c.to_lowercase());
            last_us = false;
        }
    }
    out.trim_matches('_').to_owned()
}

fn closing_quote(open: char) -> Option<&'static [char]> {
    match open {
        '"' => Some(&['"', '”']),
        '\'' => Some(&['\'', '’']),
        '`' => Some(&['`']),
        '“' | '”' => Some(&['”', '“', '"']),
        '‘' | '’' => Some(&['’', '‘', '\'']),
        _ => None,
    }
}

struct ExprParser {
    chars: Vec<char>,
    pos: usize,
}

impl ExprParser {
    fn new(text: &str) -> Self {
        ExprParser {
            chars: text.chars().collect(),
            pos: 0,
        }
    }

    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).copied()
    }

    fn skip_ws(&mut self) {
        while self.peek().is_some_and(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn parse_all(mut self) -> Result<Vec<String>, String> {
        let names = self.expr(0)?;
        self.skip_ws();
        match self.peek() {
            None => Ok(names),
            Some(c) => Err(format!("unexpected {c:?} after expression")),
        }
    }

    fn expr(&mut self, depth: usize) -> Result<Vec<String>, String> {
        if depth > MAX_NESTING {
            return Err("expression nested too deeply".into());
        }
        let mut names = self.factor(depth)?;
        loop {
            self.skip_ws();
            match self.peek() {
                Some('*') | Some('×') => {
                    self.pos += 1;
                    names.extend(self.factor(depth)?);
                }
                _ => return Ok(names),
            }
        }
    }

    fn factor(&mut self, depth: usize) -> Result<Vec<String>, String> {
        self.skip_ws();
        let Some(c) = self.peek() else {
            return Err("expected a module name".into());
        };
        if c == '(' {
            self.pos += 1;
            let inner = self.expr(depth + 1)?;
            self.skip_ws();
            if self.peek() != Some(')') {
                return Err("unbalanced parenthesis".into());
            }
            self.pos += 1;
            return Ok(inner);
        }
        if let Some(closers) = closing_quote(c) {
            self.pos += 1;
            let start = self.pos;
            while let Some(d) = self.peek() {
                if closers.contains(&d) {
                    let name: String = self.chars[start..self.pos].iter().collect();
                    self.pos += 1;
                    if name.trim().is_empty() {
                        return Err("empty quoted name".into());
                    }
                    return Ok(vec![name]);
                }
                self.pos += 1;
            }
            return Err("unterminated quote".into());
        }
        let start = self.pos;
        while self
            .peek()
            .is_some_and(|d| d.is_alphanumeric() || matches!(d, '_' | '-' | '.' | ' '))
        {
            self.pos += 1;
        }
        let name: String = self.chars[start..self.pos].iter().collect();
        if name.trim().is_empty() {
            return Err(format!("unexpected {c:?}"));
        }
        Ok(vec![name.trim().to_owned()])
    }
}

/// Parses an expression, falling back to a parenthesized or `=` suffix when
/// the text starts with a free-form column label.
fn parse_expr_text(text: &str) -> Result<Vec<String>, String> {
    let text = text.trim().trim_end_matches(['.', ',', ';']);
    let first = ExprParser::new(text).parse_all();
    if first.is_ok() {
        return first;
    }
    let starts = text
        .char_indices()
        .filter(|(_, c)| *c == '(' || *c == '=' || *c == ':')
        .map(|(i, c)| if c == '(' { i } else { i + c.len_utf8() })
        .take(8);
    for i in starts {
        if let Ok(names) = ExprParser::new(&text[i..]).parse_all() {
            return Ok(names);
        }
    }
    first
}

/// Splits at the first `|` outside quotes.
fn split_explanation(body: &str) -> &str {
    let mut open: Option<&'static [char]> = None;
    for (i, c) in body.char_indices() {
        match open {
            Some(closers) if closers.contains(&c) => open = None,
            Some(_) => {}
            None if c == '|' => return &body[..i],
            None => open = closing_quote(c).filter(|_| c != '\''),
        }
    }
    body
}

/// Best-effort parse of a discovery response. Lines of the form
/// `New column <n>: <expr> | <explanation>` become expressions; lines naming
/// modules outside `subset` or with malformed syntax are skipped and
/// recorded. Never panics.
pub fn parse_discovery_response(response: &str, subset: &[String], category: Category) -> DiscoveryParse {
    let lookup: HashMap<String, &String> = subset.iter().rev().map(|n| (normalize_name(n), n)).collect();
    let mut out = DiscoveryParse::default();
    let mut seen = HashSet::new();
    for (i, raw_line) in response.lines().enumerate() {
        let line = raw_line.replace("**", "").replace("\\_", "_");
        let Some(caps) = column_line_regex().captures(&line) else {
            continue;
        };
        let mut skip = |reason: String| {
            log::warn!("discovery line {}: {reason}", i + 1);
            out.skipped.push(SkippedLine {
                line_number: i + 1,
                text: raw_line.to_owned(),
                reason,
            });
        };
        let expr_text = split_explanation(&caps[2]);
        let names = match parse_expr_text(expr_text) {
            Ok(n) => n,
            Err(e) => {
                skip(e);
                continue;
            }
        };
        let mut resolved = Vec::with_capacity(names.len());
        let mut unknown = None;
        for n in &names {
            match lookup.get(&normalize_name(n)) {
                Some(canon) => resolved.push((*canon).clone()),
                None => {
                    unknown = Some(n.clone());
                    break;
                }
            }
        }
        if let Some(n) = unknown {
            skip(format!("unknown module {n:?}"));
            continue;
        }
        let expr = FeatureExpr::product(resolved, category);
        if seen.insert(expr.name.clone()) {
            out.exprs.push(expr);
        } else {
            out.duplicates += 1;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Evaluation

fn column_of(table: &RegionTable, name: &str) -> Result<Vec<f64>, FeatureError> {
    table
        .column_by_name(name)
        .ok_or_else(|| FeatureError::MissingOperand(name.to_owned()))
}

/// Population mean and scale of a column, scale falling back to 1.
pub fn column_stats(col: &[f64]) -> (f64, f64) {
    let n = col.len().max(1) as f64;
    let mean = col.iter().sum::<f64>() / n;
    let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    (mean, if sd.is_finite() && sd > SCALE_EPSILON { sd } else { 1.0 })
}

fn finite(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(f64::MIN, f64::MAX)
    }
}

fn apply_transform(t: Transform, col: &[f64], stats: (f64, f64)) -> Vec<f64> {
    match t {
        Transform::None => col.to_vec(),
        Transform::Log => col.iter().map(|&x| x.signum() * x.abs().ln_1p()).map(finite).collect(),
        Transform::Sqrt => col.iter().map(|&x| x.signum() * x.abs().sqrt()).map(finite).collect(),
        Transform::Exp => col
            .iter()
            .map(|&x| ((x - stats.0) / stats.1).clamp(-EXP_CLIP, EXP_CLIP).exp())
            .map(finite)
            .collect(),
    }
}

/// Evaluates with explicit `exp` standardization parameters; `None` uses the
/// table's own column statistics.
pub fn evaluate_with_stats(
    expr: &FeatureExpr,
    table: &RegionTable,
    exp_stats: Option<(f64, f64)>,
) -> Result<Vec<f64>, FeatureError> {
    match expr.kind {
        ExprKind::Base => column_of(table, &expr.operands[0]),
        ExprKind::Product => {
            let mut acc = vec![1.0; table.n_rows()];
            for op in &expr.operands {
                let col = column_of(table, op)?;
                for (a, b) in acc.iter_mut().zip(col) {
                    *a = finite(*a * b);
                }
            }
            Ok(acc)
        }
        ExprKind::Transform => {
            let col = column_of(table, &expr.operands[0])?;
            let stats = exp_stats.unwrap_or_else(|| column_stats(&col));
            Ok(apply_transform(expr.transform, &col, stats))
        }
    }
}

/// Products use raw columns; `log`/`sqrt` are sign-preserving; `exp` acts on
/// clipped z-scores.
pub fn evaluate_expr(expr: &FeatureExpr, table: &RegionTable) -> Result<Vec<f64>, FeatureError> {
    evaluate_with_stats(expr, table, None)
}

// ---------------------------------------------------------------------------
// Filtering

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveredFeature {
    pub name: String,
    pub kind: ExprKind,
    pub operands: Vec<String>,
    pub transform: Transform,
    pub category: Category,
    pub kept: bool,
    pub mean_abs_corr: f64,
}

impl DiscoveredFeature {
    pub fn expr(&self) -> FeatureExpr {
        FeatureExpr {
            kind: self.kind,
            operands: self.operands.clone(),
            transform: self.transform,
            category: self.category,
            name: self.name.clone(),
        }
    }
}

pub fn keep_count(k_percent: f64, count: usize) -> usize {
    ((k_percent / 100.0 * count as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Mean |Pearson| of a column against the given base columns; undefined
/// correlations count as zero.
pub fn mean_abs_correlation(candidate: &[f64], bases: &[Vec<f64>]) -> f64 {
    if bases.is_empty() {
        return 0.0;
    }
    bases
        .iter()
        .map(|b| pearson(candidate, b).map(f64::abs).unwrap_or(0.0))
        .sum::<f64>()
        / bases.len() as f64
}

/// Ranks each category's candidates by mean |Pearson| against that
/// category's base columns (over all table rows) and keeps the top
/// `ceil(k% · count)`. Ties go to the lexicographically smaller name.
pub fn filter_top_k(
    candidates: &[FeatureExpr],
    table: &RegionTable,
    subsets: &BTreeMap<Category, Vec<String>>,
    k_percent: f64,
) -> Result<Vec<DiscoveredFeature>, FeatureError> {
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(FeatureError::InvalidK(k_percent));
    }
    let mut base_cols: BTreeMap<Category, Vec<Vec<f64>>> = BTreeMap::new();
    for (cat, names) in subsets {
        let cols = names.iter().map(|n| column_of(table, n)).collect::<Result<_, _>>()?;
        base_cols.insert(*cat, cols);
    }
    let mut records: Vec<DiscoveredFeature> = candidates
        .iter()
        .map(|c| {
            let col = evaluate_expr(c, table)?;
            let bases = base_cols.get(&c.category).map(Vec::as_slice).unwrap_or(&[]);
            Ok(DiscoveredFeature {
                name: c.name.clone(),
                kind: c.kind,
                operands: c.operands.clone(),
                transform: c.transform,
                category: c.category,
                kept: false,
                mean_abs_corr: mean_abs_correlation(&col, bases),
            })
        })
        .collect::<Result<_, FeatureError>>()?;

    let mut by_cat: BTreeMap<Category, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_cat.entry(r.category).or_default().push(i);
    }
    for idx in by_cat.values_mut() {
        idx.sort_by(|&a, &b| {
            records[b]
                .mean_abs_corr
                .total_cmp(&records[a].mean_abs_corr)
                .then_with(|| records[a].name.cmp(&records[b].name))
        });
        for &i in idx.iter().take(keep_count(k_percent, idx.len())) {
            records[i].kept = true;
        }
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Augmentation

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentOptions {
    pub k_percent: f64,
    pub discovery: bool,
    pub transforms: bool,
    /// Keep irrelevant modules as base columns.
    pub include_irrelevant: bool,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        AugmentOptions {
            k_percent: DEFAULT_K_PERCENT,
            discovery: true,
            transforms: true,
            include_irrelevant: false,
        }
    }
}

/// Ordered column expressions plus the `exp` statistics they were built with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecipe {
    pub columns: Vec<FeatureExpr>,
    #[serde(default)]
    pub exp_stats: BTreeMap<String, (f64, f64)>,
}

impl FeatureRecipe {
    pub fn names(&self) -> Vec<String> {
        self.columns.iter().map(|c| c.name.clone()).collect()
    }

    pub fn categories(&self) -> Vec<Category> {
        self.columns.iter().map(|c| c.category).collect()
    }

    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// Base columns, transforms and kept interactions per category, in
    /// P, N, M (and optionally irrelevant) order.
    pub fn build(
        table: &RegionTable,
        assignments: &[CategoryAssignment],
        kept: &[FeatureExpr],
        opts: &AugmentOptions,
    ) -> Result<Self, FeatureError> {
        let subsets = category_subsets(assignments);
        let mut cats: Vec<Category> = Category::SIGNED.to_vec();
        if opts.include_irrelevant {
            cats.push(Category::Irrelevant);
        }
        let mut columns = Vec::new();
        let mut exp_stats = BTreeMap::new();
        for cat in cats {
            let names = subsets.get(&cat).cloned().unwrap_or_default();
            for n in &names {
                columns.push(FeatureExpr::base(n.clone(), cat));
            }
            if opts.transforms && cat != Category::Irrelevant {
                for n in &names {
                    for t in Transform::APPLIED {
                        columns.push(FeatureExpr::transformed(n.clone(), t, cat));
                    }
                    exp_stats.insert(n.clone(), column_stats(&column_of(table, n)?));
                }
            }
            columns.extend(kept.iter().filter(|e| e.category == cat).cloned());
        }
        Ok(FeatureRecipe { columns, exp_stats })
    }

    pub fn evaluate(&self, table: &RegionTable) -> Result<AugmentedTable, FeatureError> {
        let n = table.n_rows();
        let mut values = DMatrix::zeros(n, self.columns.len());
        for (j, e) in self.columns.iter().enumerate() {
            let stats = e.operands.first().and_then(|o| self.exp_stats.get(o)).copied();
            let col = evaluate_with_stats(e, table, stats)?;
            values.set_column(j, &nalgebra::DVector::from_vec(col));
        }
        Ok(AugmentedTable {
            table: table.clone(),
            exprs: self.columns.clone(),
            values,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedTable {
    pub table: RegionTable,
    pub exprs: Vec<FeatureExpr>,
    pub values: DMatrix<f64>,
}

impl AugmentedTable {
    pub fn categories(&self) -> Vec<Category> {
        self.exprs.iter().map(|e| e.category).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.exprs.iter().map(|e| e.name.clone()).collect()
    }

    pub fn rows(&self, idx: &[usize]) -> DMatrix<f64> {
        self.values.select_rows(idx.iter())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmentation {
    pub recipe: FeatureRecipe,
    pub discovered: Vec<DiscoveredFeature>,
    pub skipped: Vec<SkippedLine>,
    pub warnings: Vec<String>,
}

/// Inputs for an LLM discovery round.
pub struct DiscoveryContext<'a> {
    pub registry: &'a Registry,
    pub indicator: &'a IndicatorMeta,
    pub country: &'a str,
    pub gateway: &'a Gateway,
    pub session: u32,
    pub templates: &'a PromptTemplates,
}

/// One discovery call per non-empty P/N/M subset, parse, filter, and build
/// the recipe. A transport failure leaves that subset with transforms only.
pub fn augment(
    table: &RegionTable,
    assignments: &[CategoryAssignment],
    ctx: Option<&DiscoveryContext<'_>>,
    opts: &AugmentOptions,
) -> Result<Augmentation, FeatureError> {
    if !(opts.k_percent > 0.0 && opts.k_percent <= 100.0) {
        return Err(FeatureError::InvalidK(opts.k_percent));
    }
    let subsets = category_subsets(assignments);
    let mut warnings = Vec::new();
    let mut skipped = Vec::new();
    let mut candidates = Vec::new();

    if let (true, Some(ctx)) = (opts.discovery, ctx) {
        let jobs: Vec<(Category, Vec<String>)> = Category::SIGNED
            .iter()
            .filter_map(|c| subsets.get(c).filter(|v| !v.is_empty()).map(|v| (*c, v.clone())))
            .collect();
        let responses: Vec<(Category, Vec<String>, Result<String, FeatureError>)> = jobs
            .into_par_iter()
            .map(|(cat, names)| {
                let meta = subset_meta(ctx.registry, table, &names);
                let res = build_discovery_prompt(&meta, ctx.indicator, ctx.country, ctx.templates).and_then(|p| {
                    let prompt = p.expect("non-empty subset");
                    let req = ctx.gateway.request(RequestTag::Discover, prompt).session(ctx.session);
                    ctx.gateway
                        .complete(&req)
                        .map_err(|source| FeatureError::Gateway { category: cat, source })
                });
                (cat, names, res)
            })
            .collect();
        for (cat, names, res) in responses {
            match res {
                Ok(text) => {
                    let parsed = parse_discovery_response(&text, &names, cat);
                    skipped.extend(parsed.skipped);
                    candidates.extend(parsed.exprs.into_iter().filter(|e| e.kind == ExprKind::Product));
                }
                Err(FeatureError::Gateway {
                    source: GatewayError::Transport { message, .. },
                    ..
                }) => {
                    let msg = format!("discovery for {cat} subset failed ({message}); using transforms only");
                    log::warn!("{msg}");
                    warnings.push(msg);
                }
                Err(e) => return Err(e),
            }
        }
    }

    let discovered = if candidates.is_empty() {
        Vec::new()
    } else {
        filter_top_k(&candidates, table, &subsets, opts.k_percent)?
    };
    let kept: Vec<FeatureExpr> = discovered
        .iter()
        .filter(|d| d.kept)
        .map(DiscoveredFeature::expr)
        .collect();
    let recipe = FeatureRecipe::build(table, assignments, &kept, opts)?;
    Ok(Augmentation {
        recipe,
        discovered,
        skipped,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockProvider, MockRule};

    fn table(cols: &[(&str, Vec<f64>)]) -> RegionTable {
        let n = cols[0].1.len();
        let flat: Vec<f64> = cols.iter().flat_map(|(_, v)| v.clone()).collect();
        RegionTable::new(
            (0..n).map(|i| format!("r{i}")).collect(),
            cols.iter().map(|(n, _)| n.to_string()).collect(),
            DMatrix::from_column_slice(n, cols.len(), &flat),
            None,
            "y",
        )
        .unwrap()
    }

    fn names(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn evaluate_examples() {
        let t = table(&[("a", vec![1., 2., 3.]), ("b", vec![2., 2., 2.])]);
        let p = FeatureExpr::product(names(&["a", "b"]), Category::Positive);
        assert_eq!(evaluate_expr(&p, &t).unwrap(), vec![2., 4., 6.]);
        let t = table(&[("a", vec![0., std::f64::consts::E - 1.0])]);
        let l = evaluate_expr(&FeatureExpr::transformed("a", Transform::Log, Category::Positive), &t).unwrap();
        assert_eq!(l[0], 0.0);
        assert!((l[1] - 1.0).abs() < 1e-15);
        let t = table(&[("a", vec![-4., 9.])]);
        let s = evaluate_expr(&FeatureExpr::transformed("a", Transform::Sqrt, Category::Mixed), &t).unwrap();
        assert_eq!(s, vec![-2., 3.]);
        let missing = FeatureExpr::base("zzz", Category::Mixed);
        assert!(matches!(
            evaluate_expr(&missing, &t),
            Err(FeatureError::MissingOperand(_))
        ));
    }

    #[test]
    fn exp_is_clipped_and_finite() {
        let t = table(&[("a", vec![0., 0., 0., 1e300])]);
        let e = evaluate_expr(&FeatureExpr::transformed("a", Transform::Exp, Category::Positive), &t).unwrap();
        assert!(e.iter().all(|v| v.is_finite()));
        let big = table(&[("a", vec![1e200, 1e200]), ("b", vec![1e200, -1e200])]);
        let p = evaluate_expr(&FeatureExpr::product(names(&["a", "b"]), Category::Mixed), &big).unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn canonical_names() {
        let ab = FeatureExpr::product(names(&["b", "a"]), Category::Positive);
        assert_eq!(ab.name, "a*b");
        assert_eq!(ab, FeatureExpr::product(names(&["a", "b"]), Category::Positive));
        assert_eq!(
            FeatureExpr::transformed("x", Transform::Sqrt, Category::Mixed).name,
            "sqrt(x)"
        );
        assert_eq!(
            FeatureExpr::product(names(&["x"]), Category::Mixed).kind,
            ExprKind::Base
        );
    }

    #[test]
    fn parses_quoted_products() {
        let subset = names(&["area", "Nightlight_Sum", "neighbor_area_agricultural"]);
        let text = "New column 1: \"area\"*\"Nightlight_Sum\" | total activity\n\
                    New column 2: \"neighbor_area_agricultural\"*\"neighbor_area_agricultural\"*\"neighbor_area_agricultural\" | repeated\n\
                    New column 3: \"unicorn_density\"*\"area\" | nonsense\n\
                    New column 4: \"Nightlight_Sum\"*\"area\" | duplicate";
        let p = parse_discovery_response(text, &subset, Category::Positive);
        assert_eq!(p.exprs.len(), 2);
        assert_eq!(p.exprs[0].operands, names(&["Nightlight_Sum", "area"]));
        assert_eq!(p.exprs[1].operands.len(), 3);
        assert_eq!(p.skipped.len(), 1);
        assert!(p.skipped[0].reason.contains("unicorn_density"));
        assert_eq!(p.duplicates, 1);
    }

    #[test]
    fn parses_loose_syntax() {
        let subset = names(&["area_building", "Nightlight_Average", "area"]);
        let text = "**New column 1**: “Nightlight_Average”*“area_building” | x\n\
                    New column 2: nightlight average * (Area) | bare\n\
                    New column 3: built_light (`area building` * `Nightlight_Average`) | pseudo\n\
                    New column 4: \"area\" | single\n\
                    New column 5: \"area\"* | broken\n\
                    New column 6: ((((\"area\" | unbalanced";
        let p = parse_discovery_response(text, &subset, Category::Positive);
        let got: Vec<&str> = p.exprs.iter().map(|e| e.name.as_str()).collect();
        assert_eq!(
            got,
            vec!["Nightlight_Average*area_building", "Nightlight_Average*area", "area"]
        );
        assert_eq!(p.duplicates, 1);
        assert_eq!(p.skipped.len(), 2);
    }

    #[test]
    fn deep_nesting_is_rejected_not_overflowed() {
        let s = format!("New column 1: {}\"a\"{}", "(".repeat(100_000), ")".repeat(100_000));
        let p = parse_discovery_response(&s, &names(&["a"]), Category::Mixed);
        assert!(p.exprs.is_empty());
        assert_eq!(p.skipped.len(), 1);
    }

    #[test]
    fn prompt_lists_modules_with_ranges() {
        let subset = vec![
            FeatureModuleMeta::new("area", "the area size of a given region").with_range(0.0, 10.0),
            FeatureModuleMeta::new("Nightlight_Sum", "the sum of nightlight intensity").with_range(1.0, 2.5),
        ];
        let ind = IndicatorMeta::new("GRDP", "the total economic output of a region");
        let p = build_discovery_prompt(&subset, &ind, "Vietnam", &PromptTemplates::default())
            .unwrap()
            .unwrap();
        assert!(p.contains("Find several new columns related to interactions"));
        assert!(p.contains("\"area\": The area size of a given region (numerical variable within range [0, 10])"));
        assert!(p.contains("[1, 2.5]"));
        assert!(
            build_discovery_prompt(&[], &ind, "Vietnam", &PromptTemplates::default())
                .unwrap()
                .is_none()
        );
    }

    #[test]
    fn keep_count_arithmetic() {
        assert_eq!(keep_count(25.0, 4), 1);
        assert_eq!(keep_count(25.0, 8), 2);
        assert_eq!(keep_count(25.0, 5), 2);
        assert_eq!(keep_count(25.0, 2), 1);
        assert_eq!(keep_count(100.0, 7), 7);
        assert_eq!(keep_count(25.0, 0), 0);
    }

    #[test]
    fn filter_prefers_base_duplicate_over_noise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..200).map(|_| rng.gen_range(1.0..2.0)).collect();
        let noise: Vec<f64> = (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ones = vec![1.0; 200];
        let t = table(&[("a", a), ("noise", noise), ("one", ones)]);
        let subsets = BTreeMap::from([(Category::Positive, names(&["a"]))]);
        let dup = FeatureExpr::product(names(&["a", "one"]), Category::Positive);
        let rnd = FeatureExpr::product(names(&["noise", "one"]), Category::Positive);
        let recs = filter_top_k(&[rnd, dup], &t, &subsets, 50.0).unwrap();
        let kept: Vec<&str> = recs.iter().filter(|r| r.kept).map(|r| r.name.as_str()).collect();
        assert_eq!(kept, vec!["a*one"]);
        assert!(matches!(
            filter_top_k(&[], &t, &subsets, 0.0),
            Err(FeatureError::InvalidK(_))
        ));
    }

    fn assignments(p: usize, n: usize, m: usize) -> (RegionTable, Vec<CategoryAssignment>) {
        let mut cols = Vec::new();
        let mut assigns = Vec::new();
        for (cat, count, prefix) in [
            (Category::Positive, p, "p"),
            (Category::Negative, n, "n"),
            (Category::Mixed, m, "m"),
        ] {
            for i in 0..count {
                let name = format!("{prefix}{i}");
                let col: Vec<f64> = (0..12)
                    .map(|r| ((r * (i + 2) + cols.len() * 7) % 11) as f64 + 0.5)
                    .collect();
                cols.push((name.clone(), col));
                assigns.push(CategoryAssignment::new(name, cat));
            }
        }
        let refs: Vec<(&str, Vec<f64>)> = cols.iter().map(|(n, v)| (n.as_str(), v.clone())).collect();
        (table(&refs), assigns)
    }

    fn registry_for(t: &RegionTable) -> Registry {
        Registry::new(
            t.feature_names()
                .iter()
                .map(|n| FeatureModuleMeta::new(n.clone(), format!("synthetic module {n}")))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn augment_keeps_ceil_quarter_per_subset() {
        let (t, assigns) = assignments(14, 6, 2);
        let script = |prefix: &str, pairs: &[(usize, usize)]| -> String {
            pairs
                .iter()
                .enumerate()
                .map(|(i, (a, b))| format!("New column {}: \"{prefix}{a}\"*\"{prefix}{b}\" | e\n", i + 1))
                .collect()
        };
        let p_pairs: Vec<(usize, usize)> = (0..8).map(|i| (i, i + 1)).collect();
        let n_pairs: Vec<(usize, usize)> = (0..5).map(|i| (i, i + 1)).collect();
        let rules = vec![
            MockRule::reply(RequestTag::Discover, script("p", &p_pairs)).when_contains("\"p0\""),
            MockRule::reply(RequestTag::Discover, script("n", &n_pairs)).when_contains("\"n0\""),
            MockRule::reply(RequestTag::Discover, script("m", &[(0, 1), (0, 0)])).when_contains("\"m0\""),
        ];
        let gw = Gateway::new(Box::new(MockProvider::new(rules)));
        let reg = registry_for(&t);
        let ind = IndicatorMeta::new("y", "a synthetic target");
        let templates = PromptTemplates::default();
        let ctx = DiscoveryContext {
            registry: &reg,
            indicator: &ind,
            country: "Testland",
            gateway: &gw,
            session: 0,
            templates: &templates,
        };
        let aug = augment(&t, &assigns, Some(&ctx), &AugmentOptions::default()).unwrap();
        let kept = |c: Category| aug.discovered.iter().filter(|d| d.kept && d.category == c).count();
        assert_eq!(
            (
                kept(Category::Positive),
                kept(Category::Negative),
                kept(Category::Mixed)
            ),
            (2, 2, 1)
        );
        assert_eq!(aug.recipe.len(), 22 * 4 + 5);
        let table = aug.recipe.evaluate(&t).unwrap();
        assert!(table.values.iter().all(|v| v.is_finite()));
        for e in &aug.recipe.columns {
            for op in &e.operands {
                let a = assigns.iter().find(|a| &a.module == op).unwrap();
                assert_eq!(a.category, e.category);
            }
        }
    }

    #[test]
    fn augment_without_gateway_or_with_failure_uses_transforms_only() {
        let (t, assigns) = assignments(6, 0, 0);
        let aug = augment(&t, &assigns, None, &AugmentOptions::default()).unwrap();
        assert_eq!(aug.recipe.len(), 6 + 18);
        let gw = Gateway::new(Box::new(MockProvider::new(vec![MockRule::failure(
            RequestTag::Discover,
            "down",
        )])));
        let reg = registry_for(&t);
        let ind = IndicatorMeta::new("y", "a synthetic target");
        let templates = PromptTemplates::default();
        let ctx = DiscoveryContext {
            registry: &reg,
            indicator: &ind,
            country: "Testland",
            gateway: &gw,
            session: 0,
            templates: &templates,
        };
        let aug = augment(&t, &assigns, Some(&ctx), &AugmentOptions::default()).unwrap();
        assert_eq!(aug.recipe.len(), 24);
        assert_eq!(aug.warnings.len(), 1);
    }
}
