//! Feature-module registry, region tables and standardization.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const DEFAULT_REGISTRY: &str = include_str!("../assets/default_registry.json");

/// Scale below which a column is treated as constant.
pub const SCALE_EPSILON: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("registry parse error: {0}")]
    RegistryParse(String),
    #[error("duplicate module name in registry: {0:?}")]
    DuplicateModule(String),
    #[error("unknown feature columns: {}", .0.join(", "))]
    UnknownColumns(Vec<String>),
    #[error("duplicate column in table header: {0:?}")]
    DuplicateColumn(String),
    #[error("table header must start with `region_id`")]
    MissingRegionId,
    #[error("indicator column {0:?} not present in table")]
    MissingIndicator(String),
    #[error("non-numeric value {value:?} at row {row}, column {column:?}")]
    NonNumeric { row: usize, column: String, value: String },
    #[error("table has no data rows")]
    EmptyTable,
    #[error("csv error: {0}")]
    Csv(String),
    #[error("inconsistent table shape: {0}")]
    Shape(String),
    #[error("row subset is empty")]
    EmptyRows,
    #[error("row index {0} out of bounds")]
    RowOutOfBounds(usize),
    #[error("table has no labels")]
    MissingLabels,
    #[error("invalid synthetic spec: {0}")]
    Synthetic(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureGroup {
    Area,
    Nightlight,
    Distance,
    LandcoverRatio,
    NeighborAggregate,
    Custom,
}

/// Metadata for one feature module: what it measures and its plausible range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawModuleEntry", into = "RawModuleEntry")]
pub struct FeatureModuleMeta {
    pub name: String,
    pub description: String,
    pub value_range: Option<(f64, f64)>,
    pub group: FeatureGroup,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawModuleEntry {
    name: String,
    #[serde(default)]
    description: String,
    #[serde(default)]
    min: Option<f64>,
    #[serde(default)]
    max: Option<f64>,
    #[serde(default = "custom_group")]
    group: FeatureGroup,
}

fn custom_group() -> FeatureGroup {
    FeatureGroup::Custom
}

impl TryFrom<RawModuleEntry> for FeatureModuleMeta {
    type Error = String;

    fn try_from(raw: RawModuleEntry) -> Result<Self, Self::Error> {
        if raw.name.trim().is_empty() {
            return Err("module name must be non-empty".into());
        }
        let value_range = match (raw.min, raw.max) {
            (None, None) => None,
            (Some(lo), Some(hi)) => {
                if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                    return Err(format!("module {:?} has malformed range [{lo}, {hi}]", raw.name));
                }
                Some((lo, hi))
            }
            _ => return Err(format!("module {:?} must give both min and max or neither", raw.name)),
        };
        Ok(FeatureModuleMeta {
            name: raw.name,
            description: raw.description,
            value_range,
            group: raw.group,
        })
    }
}

impl From<FeatureModuleMeta> for RawModuleEntry {
    fn from(m: FeatureModuleMeta) -> Self {
        RawModuleEntry {
            name: m.name,
            description: m.description,
            min: m.value_range.map(|r| r.0),
            max: m.value_range.map(|r| r.1),
            group: m.group,
        }
    }
}

impl FeatureModuleMeta {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Self {
        FeatureModuleMeta {
            name: name.into(),
            description: description.into(),
            value_range: None,
            group: FeatureGroup::Custom,
        }
    }

    pub fn with_range(mut self, min: f64, max: f64) -> Self {
        self.value_range = Some((min, max));
        self
    }
}

/// Ordered set of feature modules with unique names.
#[derive(Debug, Clone, PartialEq)]
pub struct Registry {
    modules: Vec<FeatureModuleMeta>,
    index: HashMap<String, usize>,
}

impl Registry {
    pub fn new(modules: Vec<FeatureModuleMeta>) -> Result<Self, DataError> {
        let mut index = HashMap::with_capacity(modules.len());
        for (i, m) in modules.iter().enumerate() {
            if index.insert(m.name.clone(), i).is_some() {
                return Err(DataError::DuplicateModule(m.name.clone()));
            }
        }
        Ok(Registry { modules, index })
    }

    /// The 26 bundled modules: area, nightlight sum/average, airport and port
    /// distances, eight land-cover ratios, and the neighbor aggregate of each.
    pub fn default_modules() -> Self {
        Self::from_json_str(DEFAULT_REGISTRY).expect("bundled registry is valid")
    }

    pub fn from_json_str(text: &str) -> Result<Self, DataError> {
        let modules: Vec<FeatureModuleMeta> =
            serde_json::from_str(text).map_err(|e| DataError::RegistryParse(e.to_string()))?;
        Self::new(modules)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.modules).expect("registry serializes")
    }

    pub fn modules(&self) -> &[FeatureModuleMeta] {
        &self.modules
    }

    pub fn get(&self, name: &str) -> Option<&FeatureModuleMeta> {
        self.index.get(name).map(|&i| &self.modules[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.modules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modules.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.modules.iter().map(|m| m.name.as_str())
    }

    /// Restricts the registry to the given names, keeping registry order.
    pub fn restricted_to(&self, names: &[String]) -> Registry {
        let keep: BTreeSet<&str> = names.iter().map(String::as_str).collect();
        let modules = self
            .modules
            .iter()
            .filter(|m| keep.contains(m.name.as_str()))
            .cloned()
            .collect();
        Registry::new(modules).expect("subset of a valid registry")
    }
}

pub fn load_registry(path: &Path) -> Result<Registry, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Registry::from_json_str(&text)
}

/// Region × feature matrix with optional indicator labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionTable {
    region_ids: Vec<String>,
    feature_names: Vec<String>,
    values: DMatrix<f64>,
    labels: Option<Vec<f64>>,
    indicator_name: String,
}

impl RegionTable {
    pub fn new(
        region_ids: Vec<String>,
        feature_names: Vec<String>,
        values: DMatrix<f64>,
        labels: Option<Vec<f64>>,
        indicator_name: impl Into<String>,
    ) -> Result<Self, DataError> {
        if values.nrows() != region_ids.len() || values.ncols() != feature_names.len() {
            return Err(DataError::Shape(format!(
                "matrix is {}x{} but there are {} regions and {} features",
                values.nrows(),
                values.ncols(),
                region_ids.len(),
                feature_names.len()
            )));
        }
        if let Some(y) = &labels {
            if y.len() != region_ids.len() {
                return Err(DataError::Shape(format!(
                    "{} labels for {} regions",
                    y.len(),
                    region_ids.len()
                )));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(DataError::Shape("labels must be finite".into()));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Shape("feature values must be finite".into()));
        }
        let mut seen = BTreeSet::new();
        for name in &feature_names {
            if !seen.insert(name.as_str()) {
                return Err(DataError::DuplicateColumn(name.clone()));
            }
        }
        Ok(RegionTable {
            region_ids,
            feature_names,
            values,
            labels,
            indicator_name: indicator_name.into(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.values.ncols()
    }

    pub fn region_ids(&self) -> &[String] {
        &self.region_ids
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn labels(&self) -> Option<&[f64]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[f64], DataError> {
        self.labels.as_deref().ok_or(DataError::MissingLabels)
    }

    pub fn indicator_name(&self) -> &str {
        &self.indicator_name
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.column(j).iter().copied().collect()
    }

    pub fn column_by_name(&self, name: &str) -> Option<Vec<f64>> {
        self.feature_index(name).map(|j| self.column(j))
    }

    /// Reads a CSV file; see [`RegionTable::from_csv_reader`].
    pub fn load_csv(path: &Path, registry: &Registry, indicator: Option<&str>) -> Result<Self, DataError> {
        let file = std::fs::File::open(path).map_err(|source| DataError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_csv_reader(file, registry, indicator)
    }

    /// Parses a region table. The first header column must be `region_id`;
    /// the optional indicator column becomes the labels; every other column
    /// must name a registry module. Columns are reordered to registry order.
    pub fn from_csv_reader<R: std::io::Read>(
        reader: R,
        registry: &Registry,
        indicator: Option<&str>,
    ) -> Result<Self, DataError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers: Vec<String> = rdr
            .headers()
            .map_err(|e| DataError::Csv(e.to_string()))?
            .iter()
            .map(str::to_owned)
            .collect();
        if headers.first().map(String::as_str) != Some("region_id") {
            return Err(DataError::MissingRegionId);
        }
        let mut label_col = None;
        let mut feature_cols: Vec<(usize, usize)> = Vec::new();
        let mut unknown = Vec::new();
        let mut seen = BTreeSet::new();
        for (c, name) in headers.iter().enumerate().skip(1) {
            if !seen.insert(name.as_str()) {
                return Err(DataError::DuplicateColumn(name.clone()));
            }
            if Some(name.as_str()) == indicator {
                label_col = Some(c);
            } else if let Some(pos) = registry.position(name) {
                feature_cols.push((pos, c));
            } else {
                unknown.push(name.clone());
            }
        }
        if !unknown.is_empty() {
            return Err(DataError::UnknownColumns(unknown));
        }
        if let (Some(ind), None) = (indicator, label_col) {
            return Err(DataError::MissingIndicator(ind.to_owned()));
        }
        feature_cols.sort_unstable();

        let mut region_ids = Vec::new();
        let mut flat = Vec::new();
        let mut labels = Vec::new();
        for (r, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| DataError::Csv(e.to_string()))?;
            if record.len() != headers.len() {
                return Err(DataError::Csv(format!(
                    "row {} has {} fields, header has {}",
                    r + 1,
                    record.len(),
                    headers.len()
                )));
            }
            region_ids.push(record[0].to_owned());
            let cell = |c: usize| -> Result<f64, DataError> {
                let raw = &record[c];
                match raw.parse::<f64>() {
                    Ok(v) if v.is_finite() => Ok(v),
                    _ => Err(DataError::NonNumeric {
                        row: r + 1,
                        column: headers[c].clone(),
                        value: raw.to_owned(),
                    }),
                }
            };
            for &(_, c) in &feature_cols {
                flat.push(cell(c)?);
            }
            if let Some(c) = label_col {
                labels.push(cell(c)?);
            }
        }
        if region_ids.is_empty() {
            return Err(DataError::EmptyTable);
        }
        let names = feature_cols
            .iter()
            .map(|&(_, c)| headers[c].clone())
            .collect::<Vec<_>>();
        let values = DMatrix::from_row_slice(region_ids.len(), names.len(), &flat);
        Self::new(
            region_ids,
            names,
            values,
            label_col.map(|_| labels),
            indicator.unwrap_or("indicator"),
        )
    }

    /// Serializes to CSV. Floats use the shortest round-trip representation,
    /// so `to_csv_string` followed by `from_csv_reader` is lossless.
    pub fn to_csv_string(&self) -> String {
        let mut wtr = csv::WriterBuilder::new().from_writer(Vec::new());
        let mut header = vec!["region_id".to_owned()];
        if self.labels.is_some() {
            header.push(self.indicator_name.clone());
        }
        header.extend(self.feature_names.iter().cloned());
        wtr.write_record(&header).expect("in-memory write");
        for r in 0..self.n_rows() {
            let mut row = vec![self.region_ids[r].clone()];
            if let Some(y) = &self.labels {
                row.push(format!("{}", y[r]));
            }
            row.extend(self.values.row(r).iter().map(|v| format!("{v}")));
            wtr.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(wtr.into_inner().expect("flush")).expect("utf8")
    }

    /// Copies the table keeping only the listed features, in the given order.
    pub fn select_features(&self, names: &[String]) -> Result<RegionTable, DataError> {
        let mut idx = Vec::with_capacity(names.len());
        let mut missing = Vec::new();
        for n in names {
            match self.feature_index(n) {
                Some(j) => idx.push(j),
                None => missing.push(n.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(DataError::UnknownColumns(missing));
        }
        let values = self.values.select_columns(idx.iter());
        RegionTable::new(
            self.region_ids.clone(),
            names.to_vec(),
            values,
            self.labels.clone(),
            self.indicator_name.clone(),
        )
    }
}

pub fn load_table(path: &Path, registry: &Registry, indicator: Option<&str>) -> Result<RegionTable, DataError> {
    RegionTable::load_csv(path, registry, indicator)
}

/// Per-column z-scoring parameters (population standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub feature_mean: Vec<f64>,
    pub feature_scale: Vec<f64>,
    /// Columns whose spread fell below [`SCALE_EPSILON`]; their scale is 1.
    pub degenerate: Vec<bool>,
    pub label_mean: f64,
    pub label_scale: f64,
    pub label_degenerate: bool,
}

fn mean_and_scale(values: impl Iterator<Item = f64> + Clone) -> (f64, f64, bool) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd.is_finite() && sd >= SCALE_EPSILON {
        (mean, sd, false)
    } else {
        (mean, 1.0, true)
    }
}

impl Standardizer {
    /// Fits on every row of `columns` (rows = samples).
    pub fn fit(columns: &DMatrix<f64>, labels: Option<&[f64]>) -> Result<Self, DataError> {
        if columns.nrows() == 0 {
            return Err(DataError::EmptyRows);
        }
        let mut feature_mean = Vec::with_capacity(columns.ncols());
        let mut feature_scale = Vec::with_capacity(columns.ncols());
        let mut degenerate = Vec::with_capacity(columns.ncols());
        for col in columns.column_iter() {
            let (m, s, d) = mean_and_scale(col.iter().copied());
            feature_mean.push(m);
            feature_scale.push(s);
            degenerate.push(d);
        }
        let (label_mean, label_scale, label_degenerate) = match labels {
            Some(y) => {
                if y.len() != columns.nrows() {
                    return Err(DataError::Shape(format!(
                        "{} labels for {} rows",
                        y.len(),
                        columns.nrows()
                    )));
                }
                mean_and_scale(y.iter().copied())
            }
            None => (0.0, 1.0, false),
        };
        Ok(Standardizer {
            feature_mean,
            feature_scale,
            degenerate,
            label_mean,
            label_scale,
            label_degenerate,
        })
    }

    pub fn n_features(&self) -> usize {
        self.feature_mean.len()
    }

    pub fn transform(&self, columns: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = columns.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.feature_mean[j], self.feature_scale[j]);
            col.apply(|v| *v = (*v - m) / s);
        }
        out
    }

    pub fn inverse_transform(&self, standardized: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = standardized.clone();
        for (j, mut col) in out.column_iter_mut().enumerate() {
            let (m, s) = (self.feature_mean[j], self.feature_scale[j]);
            col.apply(|v| *v = *v * s + m);
        }
        out
    }

    pub fn transform_labels(&self, y: &[f64]) -> Vec<f64> {
        y.iter().map(|v| (v - self.label_mean) / self.label_scale).collect()
    }

    pub fn inverse_labels(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|v| v * self.label_scale + self.label_mean).collect()
    }
}

/// Fits a standardizer on a subset of table rows (typically the few-shot rows).
pub fn fit_standardizer(table: &RegionTable, rows: &[usize]) -> Result<Standardizer, DataError> {
    if rows.is_empty() {
        return Err(DataError::EmptyRows);
    }
    if let Some(&bad) = rows.iter().find(|&&r| r >= table.n_rows()) {
        return Err(DataError::RowOutOfBounds(bad));
    }
    let sub = table.values().select_rows(rows.iter());
    let labels: Option<Vec<f64>> = table.labels().map(|y| rows.iter().map(|&r| y[r]).collect());
    Standardizer::fit(&sub, labels.as_deref())
}

impl fmt::Display for FeatureGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            FeatureGroup::Area => "area",
            FeatureGroup::Nightlight => "nightlight",
            FeatureGroup::Distance => "distance",
            FeatureGroup::LandcoverRatio => "landcover_ratio",
            FeatureGroup::NeighborAggregate => "neighbor_aggregate",
            FeatureGroup::Custom => "custom",
        };
        f.write_str(s)
    }
}
