//! Quote ingestion: column mapping, row validation, deterministic splits,
//! train-only feature encoding, and the binary portfolio cache.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CACHE_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SensitiveKind {
    Binary,
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensitiveColumn {
    pub name: String,
    pub kind: SensitiveKind,
}

/// Which CSV columns play which role.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnMapping {
    pub feature_columns: Vec<String>,
    /// Subset of `feature_columns` that is one-hot encoded; the rest are numeric.
    #[serde(default)]
    pub categorical_columns: Vec<String>,
    pub sale_column: String,
    pub price_column: String,
    #[serde(default)]
    pub premium_column: Option<String>,
    #[serde(default)]
    pub sensitive_columns: Vec<SensitiveColumn>,
    #[serde(default)]
    pub id_column: Option<String>,
}

impl ColumnMapping {
    /// Checks the mapping against itself and, if given, a CSV header.
    pub fn validate(&self, header: Option<&[String]>) -> Result<()> {
        if self.feature_columns.is_empty() {
            return Err(Error::Config("feature_columns is empty".into()));
        }
        let features: BTreeSet<&str> = self.feature_columns.iter().map(String::as_str).collect();
        if features.len() != self.feature_columns.len() {
            return Err(Error::Config("feature_columns contains duplicates".into()));
        }
        for c in &self.categorical_columns {
            if !features.contains(c.as_str()) {
                return Err(Error::Config(format!(
                    "categorical column `{c}` is not listed in feature_columns"
                )));
            }
        }
        for s in &self.sensitive_columns {
            if features.contains(s.name.as_str()) {
                return Err(Error::Config(format!(
                    "sensitive column `{}` must not be a model feature",
                    s.name
                )));
            }
        }
        if let Some(id) = &self.id_column {
            if features.contains(id.as_str()) {
                return Err(Error::Config(format!("id column `{id}` must not be a feature")));
            }
        }
        if let Some(header) = header {
            for name in self.required_columns() {
                if !header.iter().any(|h| h == name) {
                    return Err(Error::MissingColumn(name.to_string()));
                }
            }
        }
        Ok(())
    }

    fn required_columns(&self) -> Vec<&str> {
        let mut cols: Vec<&str> = self.feature_columns.iter().map(String::as_str).collect();
        cols.push(&self.sale_column);
        cols.push(&self.price_column);
        cols.extend(self.premium_column.as_deref());
        cols.extend(self.sensitive_columns.iter().map(|s| s.name.as_str()));
        cols.extend(self.id_column.as_deref());
        cols
    }

    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_vec(self).expect("mapping serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// One encoded quote.
#[derive(Clone, Debug, PartialEq)]
pub struct PortfolioRecord {
    pub x: Vec<f64>,
    pub s: Vec<f64>,
    pub sale: bool,
    pub price_hist: f64,
    /// Technical premium from the data, when the mapping names a premium column.
    pub premium: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitId {
    Train,
    Dev,
    Test,
}

impl SplitId {
    pub const ALL: [SplitId; 3] = [SplitId::Train, SplitId::Dev, SplitId::Test];

    pub fn code(self) -> u8 {
        match self {
            SplitId::Train => 0,
            SplitId::Dev => 1,
            SplitId::Test => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SplitId::Train => "train",
            SplitId::Dev => "dev",
            SplitId::Test => "test",
        }
    }
}

impl fmt::Display for SplitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SplitId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitId::Train),
            "dev" => Ok(SplitId::Dev),
            "test" => Ok(SplitId::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub assignment: Vec<SplitId>,
}

impl SplitAssignment {
    pub fn indices(&self, split: SplitId) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sizes(&self) -> [usize; 3] {
        let mut sizes = [0; 3];
        for s in &self.assignment {
            sizes[s.code() as usize] += 1;
        }
        sizes
    }
}

/// Split sizes by largest remainder, ties going to the earlier split.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    if ratios.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
        return Err(Error::Config(format!("split ratios must be positive, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {total} from {ratios:?}"
        )));
    }
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (i, e) in exact.iter().enumerate() {
        sizes[i] = e.floor() as usize;
    }
    let mut left = n - sizes.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&i, &j| {
        let fi = exact[i] - exact[i].floor();
        let fj = exact[j] - exact[j].floor();
        fj.partial_cmp(&fi).unwrap().then(i.cmp(&j))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    Ok(sizes)
}

/// Deterministic shuffled partition of `n` records.
pub fn split(n: usize, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    let sizes = split_sizes(n, ratios)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut assignment = vec![SplitId::Train; n];
    for (pos, &idx) in order.iter().enumerate() {
        assignment[idx] = if pos < sizes[0] {
            SplitId::Train
        } else if pos < sizes[0] + sizes[1] {
            SplitId::Dev
        } else {
            SplitId::Test
        };
    }
    Ok(SplitAssignment {
        seed,
        ratios,
        assignment,
    })
}

pub fn log_price(price: f64) -> Result<f64> {
    if price > 0.0 && price.is_finite() {
        Ok(price.ln())
    } else {
        Err(Error::Domain(format!("log_price requires a positive price, got {price}")))
    }
}

/// Why a CSV row was dropped.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum RejectReason {
    NonPositivePrice,
    NonPositivePremium,
    InvalidSale,
    InvalidSensitive(String),
    Unparseable(String),
    Missing(String),
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RejectReason::NonPositivePrice => f.write_str("non-positive price"),
            RejectReason::NonPositivePremium => f.write_str("non-positive premium"),
            RejectReason::InvalidSale => f.write_str("sale label not in {0,1}"),
            RejectReason::InvalidSensitive(c) => write!(f, "invalid sensitive value in `{c}`"),
            RejectReason::Unparseable(c) => write!(f, "unparseable value in `{c}`"),
            RejectReason::Missing(c) => write!(f, "missing value in `{c}`"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PreprocessReport {
    pub rows_read: usize,
    pub accepted: usize,
    /// Reason → count.
    pub rejected: BTreeMap<String, usize>,
    /// First few rejected data rows (1-based, header excluded) with reasons.
    pub examples: Vec<(usize, String)>,
}

impl PreprocessReport {
    pub fn rejected_total(&self) -> usize {
        self.rejected.values().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FeatureEncoder {
    Numeric { name: String, mean: f64, std: f64 },
    Categorical { name: String, levels: Vec<String> },
}

/// Encoding statistics frozen from the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub features: Vec<FeatureEncoder>,
}

pub const UNSEEN_LEVEL: &str = "<unseen>";

impl Encoder {
    pub fn feature_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for f in &self.features {
            match f {
                FeatureEncoder::Numeric { name, .. } => names.push(name.clone()),
                FeatureEncoder::Categorical { name, levels } => {
                    names.extend(levels.iter().map(|l| format!("{name}={l}")));
                    names.push(format!("{name}={UNSEEN_LEVEL}"));
                }
            }
        }
        names
    }

    pub fn dim(&self) -> usize {
        self.features
            .iter()
            .map(|f| match f {
                FeatureEncoder::Numeric { .. } => 1,
                FeatureEncoder::Categorical { levels, .. } => levels.len() + 1,
            })
            .sum()
    }

    fn fit(mapping: &ColumnMapping, rows: &[RawRow], train: &[usize]) -> Self {
        let categorical: BTreeSet<&str> =
            mapping.categorical_columns.iter().map(String::as_str).collect();
        let features = mapping
            .feature_columns
            .iter()
            .enumerate()
            .map(|(j, name)| {
                if categorical.contains(name.as_str()) {
                    let levels: BTreeSet<String> = train
                        .iter()
                        .map(|&i| match &rows[i].features[j] {
                            RawValue::Text(t) => t.clone(),
                            RawValue::Number(_) => unreachable!(),
                        })
                        .collect();
                    FeatureEncoder::Categorical {
                        name: name.clone(),
                        levels: levels.into_iter().collect(),
                    }
                } else {
                    let vals: Vec<f64> = train
                        .iter()
                        .map(|&i| match rows[i].features[j] {
                            RawValue::Number(v) => v,
                            RawValue::Text(_) => unreachable!(),
                        })
                        .collect();
                    let n = vals.len().max(1) as f64;
                    let mean = vals.iter().sum::<f64>() / n;
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
                    FeatureEncoder::Numeric {
                        name: name.clone(),
                        mean,
                        std,
                    }
                }
            })
            .collect();
        Encoder { features }
    }

    fn encode(&self, raw: &[RawValue]) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.dim());
        for (f, v) in self.features.iter().zip(raw) {
            match (f, v) {
                (FeatureEncoder::Numeric { mean, std, .. }, RawValue::Number(v)) => {
                    x.push((v - mean) / std)
                }
                (FeatureEncoder::Categorical { levels, .. }, RawValue::Text(t)) => {
                    let hit = levels.binary_search(t).ok();
                    for k in 0..levels.len() {
                        x.push(if Some(k) == hit { 1.0 } else { 0.0 });
                    }
                    x.push(if hit.is_none() { 1.0 } else { 0.0 });
                }
                _ => unreachable!("raw value kind fixed at parse time"),
            }
        }
        x
    }
}

#[derive(Clone, Debug)]
enum RawValue {
    Number(f64),
    Text(String),
}

#[derive(Clone, Debug)]
struct RawRow {
    features: Vec<RawValue>,
    s: Vec<f64>,
    sale: bool,
    price: f64,
    premium: Option<f64>,
}

/// Encoded portfolio plus everything needed to reproduce the encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct Portfolio {
    pub records: Vec<PortfolioRecord>,
    pub split: SplitAssignment,
    pub encoder: Encoder,
    pub feature_names: Vec<String>,
    pub sensitive: Vec<SensitiveColumn>,
    pub report: PreprocessReport,
    /// SHA-256 of the source bytes.
    pub fingerprint: String,
}

impl Portfolio {
    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn indices(&self, split: SplitId) -> Vec<usize> {
        self.split.indices(split)
    }

    pub fn subset(&self, split: SplitId) -> Vec<PortfolioRecord> {
        self.indices(split)
            .into_iter()
            .map(|i| self.records[i].clone())
            .collect()
    }

    pub fn sensitive_index(&self, name: &str) -> Result<usize> {
        self.sensitive
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("unknown sensitive column `{name}`")))
    }

    /// Row-major encoded feature matrix.
    pub fn feature_matrix(&self) -> Vec<f64> {
        self.records.iter().flat_map(|r| r.x.iter().copied()).collect()
    }
}

fn parse_number(field: &str) -> Option<f64> {
    field.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn parse_row(
    mapping: &ColumnMapping,
    cols: &ColumnIndex,
    record: &csv::StringRecord,
) -> std::result::Result<RawRow, RejectReason> {
    let get = |idx: usize, name: &str| -> std::result::Result<&str, RejectReason> {
        match record.get(idx).map(str::trim) {
            Some(v) if !v.is_empty() => Ok(v),
            _ => Err(RejectReason::Missing(name.to_string())),
        }
    };

    let price_raw = get(cols.price, &mapping.price_column)?;
    let price = parse_number(price_raw)
        .ok_or_else(|| RejectReason::Unparseable(mapping.price_column.clone()))?;
    if price <= 0.0 {
        return Err(RejectReason::NonPositivePrice);
    }

    let premium = match (cols.premium, &mapping.premium_column) {
        (Some(idx), Some(name)) => {
            let v = parse_number(get(idx, name)?)
                .ok_or_else(|| RejectReason::Unparseable(name.clone()))?;
            if v <= 0.0 {
                return Err(RejectReason::NonPositivePremium);
            }
            Some(v)
        }
        _ => None,
    };

    let sale = match parse_number(get(cols.sale, &mapping.sale_column)?) {
        Some(0.0) => false,
        Some(1.0) => true,
        _ => return Err(RejectReason::InvalidSale),
    };

    let mut s = Vec::with_capacity(cols.sensitive.len());
    for (idx, col) in cols.sensitive.iter().zip(&mapping.sensitive_columns) {
        let v = parse_number(get(*idx, &col.name)?)
            .ok_or_else(|| RejectReason::Unparseable(col.name.clone()))?;
        if col.kind == SensitiveKind::Binary && v != 0.0 && v != 1.0 {
            return Err(RejectReason::InvalidSensitive(col.name.clone()));
        }
        s.push(v);
    }

    let mut features = Vec::with_capacity(cols.features.len());
    for ((idx, categorical), name) in cols.features.iter().zip(&mapping.feature_columns) {
        let raw = get(*idx, name)?;
        if *categorical {
            features.push(RawValue::Text(raw.to_string()));
        } else {
            let v = parse_number(raw).ok_or_else(|| RejectReason::Unparseable(name.clone()))?;
            features.push(RawValue::Number(v));
        }
    }

    Ok(RawRow {
        features,
        s,
        sale,
        price,
        premium,
    })
}

struct ColumnIndex {
    features: Vec<(usize, bool)>,
    sale: usize,
    price: usize,
    premium: Option<usize>,
    sensitive: Vec<usize>,
}

impl ColumnIndex {
    fn new(mapping: &ColumnMapping, header: &[String]) -> Self {
        let pos = |name: &str| header.iter().position(|h| h == name).expect("validated");
        let categorical: BTreeSet<&str> =
            mapping.categorical_columns.iter().map(String::as_str).collect();
        ColumnIndex {
            features: mapping
                .feature_columns
                .iter()
                .map(|f| (pos(f), categorical.contains(f.as_str())))
                .collect(),
            sale: pos(&mapping.sale_column),
            price: pos(&mapping.price_column),
            premium: mapping.premium_column.as_deref().map(pos),
            sensitive: mapping.sensitive_columns.iter().map(|s| pos(&s.name)).collect(),
        }
    }
}

const MAX_REPORT_EXAMPLES: usize = 20;

/// Loads, validates, splits and encodes a quote CSV held in memory.
pub fn load_portfolio_from_bytes(
    bytes: &[u8],
    mapping: &ColumnMapping,
    ratios: [f64; 3],
    seed: u64,
) -> Result<Portfolio> {
    mapping.validate(None)?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(bytes);
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    mapping.validate(Some(&header))?;
    let cols = ColumnIndex::new(mapping, &header);

    let mut report = PreprocessReport::default();
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        report.rows_read += 1;
        match parse_row(mapping, &cols, &rec) {
            Ok(row) => rows.push(row),
            Err(reason) => {
                let text = reason.to_string();
                if report.examples.len() < MAX_REPORT_EXAMPLES {
                    report.examples.push((line + 1, text.clone()));
                }
                *report.rejected.entry(text).or_insert(0) += 1;
            }
        }
    }
    report.accepted = rows.len();

    let split = split(rows.len(), ratios, seed)?;
    let train = split.indices(SplitId::Train);
    let encoder = Encoder::fit(mapping, &rows, &train);
    let feature_names = encoder.feature_names();

    let records = rows
        .iter()
        .map(|r| PortfolioRecord {
            x: encoder.encode(&r.features),
            s: r.s.clone(),
            sale: r.sale,
            price_hist: r.price,
            premium: r.premium,
        })
        .collect();

    let sensitive_names: BTreeSet<&str> =
        mapping.sensitive_columns.iter().map(|s| s.name.as_str()).collect();
    debug_assert!(feature_names
        .iter()
        .all(|f| !sensitive_names.contains(f.split('=').next().unwrap_or(f))));

    Ok(Portfolio {
        records,
        split,
        encoder,
        feature_names,
        sensitive: mapping.sensitive_columns.clone(),
        report,
        fingerprint: hex::encode(Sha256::digest(bytes)),
    })
}

pub fn load_portfolio(
    csv_path: &Path,
    mapping: &ColumnMapping,
    ratios: [f64; 3],
    seed: u64,
) -> Result<Portfolio> {
    let bytes = std::fs::read(csv_path).map_err(|e| {
        Error::Config(format!("cannot read dataset {}: {e}", csv_path.display()))
    })?;
    load_portfolio_from_bytes(&bytes, mapping, ratios, seed)
}

/// Metadata stored next to the binary cache.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheMeta {
    pub version: u8,
    pub feature_names: Vec<String>,
    pub sensitive: Vec<SensitiveColumn>,
    pub encoder: Encoder,
    pub report: PreprocessReport,
    pub split_seed: u64,
    pub split_ratios: [f64; 3],
    pub fingerprint: String,
}

/// Writes the binary cache.
///
/// Layout (little endian): `u8` version, `u64` d, `u64` n, `u64` k, then `n`
/// rows of `d + 4 + k` `f64` values: `x[0..d]`, sale (0/1), historical price,
/// premium (NaN when absent), split code (0 train, 1 dev, 2 test), `s[0..k]`.
pub fn write_cache<W: Write>(portfolio: &Portfolio, mut out: W) -> Result<()> {
    let d = portfolio.dim();
    let k = portfolio.sensitive.len();
    out.write_all(&[CACHE_VERSION])?;
    for v in [d as u64, portfolio.len() as u64, k as u64] {
        out.write_all(&v.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity((d + 4 + k) * 8);
    for (rec, split) in portfolio.records.iter().zip(&portfolio.split.assignment) {
        buf.clear();
        let row = rec
            .x
            .iter()
            .copied()
            .chain([
                if rec.sale { 1.0 } else { 0.0 },
                rec.price_hist,
                rec.premium.unwrap_or(f64::NAN),
                split.code() as f64,
            ])
            .chain(rec.s.iter().copied());
        for v in row {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub fn cache_meta(portfolio: &Portfolio) -> CacheMeta {
    CacheMeta {
        version: CACHE_VERSION,
        feature_names: portfolio.feature_names.clone(),
        sensitive: portfolio.sensitive.clone(),
        encoder: portfolio.encoder.clone(),
        report: portfolio.report.clone(),
        split_seed: portfolio.split.seed,
        split_ratios: portfolio.split.ratios,
        fingerprint: portfolio.fingerprint.clone(),
    }
}

pub fn read_cache<R: Read>(mut input: R, meta: CacheMeta) -> Result<Portfolio> {
    let mut version = [0u8; 1];
    input.read_exact(&mut version)?;
    if version[0] != CACHE_VERSION {
        return Err(Error::Cache(format!("unsupported version {}", version[0])));
    }
    let mut word = [0u8; 8];
    let mut next_u64 = |input: &mut R| -> Result<u64> {
        input.read_exact(&mut word)?;
        Ok(u64::from_le_bytes(word))
    };
    let d = next_u64(&mut input)? as usize;
    let n = next_u64(&mut input)? as usize;
    let k = next_u64(&mut input)? as usize;
    if d != meta.feature_names.len() || k != meta.sensitive.len() {
        return Err(Error::Cache("header disagrees with metadata".into()));
    }
    let width = d + 4 + k;
    let mut row = vec![0u8; width * 8];
    let mut records = Vec::with_capacity(n);
    let mut assignment = Vec::with_capacity(n);
    for _ in 0..n {
        input.read_exact(&mut row)?;
        let vals: Vec<f64> = row
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let split = SplitId::from_code(vals[d + 3] as u8)
            .ok_or_else(|| Error::Cache(format!("bad split code {}", vals[d + 3])))?;
        assignment.push(split);
        records.push(PortfolioRecord {
            x: vals[..d].to_vec(),
            sale: vals[d] == 1.0,
            price_hist: vals[d + 1],
            premium: Some(vals[d + 2]).filter(|p| !p.is_nan()),
            s: vals[d + 4..].to_vec(),
        });
    }
    Ok(Portfolio {
        records,
        split: SplitAssignment {
            seed: meta.split_seed,
            ratios: meta.split_ratios,
            assignment,
        },
        encoder: meta.encoder,
        feature_names: meta.feature_names,
        sensitive: meta.sensitive,
        report: meta.report,
        fingerprint: meta.fingerprint,
    })
}
