//! Data ingest and export: clustered prediction data from delimited text,
//! curve serialization to CSV/JSON, and static SVG calibration plots.

mod svg;

pub use svg::{render_svg, PlotError, PlotSpec};

use std::collections::{BTreeMap, HashMap};
use std::io::Read;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numeric::{format_sig, logit, round_sig};

/// Risks at or outside (0,1) are pulled to this margin before the logit
/// transform that every method applies.
pub const RISK_CLAMP: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("missing column '{0}' in header")]
    MissingColumn(String),
    #[error("input has a header but no data rows")]
    EmptyInput,
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("curve violates band ordering at grid index {0}")]
    BandOrdering(usize),
    #[error("curve band value outside [0,1] at grid index {0}")]
    BandRange(usize),
    #[error("malformed curve table: {0}")]
    MalformedCurve(String),
}

/// One observation: cluster, binary outcome, predicted risk in (0,1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub cluster: usize,
    pub y: u8,
    pub p_hat: f64,
}

/// Clustered validation data with an index from cluster to row positions.
/// Immutable after construction.
#[derive(Debug, Clone)]
pub struct ClusteredDataset {
    labels: Vec<String>,
    records: Vec<Record>,
    index: Vec<Vec<usize>>,
}

impl ClusteredDataset {
    /// Build from (cluster label, outcome, risk) rows. Risks outside (0,1)
    /// are clamped to the margin; the count of clamped rows is returned.
    pub fn from_rows<I, S>(rows: I) -> Result<(Self, usize), DataError>
    where
        I: IntoIterator<Item = (S, u8, f64)>,
        S: Into<String>,
    {
        let mut labels: Vec<String> = Vec::new();
        let mut by_label: HashMap<String, usize> = HashMap::new();
        let mut records = Vec::new();
        let mut index: Vec<Vec<usize>> = Vec::new();
        let mut clamped = 0usize;
        for (label, y, p) in rows {
            let label = label.into();
            let cluster = *by_label.entry(label.clone()).or_insert_with(|| {
                labels.push(label);
                index.push(Vec::new());
                labels.len() - 1
            });
            let (p_hat, was_clamped) = clamp_risk(p);
            if was_clamped {
                clamped += 1;
            }
            index[cluster].push(records.len());
            records.push(Record { cluster, y, p_hat });
        }
        if records.is_empty() {
            return Err(DataError::EmptyInput);
        }
        Ok((Self { labels, records, index }, clamped))
    }

    pub fn n(&self) -> usize {
        self.records.len()
    }

    pub fn n_clusters(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// Row positions belonging to cluster `j`.
    pub fn cluster_rows(&self, j: usize) -> &[usize] {
        &self.index[j]
    }

    pub fn cluster_size(&self, j: usize) -> usize {
        self.index[j].len()
    }

    /// Outcomes as floats, in row order.
    pub fn outcomes(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.y as f64).collect()
    }

    /// logit(p_hat) in row order.
    pub fn logit_risks(&self) -> Vec<f64> {
        self.records.iter().map(|r| logit(r.p_hat)).collect()
    }

    /// Cluster index per row.
    pub fn cluster_of_rows(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.cluster).collect()
    }
}

fn clamp_risk(p: f64) -> (f64, bool) {
    if !(p > 0.0) {
        (RISK_CLAMP, true)
    } else if p >= 1.0 {
        (1.0 - RISK_CLAMP, true)
    } else {
        (p, false)
    }
}

/// Which input columns hold the cluster id, outcome and predicted risk.
#[derive(Debug, Clone)]
pub struct ColumnMap {
    pub cluster: String,
    pub outcome: String,
    pub risk: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            cluster: "cluster".into(),
            outcome: "y".into(),
            risk: "p_hat".into(),
        }
    }
}

/// Parse a comma-delimited stream with a header row into a dataset.
/// Returns the dataset and the number of clamped risks.
pub fn load_dataset<R: Read>(
    reader: R,
    columns: &ColumnMap,
) -> Result<(ClusteredDataset, usize), DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let pos = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let c_cluster = pos(&columns.cluster)?;
    let c_outcome = pos(&columns.outcome)?;
    let c_risk = pos(&columns.risk)?;

    let mut rows: Vec<(String, u8, f64)> = Vec::new();
    for (i, result) in rdr.records().enumerate() {
        let row = i + 2; // 1-based, counting the header as row 1
        let rec = result?;
        let cluster = rec
            .get(c_cluster)
            .ok_or_else(|| DataError::Parse { row, message: "short row".into() })?
            .to_string();
        let y_raw = rec
            .get(c_outcome)
            .ok_or_else(|| DataError::Parse { row, message: "short row".into() })?;
        let y_val: f64 = y_raw.trim().parse().map_err(|_| DataError::Parse {
            row,
            message: format!("outcome '{y_raw}' is not a number"),
        })?;
        let y = if y_val == 0.0 {
            0u8
        } else if y_val == 1.0 {
            1u8
        } else {
            return Err(DataError::Parse {
                row,
                message: format!("outcome must be 0 or 1, got {y_raw}"),
            });
        };
        let p_raw = rec
            .get(c_risk)
            .ok_or_else(|| DataError::Parse { row, message: "short row".into() })?;
        let p: f64 = p_raw.trim().parse().map_err(|_| DataError::Parse {
            row,
            message: format!("risk '{p_raw}' is not a number"),
        })?;
        if p.is_nan() {
            return Err(DataError::Parse { row, message: "risk is NaN".into() });
        }
        rows.push((cluster, y, p));
    }
    ClusteredDataset::from_rows(rows)
}

/// Warnings produced by [`merge_small_clusters`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MergeWarning {
    /// A small cluster had no merge group and was kept as-is.
    NoGroup { cluster: String, size: usize },
    /// A merge group is still below the minimum size after merging.
    StillSmall { group: String, size: usize },
}

/// Merge clusters smaller than `min_size` into their assigned merge group.
/// Clusters at or above the minimum are untouched; small clusters without a
/// group are retained with a warning. Record order, outcomes and risks are
/// preserved exactly.
pub fn merge_small_clusters(
    ds: &ClusteredDataset,
    min_size: usize,
    merge_key: &HashMap<String, String>,
) -> Result<(ClusteredDataset, Vec<MergeWarning>), DataError> {
    assert!(min_size >= 1);
    let mut warnings = Vec::new();
    let mut new_label: Vec<String> = Vec::with_capacity(ds.n_clusters());
    for j in 0..ds.n_clusters() {
        let label = &ds.labels()[j];
        let size = ds.cluster_size(j);
        if size >= min_size {
            new_label.push(label.clone());
        } else if let Some(group) = merge_key.get(label) {
            new_label.push(group.clone());
        } else {
            warnings.push(MergeWarning::NoGroup { cluster: label.clone(), size });
            new_label.push(label.clone());
        }
    }
    let rows = ds
        .records()
        .iter()
        .map(|r| (new_label[r.cluster].clone(), r.y, r.p_hat));
    let (merged, _) = ClusteredDataset::from_rows(rows)?;
    for j in 0..merged.n_clusters() {
        let label = &merged.labels()[j];
        let size = merged.cluster_size(j);
        if size < min_size && merge_key.values().any(|g| g == label) {
            warnings.push(MergeWarning::StillSmall { group: label.clone(), size });
        }
    }
    Ok((merged, warnings))
}

/// Method metadata carried alongside an exported curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CurveMetadata {
    pub method: String,
    pub parameters: BTreeMap<String, String>,
    pub seed: Option<u64>,
}

/// A calibration curve ready for serialization: a grid of predicted risks
/// with the pooled estimate, confidence band, prediction band, and optional
/// per-cluster curves. Missing values mark grid points a method could not
/// estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveExport {
    pub grid: Vec<f64>,
    pub estimate: Vec<Option<f64>>,
    pub ci_lo: Vec<Option<f64>>,
    pub ci_hi: Vec<Option<f64>>,
    pub pi_lo: Vec<Option<f64>>,
    pub pi_hi: Vec<Option<f64>>,
    pub cluster_curves: Option<BTreeMap<String, Vec<Option<f64>>>>,
    pub metadata: CurveMetadata,
}

impl CurveExport {
    /// Check band range and ordering invariants
    /// (pi_lo <= ci_lo <= estimate <= ci_hi <= pi_hi where present).
    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.grid.len();
        for v in [&self.estimate, &self.ci_lo, &self.ci_hi, &self.pi_lo, &self.pi_hi] {
            if v.len() != n {
                return Err(DataError::MalformedCurve("band length mismatch".into()));
            }
        }
        for i in 0..n {
            for band in [&self.estimate, &self.ci_lo, &self.ci_hi, &self.pi_lo, &self.pi_hi] {
                if let Some(v) = band[i] {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(DataError::BandRange(i));
                    }
                }
            }
            let est = self.estimate[i];
            if let (Some(lo), Some(e)) = (self.ci_lo[i], est) {
                if lo > e + 1e-12 {
                    return Err(DataError::BandOrdering(i));
                }
            }
            if let (Some(e), Some(hi)) = (est, self.ci_hi[i]) {
                if e > hi + 1e-12 {
                    return Err(DataError::BandOrdering(i));
                }
            }
            if let (Some(plo), Some(clo)) = (self.pi_lo[i], self.ci_lo[i]) {
                if plo > clo + 1e-12 {
                    return Err(DataError::BandOrdering(i));
                }
            }
            if let (Some(chi), Some(phi)) = (self.ci_hi[i], self.pi_hi[i]) {
                if chi > phi + 1e-12 {
                    return Err(DataError::BandOrdering(i));
                }
            }
        }
        Ok(())
    }

    /// Round every numeric value to 10 significant digits, the export
    /// precision. Applying exports after this is byte-stable.
    fn rounded(&self) -> CurveExport {
        let r = |v: &Vec<Option<f64>>| v.iter().map(|o| o.map(|x| round_sig(x, 10))).collect();
        CurveExport {
            grid: self.grid.iter().map(|&x| round_sig(x, 10)).collect(),
            estimate: r(&self.estimate),
            ci_lo: r(&self.ci_lo),
            ci_hi: r(&self.ci_hi),
            pi_lo: r(&self.pi_lo),
            pi_hi: r(&self.pi_hi),
            cluster_curves: self
                .cluster_curves
                .as_ref()
                .map(|m| m.iter().map(|(k, v)| (k.clone(), r(v))).collect()),
            metadata: self.metadata.clone(),
        }
    }

    /// CSV table: header `grid,estimate,ci_lo,ci_hi,pi_lo,pi_hi`, one row
    /// per grid point, missing values as empty cells, 10 significant digits.
    pub fn to_csv(&self) -> Result<String, DataError> {
        self.validate()?;
        let mut out = String::from("grid,estimate,ci_lo,ci_hi,pi_lo,pi_hi\n");
        let cell = |o: &Option<f64>| o.map(|x| format_sig(x, 10)).unwrap_or_default();
        for i in 0..self.grid.len() {
            out.push_str(&format_sig(self.grid[i], 10));
            for band in [&self.estimate, &self.ci_lo, &self.ci_hi, &self.pi_lo, &self.pi_hi] {
                out.push(',');
                out.push_str(&cell(&band[i]));
            }
            out.push('\n');
        }
        Ok(out)
    }

    /// Parse the CSV table produced by [`CurveExport::to_csv`].
    pub fn from_csv(text: &str) -> Result<CurveExport, DataError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or(DataError::EmptyInput)?;
        if header.trim() != "grid,estimate,ci_lo,ci_hi,pi_lo,pi_hi" {
            return Err(DataError::MalformedCurve(format!("unexpected header '{header}'")));
        }
        let mut curve = CurveExport {
            grid: Vec::new(),
            estimate: Vec::new(),
            ci_lo: Vec::new(),
            ci_hi: Vec::new(),
            pi_lo: Vec::new(),
            pi_hi: Vec::new(),
            cluster_curves: None,
            metadata: CurveMetadata::default(),
        };
        for (i, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 6 {
                return Err(DataError::MalformedCurve(format!(
                    "row {} has {} cells",
                    i + 2,
                    cells.len()
                )));
            }
            let parse = |s: &str| -> Result<Option<f64>, DataError> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<f64>().map(Some).map_err(|_| {
                        DataError::MalformedCurve(format!("bad number '{s}' in row {}", i + 2))
                    })
                }
            };
            curve.grid.push(
                parse(cells[0])?
                    .ok_or_else(|| DataError::MalformedCurve("empty grid cell".into()))?,
            );
            curve.estimate.push(parse(cells[1])?);
            curve.ci_lo.push(parse(cells[2])?);
            curve.ci_hi.push(parse(cells[3])?);
            curve.pi_lo.push(parse(cells[4])?);
            curve.pi_hi.push(parse(cells[5])?);
        }
        if curve.grid.is_empty() {
            return Err(DataError::EmptyInput);
        }
        Ok(curve)
    }

    /// JSON document: one object with `grid`, `bands`, `cluster_curves` and
    /// `metadata`, numbers at 10 significant digits.
    pub fn to_json(&self) -> Result<String, DataError> {
        self.validate()?;
        let r = self.rounded();
        let doc = serde_json::json!({
            "grid": r.grid,
            "bands": {
                "estimate": r.estimate,
                "ci_lo": r.ci_lo,
                "ci_hi": r.ci_hi,
                "pi_lo": r.pi_lo,
                "pi_hi": r.pi_hi,
            },
            "cluster_curves": r.cluster_curves,
            "metadata": r.metadata,
        });
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    /// Parse the JSON document produced by [`CurveExport::to_json`].
    pub fn from_json(text: &str) -> Result<CurveExport, DataError> {
        #[derive(Deserialize)]
        struct Bands {
            estimate: Vec<Option<f64>>,
            ci_lo: Vec<Option<f64>>,
            ci_hi: Vec<Option<f64>>,
            pi_lo: Vec<Option<f64>>,
            pi_hi: Vec<Option<f64>>,
        }
        #[derive(Deserialize)]
        struct Doc {
            grid: Vec<f64>,
            bands: Bands,
            cluster_curves: Option<BTreeMap<String, Vec<Option<f64>>>>,
            metadata: CurveMetadata,
        }
        let doc: Doc = serde_json::from_str(text)?;
        Ok(CurveExport {
            grid: doc.grid,
            estimate: doc.bands.estimate,
            ci_lo: doc.bands.ci_lo,
            ci_hi: doc.bands.ci_hi,
            pi_lo: doc.bands.pi_lo,
            pi_hi: doc.bands.pi_hi,
            cluster_curves: doc.cluster_curves,
            metadata: doc.metadata,
        })
    }
}
