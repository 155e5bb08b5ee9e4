//! Clustered IV designs: construction, CSV loading, validation, and
//! control partialling.

use std::path::Path;

use ndarray::prelude::*;

use crate::blocks::{block_partition, ClusterBlocks};
use crate::error::{Error, Result};
use crate::linalg::{jacobi_eigh, PivotedQr};

/// A clustered instrumental-variables design: outcome `y`, endogenous
/// regressors `X`, instruments `Z`, optional exogenous controls `W`, and the
/// contiguous cluster partition of the rows.
///
/// Invariants enforced at construction: all row counts agree, every entry is
/// finite, `k >= 1`, `p >= 1`, and there are at least two clusters.
#[derive(Debug, Clone)]
pub struct ClusteredDesign {
    y: Array1<f64>,
    x: Array2<f64>,
    z: Array2<f64>,
    w: Option<Array2<f64>>,
    blocks: ClusterBlocks,
    controls_partialled: bool,
}

impl ClusteredDesign {
    /// Assemble and validate a design from its parts.
    pub fn new(
        y: Array1<f64>,
        x: Array2<f64>,
        z: Array2<f64>,
        w: Option<Array2<f64>>,
        blocks: ClusterBlocks,
    ) -> Result<Self> {
        let n = blocks.n();
        if y.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "outcome has {} rows, blocks cover {n}",
                y.len()
            )));
        }
        if x.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "endogenous matrix has {} rows, blocks cover {n}",
                x.nrows()
            )));
        }
        if z.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "instrument matrix has {} rows, blocks cover {n}",
                z.nrows()
            )));
        }
        if let Some(ref w) = w {
            if w.nrows() != n {
                return Err(Error::DimensionMismatch(format!(
                    "control matrix has {} rows, blocks cover {n}",
                    w.nrows()
                )));
            }
        }
        if x.ncols() == 0 {
            return Err(Error::InvalidConfig(
                "at least one endogenous regressor is required".into(),
            ));
        }
        if z.ncols() == 0 {
            return Err(Error::InvalidConfig(
                "at least one instrument is required".into(),
            ));
        }
        if blocks.g() < 2 {
            return Err(Error::InvalidConfig(
                "at least two clusters are required".into(),
            ));
        }
        let finite = y.iter().all(|v| v.is_finite())
            && x.iter().all(|v| v.is_finite())
            && z.iter().all(|v| v.is_finite())
            && w.as_ref().is_none_or(|w| w.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::InvalidConfig(
                "design contains non-finite values".into(),
            ));
        }
        Ok(ClusteredDesign {
            y,
            x,
            z,
            w,
            blocks,
            controls_partialled: false,
        })
    }

    /// Outcome vector.
    pub fn y(&self) -> &Array1<f64> {
        &self.y
    }

    /// Endogenous regressors, `n x p`.
    pub fn x(&self) -> &Array2<f64> {
        &self.x
    }

    /// Instruments, `n x k`.
    pub fn z(&self) -> &Array2<f64> {
        &self.z
    }

    /// Exogenous controls, if any.
    pub fn w(&self) -> Option<&Array2<f64>> {
        self.w.as_ref()
    }

    /// Cluster partition of the rows.
    pub fn blocks(&self) -> &ClusterBlocks {
        &self.blocks
    }

    /// Number of observations.
    pub fn n(&self) -> usize {
        self.blocks.n()
    }

    /// Number of endogenous regressors.
    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    /// Number of instruments.
    pub fn k(&self) -> usize {
        self.z.ncols()
    }

    /// Number of controls (zero when absent).
    pub fn l(&self) -> usize {
        self.w.as_ref().map_or(0, |w| w.ncols())
    }

    /// Number of clusters.
    pub fn g(&self) -> usize {
        self.blocks.g()
    }

    /// Whether controls were removed by [`partial_out_controls`]. The
    /// many-controls kernel must see the original controls, so it refuses
    /// designs where they were already consumed naively.
    pub fn controls_partialled(&self) -> bool {
        self.controls_partialled
    }
}

/// Column names binding a CSV file to a design.
#[derive(Debug, Clone)]
pub struct CsvSchema {
    pub outcome: String,
    pub endogenous: Vec<String>,
    pub instruments: Vec<String>,
    pub controls: Vec<String>,
    pub cluster: String,
}

/// Load a design from a CSV file with a header row.
///
/// Rows are stably sorted so that each cluster label forms one contiguous
/// run, with clusters ordered by first appearance and the original row order
/// preserved within each cluster.
pub fn load_csv(path: &Path, schema: &CsvSchema) -> Result<ClusteredDesign> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = reader.headers()?.clone();
    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingColumn(name.to_string()))
    };

    let y_idx = col_index(&schema.outcome)?;
    let x_idx: Vec<usize> = schema
        .endogenous
        .iter()
        .map(|n| col_index(n))
        .collect::<Result<_>>()?;
    let z_idx: Vec<usize> = schema
        .instruments
        .iter()
        .map(|n| col_index(n))
        .collect::<Result<_>>()?;
    let w_idx: Vec<usize> = schema
        .controls
        .iter()
        .map(|n| col_index(n))
        .collect::<Result<_>>()?;
    let c_idx = col_index(&schema.cluster)?;

    struct Row {
        label: String,
        y: f64,
        x: Vec<f64>,
        z: Vec<f64>,
        w: Vec<f64>,
    }

    let parse = |record: &csv::StringRecord, row: usize, idx: usize, col: &str| -> Result<f64> {
        let raw = record.get(idx).unwrap_or("");
        raw.trim().parse::<f64>().map_err(|e| Error::Parse {
            row,
            col: col.to_string(),
            msg: format!("'{raw}' is not numeric ({e})"),
        })
    };

    let mut rows: Vec<Row> = Vec::new();
    for (ridx, record) in reader.records().enumerate() {
        let record = record?;
        let label = record.get(c_idx).unwrap_or("").trim().to_string();
        let y = parse(&record, ridx, y_idx, &schema.outcome)?;
        let x = x_idx
            .iter()
            .zip(&schema.endogenous)
            .map(|(&i, n)| parse(&record, ridx, i, n))
            .collect::<Result<Vec<_>>>()?;
        let z = z_idx
            .iter()
            .zip(&schema.instruments)
            .map(|(&i, n)| parse(&record, ridx, i, n))
            .collect::<Result<Vec<_>>>()?;
        let w = w_idx
            .iter()
            .zip(&schema.controls)
            .map(|(&i, n)| parse(&record, ridx, i, n))
            .collect::<Result<Vec<_>>>()?;
        rows.push(Row { label, y, x, z, w });
    }
    if rows.is_empty() {
        return Err(Error::EmptyData);
    }

    // Stable sort by first appearance of each cluster label.
    let mut order: Vec<String> = Vec::new();
    let mut keys: Vec<usize> = Vec::with_capacity(rows.len());
    for row in &rows {
        let key = match order.iter().position(|l| l == &row.label) {
            Some(k) => k,
            None => {
                order.push(row.label.clone());
                order.len() - 1
            }
        };
        keys.push(key);
    }
    let mut perm: Vec<usize> = (0..rows.len()).collect();
    perm.sort_by_key(|&i| keys[i]);

    let n = rows.len();
    let p = x_idx.len();
    let k = z_idx.len();
    let l = w_idx.len();
    let mut y = Array1::<f64>::zeros(n);
    let mut x = Array2::<f64>::zeros((n, p));
    let mut z = Array2::<f64>::zeros((n, k));
    let mut w = Array2::<f64>::zeros((n, l));
    let mut labels: Vec<&str> = Vec::with_capacity(n);
    for (dst, &src) in perm.iter().enumerate() {
        let row = &rows[src];
        y[dst] = row.y;
        for j in 0..p {
            x[(dst, j)] = row.x[j];
        }
        for j in 0..k {
            z[(dst, j)] = row.z[j];
        }
        for j in 0..l {
            w[(dst, j)] = row.w[j];
        }
        labels.push(&row.label);
    }
    let blocks = block_partition(&labels)?;
    let w = if l > 0 { Some(w) } else { None };
    ClusteredDesign::new(y, x, z, w, blocks)
}

/// Diagnostics from [`validate`].
#[derive(Debug, Clone)]
pub struct ValidationReport {
    /// Rows form contiguous cluster runs (always true for loaded designs).
    pub contiguous: bool,
    /// Instruments have full column rank.
    pub z_full_rank: bool,
    /// Controls have full column rank (`None` when there are no controls).
    pub w_full_rank: Option<bool>,
    /// Whether `k < G`, required by the many-instrument AR statistic.
    pub k_lt_g: bool,
    /// Largest spectral norm of a diagonal projection block
    /// `P_Z,[g,g]`; values close to one signal a high-leverage cluster.
    pub max_cluster_leverage: f64,
    /// Largest cluster size divided by the number of clusters; a crude
    /// balance diagnostic for the cluster asymptotics.
    pub nmax_over_g: f64,
    /// Set when the number of clusters is small; the tests here are
    /// justified by asymptotics in the number of clusters.
    pub few_clusters: bool,
}

/// Number of clusters below which [`ValidationReport::few_clusters`] is set.
pub const FEW_CLUSTERS_THRESHOLD: usize = 20;

/// Check a design: instrument and control ranks (rank deficiency is a hard
/// error), cluster-count conditions, and leverage diagnostics.
pub fn validate(design: &ClusteredDesign) -> Result<ValidationReport> {
    let z = design.z();
    let qr = PivotedQr::factor(&z.view());
    if !qr.is_full_column_rank() {
        return Err(Error::RankDeficient {
            observed: qr.rank(),
            expected: z.ncols(),
        });
    }
    let w_full_rank = match design.w() {
        None => None,
        Some(w) => {
            let wqr = PivotedQr::factor(&w.view());
            if !wqr.is_full_column_rank() {
                return Err(Error::RankDeficient {
                    observed: wqr.rank(),
                    expected: w.ncols(),
                });
            }
            Some(true)
        }
    };

    // Leverage of cluster g is the top eigenvalue of P_[g,g] = Q_g Q_g',
    // computed through the small k x k Gram matrix Q_g' Q_g instead.
    let q = qr.thin_q();
    let mut max_lev = 0.0f64;
    for (_, r) in design.blocks().iter() {
        let qg = q.slice(s![r, ..]);
        let s = qg.t().dot(&qg);
        let (vals, _) = jacobi_eigh(&s.view());
        let top = vals[vals.len() - 1].clamp(0.0, 1.0);
        max_lev = max_lev.max(top);
    }

    let g = design.g();
    Ok(ValidationReport {
        contiguous: true,
        z_full_rank: true,
        w_full_rank,
        k_lt_g: design.k() < g,
        max_cluster_leverage: max_lev,
        nmax_over_g: design.blocks().max_size() as f64 / g as f64,
        few_clusters: g < FEW_CLUSTERS_THRESHOLD,
    })
}

/// Residualize `y`, `X`, and `Z` on the controls and drop them.
///
/// The returned design records that controls were consumed, so the
/// many-controls kernel (which needs the controls in raw form) can refuse
/// it. A design without controls is returned unchanged.
pub fn partial_out_controls(design: &ClusteredDesign) -> Result<ClusteredDesign> {
    let w = match design.w() {
        None => return Ok(design.clone()),
        Some(w) => w,
    };
    let qr = PivotedQr::factor(&w.view());
    if !qr.is_full_column_rank() {
        return Err(Error::RankDeficient {
            observed: qr.rank(),
            expected: w.ncols(),
        });
    }
    let q = qr.thin_q();
    let annihilate_vec = |v: &Array1<f64>| -> Array1<f64> {
        let proj = q.dot(&q.t().dot(v));
        v - &proj
    };
    let annihilate_mat = |m: &Array2<f64>| -> Array2<f64> {
        let proj = q.dot(&q.t().dot(m));
        m - &proj
    };
    let mut out = ClusteredDesign::new(
        annihilate_vec(design.y()),
        annihilate_mat(design.x()),
        annihilate_mat(design.z()),
        None,
        design.blocks().clone(),
    )?;
    out.controls_partialled = true;
    Ok(out)
}
