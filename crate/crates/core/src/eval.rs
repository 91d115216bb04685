//! Evaluation: correlation-based code similarity, mean per-dimension
//! correlation, matching AUC over sampled negatives, and top-k retrieval.
//! This module is the only one allowed to consume ground-truth alignment.

use crate::error::{Result, UcaError};
use crate::matrix::Matrix;
use crate::rng::RngStream;
use serde::{Deserialize, Serialize};

/// Pearson correlation across the entries of two latent vectors. Returns 0
/// when either vector is constant to numerical precision.
pub fn code_similarity(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(UcaError::dim(
            "code_similarity",
            format!("{}", u.len()),
            format!("{}", v.len()),
        ));
    }
    if u.len() < 2 {
        return Err(UcaError::Precondition(
            "code_similarity needs vectors of length >= 2".into(),
        ));
    }
    let d = u.len() as f64;
    let mu = u.iter().sum::<f64>() / d;
    let mv = v.iter().sum::<f64>() / d;
    let mut uu = 0.0;
    let mut vv = 0.0;
    let mut uv = 0.0;
    for (a, b) in u.iter().zip(v) {
        let x = a - mu;
        let y = b - mv;
        uu += x * x;
        vv += y * y;
        uv += x * y;
    }
    let (nu, nv) = (uu.sqrt(), vv.sqrt());
    if nu < 1e-12 || nv < 1e-12 {
        return Ok(0.0);
    }
    Ok(uv / (nu * nv))
}

/// Per-dimension correlations between aligned code matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimCorrelation {
    /// Signed mean over dimensions; negative-correlation solutions stay
    /// visible as negative values.
    pub mean: f64,
    /// Mean of absolute per-dimension correlations.
    pub mean_abs: f64,
    pub per_dim: Vec<f64>,
    /// Dimensions that were constant across pairs and contributed 0.
    pub constant_dims: Vec<usize>,
}

/// Pearson correlation per latent dimension across n aligned pairs.
pub fn mean_dim_correlation(c_x: &Matrix, c_y: &Matrix) -> Result<DimCorrelation> {
    if c_x.shape() != c_y.shape() {
        return Err(UcaError::dim(
            "mean_dim_correlation",
            format!("{}x{}", c_x.rows(), c_x.cols()),
            format!("{}x{}", c_y.rows(), c_y.cols()),
        ));
    }
    let (d, n) = c_x.shape();
    if n < 3 {
        return Err(UcaError::Precondition(format!(
            "mean_dim_correlation needs at least 3 pairs, got {n}"
        )));
    }
    let mut per_dim = Vec::with_capacity(d);
    let mut constant_dims = Vec::new();
    for dim in 0..d {
        let xs = c_x.row(dim);
        let ys = c_y.row(dim);
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        let mut xx = 0.0;
        let mut yy = 0.0;
        let mut xy = 0.0;
        for s in 0..n {
            let a = xs[s] - mx;
            let b = ys[s] - my;
            xx += a * a;
            yy += b * b;
            xy += a * b;
        }
        if xx.sqrt() < 1e-12 || yy.sqrt() < 1e-12 {
            constant_dims.push(dim);
            per_dim.push(0.0);
        } else {
            per_dim.push(xy / (xx.sqrt() * yy.sqrt()));
        }
    }
    let mean = per_dim.iter().sum::<f64>() / d as f64;
    let mean_abs = per_dim.iter().map(|v| v.abs()).sum::<f64>() / d as f64;
    Ok(DimCorrelation {
        mean,
        mean_abs,
        per_dim,
        constant_dims,
    })
}

/// AUC by the rank statistic with ties counted 1/2.
pub fn auc_from_scores(positives: &[f64], negatives: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&s| (s, true))
        .chain(negatives.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let n = all.len();
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // average rank over the tie group, 1-based
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for item in all.iter().take(j + 1).skip(i) {
            if item.1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = positives.len() as f64;
    let q = negatives.len() as f64;
    (rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q)
}

/// Cross-view matching AUC: positives are the n aligned pairs, negatives are
/// n derangement-sampled mismatches, similarities by [`code_similarity`].
pub fn matching_auc(c_x: &Matrix, c_y: &Matrix, rng: &mut RngStream) -> Result<f64> {
    if c_x.shape() != c_y.shape() {
        return Err(UcaError::dim(
            "matching_auc",
            format!("{}x{}", c_x.rows(), c_x.cols()),
            format!("{}x{}", c_y.rows(), c_y.cols()),
        ));
    }
    let n = c_x.cols();
    if n < 2 {
        return Err(UcaError::Precondition(format!(
            "matching_auc needs at least 2 pairs, got {n}"
        )));
    }
    let mut ucol = vec![0.0; c_x.rows()];
    let mut vcol = vec![0.0; c_y.rows()];
    let mut positives = Vec::with_capacity(n);
    for i in 0..n {
        c_x.col_into(i, &mut ucol);
        c_y.col_into(i, &mut vcol);
        positives.push(code_similarity(&ucol, &vcol)?);
    }
    let der = rng.derangement(n);
    let mut negatives = Vec::with_capacity(n);
    for (i, &j) in der.iter().enumerate() {
        c_x.col_into(i, &mut ucol);
        c_y.col_into(j, &mut vcol);
        negatives.push(code_similarity(&ucol, &vcol)?);
    }
    Ok(auc_from_scores(&positives, &negatives))
}

/// For each query, the gallery indices of the k most similar codes,
/// descending, ties broken toward the lower index.
pub fn retrieval_topk(
    query_codes: &Matrix,
    gallery_codes: &Matrix,
    k: usize,
) -> Result<Vec<Vec<usize>>> {
    if query_codes.rows() != gallery_codes.rows() {
        return Err(UcaError::dim(
            "retrieval_topk",
            format!("latent dim {}", query_codes.rows()),
            format!("{}", gallery_codes.rows()),
        ));
    }
    let gallery = gallery_codes.cols();
    if k > gallery {
        return Err(UcaError::Precondition(format!(
            "k = {k} exceeds gallery size {gallery}"
        )));
    }
    let mut q = vec![0.0; query_codes.rows()];
    let mut g = vec![0.0; gallery_codes.rows()];
    let mut out = Vec::with_capacity(query_codes.cols());
    for qi in 0..query_codes.cols() {
        query_codes.col_into(qi, &mut q);
        let mut scored: Vec<(usize, f64)> = Vec::with_capacity(gallery);
        for gi in 0..gallery {
            gallery_codes.col_into(gi, &mut g);
            scored.push((gi, code_similarity(&q, &g)?));
        }
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then_with(|| a.0.cmp(&b.0))
        });
        out.push(scored.into_iter().take(k).map(|(i, _)| i).collect());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// One method's metrics on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub split: Split,
    /// Signed mean per-dimension correlation; absent where the latent space
    /// is undefined for the method.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_correlation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_abs_correlation: Option<f64>,
    pub auc: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_dimension_correlations: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub constant_dim_warnings: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retrieval_examples: Option<Vec<Vec<usize>>>,
}

/// Evaluate a projection pair on centered aligned views.
pub fn evaluate_codes(
    method: &str,
    split: Split,
    c_x: &Matrix,
    c_y: &Matrix,
    seed: u64,
) -> Result<EvalReport> {
    let dims = mean_dim_correlation(c_x, c_y)?;
    let auc = matching_auc(c_x, c_y, &mut RngStream::new(seed))?;
    Ok(EvalReport {
        method: method.to_string(),
        split,
        mean_correlation: Some(dims.mean),
        mean_abs_correlation: Some(dims.mean_abs),
        auc,
        per_dimension_correlations: Some(dims.per_dim),
        constant_dim_warnings: dims.constant_dims,
        retrieval_examples: None,
    })
}

/// One method's train/test cells for the summary table. Missing cells
/// (no latent space, no test split) render as "n/a".
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub corr_train: Option<f64>,
    pub corr_test: Option<f64>,
    pub auc_train: Option<f64>,
    pub auc_test: Option<f64>,
}

fn fmt_cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.2}"),
        None => "n/a".to_string(),
    }
}

/// Summary grid in CSV form: one row per method, train/test cells.
pub fn table_csv(rows: &[TableRow]) -> String {
    let mut out = String::from("method,correlation_train,correlation_test,auc_train,auc_test\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method,
            fmt_cell(r.corr_train),
            fmt_cell(r.corr_test),
            fmt_cell(r.auc_train),
            fmt_cell(r.auc_test)
        ));
    }
    out
}

/// The same grid as aligned plain text with "train/test" cells.
pub fn table_text(rows: &[TableRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>12} {:>12}\n",
        "Method", "Correlation", "AUC"
    ));
    let pair = |a: Option<f64>, b: Option<f64>, star: bool| match (a, b) {
        (Some(x), Some(y)) => format!("{x:.2}/{y:.2}"),
        (Some(x), None) => format!("{x:.2}/-"),
        _ if star => "*".to_string(),
        _ => "-".to_string(),
    };
    for r in rows {
        out.push_str(&format!(
            "{:<12} {:>12} {:>12}\n",
            r.method,
            pair(r.corr_train, r.corr_test, true),
            pair(r.auc_train, r.auc_test, false)
        ));
    }
    out
}
