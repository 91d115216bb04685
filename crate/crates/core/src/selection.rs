//! Unsupervised consensus selection among the k runs: synthesize matched
//! pairs by pushing samples through randomly chosen runs' cross-view maps,
//! score every pair under every run, and pick the run at the extreme of the
//! requested principal component of the centered score matrix.
//!
//! Nothing in this module sees ground-truth alignment.

use crate::error::{Result, UcaError};
use crate::eval::code_similarity;
use crate::matrix::{matmul, Matrix};
use crate::rng::RngStream;
use crate::trainer::RunArtifact;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    /// The literal dot-product form.
    InnerProduct,
    /// Correlation-based similarity, matching the evaluation metric.
    Correlation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtremalRule {
    /// Maximum consensus score after sign disambiguation.
    Argmax,
    /// Largest absolute consensus score.
    ExtremalAbs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionConfig {
    /// 1-based principal component to score along. The halves benchmark
    /// works better with the second component.
    pub component_index: usize,
    pub n_pairs: usize,
    pub similarity: SimilarityKind,
    pub extremal_rule: ExtremalRule,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            component_index: 1,
            n_pairs: 2000,
            similarity: SimilarityKind::Correlation,
            extremal_rule: ExtremalRule::Argmax,
        }
    }
}

/// Synthetic matched pairs: x samples and their pushed-through partners,
/// each generated by a uniformly drawn run.
#[derive(Debug, Clone)]
pub struct SyntheticPairs {
    pub x_samples: Matrix,
    pub y_tilde: Matrix,
    pub generator_run: Vec<usize>,
}

/// Run-by-pair similarity scores; row j holds run j's view of the shared
/// synthetic pairs.
#[derive(Debug, Clone)]
pub struct ScoreMatrix {
    pub m: Matrix,
    pub similarity_kind: SimilarityKind,
}

/// Outcome of consensus selection, also the shape of the JSON report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selection {
    pub selected_run: usize,
    pub component_index: usize,
    pub similarity: SimilarityKind,
    pub extremal_rule: ExtremalRule,
    /// Orientation applied to the principal component before the argmax.
    pub sign: f64,
    /// Per-run consensus scores in the chosen orientation.
    pub scores: Vec<f64>,
    /// Mean raw synthetic-pair similarity of the selected run.
    pub raw_mean_selected: f64,
}

/// Draw `n_pairs` distinct x columns and push each through a uniformly
/// sampled run's composite x-to-y map.
pub fn synthesize_pairs(
    runs: &[&RunArtifact],
    x: &crate::data::ViewDataset,
    cfg: &SelectionConfig,
    rng: &mut RngStream,
) -> Result<SyntheticPairs> {
    if runs.is_empty() {
        return Err(UcaError::Precondition("no surviving runs".into()));
    }
    if cfg.n_pairs == 0 || cfg.n_pairs > x.len() {
        return Err(UcaError::Precondition(format!(
            "n_pairs {} must be in 1..={}",
            cfg.n_pairs,
            x.len()
        )));
    }
    let cols: Vec<usize> = rng.permutation(x.len())[..cfg.n_pairs].to_vec();
    let x_samples = x.features.select_cols(&cols);
    let generator_run: Vec<usize> = (0..cfg.n_pairs).map(|_| rng.below(runs.len())).collect();

    let d_y = runs[0].v_y.d_out();
    let mut y_tilde = Matrix::zeros(d_y, cfg.n_pairs);
    for (j, run) in runs.iter().enumerate() {
        let mine: Vec<usize> = generator_run
            .iter()
            .enumerate()
            .filter(|(_, &r)| r == j)
            .map(|(i, _)| i)
            .collect();
        if mine.is_empty() {
            continue;
        }
        let sub = x_samples.select_cols(&mine);
        let mapped = run.v_y.project(&run.w_x.project(&sub)?)?;
        for (slot, &dst) in mine.iter().enumerate() {
            for r in 0..d_y {
                y_tilde.set(r, dst, mapped.get(r, slot));
            }
        }
    }
    Ok(SyntheticPairs {
        x_samples,
        y_tilde,
        generator_run,
    })
}

/// Score every synthetic pair under every run's projections.
pub fn build_score_matrix(
    runs: &[&RunArtifact],
    pairs: &SyntheticPairs,
    cfg: &SelectionConfig,
) -> Result<ScoreMatrix> {
    let k = runs.len();
    let n = pairs.x_samples.cols();
    let d = runs[0].w_x.d_out();
    for run in runs {
        if run.w_x.d_out() != d || run.w_y.d_out() != d {
            return Err(UcaError::dim(
                "build_score_matrix",
                format!("latent dim {d}"),
                format!("{}x{}", run.w_x.d_out(), run.w_y.d_out()),
            ));
        }
    }
    let mut m = Matrix::zeros(k, n);
    let mut ucol = vec![0.0; d];
    let mut vcol = vec![0.0; d];
    for (j, run) in runs.iter().enumerate() {
        let a = run.w_x.project(&pairs.x_samples)?;
        let b = run.w_y.project(&pairs.y_tilde)?;
        for i in 0..n {
            let score = match cfg.similarity {
                SimilarityKind::InnerProduct => {
                    let mut s = 0.0;
                    for r in 0..d {
                        s += a.get(r, i) * b.get(r, i);
                    }
                    s
                }
                SimilarityKind::Correlation => {
                    a.col_into(i, &mut ucol);
                    b.col_into(i, &mut vcol);
                    code_similarity(&ucol, &vcol)?
                }
            };
            m.set(j, i, score);
        }
    }
    Ok(ScoreMatrix {
        m,
        similarity_kind: cfg.similarity,
    })
}

/// Pick the run at the extreme of the requested principal component.
///
/// The per-pair mean over runs is removed, the right singular vector P of
/// the centered matrix is taken at `component_index`, and each run scores
/// P dot (centered row). The sign of P is fixed by requiring the winner's
/// mean raw similarity to be positive: synthetic pairs are constructed
/// matches, so the consensus winner must score them positively.
pub fn select_run(score: &ScoreMatrix, cfg: &SelectionConfig) -> Result<Selection> {
    let (k, n) = score.m.shape();
    if k < 2 {
        return Err(UcaError::Precondition(format!(
            "consensus selection needs at least 2 runs, got {k}"
        )));
    }
    if cfg.component_index < 1 {
        return Err(UcaError::Precondition("component_index is 1-based".into()));
    }

    // center each pair across runs
    let mut centered = score.m.clone();
    for i in 0..n {
        let mut mean = 0.0;
        for j in 0..k {
            mean += score.m.get(j, i);
        }
        mean /= k as f64;
        for j in 0..k {
            let v = centered.get(j, i) - mean;
            centered.set(j, i, v);
        }
    }

    let total = score.m.frob_norm();
    if centered.frob_norm() <= 1e-12 * total.max(1.0) {
        return Err(UcaError::Selection(
            "score matrix has no variance across runs; add more pairs or runs".into(),
        ));
    }

    let (_, s, v) = crate::linalg::thin_svd(&centered)?;
    let c = cfg.component_index - 1;
    if c >= s.len() || s[c] <= 1e-12 * s[0].max(f64::MIN_POSITIVE) {
        return Err(UcaError::Selection(format!(
            "component {} is degenerate (rank {} score matrix); add more pairs or runs",
            cfg.component_index,
            s.iter().filter(|&&x| x > 1e-12 * s[0]).count()
        )));
    }
    let p = Matrix::from_fn(n, 1, |i, _| v.get(i, c));
    let scores_m = matmul(&centered, &p)?;
    let mut scores: Vec<f64> = (0..k).map(|j| scores_m.get(j, 0)).collect();

    let raw_mean: Vec<f64> = (0..k)
        .map(|j| score.m.row(j).iter().sum::<f64>() / n as f64)
        .collect();

    let argmax = |vals: &[f64]| -> usize {
        let mut best = 0;
        for (i, &x) in vals.iter().enumerate() {
            if x > vals[best] {
                best = i;
            }
        }
        best
    };

    let (selected, sign) = match cfg.extremal_rule {
        ExtremalRule::Argmax => {
            let j_plus = argmax(&scores);
            let negated: Vec<f64> = scores.iter().map(|v| -v).collect();
            let j_minus = argmax(&negated);
            if raw_mean[j_plus] >= raw_mean[j_minus] {
                (j_plus, 1.0)
            } else {
                (j_minus, -1.0)
            }
        }
        ExtremalRule::ExtremalAbs => {
            let abs: Vec<f64> = scores.iter().map(|v| v.abs()).collect();
            let j = argmax(&abs);
            (j, if scores[j] >= 0.0 { 1.0 } else { -1.0 })
        }
    };
    if sign < 0.0 {
        for v in &mut scores {
            *v = -*v;
        }
    }

    Ok(Selection {
        selected_run: selected,
        component_index: cfg.component_index,
        similarity: score.similarity_kind,
        extremal_rule: cfg.extremal_rule,
        sign,
        scores,
        raw_mean_selected: raw_mean[selected],
    })
}
