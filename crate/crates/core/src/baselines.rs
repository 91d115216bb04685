//! Supervised calibration methods: regularized CCA, the supervised variant
//! of the architecture, a direct domain-to-domain GAN, and oracle run
//! selection from aligned validation pairs.

use crate::data::{center, PairedEval, ViewDataset};
use crate::error::{Result, UcaError};
use crate::eval::mean_dim_correlation;
use crate::linalg::{sym_eig, thin_svd};
use crate::matrix::{acc_mul_nt, matmul, matmul_nt, matmul_tn, Matrix};
use crate::model::{init_discriminator, Discriminator, LinearMap, TensorView};
use crate::rng::RngStream;
use crate::trainer::{
    adam_step, adv_input_grad, disc_param_step, lr_at_epoch, train_loop, AdamState, RunArtifact,
    TrainConfig, Variant,
};
use serde::{Deserialize, Serialize};

/// Linear CCA projections with ridge regularization.
#[derive(Debug, Clone, PartialEq)]
pub struct CcaModel {
    pub w_x: Matrix, // d x d_x
    pub w_y: Matrix, // d x d_y
    /// Descending, clipped into [0, 1].
    pub canonical_correlations: Vec<f64>,
    pub ridge: f64,
    pub mean_x: Vec<f64>,
    pub mean_y: Vec<f64>,
}

impl CcaModel {
    pub fn latent_dim(&self) -> usize {
        self.w_x.rows()
    }

    /// Project a view after centering with the training mean.
    pub fn project_x(&self, view: &ViewDataset) -> Result<Matrix> {
        let centered = crate::data::center_with(view, &self.mean_x)?;
        matmul(&self.w_x, &centered.features)
    }

    pub fn project_y(&self, view: &ViewDataset) -> Result<Matrix> {
        let centered = crate::data::center_with(view, &self.mean_y)?;
        matmul(&self.w_y, &centered.features)
    }
}

/// Covariance-level sufficient statistics, reusable across the ridge grid.
struct CcaStats {
    eig_x: (Vec<f64>, Matrix),
    eig_y: (Vec<f64>, Matrix),
    sxy: Matrix,
    mean_x: Vec<f64>,
    mean_y: Vec<f64>,
}

fn cca_stats(pairs: &PairedEval) -> Result<CcaStats> {
    let n = pairs.len();
    if n < 2 {
        return Err(UcaError::Precondition(format!(
            "CCA needs at least 2 aligned pairs, got {n}"
        )));
    }
    let xc = center(&pairs.x_view);
    let yc = center(&pairs.y_view);
    let scale = 1.0 / n as f64;
    let mut sxx = matmul_nt(&xc.features, &xc.features)?;
    sxx.scale(scale);
    let mut syy = matmul_nt(&yc.features, &yc.features)?;
    syy.scale(scale);
    let mut sxy = matmul_nt(&xc.features, &yc.features)?;
    sxy.scale(scale);
    // Jacobi sweeps keep these symmetric only to rounding; symmetrize before eig
    symmetrize(&mut sxx);
    symmetrize(&mut syy);
    Ok(CcaStats {
        eig_x: sym_eig(&sxx)?,
        eig_y: sym_eig(&syy)?,
        sxy,
        mean_x: xc.mean.unwrap(),
        mean_y: yc.mean.unwrap(),
    })
}

fn symmetrize(a: &mut Matrix) {
    let n = a.rows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (a.get(i, j) + a.get(j, i));
            a.set(i, j, v);
            a.set(j, i, v);
        }
    }
}

/// E diag((lambda + r)^(-1/2)) E^T with a singularity guard.
fn inv_sqrt_from_eig(eig: &(Vec<f64>, Matrix), r: f64) -> Result<Matrix> {
    let (vals, vecs) = eig;
    let top = vals.first().copied().unwrap_or(0.0).max(0.0);
    let mut scaled = vecs.clone();
    let n = vals.len();
    for (c, &lambda) in vals.iter().enumerate() {
        let shifted = lambda.max(0.0) + r;
        if shifted <= 1e-12 * top.max(1e-300) {
            return Err(UcaError::Numeric(format!(
                "covariance is singular (eigenvalue {lambda:.3e}); use a ridge r > 0"
            )));
        }
        let f = 1.0 / shifted.sqrt();
        for row in 0..n {
            let v = scaled.get(row, c) * f;
            scaled.set(row, c, v);
        }
    }
    matmul_nt(&scaled, vecs)
}

fn fit_from_stats(stats: &CcaStats, d: usize, r: f64) -> Result<CcaModel> {
    let d_x = stats.eig_x.0.len();
    let d_y = stats.eig_y.0.len();
    if d == 0 || d > d_x.min(d_y) {
        return Err(UcaError::Precondition(format!(
            "latent dim {d} must be in 1..={}",
            d_x.min(d_y)
        )));
    }
    if r < 0.0 {
        return Err(UcaError::Precondition(format!("ridge {r} must be >= 0")));
    }
    let isx = inv_sqrt_from_eig(&stats.eig_x, r)?;
    let isy = inv_sqrt_from_eig(&stats.eig_y, r)?;
    let t = matmul(&matmul(&isx, &stats.sxy)?, &isy)?;
    let (u, s, v) = thin_svd(&t)?;
    let u_d = Matrix::from_fn(u.rows(), d, |i, j| u.get(i, j));
    let v_d = Matrix::from_fn(v.rows(), d, |i, j| v.get(i, j));
    let w_x = matmul_tn(&u_d, &isx)?;
    let w_y = matmul_tn(&v_d, &isy)?;
    let canonical_correlations = s[..d].iter().map(|&x| x.clamp(0.0, 1.0)).collect();
    Ok(CcaModel {
        w_x,
        w_y,
        canonical_correlations,
        ridge: r,
        mean_x: stats.mean_x.clone(),
        mean_y: stats.mean_y.clone(),
    })
}

/// Regularized CCA via the whitened cross-covariance SVD. Covariances use
/// 1/n normalization on centered data; singular values are the canonical
/// correlations and come out nonnegative, resolving the sign ambiguity the
/// supervised way.
pub fn fit_rcca(pairs: &PairedEval, d: usize, r: f64) -> Result<CcaModel> {
    crate::matrix::tune_allocator();
    fit_from_stats(&cca_stats(pairs)?, d, r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub ridge: f64,
    pub validation_correlation: f64,
}

const SWEEP_SPLIT_SEED: u64 = 0x05ee_dcca;

/// Fit every ridge on a 90% split, score mean validation correlation on the
/// held-out 10%, then refit the winner on the full data.
pub fn rcca_sweep(
    pairs: &PairedEval,
    d: usize,
    grid: &[f64],
) -> Result<(CcaModel, Vec<SweepEntry>)> {
    if grid.is_empty() {
        return Err(UcaError::Precondition("empty ridge grid".into()));
    }
    let n = pairs.len();
    let n_val = (n / 10).max(1);
    let mut rng = RngStream::new(SWEEP_SPLIT_SEED);
    let perm = rng.permutation(n);
    let (val_idx, train_idx) = perm.split_at(n_val);
    let train_pairs = PairedEval::new(
        pairs.x_view.select(train_idx),
        pairs.y_view.select(train_idx),
    )?;
    let val_x = pairs.x_view.select(val_idx);
    let val_y = pairs.y_view.select(val_idx);

    let stats = cca_stats(&train_pairs)?;
    let mut table = Vec::with_capacity(grid.len());
    let mut best: Option<(f64, f64)> = None; // (corr, ridge)
    for &r in grid {
        let entry = match fit_from_stats(&stats, d, r) {
            Ok(model) => {
                let cx = model.project_x(&val_x)?;
                let cy = model.project_y(&val_y)?;
                let corr = mean_dim_correlation(&cx, &cy)?.mean;
                SweepEntry {
                    ridge: r,
                    validation_correlation: corr,
                }
            }
            Err(UcaError::Numeric(_)) => SweepEntry {
                ridge: r,
                validation_correlation: f64::NEG_INFINITY,
            },
            Err(e) => return Err(e),
        };
        if best.is_none() || entry.validation_correlation > best.unwrap().0 {
            best = Some((entry.validation_correlation, r));
        }
        table.push(entry);
    }
    let (best_corr, best_r) = best.unwrap();
    if !best_corr.is_finite() {
        return Err(UcaError::Numeric(
            "every ridge in the grid failed; the covariance needs r > 0".into(),
        ));
    }
    let model = fit_rcca(pairs, d, best_r)?;
    Ok((model, table))
}

/// Train the architecture with the supervised objective on aligned pairs.
/// No discriminators exist in this mode.
pub fn fit_sup_uca(pairs: &PairedEval, config: &TrainConfig) -> Result<RunArtifact> {
    if config.variant != Variant::SupUca {
        return Err(UcaError::Precondition(format!(
            "fit_sup_uca requires the sup-uca variant, got {:?}",
            config.variant
        )));
    }
    let xc = center(&pairs.x_view);
    let yc = center(&pairs.y_view);
    train_loop(&xc, &yc, config, config.seed, true)
}

/// Two linear generators trained adversarially straight between the raw
/// domains; no shared space.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectGanModel {
    pub g_xy: LinearMap,
    pub g_yx: LinearMap,
}

struct GanSide {
    gen: LinearMap,
    disc: Discriminator,
    adam_g: AdamState,
    adam_d: AdamState,
}

impl GanSide {
    fn new(d_in: usize, d_out: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let s = (1.0 / d_in as f64).sqrt();
        let gen = LinearMap {
            weight: Matrix::from_fn(d_out, d_in, |_, _| rng.uniform_symmetric(s)),
        };
        let disc = init_discriminator(d_out, hidden, rng);
        let adam_g = AdamState::new(&[d_out * d_in]);
        let adam_d = AdamState::for_views(&disc.tensors("d"));
        GanSide {
            gen,
            disc,
            adam_g,
            adam_d,
        }
    }

    /// One alternating step: discriminator on (generated vs real), then the
    /// generator against the updated discriminator.
    fn step(&mut self, src: &Matrix, real: &Matrix, lr: f64, wd: f64) -> Result<(f64, f64)> {
        let fake = self.gen.project(src)?;
        let (d_loss, d_grads) = disc_param_step(&self.disc, &fake, real)?;
        adam_step(
            &mut self.adam_d,
            self.disc.tensors_mut("d"),
            &d_grads.tensors("d"),
            lr,
            wd,
        );

        let fake = self.gen.project(src)?;
        let (g_loss, d_fake) = adv_input_grad(&self.disc, &fake, 1.0, 1.0)?;
        let mut g_grad = Matrix::zeros(self.gen.d_out(), self.gen.d_in());
        acc_mul_nt(&mut g_grad, &d_fake, src);
        let views = [TensorView {
            name: "g".into(),
            rows: g_grad.rows(),
            cols: g_grad.cols(),
            data: g_grad.as_slice(),
        }];
        let mut params = vec![crate::model::TensorViewMut {
            name: "g".into(),
            rows: self.gen.d_out(),
            cols: self.gen.d_in(),
            data: self.gen.weight.as_mut_slice(),
        }];
        adam_step(&mut self.adam_g, std::mem::take(&mut params), &views, lr, wd);
        Ok((d_loss, g_loss))
    }
}

/// Train the direct GAN baseline on centered, unaligned views.
pub fn fit_direct_gan(
    x: &ViewDataset,
    y: &ViewDataset,
    config: &TrainConfig,
    run_seed: u64,
) -> Result<DirectGanModel> {
    crate::matrix::tune_allocator();
    let root = RngStream::new(run_seed);
    let mut init_rng = root.derive(0);
    let mut xy = GanSide::new(x.dim(), y.dim(), config.hidden, &mut init_rng);
    let mut yx = GanSide::new(y.dim(), x.dim(), config.hidden, &mut init_rng);
    let shuffle_x = root.derive(1);
    let shuffle_y = root.derive(2);

    for epoch in 0..config.epochs {
        let lr = lr_at_epoch(config, epoch)?;
        let plan_x = crate::data::MinibatchPlan::new(x.len(), config.batch_size, epoch, &shuffle_x)?;
        let plan_y = crate::data::MinibatchPlan::new(y.len(), config.batch_size, epoch, &shuffle_y)?;
        for (bx, by) in plan_x.batches().zip(plan_y.batches()) {
            let xb = x.features.select_cols(bx);
            let yb = y.features.select_cols(by);
            let (d1, g1) = xy.step(&xb, &yb, lr, config.weight_decay)?;
            let (d2, g2) = yx.step(&yb, &xb, lr, config.weight_decay)?;
            if ![d1, g1, d2, g2].iter().all(|v| v.is_finite()) {
                return Err(UcaError::Numeric(format!(
                    "direct GAN diverged at epoch {epoch} (run seed {run_seed})"
                )));
            }
        }
    }
    Ok(DirectGanModel {
        g_xy: xy.gen,
        g_yx: yx.gen,
    })
}

/// Matching AUC for the direct GAN: map x into the y domain and compare
/// there. The correlation metric has no latent space to live in and is
/// reported as not applicable by callers.
pub fn direct_gan_auc(
    model: &DirectGanModel,
    x_centered: &Matrix,
    y_centered: &Matrix,
    seed: u64,
) -> Result<f64> {
    let mapped = model.g_xy.project(x_centered)?;
    crate::eval::matching_auc(&mapped, y_centered, &mut RngStream::new(seed))
}

/// Supervised upper-bound selection: the run with the best mean dimension
/// correlation on aligned (centered) validation views. Returns the index
/// and every run's validation correlation.
pub fn oracle_select(
    runs: &[&RunArtifact],
    x_centered: &Matrix,
    y_centered: &Matrix,
) -> Result<(usize, Vec<f64>)> {
    if runs.is_empty() {
        return Err(UcaError::Precondition("oracle over an empty run list".into()));
    }
    let mut scores = Vec::with_capacity(runs.len());
    for run in runs {
        let cx = run.w_x.project(x_centered)?;
        let cy = run.w_y.project(y_centered)?;
        scores.push(mean_dim_correlation(&cx, &cy)?.mean);
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    Ok((best, scores))
}
