//! Cross-module oracle harness: finite-difference gradient audits over every
//! loss term and synthetic planted ensembles for exercising the consensus
//! selection without real training.

use crate::data::{PairedEval, ViewDataset};
use crate::error::{Result, UcaError};
use crate::linalg::thin_svd;
use crate::losses::{bce_batch_const, LossWeights};
use crate::matrix::{matmul, matmul_nt, Matrix};
use crate::model::{init_params, DiscGrads, DiscSet, LinearMap, UcaParams};
use crate::rng::RngStream;
use crate::trainer::{disc_param_step, generator_backward, LossRecord, RunArtifact, TrainConfig, Variant};

pub const FD_STEP: f64 = 1e-5;

/// Seed for the canonical audit instance. The instance must not contain
/// hidden units that are dead across the whole tiny batch: a parameter whose
/// true gradient is exactly zero measures nothing but finite-difference
/// roundoff (eps * loss / 2h, about 1e-11 here) against the 1e-8 error
/// floor, which reads as a spurious 1e-3. This seed was verified to keep
/// every audited coordinate two orders of magnitude under the tolerance.
pub const CANONICAL_AUDIT_SEED: u64 = 19;

/// The standard audit instance: small enough that central differences over
/// every parameter finish in well under a second per loss.
pub struct TinyInstance {
    pub params: UcaParams,
    pub x: Matrix,
    pub y: Matrix,
}

pub const TINY_DX: usize = 6;
pub const TINY_DY: usize = 5;
pub const TINY_D: usize = 3;
pub const TINY_HIDDEN: usize = 8;
pub const TINY_BATCH: usize = 4;

pub fn tiny_instance(seed: u64) -> TinyInstance {
    let mut rng = RngStream::new(seed);
    let params = init_params(
        TINY_DX,
        TINY_DY,
        TINY_D,
        TINY_HIDDEN,
        DiscSet {
            latent: true,
            domain: true,
        },
        &mut rng,
    );
    let x = Matrix::from_fn(TINY_DX, TINY_BATCH, |_, _| rng.uniform() * 2.0 - 1.0);
    let y = Matrix::from_fn(TINY_DY, TINY_BATCH, |_, _| rng.uniform() * 2.0 - 1.0);
    TinyInstance { params, x, y }
}

/// The auditable losses. Map-parameter losses check gradients with respect
/// to the four projections (through frozen discriminators where relevant);
/// discriminator losses check the discriminator's own parameters including
/// the batch-norm Jacobian.
pub const AUDIT_LOSSES: &[&str] = &[
    "orth",
    "rec",
    "cyc",
    "gen_latent",
    "gen_domain",
    "total_all",
    "total_cyc",
    "total_latent",
    "sup",
    "disc_latent",
    "disc_domain_x",
    "disc_domain_y",
];

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn weights_for(name: &str) -> Option<(LossWeights, bool)> {
    let zero = LossWeights {
        lambda_c: 0.0,
        lambda_xy: 0.0,
        lambda_rec: 0.0,
        lambda_orth: 0.0,
        lambda_cyc: 0.0,
    };
    let w = match name {
        "orth" => (
            LossWeights {
                lambda_orth: 1.0,
                ..zero
            },
            false,
        ),
        "rec" => (
            LossWeights {
                lambda_rec: 1.0,
                ..zero
            },
            false,
        ),
        "cyc" => (
            LossWeights {
                lambda_cyc: 1.0,
                ..zero
            },
            false,
        ),
        "gen_latent" => (
            LossWeights {
                lambda_c: 1.0,
                ..zero
            },
            false,
        ),
        "gen_domain" => (
            LossWeights {
                lambda_xy: 1.0,
                ..zero
            },
            false,
        ),
        "total_all" => (LossWeights::ALL_UCA, false),
        "total_cyc" => (LossWeights::CYC_UCA, false),
        "total_latent" => (LossWeights::LATENT_UCA, false),
        "sup" => (Variant::SupUca.weights(), true),
        _ => return None,
    };
    Some(w)
}

/// Max relative error between the analytic gradient and central finite
/// differences (step 1e-5) over every relevant parameter of `loss_name`.
pub fn grad_audit(loss_name: &str, instance: &TinyInstance) -> Result<f64> {
    if let Some((weights, supervised)) = weights_for(loss_name) {
        return audit_map_loss(instance, &weights, supervised);
    }
    match loss_name {
        "disc_latent" | "disc_domain_x" | "disc_domain_y" => {
            audit_disc_loss(instance, loss_name)
        }
        other => Err(UcaError::Precondition(format!(
            "unknown loss '{other}'; expected one of {AUDIT_LOSSES:?}"
        ))),
    }
}

fn audit_map_loss(
    instance: &TinyInstance,
    weights: &LossWeights,
    supervised: bool,
) -> Result<f64> {
    let params = &instance.params;
    let (_, grads) = generator_backward(params, &instance.x, &instance.y, weights, supervised)?;
    let loss_of = |p: &UcaParams| -> f64 {
        generator_backward(p, &instance.x, &instance.y, weights, supervised)
            .expect("loss evaluation")
            .0
            .total_generator
    };
    let mut worst: f64 = 0.0;
    for slot in 0..4 {
        let len = match slot {
            0 => grads.w_x.as_slice().len(),
            1 => grads.w_y.as_slice().len(),
            2 => grads.v_x.as_slice().len(),
            _ => grads.v_y.as_slice().len(),
        };
        for idx in 0..len {
            let mut plus = params.clone();
            let mut minus = params.clone();
            for (p, sign) in [(&mut plus, FD_STEP), (&mut minus, -FD_STEP)] {
                let w = match slot {
                    0 => &mut p.w_x,
                    1 => &mut p.w_y,
                    2 => &mut p.v_x,
                    _ => &mut p.v_y,
                };
                w.weight.as_mut_slice()[idx] += sign;
            }
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * FD_STEP);
            let analytic = match slot {
                0 => grads.w_x.as_slice()[idx],
                1 => grads.w_y.as_slice()[idx],
                2 => grads.v_x.as_slice()[idx],
                _ => grads.v_y.as_slice()[idx],
            };
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    Ok(worst)
}

fn audit_disc_loss(instance: &TinyInstance, loss_name: &str) -> Result<f64> {
    let p = &instance.params;
    let c_x = p.w_x.project(&instance.x)?;
    let c_y = p.w_y.project(&instance.y)?;
    // (zero-labeled batch, one-labeled batch) per the training convention
    let (disc, zero_b, one_b) = match loss_name {
        "disc_latent" => (p.disc_c.as_ref().unwrap(), c_x.clone(), c_y.clone()),
        "disc_domain_x" => (
            p.disc_x.as_ref().unwrap(),
            p.v_x.project(&c_y)?,
            p.v_x.project(&c_x)?,
        ),
        _ => (
            p.disc_y.as_ref().unwrap(),
            p.v_y.project(&c_x)?,
            p.v_y.project(&c_y)?,
        ),
    };
    let (_, grads) = disc_param_step(disc, &zero_b, &one_b)?;
    let loss_of = |d: &crate::model::Discriminator| -> f64 {
        bce_batch_const(&d.forward(&zero_b).unwrap().0, 0.0)
            + bce_batch_const(&d.forward(&one_b).unwrap().0, 1.0)
    };
    let names: Vec<String> = disc.tensors("").iter().map(|t| t.name.clone()).collect();
    let mut worst: f64 = 0.0;
    for name in names {
        let len = disc
            .tensors("")
            .iter()
            .find(|t| t.name == name)
            .unwrap()
            .data
            .len();
        for idx in 0..len {
            let mut plus = disc.clone();
            let mut minus = disc.clone();
            for (d, sign) in [(&mut plus, FD_STEP), (&mut minus, -FD_STEP)] {
                for t in d.tensors_mut("") {
                    if t.name == name {
                        t.data[idx] += sign;
                        break;
                    }
                }
            }
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * FD_STEP);
            let analytic = grads
                .tensors("")
                .iter()
                .find(|t| t.name == name)
                .unwrap()
                .data[idx];
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    let _ = DiscGrads::zeros_like(disc);
    Ok(worst)
}

// ---------------------------------------------------------------------------
// Planted ensembles
// ---------------------------------------------------------------------------

pub const PLANT_DX: usize = 20;
pub const PLANT_D: usize = 10;

/// Synthetic ensemble with known-good runs, for exercising the consensus
/// selection end to end.
pub struct PlantedEnsemble {
    pub runs: Vec<RunArtifact>,
    /// true = planted around the shared ground truth (possibly sign-flipped).
    pub labels: Vec<bool>,
    pub x: ViewDataset,
    pub eval: PairedEval,
}

fn perturbed(base: &Matrix, noise: f64, rng: &mut RngStream) -> Matrix {
    Matrix::from_fn(base.rows(), base.cols(), |i, j| {
        base.get(i, j) + noise * rng.normal()
    })
}

/// Good runs share one ground-truth projection set (a latent subspace W*
/// with the orthogonal cross-view relation folded in) plus Gaussian
/// perturbations; flipped runs negate the y side, bad runs are fresh random
/// projections. Run order is shuffled; labels follow the shuffle.
pub fn planted_ensemble(
    n_good: usize,
    n_flipped: usize,
    n_bad: usize,
    noise: f64,
    rng: &mut RngStream,
) -> PlantedEnsemble {
    assert!(n_good + n_flipped >= 1, "need at least one planted run");
    let d_x = PLANT_DX;
    let d = PLANT_D;
    let n = 600;

    // orthogonal cross-view relation y = R x
    let a = Matrix::from_fn(d_x, d_x, |_, _| rng.uniform() - 0.5);
    let (u, _, v) = thin_svd(&a).expect("svd of random square");
    let r_true = matmul_nt(&u, &v).expect("orthogonal factor");
    // ground-truth projection with orthonormal rows
    let g = Matrix::from_fn(d_x, d, |_, _| rng.uniform() - 0.5);
    let (gu, _, _) = thin_svd(&g).expect("svd of random basis");
    let w_star = gu.transpose(); // d x d_x, W* W*^T = I
    let wy_star = matmul(&w_star, &r_true.transpose()).expect("w* r^T");
    let vx_star = w_star.transpose();
    let vy_star = matmul_nt(&r_true, &w_star).expect("r w*^T").clone();

    let x_data = Matrix::from_fn(d_x, n, |_, _| rng.normal());
    let y_data = matmul(&r_true, &x_data).expect("aligned relation");

    let mut runs: Vec<(RunArtifact, bool)> = Vec::new();
    let mut config = TrainConfig::for_variant(Variant::LatentUca);
    config.d = d;
    let mk = |w_x: Matrix, w_y: Matrix, v_x: Matrix, v_y: Matrix, seed: u64| RunArtifact {
        w_x: LinearMap { weight: w_x },
        w_y: LinearMap { weight: w_y },
        v_x: LinearMap { weight: v_x },
        v_y: LinearMap { weight: v_y },
        config: config.clone(),
        run_seed: seed,
        final_losses: LossRecord::default(),
    };

    for j in 0..n_good {
        runs.push((
            mk(
                perturbed(&w_star, noise, rng),
                perturbed(&wy_star, noise, rng),
                perturbed(&vx_star, noise, rng),
                perturbed(&vy_star, noise, rng),
                j as u64,
            ),
            true,
        ));
    }
    for j in 0..n_flipped {
        // y-side latent sign mismatched relative to the x-side
        let mut wy = perturbed(&wy_star, noise, rng);
        wy.scale(-1.0);
        let mut vy = perturbed(&vy_star, noise, rng);
        vy.scale(-1.0);
        runs.push((
            mk(
                perturbed(&w_star, noise, rng),
                wy,
                perturbed(&vx_star, noise, rng),
                vy,
                (n_good + j) as u64,
            ),
            true,
        ));
    }
    let scale = (1.0 / d_x as f64).sqrt();
    for j in 0..n_bad {
        runs.push((
            mk(
                Matrix::from_fn(d, d_x, |_, _| rng.uniform_symmetric(scale)),
                Matrix::from_fn(d, d_x, |_, _| rng.uniform_symmetric(scale)),
                Matrix::from_fn(d_x, d, |_, _| rng.uniform_symmetric(scale)),
                Matrix::from_fn(d_x, d, |_, _| rng.uniform_symmetric(scale)),
                (n_good + n_flipped + j) as u64,
            ),
            false,
        ));
    }

    let order = rng.permutation(runs.len());
    let mut shuffled = Vec::with_capacity(runs.len());
    let mut labels = Vec::with_capacity(runs.len());
    for &i in &order {
        shuffled.push(runs[i].0.clone());
        labels.push(runs[i].1);
    }

    let x = ViewDataset::new(x_data.clone());
    let eval = PairedEval::new(ViewDataset::new(x_data), ViewDataset::new(y_data))
        .expect("aligned planted eval");
    PlantedEnsemble {
        runs: shuffled,
        labels,
        x,
        eval,
    }
}
