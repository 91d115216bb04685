//! Scalar loss terms: orthogonality, reconstruction, cycle, the adversarial
//! generator/discriminator pairs, and the supervised variant's euclidean
//! objective. Values here are batch-averaged so weights are batch-size
//! independent.

use crate::error::{Result, UcaError};
use crate::matrix::{matmul, matmul_nt, Matrix};
use crate::model::UcaParams;

/// Loss weights of the combined generator objective. Order:
/// (latent confusion, domain confusion, reconstruction, orthogonality, cycle).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_xy: f64,
    pub lambda_rec: f64,
    pub lambda_orth: f64,
    pub lambda_cyc: f64,
}

impl LossWeights {
    pub const ALL_UCA: LossWeights = LossWeights {
        lambda_c: 1.0,
        lambda_xy: 1.0,
        lambda_rec: 1.0,
        lambda_orth: 1.0,
        lambda_cyc: 1.0,
    };

    /// Cycle-only variant: no latent discriminator, no orthogonality or
    /// reconstruction terms.
    pub const CYC_UCA: LossWeights = LossWeights {
        lambda_c: 0.0,
        lambda_xy: 1.0,
        lambda_rec: 0.0,
        lambda_orth: 0.0,
        lambda_cyc: 1.0,
    };

    /// Full objective without the cycle constraint.
    pub const LATENT_UCA: LossWeights = LossWeights {
        lambda_c: 1.0,
        lambda_xy: 1.0,
        lambda_rec: 1.0,
        lambda_orth: 1.0,
        lambda_cyc: 0.0,
    };

    pub fn needs_latent_disc(&self) -> bool {
        self.lambda_c > 0.0
    }

    pub fn needs_domain_discs(&self) -> bool {
        self.lambda_xy > 0.0
    }
}

// ---------------------------------------------------------------------------
// Binary cross entropy on raw logits
// ---------------------------------------------------------------------------

/// Numerically stable -z*log(sigmoid(x)) - (1-z)*log(1-sigmoid(x)).
pub fn sigmoid_bce(logit: f64, target: f64) -> f64 {
    debug_assert!(target == 0.0 || target == 1.0);
    logit.max(0.0) - logit * target + (-logit.abs()).exp().ln_1p()
}

/// d sigmoid_bce / d logit = sigmoid(logit) - target.
pub fn bce_grad(logit: f64, target: f64) -> f64 {
    sigmoid(logit) - target
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean BCE over a batch of logits.
pub fn bce_batch(logits: &[f64], targets: &[f64]) -> f64 {
    debug_assert_eq!(logits.len(), targets.len());
    logits
        .iter()
        .zip(targets)
        .map(|(&x, &z)| sigmoid_bce(x, z))
        .sum::<f64>()
        / logits.len() as f64
}

/// Mean BCE against a constant target.
pub fn bce_batch_const(logits: &[f64], target: f64) -> f64 {
    logits.iter().map(|&x| sigmoid_bce(x, target)).sum::<f64>() / logits.len() as f64
}

// ---------------------------------------------------------------------------
// Quadratic building blocks (value + gradient, used by the training tape)
// ---------------------------------------------------------------------------

/// ||pred - target||_F^2 / batch, with gradient 2(pred - target)/batch.
pub fn mse_value_grad(pred: &Matrix, target: &Matrix) -> (f64, Matrix) {
    debug_assert_eq!(pred.shape(), target.shape());
    let b = pred.cols() as f64;
    let mut grad = pred.sub(target);
    let value = grad.frob_norm().powi(2) / b;
    grad.scale(2.0 / b);
    (value, grad)
}

/// ||(1/b) C C^T - I||_F^2 with gradient (4/b)((1/b) C C^T - I) C.
pub fn orth_value_grad(c: &Matrix) -> (f64, Matrix) {
    let (d, b) = c.shape();
    let bf = b as f64;
    let mut gram = matmul_nt(c, c).expect("square gram");
    gram.scale(1.0 / bf);
    for i in 0..d {
        let v = gram.get(i, i) - 1.0;
        gram.set(i, i, v);
    }
    let value = gram.frob_norm().powi(2);
    let mut grad = matmul(&gram, c).expect("gram * c");
    grad.scale(4.0 / bf);
    (value, grad)
}

// ---------------------------------------------------------------------------
// Spec-surface loss values
// ---------------------------------------------------------------------------

fn check_codes(c_x: &Matrix, c_y: &Matrix) -> Result<()> {
    if c_x.rows() != c_y.rows() {
        return Err(UcaError::dim(
            "loss_orth",
            format!("codes with {} rows", c_x.rows()),
            format!("{}", c_y.rows()),
        ));
    }
    Ok(())
}

/// Soft whitening penalty on both code matrices.
pub fn loss_orth(c_x: &Matrix, c_y: &Matrix) -> Result<f64> {
    check_codes(c_x, c_y)?;
    Ok(orth_value_grad(c_x).0 + orth_value_grad(c_y).0)
}

/// Autoencoding penalty through the shared space, averaged per sample.
pub fn loss_rec(x: &Matrix, y: &Matrix, params: &UcaParams) -> Result<f64> {
    let rx = params.v_x.project(&params.w_x.project(x)?)?;
    let ry = params.v_y.project(&params.w_y.project(y)?)?;
    Ok(mse_value_grad(&rx, x).0 + mse_value_grad(&ry, y).0)
}

/// Full cycle penalty: to the opposite view and back.
pub fn loss_cyc(x: &Matrix, y: &Matrix, params: &UcaParams) -> Result<f64> {
    let cyc_x = params.v_x.project(&params.w_y.project(
        &params.v_y.project(&params.w_x.project(x)?)?,
    )?)?;
    let cyc_y = params.v_y.project(&params.w_x.project(
        &params.v_x.project(&params.w_y.project(y)?)?,
    )?)?;
    Ok(mse_value_grad(&cyc_x, x).0 + mse_value_grad(&cyc_y, y).0)
}

fn disc_of<'a>(
    d: &'a Option<crate::model::Discriminator>,
    name: &'static str,
) -> Result<&'a crate::model::Discriminator> {
    d.as_ref().ok_or_else(|| {
        UcaError::Precondition(format!("discriminator {name} not instantiated for this variant"))
    })
}

/// The three discriminator objectives. The latent discriminator separates
/// the two code clouds; the domain discriminators compare reconstructions
/// from own codes against reconstructions from the opposite view's codes.
pub fn disc_losses(params: &UcaParams, x: &Matrix, y: &Matrix) -> Result<(f64, f64, f64)> {
    let c_x = params.w_x.project(x)?;
    let c_y = params.w_y.project(y)?;
    let d_c = disc_of(&params.disc_c, "d_c")?;
    let d_x = disc_of(&params.disc_x, "d_x")?;
    let d_y = disc_of(&params.disc_y, "d_y")?;

    let l_dc = bce_batch_const(&d_c.forward(&c_x)?.0, 0.0)
        + bce_batch_const(&d_c.forward(&c_y)?.0, 1.0);

    let vx_cy = params.v_x.project(&c_y)?;
    let vx_cx = params.v_x.project(&c_x)?;
    let l_dx = bce_batch_const(&d_x.forward(&vx_cy)?.0, 0.0)
        + bce_batch_const(&d_x.forward(&vx_cx)?.0, 1.0);

    let vy_cx = params.v_y.project(&c_x)?;
    let vy_cy = params.v_y.project(&c_y)?;
    let l_dy = bce_batch_const(&d_y.forward(&vy_cx)?.0, 0.0)
        + bce_batch_const(&d_y.forward(&vy_cy)?.0, 1.0);

    Ok((l_dc, l_dx, l_dy))
}

/// The generator-side adversarial terms (labels flipped for the latent
/// pair, "fool the domain discriminator" for the cross reconstructions).
pub fn gen_adv_losses(params: &UcaParams, x: &Matrix, y: &Matrix) -> Result<(f64, f64, f64)> {
    let c_x = params.w_x.project(x)?;
    let c_y = params.w_y.project(y)?;
    let d_c = disc_of(&params.disc_c, "d_c")?;
    let d_x = disc_of(&params.disc_x, "d_x")?;
    let d_y = disc_of(&params.disc_y, "d_y")?;

    let l_gc = bce_batch_const(&d_c.forward(&c_x)?.0, 1.0)
        + bce_batch_const(&d_c.forward(&c_y)?.0, 0.0);
    let l_gx = bce_batch_const(&d_x.forward(&params.v_x.project(&c_y)?)?.0, 1.0);
    let l_gy = bce_batch_const(&d_y.forward(&params.v_y.project(&c_x)?)?.0, 1.0);
    Ok((l_gc, l_gx, l_gy))
}

/// The combined generator objective. Terms with zero weight are skipped
/// entirely, so variants without a latent discriminator never touch it.
pub fn total_generator_loss(
    params: &UcaParams,
    x: &Matrix,
    y: &Matrix,
    weights: &LossWeights,
) -> Result<f64> {
    let mut total = 0.0;
    if weights.lambda_c > 0.0 || weights.lambda_xy > 0.0 {
        let c_x = params.w_x.project(x)?;
        let c_y = params.w_y.project(y)?;
        if weights.lambda_c > 0.0 {
            let d_c = disc_of(&params.disc_c, "d_c")?;
            total += weights.lambda_c
                * (bce_batch_const(&d_c.forward(&c_x)?.0, 1.0)
                    + bce_batch_const(&d_c.forward(&c_y)?.0, 0.0));
        }
        if weights.lambda_xy > 0.0 {
            let d_x = disc_of(&params.disc_x, "d_x")?;
            let d_y = disc_of(&params.disc_y, "d_y")?;
            total += weights.lambda_xy
                * bce_batch_const(&d_x.forward(&params.v_x.project(&c_y)?)?.0, 1.0);
            total += weights.lambda_xy
                * bce_batch_const(&d_y.forward(&params.v_y.project(&c_x)?)?.0, 1.0);
        }
    }
    if weights.lambda_rec > 0.0 {
        total += weights.lambda_rec * loss_rec(x, y, params)?;
    }
    if weights.lambda_orth > 0.0 {
        let c_x = params.w_x.project(x)?;
        let c_y = params.w_y.project(y)?;
        total += weights.lambda_orth * loss_orth(&c_x, &c_y)?;
    }
    if weights.lambda_cyc > 0.0 {
        total += weights.lambda_cyc * loss_cyc(x, y, params)?;
    }
    Ok(total)
}

/// The three paired euclidean terms of the supervised variant.
pub fn sup_euclid_losses(params: &UcaParams, x: &Matrix, y: &Matrix) -> Result<f64> {
    if x.cols() != y.cols() {
        return Err(UcaError::dim(
            "sup_losses",
            format!("aligned batches of {}", x.cols()),
            format!("{}", y.cols()),
        ));
    }
    let c_x = params.w_x.project(x)?;
    let c_y = params.w_y.project(y)?;
    let cross_y = params.v_y.project(&c_x)?;
    let cross_x = params.v_x.project(&c_y)?;
    Ok(mse_value_grad(&cross_y, y).0
        + mse_value_grad(&cross_x, x).0
        + mse_value_grad(&c_x, &c_y).0)
}

/// Supervised objective: euclidean matching terms plus reconstruction,
/// orthogonality and cycle at unit weight; no adversarial terms.
pub fn sup_losses(params: &UcaParams, x: &Matrix, y: &Matrix) -> Result<f64> {
    let euclid = sup_euclid_losses(params, x, y)?;
    let c_x = params.w_x.project(x)?;
    let c_y = params.w_y.project(y)?;
    Ok(euclid + loss_rec(x, y, params)? + loss_orth(&c_x, &c_y)? + loss_cyc(x, y, params)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, DiscSet, LinearMap};
    use crate::rng::RngStream;

    const LN2: f64 = std::f64::consts::LN_2;

    fn random_batch(d: usize, b: usize, seed: u64) -> Matrix {
        let mut rng = RngStream::new(seed);
        Matrix::from_fn(d, b, |_, _| rng.uniform() * 2.0 - 1.0)
    }

    fn tiny_params(seed: u64) -> UcaParams {
        init_params(
            6,
            5,
            3,
            8,
            DiscSet {
                latent: true,
                domain: true,
            },
            &mut RngStream::new(seed),
        )
    }

    #[test]
    fn bce_symmetric_point() {
        assert!((sigmoid_bce(0.0, 1.0) - LN2).abs() < 1e-15);
        assert!((sigmoid_bce(0.0, 0.0) - LN2).abs() < 1e-15);
    }

    #[test]
    fn bce_stable_for_large_logits() {
        let v = sigmoid_bce(100.0, 0.0);
        assert!(v.is_finite());
        // exact value is 100 + ln(1 + e^-100); the correction is ~3.7e-44
        assert!((v - 100.0).abs() < 1e-12);
        let v = sigmoid_bce(-1000.0, 1.0);
        assert!((v - 1000.0).abs() < 1e-9);
        assert!(sigmoid_bce(1000.0, 1.0).abs() < 1e-9);
    }

    #[test]
    fn bce_pair_bounded_below_by_2ln2() {
        for &x in &[-3.0, -0.5, 0.0, 0.1, 2.0, 30.0] {
            let pair = sigmoid_bce(x, 1.0) + sigmoid_bce(x, 0.0);
            assert!(pair >= 2.0 * LN2 - 1e-12, "x={x}: {pair}");
        }
        assert!((sigmoid_bce(0.0, 1.0) + sigmoid_bce(0.0, 0.0) - 2.0 * LN2).abs() < 1e-15);
    }

    #[test]
    fn bce_grad_is_sigmoid_minus_target() {
        for &x in &[-5.0, -0.1, 0.0, 0.3, 8.0] {
            for &z in &[0.0, 1.0] {
                let h = 1e-6;
                let numeric = (sigmoid_bce(x + h, z) - sigmoid_bce(x - h, z)) / (2.0 * h);
                assert!((bce_grad(x, z) - numeric).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn orth_zero_for_whitened_codes() {
        // rows orthonormal after 1/sqrt(b) scaling
        let b = 4.0f64.sqrt();
        let c = Matrix::new(
            2,
            4,
            vec![
                b * 0.5,
                b * 0.5,
                b * 0.5,
                b * 0.5,
                b * 0.5,
                -b * 0.5,
                b * 0.5,
                -b * 0.5,
            ],
        )
        .unwrap();
        assert!(loss_orth(&c, &c).unwrap() < 1e-24);
    }

    #[test]
    fn orth_of_zero_codes_is_twice_d() {
        let z = Matrix::zeros(3, 8);
        assert!((loss_orth(&z, &z).unwrap() - 6.0).abs() < 1e-12);
    }

    #[test]
    fn orth_matches_double_loop_oracle() {
        let c_x = random_batch(3, 8, 1);
        let c_y = random_batch(3, 8, 2);
        let oracle = |c: &Matrix| -> f64 {
            let (d, b) = c.shape();
            let mut sum = 0.0;
            for i in 0..d {
                for j in 0..d {
                    let mut g = 0.0;
                    for s in 0..b {
                        g += c.get(i, s) * c.get(j, s);
                    }
                    g /= b as f64;
                    let target = if i == j { 1.0 } else { 0.0 };
                    sum += (g - target) * (g - target);
                }
            }
            sum
        };
        let got = loss_orth(&c_x, &c_y).unwrap();
        assert!((got - oracle(&c_x) - oracle(&c_y)).abs() < 1e-12);
    }

    #[test]
    fn rec_zero_for_perfect_autoencoder() {
        // d = 3 >= d_x = 2: W_x = [I; 0], V_x = [I 0]
        let mut p = tiny_params(3);
        let d = 3;
        let d_x = 2;
        let d_y = 2;
        p.w_x = LinearMap {
            weight: Matrix::from_fn(d, d_x, |i, j| if i == j { 1.0 } else { 0.0 }),
        };
        p.v_x = LinearMap {
            weight: Matrix::from_fn(d_x, d, |i, j| if i == j { 1.0 } else { 0.0 }),
        };
        p.w_y = LinearMap {
            weight: Matrix::from_fn(d, d_y, |i, j| if i == j { 1.0 } else { 0.0 }),
        };
        p.v_y = LinearMap {
            weight: Matrix::from_fn(d_y, d, |i, j| if i == j { 1.0 } else { 0.0 }),
        };
        let x = random_batch(d_x, 5, 4);
        let y = random_batch(d_y, 5, 5);
        assert!(loss_rec(&x, &y, &p).unwrap() < 1e-24);
    }

    #[test]
    fn rec_of_zero_maps_is_input_energy() {
        let mut p = tiny_params(6);
        p.w_x = LinearMap::zeros(3, 6);
        p.w_y = LinearMap::zeros(3, 5);
        p.v_x = LinearMap::zeros(6, 3);
        p.v_y = LinearMap::zeros(5, 3);
        let x = random_batch(6, 4, 7);
        let y = random_batch(5, 4, 8);
        let expect = (x.frob_norm().powi(2) + y.frob_norm().powi(2)) / 4.0;
        assert!((loss_rec(&x, &y, &p).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn rec_matches_elementwise_oracle() {
        let p = tiny_params(9);
        let x = random_batch(6, 4, 10);
        let y = random_batch(5, 4, 11);
        let rx = p.v_x.project(&p.w_x.project(&x).unwrap()).unwrap();
        let ry = p.v_y.project(&p.w_y.project(&y).unwrap()).unwrap();
        let mut oracle = 0.0;
        for i in 0..6 {
            for s in 0..4 {
                let d = rx.get(i, s) - x.get(i, s);
                oracle += d * d;
            }
        }
        for i in 0..5 {
            for s in 0..4 {
                let d = ry.get(i, s) - y.get(i, s);
                oracle += d * d;
            }
        }
        oracle /= 4.0;
        assert!((loss_rec(&x, &y, &p).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn cyc_zero_for_identity_maps() {
        let mut p = tiny_params(12);
        let d = 3;
        p.w_x = LinearMap {
            weight: Matrix::identity(d),
        };
        p.w_y = LinearMap {
            weight: Matrix::identity(d),
        };
        p.v_x = LinearMap {
            weight: Matrix::identity(d),
        };
        p.v_y = LinearMap {
            weight: Matrix::identity(d),
        };
        let x = random_batch(d, 6, 13);
        let y = random_batch(d, 6, 14);
        assert!(loss_cyc(&x, &y, &p).unwrap() < 1e-24);
    }

    #[test]
    fn cyc_with_annihilated_first_map() {
        let mut p = tiny_params(15);
        p.w_x = LinearMap::zeros(3, 6);
        let x = random_batch(6, 4, 16);
        let y = random_batch(5, 4, 17);
        // both cycle paths route through w_x, so both collapse to the input energy
        let expect = (x.frob_norm().powi(2) + y.frob_norm().powi(2)) / 4.0;
        assert!((loss_cyc(&x, &y, &p).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn cyc_matches_composed_matmul_oracle() {
        let p = tiny_params(18);
        let x = random_batch(6, 4, 19);
        let y = random_batch(5, 4, 20);
        let cx = p
            .v_x
            .project(
                &p.w_y
                    .project(&p.v_y.project(&p.w_x.project(&x).unwrap()).unwrap())
                    .unwrap(),
            )
            .unwrap();
        let cy = p
            .v_y
            .project(
                &p.w_x
                    .project(&p.v_x.project(&p.w_y.project(&y).unwrap()).unwrap())
                    .unwrap(),
            )
            .unwrap();
        let oracle =
            (cx.sub(&x).frob_norm().powi(2) + cy.sub(&y).frob_norm().powi(2)) / 4.0;
        assert!((loss_cyc(&x, &y, &p).unwrap() - oracle).abs() < 1e-12);
    }

    fn zero_head(p: &mut UcaParams) {
        for d in [&mut p.disc_c, &mut p.disc_x, &mut p.disc_y]
            .into_iter()
            .flatten()
        {
            d.w3 = Matrix::zeros(1, d.hidden());
            d.b3 = 0.0;
        }
    }

    #[test]
    fn disc_losses_with_zero_heads_are_2ln2() {
        let mut p = tiny_params(21);
        zero_head(&mut p);
        let x = random_batch(6, 4, 22);
        let y = random_batch(5, 4, 23);
        let (dc, dx, dy) = disc_losses(&p, &x, &y).unwrap();
        for v in [dc, dx, dy] {
            assert!((v - 2.0 * LN2).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn identical_code_batches_bound_latent_disc_loss() {
        let mut p = tiny_params(24);
        p.w_y = LinearMap {
            weight: p.w_x.weight.clone(),
        };
        // same batch through equal projections -> identical logits
        let x = random_batch(6, 4, 25);
        let c = p.w_x.project(&x).unwrap();
        let d_c = p.disc_c.as_ref().unwrap();
        let (logits, _) = d_c.forward(&c).unwrap();
        let l = bce_batch_const(&logits, 0.0) + bce_batch_const(&logits, 1.0);
        assert!(l >= 2.0 * LN2 - 1e-12);
    }

    #[test]
    fn disc_losses_match_scalar_oracle() {
        let p = tiny_params(26);
        let x = random_batch(6, 4, 27);
        let y = random_batch(5, 4, 28);
        let (dc, dx, dy) = disc_losses(&p, &x, &y).unwrap();

        let c_x = p.w_x.project(&x).unwrap();
        let c_y = p.w_y.project(&y).unwrap();
        let scalar = |logits: &[f64], z: f64| -> f64 {
            logits
                .iter()
                .map(|&l| {
                    let s = 1.0 / (1.0 + (-l).exp());
                    -(z * s.ln() + (1.0 - z) * (1.0 - s).ln())
                })
                .sum::<f64>()
                / logits.len() as f64
        };
        let dc_oracle = scalar(&p.disc_c.as_ref().unwrap().forward(&c_x).unwrap().0, 0.0)
            + scalar(&p.disc_c.as_ref().unwrap().forward(&c_y).unwrap().0, 1.0);
        assert!((dc - dc_oracle).abs() < 1e-10);

        let vx_cy = p.v_x.project(&c_y).unwrap();
        let vx_cx = p.v_x.project(&c_x).unwrap();
        let dx_oracle = scalar(&p.disc_x.as_ref().unwrap().forward(&vx_cy).unwrap().0, 0.0)
            + scalar(&p.disc_x.as_ref().unwrap().forward(&vx_cx).unwrap().0, 1.0);
        assert!((dx - dx_oracle).abs() < 1e-10);

        let vy_cx = p.v_y.project(&c_x).unwrap();
        let vy_cy = p.v_y.project(&c_y).unwrap();
        let dy_oracle = scalar(&p.disc_y.as_ref().unwrap().forward(&vy_cx).unwrap().0, 0.0)
            + scalar(&p.disc_y.as_ref().unwrap().forward(&vy_cy).unwrap().0, 1.0);
        assert!((dy - dy_oracle).abs() < 1e-10);
    }

    #[test]
    fn gen_losses_with_zero_heads() {
        let mut p = tiny_params(29);
        zero_head(&mut p);
        let x = random_batch(6, 4, 30);
        let y = random_batch(5, 4, 31);
        let (gc, gx, gy) = gen_adv_losses(&p, &x, &y).unwrap();
        assert!((gc - 2.0 * LN2).abs() < 1e-12);
        assert!((gx - LN2).abs() < 1e-12);
        assert!((gy - LN2).abs() < 1e-12);
    }

    #[test]
    fn label_swap_turns_gen_terms_into_disc_terms() {
        let p = tiny_params(32);
        let x = random_batch(6, 4, 33);
        let y = random_batch(5, 4, 34);
        let c_x = p.w_x.project(&x).unwrap();
        let c_y = p.w_y.project(&y).unwrap();
        let d_c = p.disc_c.as_ref().unwrap();
        let (la, _) = d_c.forward(&c_x).unwrap();
        let (lb, _) = d_c.forward(&c_y).unwrap();
        let gen = bce_batch_const(&la, 1.0) + bce_batch_const(&lb, 0.0);
        let disc = bce_batch_const(&la, 0.0) + bce_batch_const(&lb, 1.0);
        let (gc, _, _) = gen_adv_losses(&p, &x, &y).unwrap();
        let (dc, _, _) = disc_losses(&p, &x, &y).unwrap();
        assert!((gc - gen).abs() < 1e-12);
        assert!((dc - disc).abs() < 1e-12);
    }

    #[test]
    fn total_loss_zero_weights() {
        let p = tiny_params(35);
        let x = random_batch(6, 4, 36);
        let y = random_batch(5, 4, 37);
        let zero = LossWeights {
            lambda_c: 0.0,
            lambda_xy: 0.0,
            lambda_rec: 0.0,
            lambda_orth: 0.0,
            lambda_cyc: 0.0,
        };
        assert_eq!(total_generator_loss(&p, &x, &y, &zero).unwrap(), 0.0);
    }

    #[test]
    fn cyc_variant_uses_only_its_terms() {
        // no latent discriminator exists, exactly as the variant trains
        let p = init_params(
            6,
            5,
            3,
            8,
            DiscSet {
                latent: false,
                domain: true,
            },
            &mut RngStream::new(38),
        );
        let x = random_batch(6, 4, 39);
        let y = random_batch(5, 4, 40);
        let total = total_generator_loss(&p, &x, &y, &LossWeights::CYC_UCA).unwrap();
        let (_, gx, gy) = {
            // latent disc absent: compute domain terms directly
            let c_x = p.w_x.project(&x).unwrap();
            let c_y = p.w_y.project(&y).unwrap();
            let gx = bce_batch_const(
                &p.disc_x
                    .as_ref()
                    .unwrap()
                    .forward(&p.v_x.project(&c_y).unwrap())
                    .unwrap()
                    .0,
                1.0,
            );
            let gy = bce_batch_const(
                &p.disc_y
                    .as_ref()
                    .unwrap()
                    .forward(&p.v_y.project(&c_x).unwrap())
                    .unwrap()
                    .0,
                1.0,
            );
            (0.0, gx, gy)
        };
        let expect = gx + gy + loss_cyc(&x, &y, &p).unwrap();
        assert!((total - expect).abs() < 1e-12);
    }

    #[test]
    fn all_uca_total_is_sum_of_terms() {
        let p = tiny_params(41);
        let x = random_batch(6, 4, 42);
        let y = random_batch(5, 4, 43);
        let total = total_generator_loss(&p, &x, &y, &LossWeights::ALL_UCA).unwrap();
        let (gc, gx, gy) = gen_adv_losses(&p, &x, &y).unwrap();
        let c_x = p.w_x.project(&x).unwrap();
        let c_y = p.w_y.project(&y).unwrap();
        let expect = gc
            + gx
            + gy
            + loss_rec(&x, &y, &p).unwrap()
            + loss_orth(&c_x, &c_y).unwrap()
            + loss_cyc(&x, &y, &p).unwrap();
        assert!((total - expect).abs() < 1e-12);
    }

    #[test]
    fn total_loss_linear_in_weights() {
        let p = tiny_params(44);
        let x = random_batch(6, 4, 45);
        let y = random_batch(5, 4, 46);
        let w1 = LossWeights {
            lambda_c: 0.3,
            lambda_xy: 0.7,
            lambda_rec: 1.1,
            lambda_orth: 0.2,
            lambda_cyc: 0.9,
        };
        let mut w2 = w1;
        w2.lambda_rec *= 2.0;
        w2.lambda_c *= 2.0;
        w2.lambda_xy *= 2.0;
        w2.lambda_orth *= 2.0;
        w2.lambda_cyc *= 2.0;
        let l1 = total_generator_loss(&p, &x, &y, &w1).unwrap();
        let l2 = total_generator_loss(&p, &x, &y, &w2).unwrap();
        assert!((l2 - 2.0 * l1).abs() < 1e-10);
    }

    #[test]
    fn sup_zero_for_identity_on_whitened_aligned_views() {
        // all maps identity and x = y with whitened rows: every term vanishes
        let mut p = tiny_params(47);
        let d = 2;
        for m in [&mut p.w_x, &mut p.w_y, &mut p.v_x, &mut p.v_y] {
            *m = LinearMap {
                weight: Matrix::identity(d),
            };
        }
        let b = 4.0f64.sqrt();
        let x = Matrix::new(
            2,
            4,
            vec![
                b * 0.5,
                b * 0.5,
                b * 0.5,
                b * 0.5,
                b * 0.5,
                -b * 0.5,
                b * 0.5,
                -b * 0.5,
            ],
        )
        .unwrap();
        let total = sup_losses(&p, &x, &x).unwrap();
        assert!(total < 1e-20, "{total}");
    }

    #[test]
    fn sup_euclid_zero_maps_is_input_energy() {
        let mut p = tiny_params(48);
        p.w_x = LinearMap::zeros(3, 6);
        p.w_y = LinearMap::zeros(3, 5);
        p.v_x = LinearMap::zeros(6, 3);
        p.v_y = LinearMap::zeros(5, 3);
        let x = random_batch(6, 4, 49);
        let y = random_batch(5, 4, 50);
        let expect = (y.frob_norm().powi(2) + x.frob_norm().powi(2)) / 4.0;
        assert!((sup_euclid_losses(&p, &x, &y).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn sup_total_matches_term_oracle() {
        let p = tiny_params(51);
        let x = random_batch(6, 4, 52);
        let y = random_batch(5, 4, 53);
        let c_x = p.w_x.project(&x).unwrap();
        let c_y = p.w_y.project(&y).unwrap();
        let expect = sup_euclid_losses(&p, &x, &y).unwrap()
            + loss_rec(&x, &y, &p).unwrap()
            + loss_orth(&c_x, &c_y).unwrap()
            + loss_cyc(&x, &y, &p).unwrap();
        assert!((sup_losses(&p, &x, &y).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn sup_rejects_unaligned_batches() {
        let p = tiny_params(54);
        let x = random_batch(6, 4, 55);
        let y = random_batch(5, 3, 56);
        assert!(sup_losses(&p, &x, &y).is_err());
    }

    #[test]
    fn losses_nonnegative_and_finite() {
        for seed in 0..5 {
            let p = tiny_params(60 + seed);
            let x = random_batch(6, 4, 70 + seed);
            let y = random_batch(5, 4, 80 + seed);
            let vals = [
                loss_rec(&x, &y, &p).unwrap(),
                loss_cyc(&x, &y, &p).unwrap(),
                total_generator_loss(&p, &x, &y, &LossWeights::ALL_UCA).unwrap(),
                sup_losses(&p, &x, &y).unwrap(),
            ];
            for v in vals {
                assert!(v.is_finite() && v >= 0.0, "{v}");
            }
        }
    }
}
