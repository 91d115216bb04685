//! The seven networks: four linear projections between the views and the
//! shared space, and three discriminators (two hidden layers of 2048 with
//! batch norm and ReLU, logit head).
//!
//! Forward passes record everything the exact backward pass needs. Batch
//! norm uses current-minibatch statistics and the backward pass carries the
//! full Jacobian through those statistics; finite-difference audits in the
//! test suites hold this to a relative error below 1e-4.

use crate::error::{Result, UcaError};
use crate::matrix::{acc_mul_nt, matmul, matmul_tn, Matrix};
use crate::rng::RngStream;

pub const BN_EPS: f64 = 1e-5;
pub const DEFAULT_HIDDEN: usize = 2048;

/// Bias-free linear projection; data is centered so the CCA analogy stays
/// exact.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap {
    pub weight: Matrix, // d_out x d_in
}

impl LinearMap {
    pub fn zeros(d_out: usize, d_in: usize) -> Self {
        LinearMap {
            weight: Matrix::zeros(d_out, d_in),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.rows()
    }

    /// weight * batch
    pub fn project(&self, batch: &Matrix) -> Result<Matrix> {
        if batch.rows() != self.d_in() {
            return Err(UcaError::dim(
                "project",
                format!("batch with {} rows", self.d_in()),
                format!("{}", batch.rows()),
            ));
        }
        matmul(&self.weight, batch)
    }
}

/// Domain-confusion classifier emitting one raw logit per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator {
    pub w1: Matrix, // h x d_in
    pub b1: Vec<f64>,
    pub gamma1: Vec<f64>,
    pub beta1: Vec<f64>,
    pub w2: Matrix, // h x h
    pub b2: Vec<f64>,
    pub gamma2: Vec<f64>,
    pub beta2: Vec<f64>,
    pub w3: Matrix, // 1 x h
    pub b3: f64,
}

/// Everything the backward pass needs from one forward call.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Matrix,
    xhat1: Matrix,
    inv_std1: Vec<f64>,
    r1: Matrix,
    xhat2: Matrix,
    inv_std2: Vec<f64>,
    r2: Matrix,
}

/// Gradients for one discriminator, same tensor layout as the parameters.
#[derive(Debug, Clone)]
pub struct DiscGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub gamma1: Vec<f64>,
    pub beta1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub gamma2: Vec<f64>,
    pub beta2: Vec<f64>,
    pub w3: Matrix,
    pub b3: f64,
}

impl DiscGrads {
    pub fn zeros_like(d: &Discriminator) -> Self {
        DiscGrads {
            w1: Matrix::zeros(d.w1.rows(), d.w1.cols()),
            b1: vec![0.0; d.b1.len()],
            gamma1: vec![0.0; d.gamma1.len()],
            beta1: vec![0.0; d.beta1.len()],
            w2: Matrix::zeros(d.w2.rows(), d.w2.cols()),
            b2: vec![0.0; d.b2.len()],
            gamma2: vec![0.0; d.gamma2.len()],
            beta2: vec![0.0; d.beta2.len()],
            w3: Matrix::zeros(d.w3.rows(), d.w3.cols()),
            b3: 0.0,
        }
    }
}

/// Batch norm with minibatch statistics; returns (xhat, inv_std) and writes
/// gamma * xhat + beta into `z` in place.
fn batchnorm_forward(
    z: &mut Matrix,
    gamma: &[f64],
    beta: &[f64],
) -> (Matrix, Vec<f64>) {
    let (h, b) = z.shape();
    let mut xhat = Matrix::zeros(h, b);
    let mut inv_std = vec![0.0; h];
    for r in 0..h {
        let row = z.row(r);
        let mean = row.iter().sum::<f64>() / b as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / b as f64;
        let istd = 1.0 / (var + BN_EPS).sqrt();
        inv_std[r] = istd;
        let xh = xhat.row_mut(r);
        let (g, be) = (gamma[r], beta[r]);
        for (s, v) in z.row_mut(r).iter_mut().enumerate() {
            let x = (*v - mean) * istd;
            xh[s] = x;
            *v = g * x + be;
        }
    }
    (xhat, inv_std)
}

/// Full-Jacobian batch norm backward: given dL/dy, produces dL/dz in place
/// and accumulates dgamma/dbeta when requested.
fn batchnorm_backward(
    dy: &mut Matrix,
    xhat: &Matrix,
    inv_std: &[f64],
    gamma: &[f64],
    grads: Option<(&mut [f64], &mut [f64])>,
) {
    let (h, b) = dy.shape();
    let bf = b as f64;
    let mut gslots = grads;
    for r in 0..h {
        let xh = xhat.row(r);
        let g = gamma[r];
        let istd = inv_std[r];
        let dyr = dy.row_mut(r);
        let mut sum_dxh = 0.0;
        let mut sum_dxh_xh = 0.0;
        let mut dgamma_r = 0.0;
        let mut dbeta_r = 0.0;
        for s in 0..b {
            dgamma_r += dyr[s] * xh[s];
            dbeta_r += dyr[s];
            let dxh = dyr[s] * g;
            sum_dxh += dxh;
            sum_dxh_xh += dxh * xh[s];
        }
        for s in 0..b {
            let dxh = dyr[s] * g;
            dyr[s] = istd * (dxh - sum_dxh / bf - xh[s] * sum_dxh_xh / bf);
        }
        if let Some((dgamma, dbeta)) = gslots.as_mut() {
            dgamma[r] += dgamma_r;
            dbeta[r] += dbeta_r;
        }
    }
}

fn relu_inplace(m: &mut Matrix) {
    for v in m.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// dL/dpre = dL/dpost where post > 0, else 0. `post` is the ReLU output.
fn relu_backward_inplace(dy: &mut Matrix, post: &Matrix) {
    for (d, &p) in dy.as_mut_slice().iter_mut().zip(post.as_slice()) {
        if p <= 0.0 {
            *d = 0.0;
        }
    }
}

impl Discriminator {
    pub fn d_in(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    /// Forward pass over a minibatch (one sample per column) producing raw
    /// logits and the cache for the backward pass.
    pub fn forward(&self, batch: &Matrix) -> Result<(Vec<f64>, ForwardCache)> {
        if batch.rows() != self.d_in() {
            return Err(UcaError::dim(
                "disc_forward",
                format!("batch with {} rows", self.d_in()),
                format!("{}", batch.rows()),
            ));
        }
        if batch.cols() < 2 {
            return Err(UcaError::Precondition(
                "disc_forward needs at least 2 samples for batch statistics".into(),
            ));
        }
        let b = batch.cols();

        let mut z1 = matmul(&self.w1, batch)?;
        for r in 0..z1.rows() {
            let bias = self.b1[r];
            for v in z1.row_mut(r) {
                *v += bias;
            }
        }
        let (xhat1, inv_std1) = batchnorm_forward(&mut z1, &self.gamma1, &self.beta1);
        relu_inplace(&mut z1);
        let r1 = z1;

        let mut z2 = matmul(&self.w2, &r1)?;
        for r in 0..z2.rows() {
            let bias = self.b2[r];
            for v in z2.row_mut(r) {
                *v += bias;
            }
        }
        let (xhat2, inv_std2) = batchnorm_forward(&mut z2, &self.gamma2, &self.beta2);
        relu_inplace(&mut z2);
        let r2 = z2;

        let mut logits = vec![self.b3; b];
        let w3 = self.w3.row(0);
        for (j, &w) in w3.iter().enumerate() {
            let row = r2.row(j);
            for s in 0..b {
                logits[s] += w * row[s];
            }
        }

        Ok((
            logits,
            ForwardCache {
                input: batch.clone(),
                xhat1,
                inv_std1,
                r1,
                xhat2,
                inv_std2,
                r2,
            },
        ))
    }

    /// Exact backward pass from per-sample logit gradients.
    ///
    /// When `grads` is given, parameter gradients accumulate into it (the
    /// discriminator's own training step). When `want_input` is set, returns
    /// dL/dinput (the generator step, discriminator frozen). Either side can
    /// run alone; the shared spine is always computed.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &[f64],
        mut grads: Option<&mut DiscGrads>,
        want_input: bool,
    ) -> Option<Matrix> {
        let (dz2, dz1, dinput) =
            self.backward_spine(cache, dlogits, grads.as_deref_mut(), want_input);
        if let Some(g) = grads {
            acc_mul_nt(&mut g.w2, &dz2, &cache.r1);
            acc_mul_nt(&mut g.w1, &dz1, &cache.input);
        }
        dinput
    }

    /// Everything except the two weight-gradient products: head, batch-norm
    /// and bias gradients plus the dL/dz chain. Returns (dz2, dz1, dinput).
    /// Splitting here lets a two-batch training step fuse the expensive
    /// dW = dz * input^T products over the concatenated batches.
    fn backward_spine(
        &self,
        cache: &ForwardCache,
        dlogits: &[f64],
        mut grads: Option<&mut DiscGrads>,
        want_input: bool,
    ) -> (Matrix, Matrix, Option<Matrix>) {
        let b = cache.input.cols();
        assert_eq!(dlogits.len(), b, "dlogits length");
        let h = self.hidden();

        // head
        let mut dr2 = Matrix::zeros(h, b);
        let w3 = self.w3.row(0);
        for j in 0..h {
            let r2row = cache.r2.row(j);
            let dj = dr2.row_mut(j);
            for s in 0..b {
                dj[s] = w3[j] * dlogits[s];
            }
            if let Some(g) = grads.as_deref_mut() {
                let mut dw3 = 0.0;
                for s in 0..b {
                    dw3 += dlogits[s] * r2row[s];
                }
                let v = g.w3.get(0, j) + dw3;
                g.w3.set(0, j, v);
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            g.b3 += dlogits.iter().sum::<f64>();
        }

        // second block
        relu_backward_inplace(&mut dr2, &cache.r2);
        {
            let gslots = grads
                .as_deref_mut()
                .map(|g| (&mut g.gamma2[..], &mut g.beta2[..]));
            batchnorm_backward(&mut dr2, &cache.xhat2, &cache.inv_std2, &self.gamma2, gslots);
        }
        let dz2 = dr2;
        if let Some(g) = grads.as_deref_mut() {
            for r in 0..h {
                g.b2[r] += dz2.row(r).iter().sum::<f64>();
            }
        }

        // first block
        let mut dr1 = matmul_tn(&self.w2, &dz2).expect("shape fixed at construction");
        relu_backward_inplace(&mut dr1, &cache.r1);
        {
            let gslots = grads
                .as_deref_mut()
                .map(|g| (&mut g.gamma1[..], &mut g.beta1[..]));
            batchnorm_backward(&mut dr1, &cache.xhat1, &cache.inv_std1, &self.gamma1, gslots);
        }
        let dz1 = dr1;
        if let Some(g) = grads.as_deref_mut() {
            for r in 0..h {
                g.b1[r] += dz1.row(r).iter().sum::<f64>();
            }
        }

        let dinput = if want_input {
            Some(matmul_tn(&self.w1, &dz1).expect("shape fixed at construction"))
        } else {
            None
        };
        (dz2, dz1, dinput)
    }

    /// Loss and parameter gradients over a (zero-labeled, one-labeled) batch
    /// pair: the discriminator's own training step. Batch statistics stay
    /// per batch; the weight-gradient products run once over the
    /// concatenated batches.
    pub fn param_grads_pair(
        &self,
        zero_batch: &Matrix,
        one_batch: &Matrix,
    ) -> Result<(f64, DiscGrads)> {
        let mut grads = DiscGrads::zeros_like(self);
        let mut total = 0.0;
        let mut spines = Vec::with_capacity(2);
        let mut caches = Vec::with_capacity(2);
        for (batch, target) in [(zero_batch, 0.0), (one_batch, 1.0)] {
            let (logits, cache) = self.forward(batch)?;
            let b = logits.len() as f64;
            total += logits
                .iter()
                .map(|&l| crate::losses::sigmoid_bce(l, target))
                .sum::<f64>()
                / b;
            let dlogits: Vec<f64> = logits
                .iter()
                .map(|&l| crate::losses::bce_grad(l, target) / b)
                .collect();
            let (dz2, dz1, _) =
                self.backward_spine(&cache, &dlogits, Some(&mut grads), false);
            spines.push((dz2, dz1));
            caches.push(cache);
        }
        let dz2 = spines[0].0.hcat(&spines[1].0);
        let r1 = caches[0].r1.hcat(&caches[1].r1);
        acc_mul_nt(&mut grads.w2, &dz2, &r1);
        let dz1 = spines[0].1.hcat(&spines[1].1);
        let input = caches[0].input.hcat(&caches[1].input);
        acc_mul_nt(&mut grads.w1, &dz1, &input);
        Ok((total, grads))
    }
}

/// The complete parameter set of one training run. Discriminators are only
/// present when their loss weight is active; CycUCA never builds the latent
/// discriminator and the supervised variant builds none.
#[derive(Debug, Clone)]
pub struct UcaParams {
    pub w_x: LinearMap,
    pub w_y: LinearMap,
    pub v_x: LinearMap,
    pub v_y: LinearMap,
    pub disc_c: Option<Discriminator>,
    pub disc_x: Option<Discriminator>,
    pub disc_y: Option<Discriminator>,
}

impl UcaParams {
    pub fn d_x(&self) -> usize {
        self.w_x.d_in()
    }

    pub fn d_y(&self) -> usize {
        self.w_y.d_in()
    }

    pub fn latent_dim(&self) -> usize {
        self.w_x.d_out()
    }
}

fn init_linear(d_out: usize, d_in: usize, rng: &mut RngStream) -> LinearMap {
    let s = (1.0 / d_in as f64).sqrt();
    LinearMap {
        weight: Matrix::from_fn(d_out, d_in, |_, _| rng.uniform_symmetric(s)),
    }
}

pub fn init_discriminator(d_in: usize, hidden: usize, rng: &mut RngStream) -> Discriminator {
    let s1 = (1.0 / d_in as f64).sqrt();
    let s2 = (1.0 / hidden as f64).sqrt();
    Discriminator {
        w1: Matrix::from_fn(hidden, d_in, |_, _| rng.uniform_symmetric(s1)),
        b1: vec![0.0; hidden],
        gamma1: vec![1.0; hidden],
        beta1: vec![0.0; hidden],
        w2: Matrix::from_fn(hidden, hidden, |_, _| rng.uniform_symmetric(s2)),
        b2: vec![0.0; hidden],
        gamma2: vec![1.0; hidden],
        beta2: vec![0.0; hidden],
        w3: Matrix::from_fn(1, hidden, |_, _| rng.uniform_symmetric(s2)),
        b3: 0.0,
    }
}

/// Which discriminators a variant needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscSet {
    pub latent: bool,
    pub domain: bool,
}

/// Fresh parameters: weights uniform in [-sqrt(1/fan_in), sqrt(1/fan_in)],
/// biases zero, batch-norm scale 1 shift 0.
pub fn init_params(
    d_x: usize,
    d_y: usize,
    d: usize,
    hidden: usize,
    discs: DiscSet,
    rng: &mut RngStream,
) -> UcaParams {
    UcaParams {
        w_x: init_linear(d, d_x, rng),
        w_y: init_linear(d, d_y, rng),
        v_x: init_linear(d_x, d, rng),
        v_y: init_linear(d_y, d, rng),
        disc_c: discs.latent.then(|| init_discriminator(d, hidden, rng)),
        disc_x: discs.domain.then(|| init_discriminator(d_x, hidden, rng)),
        disc_y: discs.domain.then(|| init_discriminator(d_y, hidden, rng)),
    }
}

// ---------------------------------------------------------------------------
// Uniform tensor enumeration, used by the optimizer, the serializer and the
// finite-difference audits.
// ---------------------------------------------------------------------------

pub struct TensorView<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a [f64],
}

pub struct TensorViewMut<'a> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: &'a mut [f64],
}

impl Discriminator {
    pub fn tensors(&self, prefix: &str) -> Vec<TensorView<'_>> {
        let h = self.hidden();
        let din = self.d_in();
        vec![
            view(prefix, "w1", h, din, self.w1.as_slice()),
            view(prefix, "b1", h, 1, &self.b1),
            view(prefix, "gamma1", h, 1, &self.gamma1),
            view(prefix, "beta1", h, 1, &self.beta1),
            view(prefix, "w2", h, h, self.w2.as_slice()),
            view(prefix, "b2", h, 1, &self.b2),
            view(prefix, "gamma2", h, 1, &self.gamma2),
            view(prefix, "beta2", h, 1, &self.beta2),
            view(prefix, "w3", 1, h, self.w3.as_slice()),
            view(prefix, "b3", 1, 1, std::slice::from_ref(&self.b3)),
        ]
    }

    pub fn tensors_mut(&mut self, prefix: &str) -> Vec<TensorViewMut<'_>> {
        let h = self.hidden();
        let din = self.d_in();
        vec![
            view_mut(prefix, "w1", h, din, self.w1.as_mut_slice()),
            view_mut(prefix, "b1", h, 1, &mut self.b1),
            view_mut(prefix, "gamma1", h, 1, &mut self.gamma1),
            view_mut(prefix, "beta1", h, 1, &mut self.beta1),
            view_mut(prefix, "w2", h, h, self.w2.as_mut_slice()),
            view_mut(prefix, "b2", h, 1, &mut self.b2),
            view_mut(prefix, "gamma2", h, 1, &mut self.gamma2),
            view_mut(prefix, "beta2", h, 1, &mut self.beta2),
            view_mut(prefix, "w3", 1, h, self.w3.as_mut_slice()),
            view_mut(prefix, "b3", 1, 1, std::slice::from_mut(&mut self.b3)),
        ]
    }
}

impl DiscGrads {
    pub fn tensors(&self, prefix: &str) -> Vec<TensorView<'_>> {
        let h = self.b1.len();
        let din = self.w1.cols();
        vec![
            view(prefix, "w1", h, din, self.w1.as_slice()),
            view(prefix, "b1", h, 1, &self.b1),
            view(prefix, "gamma1", h, 1, &self.gamma1),
            view(prefix, "beta1", h, 1, &self.beta1),
            view(prefix, "w2", h, h, self.w2.as_slice()),
            view(prefix, "b2", h, 1, &self.b2),
            view(prefix, "gamma2", h, 1, &self.gamma2),
            view(prefix, "beta2", h, 1, &self.beta2),
            view(prefix, "w3", 1, h, self.w3.as_slice()),
            view(prefix, "b3", 1, 1, std::slice::from_ref(&self.b3)),
        ]
    }
}

fn view<'a>(prefix: &str, name: &str, rows: usize, cols: usize, data: &'a [f64]) -> TensorView<'a> {
    TensorView {
        name: if prefix.is_empty() {
            name.to_string()
        } else {
            format!("{prefix}.{name}")
        },
        rows,
        cols,
        data,
    }
}

fn view_mut<'a>(
    prefix: &str,
    name: &str,
    rows: usize,
    cols: usize,
    data: &'a mut [f64],
) -> TensorViewMut<'a> {
    TensorViewMut {
        name: if prefix.is_empty() {
            name.to_string()
        } else {
            format!("{prefix}.{name}")
        },
        rows,
        cols,
        data,
    }
}

impl UcaParams {
    /// All parameter tensors in a stable order.
    pub fn tensors(&self) -> Vec<TensorView<'_>> {
        let mut out = vec![
            view("", "w_x", self.w_x.d_out(), self.w_x.d_in(), self.w_x.weight.as_slice()),
            view("", "w_y", self.w_y.d_out(), self.w_y.d_in(), self.w_y.weight.as_slice()),
            view("", "v_x", self.v_x.d_out(), self.v_x.d_in(), self.v_x.weight.as_slice()),
            view("", "v_y", self.v_y.d_out(), self.v_y.d_in(), self.v_y.weight.as_slice()),
        ];
        if let Some(d) = &self.disc_c {
            out.extend(d.tensors("d_c"));
        }
        if let Some(d) = &self.disc_x {
            out.extend(d.tensors("d_x"));
        }
        if let Some(d) = &self.disc_y {
            out.extend(d.tensors("d_y"));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<TensorViewMut<'_>> {
        let (wx_r, wx_c) = (self.w_x.d_out(), self.w_x.d_in());
        let (wy_r, wy_c) = (self.w_y.d_out(), self.w_y.d_in());
        let (vx_r, vx_c) = (self.v_x.d_out(), self.v_x.d_in());
        let (vy_r, vy_c) = (self.v_y.d_out(), self.v_y.d_in());
        let mut out = vec![
            view_mut("", "w_x", wx_r, wx_c, self.w_x.weight.as_mut_slice()),
            view_mut("", "w_y", wy_r, wy_c, self.w_y.weight.as_mut_slice()),
            view_mut("", "v_x", vx_r, vx_c, self.v_x.weight.as_mut_slice()),
            view_mut("", "v_y", vy_r, vy_c, self.v_y.weight.as_mut_slice()),
        ];
        if let Some(d) = &mut self.disc_c {
            out.extend(d.tensors_mut("d_c"));
        }
        if let Some(d) = &mut self.disc_x {
            out.extend(d.tensors_mut("d_x"));
        }
        if let Some(d) = &mut self.disc_y {
            out.extend(d.tensors_mut("d_y"));
        }
        out
    }
}
