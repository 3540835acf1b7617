//! Mean-field Gaussian variational posterior over MLP weights.
//!
//! Each parameter has a mean `mu` and a pre-std `rho` with
//! `sigma = softplus(rho)`, under a standard-normal prior. Prediction draws
//! whole weight samples `theta = mu + sigma * zeta` and reuses the plain
//! [`Mlp`] forward. Training maximizes the ELBO with a one-sample Monte
//! Carlo estimate of the expected cross-entropy using the local
//! reparameterization trick (noise on pre-activations instead of weights),
//! plus the closed-form KL divergence to the prior.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::nn::{softmax_rows, Dense, Mlp};
use crate::seed;

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of [`softplus`], used to pin an initial sigma.
pub fn softplus_inv(y: f64) -> f64 {
    (y.exp() - 1.0).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianDense {
    pub w_mu: Array2<f64>,
    pub w_rho: Array2<f64>,
    pub b_mu: Array1<f64>,
    pub b_rho: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnnPosterior {
    pub layers: Vec<GaussianDense>,
}

/// Gradients mirroring [`BnnPosterior`].
#[derive(Debug, Clone)]
pub struct BnnGrads {
    pub layers: Vec<GaussianDense>,
}

impl BnnPosterior {
    /// He-normal means, constant `rho` chosen so sigma starts at
    /// `init_sigma`, zero bias means.
    pub fn init(dims: &[usize], init_sigma: f64, init_seed: u64) -> Self {
        let mean_net = Mlp::init_he(dims, init_seed);
        let rho0 = softplus_inv(init_sigma);
        let layers = mean_net
            .layers
            .into_iter()
            .map(|l| GaussianDense {
                w_rho: Array2::from_elem(l.w.raw_dim(), rho0),
                b_rho: Array1::from_elem(l.b.raw_dim(), rho0),
                w_mu: l.w,
                b_mu: l.b,
            })
            .collect();
        BnnPosterior { layers }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].w_mu.ncols()];
        dims.extend(self.layers.iter().map(|l| l.w_mu.nrows()));
        dims
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.w_mu.as_slice_mut().unwrap(),
                    l.w_rho.as_slice_mut().unwrap(),
                    l.b_mu.as_slice_mut().unwrap(),
                    l.b_rho.as_slice_mut().unwrap(),
                ]
            })
            .collect()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.w_mu.as_slice().unwrap(),
                    l.w_rho.as_slice().unwrap(),
                    l.b_mu.as_slice().unwrap(),
                    l.b_rho.as_slice().unwrap(),
                ]
            })
            .collect()
    }

    /// Draw one concrete network `theta = mu + softplus(rho) * zeta`.
    pub fn sample_weights<R: Rng>(&self, rng: &mut R) -> Mlp {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let w = ndarray::Zip::from(&l.w_mu).and(&l.w_rho).map_collect(|&mu, &rho| {
                    mu + softplus(rho) * rng.sample::<f64, _>(StandardNormal)
                });
                let b = ndarray::Zip::from(&l.b_mu).and(&l.b_rho).map_collect(|&mu, &rho| {
                    mu + softplus(rho) * rng.sample::<f64, _>(StandardNormal)
                });
                Dense { w, b }
            })
            .collect();
        Mlp { layers }
    }

    /// The posterior mean network (sigma ignored).
    pub fn mean_network(&self) -> Mlp {
        let layers = self
            .layers
            .iter()
            .map(|l| Dense { w: l.w_mu.clone(), b: l.b_mu.clone() })
            .collect();
        Mlp { layers }
    }

    /// Closed-form `KL[q || N(0, I)] = sum (mu^2 + sigma^2 - 1 - ln sigma^2) / 2`.
    pub fn kld(&self) -> f64 {
        let mut total = 0.0;
        for l in &self.layers {
            for (&mu, &rho) in l.w_mu.iter().zip(l.w_rho.iter()) {
                total += kld_term(mu, rho);
            }
            for (&mu, &rho) in l.b_mu.iter().zip(l.b_rho.iter()) {
                total += kld_term(mu, rho);
            }
        }
        total
    }
}

fn kld_term(mu: f64, rho: f64) -> f64 {
    let sigma = softplus(rho);
    (mu * mu + sigma * sigma - 1.0 - (sigma * sigma).ln()) / 2.0
}

fn kld_grads(mu: f64, rho: f64) -> (f64, f64) {
    let sigma = softplus(rho);
    let dmu = mu;
    let dsigma = sigma - 1.0 / sigma;
    (dmu, dsigma * sigmoid(rho))
}

/// Negative-ELBO loss for one batch:
/// `mean-frame CE under one local-reparameterization sample
///  + kld_weight * KL[q || prior]`,
/// with exact gradients for every `mu` and `rho`. The activation noise is
/// drawn deterministically from `noise_seed`, so the loss is a fixed
/// differentiable function of the parameters (which is what the
/// finite-difference checks rely on).
pub struct ElboOut {
    /// CE + kld_weight * KLD (the optimized objective).
    pub loss: f64,
    /// The cross-entropy component alone, for trend reporting.
    pub ce: f64,
    pub grads: BnnGrads,
}

pub fn elbo_loss(
    posterior: &BnnPosterior,
    x: &Array2<f64>,
    targets: &[usize],
    kld_weight: f64,
    noise_seed: u64,
) -> Result<ElboOut> {
    if kld_weight < 0.0 {
        return Err(Error::InvalidConfig { detail: "kld_weight must be >= 0".to_string() });
    }
    let num_classes = posterior.layers.last().unwrap().w_mu.nrows();
    if targets.len() != x.nrows() {
        return Err(Error::ShapeMismatch {
            detail: format!("{} targets for {} frames", targets.len(), x.nrows()),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= num_classes) {
        return Err(Error::StateOutOfRange { state: bad, num_states: num_classes });
    }
    for l in &posterior.layers {
        if l.w_rho.iter().chain(l.b_rho.iter()).any(|r| !softplus(*r).is_finite()) {
            return Err(Error::NonFinite { context: "posterior sigma".to_string() });
        }
    }

    let mut rng = seed::rng(seed::derive(noise_seed, "elbo-noise"));
    let batch = x.nrows();

    // Forward with local reparameterization:
    //   gamma = a mu_W^T + mu_b
    //   v     = a^2 sigma_W^2^T + sigma_b^2
    //   z     = gamma + sqrt(v) .* zeta
    struct LayerCache {
        input: Array2<f64>,
        zeta: Array2<f64>,
        std: Array2<f64>,
        pre: Array2<f64>,
    }
    let mut caches: Vec<LayerCache> = Vec::with_capacity(posterior.layers.len());
    let mut cur = x.clone();
    for (i, l) in posterior.layers.iter().enumerate() {
        let sigma_w2 = l.w_rho.mapv(|r| softplus(r).powi(2));
        let sigma_b2 = l.b_rho.mapv(|r| softplus(r).powi(2));
        let gamma = cur.dot(&l.w_mu.t()) + &l.b_mu;
        let v = cur.mapv(|a| a * a).dot(&sigma_w2.t()) + &sigma_b2;
        let std = v.mapv(f64::sqrt);
        let zeta = Array2::from_shape_fn((batch, l.w_mu.nrows()), |_| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let z = &gamma + &(&std * &zeta);
        let next = if i + 1 < posterior.layers.len() { z.mapv(|v| v.max(0.0)) } else { z.clone() };
        caches.push(LayerCache { input: cur, zeta, std, pre: z });
        cur = next;
    }
    let probs = softmax_rows(&caches.last().unwrap().pre);

    let mut ce = 0.0;
    let mut delta = probs.clone();
    for (i, &t) in targets.iter().enumerate() {
        ce -= probs[[i, t]].max(f64::MIN_POSITIVE).ln();
        delta[[i, t]] -= 1.0;
    }
    ce /= batch as f64;
    delta /= batch as f64;

    // Backward.
    let mut grads: Vec<GaussianDense> = posterior
        .layers
        .iter()
        .map(|l| GaussianDense {
            w_mu: Array2::zeros(l.w_mu.raw_dim()),
            w_rho: Array2::zeros(l.w_rho.raw_dim()),
            b_mu: Array1::zeros(l.b_mu.raw_dim()),
            b_rho: Array1::zeros(l.b_rho.raw_dim()),
        })
        .collect();

    let mut dz = delta;
    for i in (0..posterior.layers.len()).rev() {
        let l = &posterior.layers[i];
        let c = &caches[i];
        let sigma_w = l.w_rho.mapv(softplus);
        let sigma_b = l.b_rho.mapv(softplus);

        // Mean path.
        grads[i].w_mu = dz.t().dot(&c.input);
        grads[i].b_mu = dz.sum_axis(Axis(0));

        // Variance path: dv = dz * zeta / (2 sqrt(v)).
        let dv = &dz * &c.zeta / (2.0 * &c.std);
        let a2 = c.input.mapv(|a| a * a);
        let dsigma_w2 = dv.t().dot(&a2);
        let dsigma_b2 = dv.sum_axis(Axis(0));
        // d sigma^2 / d rho = 2 sigma * sigmoid(rho).
        grads[i].w_rho = ndarray::Zip::from(&dsigma_w2)
            .and(&sigma_w)
            .and(&l.w_rho)
            .map_collect(|&g, &s, &r| g * 2.0 * s * sigmoid(r));
        grads[i].b_rho = ndarray::Zip::from(&dsigma_b2)
            .and(&sigma_b)
            .and(&l.b_rho)
            .map_collect(|&g, &s, &r| g * 2.0 * s * sigmoid(r));

        if i > 0 {
            let sigma_w2 = sigma_w.mapv(|s| s * s);
            let da = dz.dot(&l.w_mu) + 2.0 * &c.input * &dv.dot(&sigma_w2);
            // ReLU gate of the previous layer.
            let mut da = da;
            ndarray::Zip::from(&mut da).and(&caches[i - 1].pre).for_each(|g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            dz = da;
        }
    }

    // KLD term.
    let mut loss = ce;
    if kld_weight > 0.0 {
        loss += kld_weight * posterior.kld();
    }
    for (g, l) in grads.iter_mut().zip(&posterior.layers) {
        if kld_weight > 0.0 {
            ndarray::Zip::from(&mut g.w_mu)
                .and(&mut g.w_rho)
                .and(&l.w_mu)
                .and(&l.w_rho)
                .for_each(|gm, gr, &mu, &rho| {
                    let (dmu, drho) = kld_grads(mu, rho);
                    *gm += kld_weight * dmu;
                    *gr += kld_weight * drho;
                });
            ndarray::Zip::from(&mut g.b_mu)
                .and(&mut g.b_rho)
                .and(&l.b_mu)
                .and(&l.b_rho)
                .for_each(|gm, gr, &mu, &rho| {
                    let (dmu, drho) = kld_grads(mu, rho);
                    *gm += kld_weight * dmu;
                    *gr += kld_weight * drho;
                });
        }
    }

    Ok(ElboOut { loss, ce, grads: BnnGrads { layers: grads } })
}

impl BnnGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.w_mu.as_slice().unwrap(),
                    l.w_rho.as_slice().unwrap(),
                    l.b_mu.as_slice().unwrap(),
                    l.b_rho.as_slice().unwrap(),
                ]
            })
            .collect()
    }
}
