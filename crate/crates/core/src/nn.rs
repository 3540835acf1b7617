//! Plain feed-forward network machinery: dense layers with ReLU hidden
//! activations and a softmax output, exact backpropagation for the mean
//! frame cross-entropy, optional per-unit dropout masks, and Adam.
//!
//! Everything is f64; the returned gradients are checked against central
//! finite differences in the test suite.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// out x in.
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Multi-layer perceptron; `dims` = [input, hidden.., output].
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Gradients mirroring [`Mlp`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub layers: Vec<Dense>,
}

/// Per-hidden-layer dropout scale vectors; entries are `0` (dropped) or
/// `1/(1-p)` (kept, inverted scaling). One fixed mask set is one
/// "sub-network".
#[derive(Debug, Clone)]
pub struct DropoutMasks {
    pub scales: Vec<Array1<f64>>,
}

impl Mlp {
    pub fn zeros(dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .map(|d| Dense { w: Array2::zeros((d[1], d[0])), b: Array1::zeros(d[1]) })
            .collect();
        Mlp { layers }
    }

    /// He-normal initialization for ReLU hidden layers, zero biases.
    pub fn init_he(dims: &[usize], init_seed: u64) -> Self {
        let mut rng = seed::rng(seed::derive(init_seed, "mlp-init"));
        let layers = dims
            .windows(2)
            .map(|d| {
                let std = (2.0 / d[0] as f64).sqrt();
                let w = Array2::from_shape_fn((d[1], d[0]), |_| {
                    std * rng.sample::<f64, _>(StandardNormal)
                });
                Dense { w, b: Array1::zeros(d[1]) }
            })
            .collect();
        Mlp { layers }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].w.ncols()];
        dims.extend(self.layers.iter().map(|l| l.w.nrows()));
        dims
    }

    pub fn num_hidden(&self) -> usize {
        self.layers.len() - 1
    }

    /// Flat mutable views over all parameter tensors, layer by layer
    /// (w then b). Shared layout with [`MlpGrads::slices`] and the
    /// optimizer and checkpoint code.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w.as_slice_mut().unwrap(), l.b.as_slice_mut().unwrap()])
            .collect()
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.as_slice().unwrap(), l.b.as_slice().unwrap()])
            .collect()
    }

    /// Softmax posteriors for a batch (rows = frames). Masks, when given,
    /// scale the hidden activations (MC-dropout sub-network).
    pub fn forward(&self, x: &Array2<f64>, masks: Option<&DropoutMasks>) -> Result<Array2<f64>> {
        Ok(self.forward_cache(x, masks)?.probs)
    }

    fn forward_cache(&self, x: &Array2<f64>, masks: Option<&DropoutMasks>) -> Result<ForwardCache> {
        if x.ncols() != self.layers[0].w.ncols() {
            return Err(Error::ShapeMismatch {
                detail: format!("input has {} columns, network expects {}", x.ncols(), self.layers[0].w.ncols()),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "network input".to_string() });
        }
        if let Some(m) = masks {
            assert_eq!(m.scales.len(), self.num_hidden(), "one mask per hidden layer");
        }

        let mut pre: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        let mut act: Vec<Array2<f64>> = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = cur.dot(&layer.w.t()) + &layer.b;
            if i + 1 < self.layers.len() {
                let mut a = z.mapv(|v| v.max(0.0));
                if let Some(m) = masks {
                    a = a * &m.scales[i];
                }
                pre.push(z);
                act.push(a.clone());
                cur = a;
            } else {
                pre.push(z);
            }
        }
        let probs = softmax_rows(pre.last().unwrap());
        Ok(ForwardCache { input: x.clone(), pre, act, probs })
    }

    /// Mean frame cross-entropy against per-frame state targets, with exact
    /// gradients for every parameter and for the input rows.
    pub fn ce_backprop(
        &self,
        x: &Array2<f64>,
        targets: &[usize],
        masks: Option<&DropoutMasks>,
    ) -> Result<CeBackprop> {
        let num_classes = self.layers.last().unwrap().w.nrows();
        if targets.len() != x.nrows() {
            return Err(Error::ShapeMismatch {
                detail: format!("{} targets for {} frames", targets.len(), x.nrows()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= num_classes) {
            return Err(Error::StateOutOfRange { state: bad, num_states: num_classes });
        }

        let cache = self.forward_cache(x, masks)?;
        let batch = x.nrows() as f64;
        let mut loss = 0.0;
        let mut delta = cache.probs.clone();
        for (i, &t) in targets.iter().enumerate() {
            loss -= cache.probs[[i, t]].max(f64::MIN_POSITIVE).ln();
            delta[[i, t]] -= 1.0;
        }
        loss /= batch;
        delta /= batch;

        let mut grads = Vec::with_capacity(self.layers.len());
        let mut d = delta; // gradient w.r.t. the pre-activation of the current layer
        for i in (0..self.layers.len()).rev() {
            let upstream_act: &Array2<f64> = if i == 0 { &cache.input } else { &cache.act[i - 1] };
            let gw = d.t().dot(upstream_act);
            let gb = d.sum_axis(Axis(0));
            grads.push(Dense { w: gw, b: gb });
            let mut da = d.dot(&self.layers[i].w);
            if i > 0 {
                if let Some(m) = masks {
                    da = da * &m.scales[i - 1];
                }
                ndarray::Zip::from(&mut da).and(&cache.pre[i - 1]).for_each(|g, &z| {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            d = da;
        }
        grads.reverse();
        Ok(CeBackprop { loss, grads: MlpGrads { layers: grads }, input_grad: d, probs: cache.probs })
    }
}

pub struct CeBackprop {
    pub loss: f64,
    pub grads: MlpGrads,
    pub input_grad: Array2<f64>,
    pub probs: Array2<f64>,
}

struct ForwardCache {
    input: Array2<f64>,
    /// Pre-activations per layer.
    pre: Vec<Array2<f64>>,
    /// Post-ReLU (and post-mask) hidden activations.
    act: Vec<Array2<f64>>,
    probs: Array2<f64>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrads {
            layers: mlp
                .layers
                .iter()
                .map(|l| Dense { w: Array2::zeros(l.w.raw_dim()), b: Array1::zeros(l.b.raw_dim()) })
                .collect(),
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.as_slice().unwrap(), l.b.as_slice().unwrap()])
            .collect()
    }

    pub fn add_scaled(&mut self, other: &MlpGrads, scale: f64) {
        for (a, o) in self.layers.iter_mut().zip(&other.layers) {
            a.w.scaled_add(scale, &o.w);
            a.b.scaled_add(scale, &o.b);
        }
    }
}

/// Row-wise stable softmax.
pub fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut out = z.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Draw one dropout mask set (one sub-network) for the hidden layers.
pub fn sample_masks<R: Rng>(hidden_dims: &[usize], drop_prob: f64, rng: &mut R) -> DropoutMasks {
    let keep = 1.0 - drop_prob;
    let scales = hidden_dims
        .iter()
        .map(|&d| {
            Array1::from_iter((0..d).map(|_| if rng.gen::<f64>() < drop_prob { 0.0 } else { 1.0 / keep }))
        })
        .collect();
    DropoutMasks { scales }
}

/// Adam over an arbitrary list of parameter slices (shared layout between
/// model and gradients).
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, param_lens: &[usize]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) {
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(&mut self.v)) {
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn toy_mlp(seed_val: u64) -> Mlp {
        Mlp::init_he(&[5, 7, 6, 4], seed_val)
    }

    fn toy_batch(rows: usize, cols: usize, seed_val: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = seed::rng(seed_val);
        let x = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0));
        let y = (0..rows).map(|_| rng.gen_range(0..4)).collect();
        (x, y)
    }

    #[test]
    fn zero_network_outputs_uniform() {
        let mlp = Mlp::zeros(&[39, 100, 100, 95]);
        let x = Array2::zeros((3, 39));
        let p = mlp.forward(&x, None).unwrap();
        for v in p.iter() {
            assert!((v - 1.0 / 95.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mlp = toy_mlp(1);
        let (x, _) = toy_batch(11, 5, 2);
        let p = mlp.forward(&x, None).unwrap();
        for row in p.rows() {
            let s: f64 = row.sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn uniform_output_ce_is_ln_classes() {
        let mlp = Mlp::zeros(&[5, 7, 6, 95]);
        let (x, _) = toy_batch(4, 5, 3);
        let y = vec![0, 1, 2, 3];
        let bp = mlp.ce_backprop(&x, &y, None).unwrap();
        assert!((bp.loss - (95.0f64).ln()).abs() < 1e-9, "loss {}", bp.loss);
    }

    #[test]
    fn near_one_hot_output_gives_near_zero_loss () {
        // Drive one logit to a huge value so the softmax is effectively
        // one-hot on the correct state.
        let mut mlp = Mlp::zeros(&[5, 7, 6, 4]);
        mlp.layers.last_mut().unwrap().b[2] = 60.0;
        let (x, _) = toy_batch(3, 5, 4);
        let bp = mlp.ce_backprop(&x, &[2, 2, 2], None).unwrap();
        assert!(bp.loss.abs() < 1e-12, "loss {}", bp.loss);
    }

    #[test]
    fn state_out_of_range_is_rejected() {
        let mlp = toy_mlp(5);
        let (x, _) = toy_batch(2, 5, 6);
        assert!(matches!(
            mlp.ce_backprop(&x, &[0, 17], None),
            Err(Error::StateOutOfRange { state: 17, .. })
        ));
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mlp = toy_mlp(7);
        let (x, y) = toy_batch(9, 5, 8);
        let bp = mlp.ce_backprop(&x, &y, None).unwrap();
        let analytic = bp.grads;

        let mut rng = seed::rng(9);
        let h = 1e-4;
        let slices = mlp.param_slices();
        let grad_slices = analytic.slices();
        for _ in 0..60 {
            let t = rng.gen_range(0..slices.len());
            let i = rng.gen_range(0..slices[t].len());
            let mut plus = mlp.clone();
            let mut minus = mlp.clone();
            plus.param_slices_mut()[t][i] += h;
            minus.param_slices_mut()[t][i] -= h;
            let lp = plus.ce_backprop(&x, &y, None).unwrap().loss;
            let lm = minus.ce_backprop(&x, &y, None).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            let a = grad_slices[t][i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-4, "tensor {t} idx {i}: analytic {a} fd {fd} rel {rel}");
        }
    }

    #[test]
    fn input_gradients_match_finite_differences() {
        let mlp = toy_mlp(10);
        let (x, y) = toy_batch(6, 5, 11);
        let bp = mlp.ce_backprop(&x, &y, None).unwrap();

        let mut rng = seed::rng(12);
        let h = 1e-4;
        for _ in 0..30 {
            let r = rng.gen_range(0..x.nrows());
            let c = rng.gen_range(0..x.ncols());
            let mut plus = x.clone();
            let mut minus = x.clone();
            plus[[r, c]] += h;
            minus[[r, c]] -= h;
            let lp = mlp.ce_backprop(&plus, &y, None).unwrap().loss;
            let lm = mlp.ce_backprop(&minus, &y, None).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            let a = bp.input_grad[[r, c]];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-4, "({r},{c}): analytic {a} fd {fd} rel {rel}");
        }
    }

    #[test]
    fn masked_gradients_match_finite_differences() {
        let mlp = toy_mlp(13);
        let (x, y) = toy_batch(6, 5, 14);
        let mut rng = seed::rng(15);
        let masks = sample_masks(&[7, 6], 0.3, &mut rng);
        let bp = mlp.ce_backprop(&x, &y, Some(&masks)).unwrap();
        let grad_slices_owned = bp.grads;
        let grad_slices = grad_slices_owned.slices();

        let h = 1e-4;
        let mut rng = seed::rng(16);
        for _ in 0..40 {
            let t = rng.gen_range(0..grad_slices.len());
            let i = rng.gen_range(0..grad_slices[t].len());
            let mut plus = mlp.clone();
            let mut minus = mlp.clone();
            plus.param_slices_mut()[t][i] += h;
            minus.param_slices_mut()[t][i] -= h;
            let lp = plus.ce_backprop(&x, &y, Some(&masks)).unwrap().loss;
            let lm = minus.ce_backprop(&x, &y, Some(&masks)).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            let a = grad_slices[t][i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-4, "tensor {t} idx {i}: analytic {a} fd {fd} rel {rel}");
        }
    }

    #[test]
    fn zero_first_layer_kills_input_gradient() {
        let mut mlp = toy_mlp(17);
        mlp.layers[0].w.fill(0.0);
        mlp.layers[0].b.fill(0.0);
        let (x, y) = toy_batch(4, 5, 18);
        let bp = mlp.ce_backprop(&x, &y, None).unwrap();
        assert!(bp.input_grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn adam_reduces_loss_on_toy_problem() {
        let mut mlp = toy_mlp(19);
        // Learnable labels: class from the sign pattern of the inputs.
        let (x, _) = toy_batch(32, 5, 20);
        let y: Vec<usize> =
            x.rows().into_iter().map(|r| (r[0] > 0.0) as usize + 2 * (r[1] > 0.0) as usize).collect();
        let lens: Vec<usize> = mlp.param_slices().iter().map(|s| s.len()).collect();
        let mut opt = Adam::new(1e-2, &lens);
        let first = mlp.ce_backprop(&x, &y, None).unwrap().loss;
        let mut last = first;
        for _ in 0..300 {
            let bp = mlp.ce_backprop(&x, &y, None).unwrap();
            last = bp.loss;
            let mut params = mlp.param_slices_mut();
            opt.step(&mut params, &bp.grads.slices());
        }
        assert!(last < first * 0.2, "loss {first} -> {last}");
    }
}
