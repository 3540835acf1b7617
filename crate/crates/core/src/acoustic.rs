//! The four acoustic-model families mapping 39-dim frames to 95-state
//! posteriors: a deterministic feed-forward network, a deep ensemble, MC
//! dropout, and a mean-field Bayesian network. One enum, shared forward /
//! sampling / gradient surfaces, and seeded mini-batch training.

use ndarray::{Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bnn::{elbo_loss, BnnGrads, BnnPosterior};
use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::nn::{sample_masks, Adam, Mlp, MlpGrads};
use crate::seed;

/// Default architecture: 39 features -> two 100-unit hidden layers -> 95
/// HMM-state posteriors.
pub const DEFAULT_DIMS: [usize; 4] = [39, 100, 100, 95];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Fnn,
    Ensemble,
    Dropout,
    Bnn,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Fnn, ModelKind::Ensemble, ModelKind::Dropout, ModelKind::Bnn];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::Fnn => "fnn",
            ModelKind::Ensemble => "ensemble",
            ModelKind::Dropout => "dropout",
            ModelKind::Bnn => "bnn",
        }
    }

    pub fn parse(s: &str) -> Result<ModelKind> {
        match s {
            "fnn" => Ok(ModelKind::Fnn),
            "ensemble" => Ok(ModelKind::Ensemble),
            "dropout" => Ok(ModelKind::Dropout),
            "bnn" => Ok(ModelKind::Bnn),
            other => Err(Error::InvalidConfig { detail: format!("unknown model kind '{other}'") }),
        }
    }

    /// Whether the family produces multiple predictions per input.
    pub fn is_sampled(&self) -> bool {
        !matches!(self, ModelKind::Fnn)
    }
}

#[derive(Debug, Clone)]
pub enum AcousticModel {
    Fnn(Mlp),
    Ensemble(Vec<Mlp>),
    Dropout {
        mlp: Mlp,
        drop_prob: f64,
        /// Prediction sub-network count (T = 100 by default).
        samples: usize,
    },
    Bnn {
        posterior: BnnPosterior,
        /// Posterior draws averaged at prediction time (T = 5 by default).
        samples: usize,
    },
}

impl AcousticModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            AcousticModel::Fnn(_) => ModelKind::Fnn,
            AcousticModel::Ensemble(_) => ModelKind::Ensemble,
            AcousticModel::Dropout { .. } => ModelKind::Dropout,
            AcousticModel::Bnn { .. } => ModelKind::Bnn,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match self {
            AcousticModel::Fnn(m) => m.dims(),
            AcousticModel::Ensemble(ms) => ms[0].dims(),
            AcousticModel::Dropout { mlp, .. } => mlp.dims(),
            AcousticModel::Bnn { posterior, .. } => posterior.dims(),
        }
    }

    pub fn num_classes(&self) -> usize {
        *self.dims().last().unwrap()
    }

    /// Prediction sample count for sampled families (None for the fNN).
    pub fn num_samples(&self) -> Option<usize> {
        match self {
            AcousticModel::Fnn(_) => None,
            AcousticModel::Ensemble(ms) => Some(ms.len()),
            AcousticModel::Dropout { samples, .. } => Some(*samples),
            AcousticModel::Bnn { samples, .. } => Some(*samples),
        }
    }
}

/// Frames x classes row-stochastic posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorBatch {
    pub probs: Array2<f64>,
}

impl PosteriorBatch {
    pub fn validate(&self) -> Result<()> {
        for row in self.probs.rows() {
            let mut sum = 0.0;
            for &v in row {
                if !(v >= 0.0) {
                    return Err(Error::NonFinite { context: "posterior entry".to_string() });
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::NotNormalized { sum, tol: 1e-6 });
            }
        }
        Ok(())
    }
}

/// Prediction mode. `Mean` averages the family's T samples (deterministic
/// output for the fNN, member average for ensembles); `SingleSample` uses
/// exactly one theta_t. The seed pins the sampling stream; it is ignored
/// where no sampling happens.
#[derive(Debug, Clone, Copy)]
pub enum Mode {
    Mean { seed: u64 },
    SingleSample { seed: u64 },
}

/// One theta_t's posteriors as a concrete network, drawn per family rules.
fn single_sample_net(model: &AcousticModel, seed_val: u64) -> (Mlp, Option<crate::nn::DropoutMasks>) {
    match model {
        AcousticModel::Fnn(m) => (m.clone(), None),
        AcousticModel::Ensemble(ms) => {
            let mut rng = seed::rng(seed::derive(seed_val, "ensemble-pick"));
            (ms[rng.gen_range(0..ms.len())].clone(), None)
        }
        AcousticModel::Dropout { mlp, drop_prob, .. } => {
            let mut rng = seed::rng(seed::derive(seed_val, "dropout-sample"));
            let hidden: Vec<usize> = mlp.dims()[1..mlp.dims().len() - 1].to_vec();
            let masks = sample_masks(&hidden, *drop_prob, &mut rng);
            (mlp.clone(), Some(masks))
        }
        AcousticModel::Bnn { posterior, .. } => {
            let mut rng = seed::rng(seed::derive(seed_val, "bnn-sample"));
            (posterior.sample_weights(&mut rng), None)
        }
    }
}

/// Posteriors for every frame of `feats`.
pub fn forward(model: &AcousticModel, feats: &FeatureMatrix, mode: Mode) -> Result<PosteriorBatch> {
    match mode {
        Mode::SingleSample { seed: s } => {
            let (net, masks) = single_sample_net(model, s);
            Ok(PosteriorBatch { probs: net.forward(&feats.data, masks.as_ref())? })
        }
        Mode::Mean { seed: s } => match model {
            AcousticModel::Fnn(m) => Ok(PosteriorBatch { probs: m.forward(&feats.data, None)? }),
            _ => {
                let t = model.num_samples().unwrap();
                let samples = sample_predictions(model, feats, t, s)?;
                let mut acc = Array2::zeros((feats.num_frames(), model.num_classes()));
                for k in 0..t {
                    acc += &samples.index_axis(Axis(0), k);
                }
                acc /= t as f64;
                Ok(PosteriorBatch { probs: acc })
            }
        },
    }
}

/// T x frames x classes tensor of per-sample posteriors. Deterministic per
/// seed. Ensembles return their members' outputs in member order
/// (sampling-free, `t` ignored); the fNN has no samples and errors.
pub fn sample_predictions(
    model: &AcousticModel,
    feats: &FeatureMatrix,
    t: usize,
    seed_val: u64,
) -> Result<Array3<f64>> {
    let frames = feats.num_frames();
    let classes = model.num_classes();
    match model {
        AcousticModel::Fnn(_) => Err(Error::SingleModeModel),
        AcousticModel::Ensemble(ms) => {
            let mut out = Array3::zeros((ms.len(), frames, classes));
            for (k, m) in ms.iter().enumerate() {
                out.index_axis_mut(Axis(0), k).assign(&m.forward(&feats.data, None)?);
            }
            Ok(out)
        }
        AcousticModel::Dropout { mlp, drop_prob, .. } => {
            let mut rng = seed::rng(seed::derive(seed_val, "dropout-sample"));
            let hidden: Vec<usize> = mlp.dims()[1..mlp.dims().len() - 1].to_vec();
            let mut out = Array3::zeros((t, frames, classes));
            for k in 0..t {
                let masks = sample_masks(&hidden, *drop_prob, &mut rng);
                out.index_axis_mut(Axis(0), k).assign(&mlp.forward(&feats.data, Some(&masks))?);
            }
            Ok(out)
        }
        AcousticModel::Bnn { posterior, .. } => {
            let mut rng = seed::rng(seed::derive(seed_val, "bnn-sample"));
            let mut out = Array3::zeros((t, frames, classes));
            for k in 0..t {
                let net = posterior.sample_weights(&mut rng);
                out.index_axis_mut(Axis(0), k).assign(&net.forward(&feats.data, None)?);
            }
            Ok(out)
        }
    }
}

/// Gradient of the mean frame cross-entropy toward `targets` with respect
/// to the input features. `Mean` averages per-sample input gradients
/// (ensemble: all members; dropout: `dropout_grad_samples` masks; BNN: its
/// T posterior draws), matching the gradient-averaging ablation; the
/// default attack path uses `SingleSample`.
pub fn input_grad(
    model: &AcousticModel,
    feats: &FeatureMatrix,
    targets: &[usize],
    mode: Mode,
    dropout_grad_samples: usize,
) -> Result<(f64, Array2<f64>)> {
    match mode {
        Mode::SingleSample { seed: s } => {
            let (net, masks) = single_sample_net(model, s);
            let bp = net.ce_backprop(&feats.data, targets, masks.as_ref())?;
            Ok((bp.loss, bp.input_grad))
        }
        Mode::Mean { seed: s } => {
            let nets: Vec<(Mlp, Option<crate::nn::DropoutMasks>)> = match model {
                AcousticModel::Fnn(m) => vec![(m.clone(), None)],
                AcousticModel::Ensemble(ms) => ms.iter().map(|m| (m.clone(), None)).collect(),
                AcousticModel::Dropout { mlp, drop_prob, .. } => {
                    let mut rng = seed::rng(seed::derive(s, "dropout-grad"));
                    let hidden: Vec<usize> = mlp.dims()[1..mlp.dims().len() - 1].to_vec();
                    (0..dropout_grad_samples)
                        .map(|_| (mlp.clone(), Some(sample_masks(&hidden, *drop_prob, &mut rng))))
                        .collect()
                }
                AcousticModel::Bnn { posterior, samples } => {
                    let mut rng = seed::rng(seed::derive(s, "bnn-sample"));
                    (0..*samples).map(|_| (posterior.sample_weights(&mut rng), None)).collect()
                }
            };
            let mut loss = 0.0;
            let mut grad = Array2::zeros(feats.data.raw_dim());
            for (net, masks) in &nets {
                let bp = net.ce_backprop(&feats.data, targets, masks.as_ref())?;
                loss += bp.loss;
                grad += &bp.input_grad;
            }
            let n = nets.len() as f64;
            Ok((loss / n, grad / n))
        }
    }
}

/// Parameter gradients per family.
#[derive(Debug, Clone)]
pub enum ModelGrads {
    Mlp(MlpGrads),
    Ensemble(Vec<MlpGrads>),
    Bnn(BnnGrads),
}

/// Mean frame cross-entropy and exact parameter gradients for one batch.
/// Dropout averages over `opts.dropout_grad_samples` sub-networks; the BNN
/// uses the negative ELBO with `opts.kld_weight`.
pub fn ce_loss_and_grads(
    model: &AcousticModel,
    feats: &FeatureMatrix,
    targets: &[usize],
    opts: &GradOpts,
) -> Result<(f64, ModelGrads)> {
    batch_loss_and_grads(model, &feats.data, targets, opts)
}

#[derive(Debug, Clone, Copy)]
pub struct GradOpts {
    pub dropout_grad_samples: usize,
    pub kld_weight: f64,
    pub seed: u64,
}

fn batch_loss_and_grads(
    model: &AcousticModel,
    x: &Array2<f64>,
    targets: &[usize],
    opts: &GradOpts,
) -> Result<(f64, ModelGrads)> {
    match model {
        AcousticModel::Fnn(m) => {
            let bp = m.ce_backprop(x, targets, None)?;
            Ok((bp.loss, ModelGrads::Mlp(bp.grads)))
        }
        AcousticModel::Ensemble(ms) => {
            let mut loss = 0.0;
            let mut grads = Vec::with_capacity(ms.len());
            for m in ms {
                let bp = m.ce_backprop(x, targets, None)?;
                loss += bp.loss;
                grads.push(bp.grads);
            }
            Ok((loss / ms.len() as f64, ModelGrads::Ensemble(grads)))
        }
        AcousticModel::Dropout { mlp, drop_prob, .. } => {
            let n = opts.dropout_grad_samples.max(1);
            let mut rng = seed::rng(seed::derive(opts.seed, "dropout-grad"));
            let hidden: Vec<usize> = mlp.dims()[1..mlp.dims().len() - 1].to_vec();
            let mut loss = 0.0;
            let mut acc = MlpGrads::zeros_like(mlp);
            for _ in 0..n {
                let masks = sample_masks(&hidden, *drop_prob, &mut rng);
                let bp = mlp.ce_backprop(x, targets, Some(&masks))?;
                loss += bp.loss;
                acc.add_scaled(&bp.grads, 1.0 / n as f64);
            }
            Ok((loss / n as f64, ModelGrads::Mlp(acc)))
        }
        AcousticModel::Bnn { posterior, .. } => {
            let out = elbo_loss(posterior, x, targets, opts.kld_weight, opts.seed)?;
            Ok((out.loss, ModelGrads::Bnn(out.grads)))
        }
    }
}

/// Training hyperparameters. Defaults follow the recognizer recipe:
/// Adam at 1e-3, 256-frame batches, 3 cross-entropy epochs plus 3 Viterbi
/// training epochs, dropout 0.2 with 10 gradient sub-nets, ensemble of 5,
/// BNN with 5 prediction draws.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub dims: Vec<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs_ce: usize,
    pub epochs_viterbi: usize,
    /// Set programmatically from the master seed, never from config files.
    #[serde(skip)]
    pub seed: u64,
    pub ensemble_size: usize,
    pub dropout_prob: f64,
    pub dropout_grad_samples: usize,
    pub dropout_samples: usize,
    pub bnn_samples: usize,
    pub bnn_init_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dims: DEFAULT_DIMS.to_vec(),
            learning_rate: 1e-3,
            batch_size: 256,
            epochs_ce: 3,
            epochs_viterbi: 3,
            seed: 0,
            ensemble_size: 5,
            dropout_prob: 0.2,
            dropout_grad_samples: 10,
            dropout_samples: 100,
            bnn_samples: 5,
            bnn_init_sigma: 0.05,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.batch_size > 0
            && self.ensemble_size > 0
            && self.dropout_prob > 0.0
            && self.dropout_prob < 1.0
            && self.dropout_grad_samples > 0
            && self.dropout_samples > 0
            && self.bnn_samples > 0
            && self.bnn_init_sigma > 0.0
            && self.dims.len() >= 2;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig { detail: "non-positive training hyperparameter".to_string() })
        }
    }
}

/// One utterance with per-frame state targets.
#[derive(Debug, Clone)]
pub struct AlignedUtterance {
    pub id: String,
    pub feats: FeatureMatrix,
    pub alignment: Vec<usize>,
}

enum OptState {
    Single(Adam),
    Ensemble(Vec<Adam>),
}

/// Holds a model plus its optimizer state so the cross-entropy phase and
/// the Viterbi-training phase share one optimization trajectory.
pub struct Trainer {
    pub model: AcousticModel,
    cfg: TrainConfig,
    opt: OptState,
    epoch: usize,
    global_batch: u64,
}

impl Trainer {
    pub fn new(kind: ModelKind, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let (model, opt) = match kind {
            ModelKind::Fnn => {
                let m = Mlp::init_he(&cfg.dims, cfg.seed);
                let lens: Vec<usize> = m.param_slices().iter().map(|s| s.len()).collect();
                (AcousticModel::Fnn(m), OptState::Single(Adam::new(cfg.learning_rate, &lens)))
            }
            ModelKind::Ensemble => {
                // Members take literal seeds seed+0..k for distinct inits.
                let members: Vec<Mlp> =
                    (0..cfg.ensemble_size).map(|k| Mlp::init_he(&cfg.dims, cfg.seed + k as u64)).collect();
                let opts = members
                    .iter()
                    .map(|m| {
                        let lens: Vec<usize> = m.param_slices().iter().map(|s| s.len()).collect();
                        Adam::new(cfg.learning_rate, &lens)
                    })
                    .collect();
                (AcousticModel::Ensemble(members), OptState::Ensemble(opts))
            }
            ModelKind::Dropout => {
                let m = Mlp::init_he(&cfg.dims, cfg.seed);
                let lens: Vec<usize> = m.param_slices().iter().map(|s| s.len()).collect();
                (
                    AcousticModel::Dropout {
                        mlp: m,
                        drop_prob: cfg.dropout_prob,
                        samples: cfg.dropout_samples,
                    },
                    OptState::Single(Adam::new(cfg.learning_rate, &lens)),
                )
            }
            ModelKind::Bnn => {
                let p = BnnPosterior::init(&cfg.dims, cfg.bnn_init_sigma, cfg.seed);
                let lens: Vec<usize> = p.param_slices().iter().map(|s| s.len()).collect();
                (
                    AcousticModel::Bnn { posterior: p, samples: cfg.bnn_samples },
                    OptState::Single(Adam::new(cfg.learning_rate, &lens)),
                )
            }
        };
        Ok(Trainer { model, cfg: cfg.clone(), opt, epoch: 0, global_batch: 0 })
    }

    /// One pass over the dataset; returns the mean batch loss.
    pub fn run_epoch(&mut self, data: &[AlignedUtterance]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::Empty { what: "training dataset".to_string() });
        }
        for u in data {
            if u.alignment.len() != u.feats.num_frames() {
                return Err(Error::ShapeMismatch {
                    detail: format!(
                        "utterance {}: {} alignment labels for {} frames",
                        u.id,
                        u.alignment.len(),
                        u.feats.num_frames()
                    ),
                });
            }
        }

        let index: Vec<(u32, u32)> = data
            .iter()
            .enumerate()
            .flat_map(|(u, utt)| (0..utt.feats.num_frames() as u32).map(move |f| (u as u32, f)))
            .collect();
        let batches_per_epoch = index.len().div_ceil(self.cfg.batch_size).max(1);
        let kld_base = 1.0 / batches_per_epoch as f64;

        let loss = match (&mut self.model, &mut self.opt) {
            (AcousticModel::Ensemble(members), OptState::Ensemble(opts)) => {
                // Members are independent; train them in parallel with
                // member-specific shuffles derived from seed+k.
                let cfg = &self.cfg;
                let epoch = self.epoch;
                let losses: Vec<f64> = members
                    .par_iter_mut()
                    .zip(opts.par_iter_mut())
                    .enumerate()
                    .map(|(k, (member, opt))| {
                        run_mlp_epoch(
                            member,
                            opt,
                            data,
                            &index,
                            cfg,
                            cfg.seed + k as u64,
                            epoch,
                            None,
                        )
                    })
                    .collect::<Result<Vec<f64>>>()?;
                losses.iter().sum::<f64>() / losses.len() as f64
            }
            (AcousticModel::Fnn(mlp), OptState::Single(opt)) => {
                run_mlp_epoch(mlp, opt, data, &index, &self.cfg, self.cfg.seed, self.epoch, None)?
            }
            (AcousticModel::Dropout { mlp, drop_prob, .. }, OptState::Single(opt)) => {
                let dp = *drop_prob;
                run_mlp_epoch(mlp, opt, data, &index, &self.cfg, self.cfg.seed, self.epoch, Some(dp))?
            }
            (AcousticModel::Bnn { posterior, .. }, OptState::Single(opt)) => run_bnn_epoch(
                posterior,
                opt,
                data,
                &index,
                &self.cfg,
                self.epoch,
                &mut self.global_batch,
                batches_per_epoch,
                kld_base,
            )?,
            _ => unreachable!("optimizer state matches model kind by construction"),
        };
        self.epoch += 1;
        Ok(loss)
    }
}

fn gather_batch(
    data: &[AlignedUtterance],
    index: &[(u32, u32)],
    dims0: usize,
) -> (Array2<f64>, Vec<usize>) {
    let mut x = Array2::zeros((index.len(), dims0));
    let mut y = Vec::with_capacity(index.len());
    for (row, &(u, f)) in index.iter().enumerate() {
        x.row_mut(row).assign(&data[u as usize].feats.data.row(f as usize));
        y.push(data[u as usize].alignment[f as usize]);
    }
    (x, y)
}

#[allow(clippy::too_many_arguments)]
fn run_mlp_epoch(
    mlp: &mut Mlp,
    opt: &mut Adam,
    data: &[AlignedUtterance],
    index: &[(u32, u32)],
    cfg: &TrainConfig,
    stream_seed: u64,
    epoch: usize,
    drop_prob: Option<f64>,
) -> Result<f64> {
    let mut order = index.to_vec();
    let mut shuffle_rng = seed::rng(seed::derive_indexed(stream_seed, "shuffle", epoch as u64));
    order.shuffle(&mut shuffle_rng);

    let dims0 = cfg.dims[0];
    let hidden: Vec<usize> = cfg.dims[1..cfg.dims.len() - 1].to_vec();
    let mut total = 0.0;
    let mut batches = 0usize;
    for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let (x, y) = gather_batch(data, chunk, dims0);
        let loss = match drop_prob {
            None => {
                let bp = mlp.ce_backprop(&x, &y, None)?;
                let mut params = mlp.param_slices_mut();
                opt.step(&mut params, &bp.grads.slices());
                bp.loss
            }
            Some(p) => {
                // Average gradients over the configured sub-net count.
                let n = cfg.dropout_grad_samples;
                let mut rng = seed::rng(seed::derive_indexed(
                    stream_seed,
                    "dropout-train",
                    (epoch * 1_000_000 + b) as u64,
                ));
                let mut acc = MlpGrads::zeros_like(mlp);
                let mut loss = 0.0;
                for _ in 0..n {
                    let masks = sample_masks(&hidden, p, &mut rng);
                    let bp = mlp.ce_backprop(&x, &y, Some(&masks))?;
                    loss += bp.loss;
                    acc.add_scaled(&bp.grads, 1.0 / n as f64);
                }
                let mut params = mlp.param_slices_mut();
                opt.step(&mut params, &acc.slices());
                loss / n as f64
            }
        };
        total += loss;
        batches += 1;
    }
    Ok(total / batches as f64)
}

#[allow(clippy::too_many_arguments)]
fn run_bnn_epoch(
    posterior: &mut BnnPosterior,
    opt: &mut Adam,
    data: &[AlignedUtterance],
    index: &[(u32, u32)],
    cfg: &TrainConfig,
    epoch: usize,
    global_batch: &mut u64,
    batches_per_epoch: usize,
    kld_base: f64,
) -> Result<f64> {
    let mut order = index.to_vec();
    let mut shuffle_rng = seed::rng(seed::derive_indexed(cfg.seed, "shuffle", epoch as u64));
    order.shuffle(&mut shuffle_rng);

    let dims0 = cfg.dims[0];
    let mut total = 0.0;
    let mut batches = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let (x, y) = gather_batch(data, chunk, dims0);
        // KLD weight anneals linearly over the first epoch, then stays at
        // 1/num_batches.
        let anneal = (*global_batch as f64 / batches_per_epoch as f64).min(1.0);
        let kld_weight = anneal * kld_base;
        let noise_seed = seed::derive_indexed(cfg.seed, "elbo", *global_batch);
        let out = elbo_loss(posterior, &x, &y, kld_weight, noise_seed)?;
        let mut params = posterior.param_slices_mut();
        opt.step(&mut params, &out.grads.slices());
        // Report the CE component; the optimized objective also carries the
        // annealing KLD term, which is not comparable across epochs.
        total += out.ce;
        batches += 1;
        *global_batch += 1;
    }
    Ok(total / batches as f64)
}

/// Result of the cross-entropy training phase.
pub struct TrainResult {
    pub trainer: Trainer,
    pub epoch_losses: Vec<f64>,
}

/// Train a fresh model of the given kind for `cfg.epochs_ce` epochs on an
/// aligned dataset. Deterministic per `cfg.seed`; ensemble members use
/// seeds `seed+0 .. seed+k`.
pub fn train(kind: ModelKind, data: &[AlignedUtterance], cfg: &TrainConfig) -> Result<TrainResult> {
    if data.is_empty() {
        return Err(Error::Empty { what: "training dataset".to_string() });
    }
    let mut trainer = Trainer::new(kind, cfg)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs_ce);
    for _ in 0..cfg.epochs_ce {
        epoch_losses.push(trainer.run_epoch(data)?);
    }
    Ok(TrainResult { trainer, epoch_losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureMatrix;
    use rand::Rng;

    fn toy_feats(frames: usize, seed_val: u64) -> FeatureMatrix {
        let mut rng = seed::rng(seed_val);
        FeatureMatrix { data: Array2::from_shape_fn((frames, 39), |_| rng.gen_range(-1.0..1.0)) }
    }

    fn toy_cfg() -> TrainConfig {
        TrainConfig {
            dims: vec![39, 16, 16, 95],
            batch_size: 64,
            ensemble_size: 3,
            dropout_samples: 8,
            dropout_grad_samples: 4,
            ..TrainConfig::default()
        }
    }

    /// Learnable toy data: each class has a fixed random direction in
    /// feature space; frames are that direction plus noise.
    fn toy_dataset(n: usize, cfg: &TrainConfig, seed_val: u64) -> Vec<AlignedUtterance> {
        let mut rng = seed::rng(seed_val);
        let classes = cfg.dims[cfg.dims.len() - 1];
        let centers = Array2::from_shape_fn((classes, cfg.dims[0]), |_| rng.gen_range(-1.0..1.0));
        (0..n)
            .map(|i| {
                let frames = rng.gen_range(20..40);
                let alignment: Vec<usize> = (0..frames).map(|_| rng.gen_range(0..classes)).collect();
                let mut data = Array2::zeros((frames, cfg.dims[0]));
                for (f, &c) in alignment.iter().enumerate() {
                    for j in 0..cfg.dims[0] {
                        data[[f, j]] = centers[[c, j]] + 0.1 * rng.gen_range(-1.0..1.0);
                    }
                }
                AlignedUtterance { id: format!("u{i}"), feats: FeatureMatrix { data }, alignment }
            })
            .collect()
    }

    #[test]
    fn zero_weights_give_uniform_posteriors() {
        let model = AcousticModel::Fnn(Mlp::zeros(&[39, 16, 16, 95]));
        let feats = toy_feats(7, 1);
        let p = forward(&model, &feats, Mode::Mean { seed: 0 }).unwrap();
        p.validate().unwrap();
        for v in p.probs.iter() {
            assert!((v - 1.0 / 95.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_of_identical_members_equals_member_output() {
        let m = Mlp::init_he(&[39, 16, 16, 95], 3);
        let model = AcousticModel::Ensemble(vec![m.clone(), m.clone(), m.clone()]);
        let feats = toy_feats(5, 2);
        let mean = forward(&model, &feats, Mode::Mean { seed: 0 }).unwrap();
        let single = m.forward(&feats.data, None).unwrap();
        let max_diff = (&mean.probs - &single).iter().map(|d| d.abs()).fold(0.0, f64::max);
        assert!(max_diff < 1e-12);
    }

    #[test]
    fn dropout_with_vanishing_prob_matches_deterministic_forward() {
        let m = Mlp::init_he(&[39, 16, 16, 95], 4);
        let model = AcousticModel::Dropout { mlp: m.clone(), drop_prob: 1e-9, samples: 6 };
        let feats = toy_feats(5, 3);
        let mean = forward(&model, &feats, Mode::Mean { seed: 7 }).unwrap();
        let det = m.forward(&feats.data, None).unwrap();
        let max_diff = (&mean.probs - &det).iter().map(|d| d.abs()).fold(0.0, f64::max);
        assert!(max_diff < 1e-6, "max diff {max_diff}");
    }

    #[test]
    fn sample_predictions_rejects_fnn_and_is_seed_deterministic() {
        let feats = toy_feats(4, 4);
        let fnn = AcousticModel::Fnn(Mlp::init_he(&[39, 16, 16, 95], 5));
        assert!(matches!(sample_predictions(&fnn, &feats, 3, 0), Err(Error::SingleModeModel)));

        let model = AcousticModel::Dropout {
            mlp: Mlp::init_he(&[39, 16, 16, 95], 6),
            drop_prob: 0.3,
            samples: 4,
        };
        let a = sample_predictions(&model, &feats, 4, 11).unwrap();
        let b = sample_predictions(&model, &feats, 4, 11).unwrap();
        assert_eq!(a, b);
        let c = sample_predictions(&model, &feats, 4, 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn ensemble_sampling_ignores_seed() {
        let members: Vec<Mlp> = (0..3).map(|k| Mlp::init_he(&[39, 16, 16, 95], 20 + k)).collect();
        let model = AcousticModel::Ensemble(members);
        let feats = toy_feats(4, 5);
        let a = sample_predictions(&model, &feats, 3, 1).unwrap();
        let b = sample_predictions(&model, &feats, 3, 999).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mean_forward_equals_mean_of_samples() {
        let feats = toy_feats(6, 6);
        for kind_seed in [(ModelKind::Ensemble, 30u64), (ModelKind::Dropout, 31), (ModelKind::Bnn, 32)] {
            let cfg = TrainConfig { seed: kind_seed.1, ..toy_cfg() };
            let model = Trainer::new(kind_seed.0, &cfg).unwrap().model;
            let t = model.num_samples().unwrap();
            let seed_val = 77;
            let mean = forward(&model, &feats, Mode::Mean { seed: seed_val }).unwrap();
            let samples = sample_predictions(&model, &feats, t, seed_val).unwrap();
            let mut acc: Array2<f64> = Array2::zeros((6, 95));
            for k in 0..t {
                acc += &samples.index_axis(Axis(0), k);
            }
            acc /= t as f64;
            let max_diff = (&mean.probs - &acc).iter().map(|d| d.abs()).fold(0.0, f64::max);
            assert!(max_diff < 1e-9, "{:?}: max diff {max_diff}", kind_seed.0);
        }
    }

    #[test]
    fn posterior_rows_normalized_for_all_kinds() {
        let feats = toy_feats(5, 7);
        for kind in ModelKind::ALL {
            let cfg = TrainConfig { seed: 40, ..toy_cfg() };
            let model = Trainer::new(kind, &cfg).unwrap().model;
            let p = forward(&model, &feats, Mode::Mean { seed: 3 }).unwrap();
            p.validate().unwrap();
            let s = forward(&model, &feats, Mode::SingleSample { seed: 3 }).unwrap();
            s.validate().unwrap();
        }
    }

    #[test]
    fn input_grad_matches_finite_differences_for_fnn() {
        let cfg = toy_cfg();
        let model = Trainer::new(ModelKind::Fnn, &TrainConfig { seed: 50, ..cfg }).unwrap().model;
        let feats = toy_feats(5, 8);
        let targets: Vec<usize> = vec![0, 3, 9, 2, 94];
        let (_, grad) =
            input_grad(&model, &feats, &targets, Mode::Mean { seed: 0 }, 4).unwrap();

        let loss_of = |f: &FeatureMatrix| {
            input_grad(&model, f, &targets, Mode::Mean { seed: 0 }, 4).unwrap().0
        };
        let mut rng = seed::rng(9);
        let h = 1e-4;
        for _ in 0..20 {
            let r = rng.gen_range(0..5);
            let c = rng.gen_range(0..39);
            let mut plus = feats.clone();
            let mut minus = feats.clone();
            plus.data[[r, c]] += h;
            minus.data[[r, c]] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let a = grad[[r, c]];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            assert!(rel <= 1e-4, "({r},{c}): analytic {a} fd {fd}");
        }
    }

    #[test]
    fn single_sample_input_grad_is_deterministic() {
        let cfg = TrainConfig { seed: 60, ..toy_cfg() };
        let model = Trainer::new(ModelKind::Bnn, &cfg).unwrap().model;
        let feats = toy_feats(5, 10);
        let targets = vec![1, 2, 3, 4, 5];
        let (l1, g1) = input_grad(&model, &feats, &targets, Mode::SingleSample { seed: 8 }, 4).unwrap();
        let (l2, g2) = input_grad(&model, &feats, &targets, Mode::SingleSample { seed: 8 }, 4).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(g1, g2);
    }

    #[test]
    fn training_loss_decreases_and_is_reproducible() {
        let cfg = TrainConfig { epochs_ce: 2, seed: 70, ..toy_cfg() };
        let data = toy_dataset(10, &cfg, 71);
        for kind in ModelKind::ALL {
            let r1 = train(kind, &data, &cfg).unwrap();
            assert!(
                r1.epoch_losses[1] < r1.epoch_losses[0],
                "{kind:?}: losses {:?}",
                r1.epoch_losses
            );
            let r2 = train(kind, &data, &cfg).unwrap();
            assert_eq!(r1.epoch_losses, r2.epoch_losses, "{kind:?} not reproducible");
            // Bit-identical parameters on rerun.
            match (&r1.trainer.model, &r2.trainer.model) {
                (AcousticModel::Fnn(a), AcousticModel::Fnn(b)) => assert_eq!(a, b),
                (AcousticModel::Ensemble(a), AcousticModel::Ensemble(b)) => assert_eq!(a, b),
                (AcousticModel::Dropout { mlp: a, .. }, AcousticModel::Dropout { mlp: b, .. }) => {
                    assert_eq!(a, b)
                }
                (AcousticModel::Bnn { posterior: a, .. }, AcousticModel::Bnn { posterior: b, .. }) => {
                    assert_eq!(a, b)
                }
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn ensemble_members_differ_after_training() {
        let cfg = TrainConfig { epochs_ce: 1, seed: 80, ..toy_cfg() };
        let data = toy_dataset(6, &cfg, 81);
        let r = train(ModelKind::Ensemble, &data, &cfg).unwrap();
        if let AcousticModel::Ensemble(members) = &r.trainer.model {
            for i in 0..members.len() {
                for j in (i + 1)..members.len() {
                    assert_ne!(members[i], members[j], "members {i} and {j} identical");
                }
            }
        } else {
            unreachable!()
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let cfg = toy_cfg();
        assert!(matches!(train(ModelKind::Fnn, &[], &cfg), Err(Error::Empty { .. })));
    }

    #[test]
    fn uniform_model_ce_is_ln_95() {
        let model = AcousticModel::Fnn(Mlp::zeros(&[39, 16, 16, 95]));
        let feats = toy_feats(8, 11);
        let targets: Vec<usize> = (0..8).collect();
        let opts = GradOpts { dropout_grad_samples: 1, kld_weight: 0.0, seed: 0 };
        let (loss, _) = ce_loss_and_grads(&model, &feats, &targets, &opts).unwrap();
        assert!((loss - (95.0f64).ln()).abs() < 1e-9);
    }
}
