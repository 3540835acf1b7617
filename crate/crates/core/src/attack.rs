//! White-box targeted attacks: draw a malicious transcript, force-align it
//! against the model's posteriors on the clean audio (step 1), then run
//! L-infinity projected gradient descent on the waveform through the
//! differentiable front end toward that alignment (step 2).
//!
//! The update is `delta <- clip(delta - step * sign(g))` where `g` is the
//! waveform gradient of the frame cross-entropy toward the target
//! alignment; each iterate is projected onto the epsilon ball intersected
//! with the valid sample range. Gradients default to a single model sample
//! per iteration — averaging over samples is kept as an ablation because
//! it weakens the attack against the Viterbi decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acoustic::{forward, input_grad, AcousticModel, Mode};
use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::eval::word_accuracy;
use crate::features::MfccPipeline;
use crate::hmm::{forced_align, HmmSystem};
use crate::seed;

pub const MAX_EPSILON: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    #[default]
    SingleSample,
    Mean,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AttackConfig {
    /// L-infinity budget in amplitude units, within [0, 0.1].
    pub epsilon: f64,
    /// Per-iteration amplitude step.
    pub step_size: f64,
    pub iterations: usize,
    pub gradient_mode: GradientMode,
    pub seed: u64,
    /// Sub-nets averaged for dropout gradients in `Mean` mode.
    pub mean_grad_samples: usize,
}

impl AttackConfig {
    /// Pinned defaults: step = epsilon/20, 100 iterations, single-sample
    /// gradients. For epsilon = 0 the step is nominal (the zero ball pins
    /// delta to zero regardless).
    pub fn for_epsilon(epsilon: f64, seed: u64) -> Self {
        AttackConfig {
            epsilon,
            step_size: if epsilon > 0.0 { epsilon / 20.0 } else { 1e-3 },
            iterations: 100,
            gradient_mode: GradientMode::SingleSample,
            seed,
            mean_grad_samples: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=MAX_EPSILON).contains(&self.epsilon) {
            return Err(Error::InvalidConfig {
                detail: format!("epsilon {} outside [0, {MAX_EPSILON}]", self.epsilon),
            });
        }
        if self.step_size <= 0.0 || self.iterations == 0 || self.mean_grad_samples == 0 {
            return Err(Error::InvalidConfig {
                detail: "step_size and iterations must be positive".to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdversarialExample {
    pub original: Waveform,
    pub delta: Vec<f64>,
    pub target_transcript: Vec<u8>,
    pub target_alignment: Vec<usize>,
    /// Observed loss at each evaluated iterate (index 0 is delta = 0).
    pub losses: Vec<f64>,
    /// Index into `losses` of the returned iterate.
    pub best_iteration: usize,
}

impl AdversarialExample {
    pub fn adversarial_waveform(&self) -> Waveform {
        let samples =
            self.original.samples.iter().zip(&self.delta).map(|(x, d)| x + d).collect();
        Waveform::new(samples)
    }

    pub fn linf_norm(&self) -> f64 {
        self.delta.iter().fold(0.0f64, |m, &d| m.max(d.abs()))
    }

    /// Check the attack invariants for a given budget.
    pub fn validate(&self, epsilon: f64) -> Result<()> {
        if self.delta.len() != self.original.len() {
            return Err(Error::ShapeMismatch { detail: "delta length != waveform length".to_string() });
        }
        if self.linf_norm() > epsilon + 1e-12 {
            return Err(Error::Other(format!("delta norm {} exceeds epsilon {epsilon}", self.linf_norm())));
        }
        self.adversarial_waveform().validate()
    }
}

/// Uniform random target: length 1..=5, uniform digits, re-drawn while it
/// equals the original transcript.
pub fn sample_target_transcript<R: Rng>(rng: &mut R, original: &[u8]) -> Vec<u8> {
    loop {
        let len = rng.gen_range(1..=5);
        let target: Vec<u8> = (0..len).map(|_| rng.gen_range(0..10)).collect();
        if target != original {
            return target;
        }
    }
}

/// Step 1: align the malicious transcript against the model's posteriors
/// on the clean audio. Too-short utterances abort the attack pair.
pub fn build_attack_target(
    waveform: &Waveform,
    target_transcript: &[u8],
    model: &AcousticModel,
    sys: &HmmSystem,
    pipeline: &MfccPipeline,
    seed: u64,
) -> Result<Vec<usize>> {
    let feats = pipeline.compute(waveform)?;
    let posteriors = forward(model, &feats, Mode::Mean { seed })?;
    let (alignment, _) = forced_align(&posteriors, sys, target_transcript).map_err(|e| match e {
        Error::UtteranceTooShort { frames, min_frames } => Error::AttackAborted {
            detail: format!("{frames} frames cannot fit the {min_frames}-frame target path"),
        },
        other => other,
    })?;
    Ok(alignment)
}

pub struct PgdTrace {
    pub delta: Vec<f64>,
    pub losses: Vec<f64>,
    pub best_iteration: usize,
}

/// Sign with `sign(0) = 0` (f64::signum maps 0 to 1).
fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Generic projected sign-gradient descent on an additive perturbation.
/// `grad_fn(x_plus_delta, iter)` returns the loss at the iterate and its
/// gradient; the best-loss iterate (including the start) is returned. The
/// feasible set is `|delta_i| <= epsilon` intersected with
/// `clip_low <= x_i + delta_i <= clip_high`.
pub fn pgd_core(
    x: &[f64],
    cfg: &AttackConfig,
    clip_low: f64,
    clip_high: f64,
    mut grad_fn: impl FnMut(&[f64], usize) -> Result<(f64, Vec<f64>)>,
) -> Result<PgdTrace> {
    cfg.validate()?;
    let n = x.len();
    let project = |delta: &mut [f64]| {
        for (d, &xi) in delta.iter_mut().zip(x) {
            let lo = (-cfg.epsilon).max(clip_low - xi);
            let hi = cfg.epsilon.min(clip_high - xi);
            *d = d.clamp(lo, hi);
        }
    };

    let mut delta = vec![0.0; n];
    project(&mut delta);
    let mut iterate: Vec<f64> = x.iter().zip(&delta).map(|(xi, d)| xi + d).collect();

    let (loss0, grad0) = grad_fn(&iterate, 0)?;
    let mut losses = vec![loss0];
    let mut best = (loss0, delta.clone());
    let mut best_iteration = 0;

    if cfg.epsilon == 0.0 {
        // The feasible set is a single point; nothing can move.
        return Ok(PgdTrace { delta, losses, best_iteration });
    }

    let mut grad = grad0;
    for iter in 1..=cfg.iterations {
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite { context: format!("attack gradient at iteration {iter}") });
        }
        for (d, g) in delta.iter_mut().zip(&grad) {
            *d -= cfg.step_size * sign(*g);
        }
        project(&mut delta);
        for ((it, xi), d) in iterate.iter_mut().zip(x).zip(&delta) {
            *it = xi + d;
        }
        let (loss, g) = grad_fn(&iterate, iter)?;
        losses.push(loss);
        if loss < best.0 {
            best = (loss, delta.clone());
            best_iteration = iter;
        }
        grad = g;
    }

    Ok(PgdTrace { delta: best.1, losses, best_iteration })
}

/// Step 2: craft the adversarial waveform for a fixed target alignment.
pub fn pgd_attack(
    waveform: &Waveform,
    target_transcript: &[u8],
    target_alignment: &[usize],
    model: &AcousticModel,
    pipeline: &MfccPipeline,
    cfg: &AttackConfig,
) -> Result<AdversarialExample> {
    let trace = pgd_core(&waveform.samples, cfg, -1.0, 1.0, |x_adv, iter| {
        let wf = Waveform::new(x_adv.to_vec());
        let feats = pipeline.compute(&wf)?;
        let iter_seed = seed::derive_indexed(cfg.seed, "pgd-iter", iter as u64);
        let mode = match cfg.gradient_mode {
            GradientMode::SingleSample => Mode::SingleSample { seed: iter_seed },
            GradientMode::Mean => Mode::Mean { seed: iter_seed },
        };
        let (loss, feat_grad) =
            input_grad(model, &feats, target_alignment, mode, cfg.mean_grad_samples)?;
        let sample_grad = pipeline.backward(&wf, &feat_grad)?;
        Ok((loss, sample_grad))
    })?;

    Ok(AdversarialExample {
        original: waveform.clone(),
        delta: trace.delta,
        target_transcript: target_transcript.to_vec(),
        target_alignment: target_alignment.to_vec(),
        losses: trace.losses,
        best_iteration: trace.best_iteration,
    })
}

/// Word accuracies of the decoded transcript against the attack target and
/// against the original transcription.
pub fn attack_success(
    target_transcript: &[u8],
    original_transcript: &[u8],
    decoded: &[u8],
) -> Result<(f64, f64)> {
    Ok((
        word_accuracy(target_transcript, decoded)?,
        word_accuracy(original_transcript, decoded)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn target_sampling_distribution() {
        let mut rng = seed::rng(1);
        let original = vec![1u8, 2, 3];
        let mut len_counts = [0usize; 6];
        let mut digit_counts = [0usize; 10];
        let mut total_digits = 0usize;
        let draws = 10_000;
        for _ in 0..draws {
            let t = sample_target_transcript(&mut rng, &original);
            assert_ne!(t, original);
            assert!((1..=5).contains(&t.len()));
            len_counts[t.len()] += 1;
            for &d in &t {
                digit_counts[d as usize] += 1;
                total_digits += 1;
            }
        }
        // Lengths uniform over 1..=5 within 3 sigma.
        let expect = draws as f64 / 5.0;
        let sigma = (draws as f64 * 0.2 * 0.8).sqrt();
        for len in 1..=5 {
            let dev = (len_counts[len] as f64 - expect).abs();
            assert!(dev <= 3.0 * sigma, "length {len}: count {} (expect {expect})", len_counts[len]);
        }
        // Digits uniform within 3 sigma.
        let expect_d = total_digits as f64 / 10.0;
        let sigma_d = (total_digits as f64 * 0.1 * 0.9).sqrt();
        for d in 0..10 {
            let dev = (digit_counts[d] as f64 - expect_d).abs();
            assert!(dev <= 3.0 * sigma_d, "digit {d}: count {}", digit_counts[d]);
        }
    }

    #[test]
    fn target_sampling_deterministic_per_seed() {
        let a: Vec<Vec<u8>> = {
            let mut rng = seed::rng(42);
            (0..20).map(|_| sample_target_transcript(&mut rng, &[0])).collect()
        };
        let b: Vec<Vec<u8>> = {
            let mut rng = seed::rng(42);
            (0..20).map(|_| sample_target_transcript(&mut rng, &[0])).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn pgd_on_quadratic_converges_to_interior_minimizer() {
        // f(v) = sum (v_i - c_i)^2 has gradient 2(v - c); the minimizer c
        // lies inside the epsilon ball around x, so sign-PGD must end
        // within one step of it.
        let x = vec![0.0; 4];
        let c = [0.03, -0.02, 0.01, 0.04];
        let cfg = AttackConfig {
            epsilon: 0.05,
            step_size: 0.005,
            iterations: 60,
            gradient_mode: GradientMode::SingleSample,
            seed: 0,
            mean_grad_samples: 1,
        };
        let trace = pgd_core(&x, &cfg, -1.0, 1.0, |v, _| {
            let loss: f64 = v.iter().zip(&c).map(|(vi, ci)| (vi - ci).powi(2)).sum();
            let grad: Vec<f64> = v.iter().zip(&c).map(|(vi, ci)| 2.0 * (vi - ci)).collect();
            Ok((loss, grad))
        })
        .unwrap();
        for (i, (&d, &ci)) in trace.delta.iter().zip(&c).enumerate() {
            assert!(
                (d - ci).abs() <= cfg.step_size + 1e-12,
                "coord {i}: {d} vs minimizer {ci}"
            );
        }
        // Best-iterate loss never exceeds the starting loss.
        assert!(trace.losses[trace.best_iteration] <= trace.losses[0]);
    }

    #[test]
    fn zero_epsilon_pins_delta_to_zero() {
        let x = vec![0.1, -0.2, 0.3];
        let cfg = AttackConfig::for_epsilon(0.0, 7);
        let trace = pgd_core(&x, &cfg, -1.0, 1.0, |_, _| Ok((1.0, vec![5.0, -5.0, 5.0]))).unwrap();
        assert!(trace.delta.iter().all(|&d| d == 0.0));
        assert_eq!(trace.losses.len(), 1);
    }

    #[test]
    fn projection_keeps_ball_and_range() {
        // Start near the +1 rail; huge gradients try to push out.
        let x = vec![0.999, -0.999, 0.5];
        let cfg = AttackConfig {
            epsilon: 0.05,
            step_size: 0.05,
            iterations: 10,
            gradient_mode: GradientMode::SingleSample,
            seed: 0,
            mean_grad_samples: 1,
        };
        let trace = pgd_core(&x, &cfg, -1.0, 1.0, |v, _| {
            Ok((0.0, v.iter().map(|_| -3.0).collect()))
        })
        .unwrap();
        for (d, xi) in trace.delta.iter().zip(&x) {
            assert!(d.abs() <= cfg.epsilon + 1e-12);
            assert!((xi + d).abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let x = vec![0.0; 3];
        let cfg = AttackConfig::for_epsilon(0.05, 1);
        let out = pgd_core(&x, &cfg, -1.0, 1.0, |_, _| Ok((1.0, vec![f64::NAN, 0.0, 0.0])));
        assert!(matches!(out, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn attack_success_degenerate_cases() {
        let target = vec![1u8, 2];
        let original = vec![3u8, 4, 5];
        let (vs_t, _) = attack_success(&target, &original, &target).unwrap();
        assert_eq!(vs_t, 1.0);
        let (_, vs_o) = attack_success(&target, &original, &original).unwrap();
        assert_eq!(vs_o, 1.0);
        // Hypothesis sharing no words with either: both at or below zero.
        let (a, b) = attack_success(&target, &original, &[6, 7, 8, 9, 6, 7]).unwrap();
        assert!(a <= 0.0 && b <= 0.0, "{a} {b}");
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(AttackConfig::for_epsilon(0.2, 0).validate().is_err());
        let mut c = AttackConfig::for_epsilon(0.05, 0);
        c.step_size = 0.0;
        assert!(c.validate().is_err());
        c = AttackConfig::for_epsilon(0.05, 0);
        c.iterations = 0;
        assert!(c.validate().is_err());
        assert!(AttackConfig::for_epsilon(0.0, 0).validate().is_ok());
    }
}
