//! Differentiable MFCC front end.
//!
//! Per frame: Hamming window, 256-point real DFT power spectrum, 26-filter
//! mel filterbank, log with floor, orthonormal DCT-II keeping 13
//! coefficients; then delta and delta-delta columns from the standard
//! regression filter with edge replication. Every stage is linear or has a
//! closed-form derivative, so [`MfccPipeline::backward`] gives the exact
//! reverse-mode gradient from feature space down to the waveform samples —
//! that is what makes waveform-space gradient attacks possible here.
//!
//! The recipe is deliberately plain: no pre-emphasis, no cepstral mean
//! normalization, no liftering. All tables are precomputed at construction
//! and the per-frame work is expressed as matrix products.

use std::f64::consts::PI;

use ndarray::{s, Array1, Array2, Axis};

use crate::audio::Waveform;
use crate::error::{Error, Result};

/// DFT length used by the power-spectrum stage (frames are zero-padded).
pub const FFT_SIZE: usize = 256;

/// Front-end configuration. Defaults pin the full recipe: 25 ms window,
/// 10 ms hop at 8 kHz, 26 mel filters, 13 cepstra, floor 1e-10, delta
/// context 2.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub window_length: usize,
    pub hop: usize,
    pub num_mel_filters: usize,
    pub num_ceps: usize,
    pub log_floor: f64,
    pub delta_context: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            window_length: 200,
            hop: 80,
            num_mel_filters: 26,
            num_ceps: 13,
            log_floor: 1e-10,
            delta_context: 2,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.window_length < self.hop {
            return Err(Error::InvalidConfig {
                detail: format!("window {} must be >= hop {} > 0", self.window_length, self.hop),
            });
        }
        if self.num_ceps > self.num_mel_filters {
            return Err(Error::InvalidConfig {
                detail: format!("num_ceps {} exceeds num_mel_filters {}", self.num_ceps, self.num_mel_filters),
            });
        }
        if self.window_length > FFT_SIZE {
            return Err(Error::InvalidConfig {
                detail: format!("window {} exceeds DFT size {FFT_SIZE}", self.window_length),
            });
        }
        if self.log_floor <= 0.0 {
            return Err(Error::InvalidConfig { detail: "log_floor must be positive".to_string() });
        }
        Ok(())
    }

    /// Output width: static + delta + delta-delta.
    pub fn num_features(&self) -> usize {
        3 * self.num_ceps
    }
}

/// Number of analysis frames for a signal of `len` samples.
pub fn num_frames(len: usize, window: usize, hop: usize) -> Option<usize> {
    if len < window {
        None
    } else {
        Some((len - window) / hop + 1)
    }
}

/// Frames x features matrix; column count is fixed by the config (39 for
/// the default 13-cepstra recipe).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Array2<f64>,
}

impl FeatureMatrix {
    pub fn num_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn num_features(&self) -> usize {
        self.data.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        for v in self.data.iter() {
            if !v.is_finite() {
                return Err(Error::NonFinite { context: "feature matrix".to_string() });
            }
        }
        Ok(())
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10.0_f64.powf(mel / 2595.0) - 1.0)
}

/// Precomputed tables for one configuration. Construction is cheap enough
/// to do once per process; apply to as many waveforms as needed.
#[derive(Debug, Clone)]
pub struct MfccPipeline {
    cfg: FeatureConfig,
    window: Array1<f64>,
    /// window_length x bins cosine/sine tables of the real DFT.
    cos_t: Array2<f64>,
    sin_t: Array2<f64>,
    /// bins x filters triangular mel filterbank (transposed for right-multiplication).
    mel_t: Array2<f64>,
    /// filters x ceps orthonormal DCT-II (transposed).
    dct_t: Array2<f64>,
}

impl MfccPipeline {
    pub fn new(cfg: FeatureConfig) -> Result<Self> {
        cfg.validate()?;
        let bins = FFT_SIZE / 2 + 1;
        let win = cfg.window_length;

        let window = Array1::from_iter(
            (0..win).map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (win as f64 - 1.0)).cos()),
        );

        let mut cos_t = Array2::zeros((win, bins));
        let mut sin_t = Array2::zeros((win, bins));
        for n in 0..win {
            for k in 0..bins {
                let angle = 2.0 * PI * k as f64 * n as f64 / FFT_SIZE as f64;
                cos_t[[n, k]] = angle.cos();
                sin_t[[n, k]] = angle.sin();
            }
        }

        let mel_t = mel_filterbank(cfg.num_mel_filters, bins).reversed_axes();
        let dct_t = dct_matrix(cfg.num_ceps, cfg.num_mel_filters).reversed_axes();

        Ok(MfccPipeline { cfg, window, cos_t, sin_t, mel_t, dct_t })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.cfg
    }

    /// Windowed frame matrix (T x window_length).
    fn windowed_frames(&self, samples: &[f64]) -> Result<Array2<f64>> {
        let win = self.cfg.window_length;
        let t_frames = num_frames(samples.len(), win, self.cfg.hop)
            .ok_or(Error::WaveformTooShort { len: samples.len(), min: win })?;
        let mut frames = Array2::zeros((t_frames, win));
        for t in 0..t_frames {
            let start = t * self.cfg.hop;
            for n in 0..win {
                frames[[t, n]] = samples[start + n] * self.window[n];
            }
        }
        Ok(frames)
    }

    /// Static cepstra (T x num_ceps) plus the intermediates needed by the
    /// backward pass.
    fn forward_static(&self, samples: &[f64]) -> Result<StaticForward> {
        let frames = self.windowed_frames(samples)?;
        let re = frames.dot(&self.cos_t);
        let im = frames.dot(&self.sin_t);
        let power = &re * &re + &im * &im;
        let energies = power.dot(&self.mel_t);
        let logs = energies.mapv(|e| e.max(self.cfg.log_floor).ln());
        let ceps = logs.dot(&self.dct_t);
        Ok(StaticForward { frames, re, im, energies, ceps })
    }

    /// Full 39-column feature matrix.
    pub fn compute(&self, waveform: &Waveform) -> Result<FeatureMatrix> {
        let fwd = self.forward_static(&waveform.samples)?;
        let d = delta_filter(&fwd.ceps, self.cfg.delta_context);
        let dd = delta_filter(&d, self.cfg.delta_context);
        let t_frames = fwd.ceps.nrows();
        let c = self.cfg.num_ceps;
        let mut out = Array2::zeros((t_frames, 3 * c));
        out.slice_mut(s![.., 0..c]).assign(&fwd.ceps);
        out.slice_mut(s![.., c..2 * c]).assign(&d);
        out.slice_mut(s![.., 2 * c..3 * c]).assign(&dd);
        Ok(FeatureMatrix { data: out })
    }

    /// Exact gradient of `sum(upstream * features)` with respect to the
    /// waveform samples. The log floor contributes subgradient zero below
    /// the floor.
    pub fn backward(&self, waveform: &Waveform, upstream: &Array2<f64>) -> Result<Vec<f64>> {
        let c = self.cfg.num_ceps;
        let fwd = self.forward_static(&waveform.samples)?;
        let t_frames = fwd.ceps.nrows();
        if upstream.dim() != (t_frames, 3 * c) {
            return Err(Error::ShapeMismatch {
                detail: format!(
                    "upstream gradient is {:?}, features are ({t_frames}, {})",
                    upstream.dim(),
                    3 * c
                ),
            });
        }

        let g_static = upstream.slice(s![.., 0..c]).to_owned();
        let g_d = upstream.slice(s![.., c..2 * c]).to_owned();
        let g_dd = upstream.slice(s![.., 2 * c..3 * c]).to_owned();

        // dd = D(D(ceps)) and d = D(ceps), so fold both delta adjoints back
        // onto the static cepstra.
        let mut g_ceps = g_static;
        g_ceps += &delta_adjoint(&g_d, self.cfg.delta_context);
        g_ceps += &delta_adjoint(&delta_adjoint(&g_dd, self.cfg.delta_context), self.cfg.delta_context);

        let g_logs = g_ceps.dot(&self.dct_t.t());
        let mut g_energies = g_logs;
        ndarray::Zip::from(&mut g_energies).and(&fwd.energies).for_each(|g, &e| {
            *g = if e > self.cfg.log_floor { *g / e } else { 0.0 };
        });
        let g_power = g_energies.dot(&self.mel_t.t());
        let g_re = 2.0 * &fwd.re * &g_power;
        let g_im = 2.0 * &fwd.im * &g_power;
        let g_frames = g_re.dot(&self.cos_t.t()) + g_im.dot(&self.sin_t.t());

        let mut g_samples = vec![0.0; waveform.samples.len()];
        for t in 0..t_frames {
            let start = t * self.cfg.hop;
            let row = g_frames.index_axis(Axis(0), t);
            for n in 0..self.cfg.window_length {
                g_samples[start + n] += row[n] * self.window[n];
            }
        }
        Ok(g_samples)
    }
}

struct StaticForward {
    frames: Array2<f64>,
    re: Array2<f64>,
    im: Array2<f64>,
    energies: Array2<f64>,
    ceps: Array2<f64>,
}

// Silence an unused-field lint: `frames` is kept for symmetry with the
// other intermediates but the backward pass re-derives its gradient in
// sample space directly.
impl StaticForward {
    #[allow(dead_code)]
    fn frame_count(&self) -> usize {
        self.frames.nrows()
    }
}

/// Triangular filters (filters x bins) on the HTK mel scale covering
/// 0..Nyquist. Continuous triangles evaluated at the bin frequencies, so no
/// filter degenerates to all zeros.
fn mel_filterbank(num_filters: usize, bins: usize) -> Array2<f64> {
    let nyquist = f64::from(crate::audio::SAMPLE_RATE) / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let points: Vec<f64> = (0..num_filters + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (num_filters + 1) as f64))
        .collect();

    let bin_hz = |k: usize| f64::from(crate::audio::SAMPLE_RATE) * k as f64 / FFT_SIZE as f64;
    let mut fb = Array2::zeros((num_filters, bins));
    for m in 0..num_filters {
        let (left, center, right) = (points[m], points[m + 1], points[m + 2]);
        for k in 0..bins {
            let f = bin_hz(k);
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            fb[[m, k]] = w;
        }
    }
    fb
}

/// Orthonormal DCT-II, `rows` kept of a length-`n` transform.
fn dct_matrix(rows: usize, n: usize) -> Array2<f64> {
    let mut d = Array2::zeros((rows, n));
    for j in 0..rows {
        let scale = if j == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for m in 0..n {
            d[[j, m]] = scale * (PI * (m as f64 + 0.5) * j as f64 / n as f64).cos();
        }
    }
    d
}

/// Regression delta filter with clamped (edge-replicated) indices:
/// `d[t] = sum_n n * (c[t+n] - c[t-n]) / (2 * sum_n n^2)`.
pub fn delta_filter(feats: &Array2<f64>, context: usize) -> Array2<f64> {
    let t_frames = feats.nrows();
    let denom: f64 = 2.0 * (1..=context).map(|n| (n * n) as f64).sum::<f64>();
    let mut out = Array2::zeros(feats.raw_dim());
    for t in 0..t_frames {
        for n in 1..=context {
            let fwd = (t + n).min(t_frames - 1);
            let back = t.saturating_sub(n);
            let coef = n as f64 / denom;
            let diff = &feats.row(fwd) - &feats.row(back);
            let mut row = out.row_mut(t);
            row += &(&diff * coef);
        }
    }
    out
}

/// Adjoint of [`delta_filter`] (exact transpose of the clamped linear map).
fn delta_adjoint(grad: &Array2<f64>, context: usize) -> Array2<f64> {
    let t_frames = grad.nrows();
    let denom: f64 = 2.0 * (1..=context).map(|n| (n * n) as f64).sum::<f64>();
    let mut out = Array2::zeros(grad.raw_dim());
    for t in 0..t_frames {
        for n in 1..=context {
            let fwd = (t + n).min(t_frames - 1);
            let back = t.saturating_sub(n);
            let coef = n as f64 / denom;
            let g = grad.row(t).to_owned();
            {
                let mut row = out.row_mut(fwd);
                row += &(&g * coef);
            }
            {
                let mut row = out.row_mut(back);
                row -= &(&g * coef);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{synth_digit_waveform, Waveform};
    use crate::seed;
    use rand::Rng;

    fn pipeline() -> MfccPipeline {
        MfccPipeline::new(FeatureConfig::default()).unwrap()
    }

    fn random_waveform(len: usize, seed: u64) -> Waveform {
        let mut rng = seed::rng(seed);
        Waveform::new((0..len).map(|_| rng.gen_range(-0.5..0.5)).collect())
    }

    #[test]
    fn frame_count_formula() {
        let w = random_waveform(1000, 1);
        let feats = pipeline().compute(&w).unwrap();
        assert_eq!(feats.num_frames(), 11);
        assert_eq!(feats.num_features(), 39);

        // Formula holds for arbitrary (len, window, hop).
        let mut rng = seed::rng(2);
        for _ in 0..200 {
            let window = rng.gen_range(1..50);
            let hop = rng.gen_range(1..=window);
            let len = rng.gen_range(window..500);
            assert_eq!(num_frames(len, window, hop), Some((len - window) / hop + 1));
        }
        assert_eq!(num_frames(100, 200, 80), None);
    }

    #[test]
    fn too_short_waveform_errors() {
        let w = Waveform::new(vec![0.0; 150]);
        assert!(matches!(pipeline().compute(&w), Err(Error::WaveformTooShort { .. })));
    }

    #[test]
    fn all_zero_waveform_gives_constant_frames_and_zero_deltas() {
        let w = Waveform::new(vec![0.0; 1000]);
        let feats = pipeline().compute(&w).unwrap().data;
        let first = feats.row(0).to_owned();
        for t in 0..feats.nrows() {
            for j in 0..13 {
                assert_eq!(feats[[t, j]], first[j]);
            }
            for j in 13..39 {
                assert_eq!(feats[[t, j]], 0.0, "delta column {j} frame {t}");
            }
        }
    }

    #[test]
    fn sine_energy_lands_in_the_right_mel_filter() {
        // Independent oracle: evaluate the mel energies of a 1 kHz sine by
        // direct DFT summation, written from the definitions rather than
        // through the pipeline tables.
        let freq = 1000.0;
        let n = 200;
        let samples: Vec<f64> =
            (0..n).map(|i| 0.5 * (2.0 * PI * freq * i as f64 / 8000.0).sin()).collect();

        let ham: Vec<f64> =
            (0..n).map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n as f64 - 1.0)).cos()).collect();
        let mut power = vec![0.0; 129];
        for (k, p) in power.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for i in 0..n {
                let a = 2.0 * PI * k as f64 * i as f64 / 256.0;
                re += samples[i] * ham[i] * a.cos();
                im -= samples[i] * ham[i] * a.sin();
            }
            *p = re * re + im * im;
        }
        let fb = mel_filterbank(26, 129);
        let oracle_energies: Vec<f64> =
            (0..26).map(|m| (0..129).map(|k| fb[[m, k]] * power[k]).sum()).collect();
        let oracle_argmax = oracle_energies
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;

        // The winning filter's support must actually contain 1 kHz.
        let mel_max = hz_to_mel(4000.0);
        let left = mel_to_hz(mel_max * oracle_argmax as f64 / 27.0);
        let right = mel_to_hz(mel_max * (oracle_argmax + 2) as f64 / 27.0);
        assert!(left < freq && freq < right, "filter {oracle_argmax} spans [{left}, {right}]");

        // Pipeline agrees with the oracle on the argmax.
        let w = Waveform::new(samples);
        let fwd = pipeline().forward_static(&w.samples).unwrap();
        let pipeline_argmax = fwd
            .energies
            .row(0)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(pipeline_argmax, oracle_argmax);
    }

    #[test]
    fn translation_by_hop_shifts_frames() {
        let p = pipeline();
        let w = synth_digit_waveform(4, 9, 400.0);
        let shifted = Waveform::new(w.samples[80..].to_vec());
        let a = p.compute(&w).unwrap().data;
        let b = p.compute(&shifted).unwrap().data;
        let t = b.nrows();
        // Interior static coefficients: frame k of the shifted signal is
        // frame k+1 of the original.
        for k in 2..t.saturating_sub(2) {
            for j in 0..13 {
                assert!(
                    (a[[k + 1, j]] - b[[k, j]]).abs() <= 1e-9,
                    "frame {k} coef {j}: {} vs {}",
                    a[[k + 1, j]],
                    b[[k, j]]
                );
            }
        }
    }

    #[test]
    fn backward_zero_upstream_is_zero() {
        let p = pipeline();
        let w = random_waveform(600, 3);
        let feats = p.compute(&w).unwrap();
        let grad = p.backward(&w, &Array2::zeros(feats.data.raw_dim())).unwrap();
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_shape_mismatch_errors() {
        let p = pipeline();
        let w = random_waveform(600, 3);
        let bad = Array2::zeros((2, 39));
        assert!(matches!(p.backward(&w, &bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn backward_matches_central_finite_differences() {
        let p = pipeline();
        let w = random_waveform(760, 11);
        let feats = p.compute(&w).unwrap();
        let mut rng = seed::rng(12);
        let upstream =
            Array2::from_shape_fn(feats.data.raw_dim(), |_| rng.gen_range(-1.0..1.0_f64));
        let analytic = p.backward(&w, &upstream).unwrap();

        let loss = |samples: &[f64]| -> f64 {
            let wf = Waveform::new(samples.to_vec());
            let f = p.compute(&wf).unwrap();
            (&f.data * &upstream).sum()
        };

        let h = 1e-4;
        let mut checked = 0;
        while checked < 50 {
            let i = rng.gen_range(0..w.samples.len());
            let mut plus = w.samples.clone();
            let mut minus = w.samples.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let denom = analytic[i].abs().max(fd.abs()).max(1e-8);
            let rel = (analytic[i] - fd).abs() / denom;
            assert!(rel <= 1e-4, "sample {i}: analytic {} vs fd {fd} (rel {rel})", analytic[i]);
            checked += 1;
        }
    }

    #[test]
    fn tail_samples_outside_every_frame_have_zero_gradient() {
        let p = pipeline();
        // 1005 samples: frames cover [0, 1000), tail 1000..1005 unused.
        let w = random_waveform(1005, 4);
        let feats = p.compute(&w).unwrap();
        // Upstream selecting the sum of c0 over frames.
        let mut upstream = Array2::zeros(feats.data.raw_dim());
        upstream.column_mut(0).fill(1.0);
        let grad = p.backward(&w, &upstream).unwrap();
        for i in 1000..1005 {
            assert_eq!(grad[i], 0.0, "tail sample {i}");
        }
        // And some in-frame sample has nonzero gradient.
        assert!(grad[..1000].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn delta_of_linear_ramp_is_slope() {
        let feats = Array2::from_shape_fn((10, 3), |(t, _)| t as f64);
        let d = delta_filter(&feats, 2);
        for t in 2..8 {
            for j in 0..3 {
                assert!((d[[t, j]] - 1.0).abs() < 1e-12);
            }
        }
    }
}
